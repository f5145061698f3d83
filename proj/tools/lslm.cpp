// SPDX-License-Identifier: Apache-2.0
//
// lslm: corpus synthesis, stage training, evaluation, translation,
// codebook-size study and gradient checking.
//
// Exit codes: 0 ok, 1 other failure, 2 config error, 3 stage ordering, 4 numeric.
#include <CLI11.hpp>

#include <cstdlib>
#include <iomanip>
#include <iostream>

#include "lslm/lslm.hpp"

using namespace lslm;
namespace fs = std::filesystem;

namespace {

void note(const std::string& s) { std::cerr << "[lslm] " << s << "\n"; }

/// The library is single-threaded; LSLM_THREADS is validated so typos fail loudly.
void check_threads() {
  const char* v = std::getenv("LSLM_THREADS");
  if (!v || !*v) return;
  char* end = nullptr;
  const long n = std::strtol(v, &end, 10);
  if (*end != '\0' || n < 1) throw ConfigError("LSLM_THREADS must be a positive integer, got '" + std::string(v) + "'");
}

config::RunConfig load_config(const std::string& path, const std::string& run_dir) {
  auto c = config::load_run_config(path);
  if (!run_dir.empty()) c.run_dir = run_dir;
  return c;
}

std::vector<int> parse_sizes(const std::string& s) {
  std::vector<int> out;
  std::stringstream in(s);
  std::string item;
  while (std::getline(in, item, ',')) {
    try {
      std::size_t used = 0;
      const int k = std::stoi(item, &used);
      if (used != item.size() || k < 2) throw std::invalid_argument(item);
      out.push_back(k);
    } catch (const std::exception&) {
      throw ConfigError("--sizes: '" + item + "' is not a codebook size >= 2");
    }
  }
  if (out.empty()) throw ConfigError("--sizes: empty list");
  return out;
}

int parse_template(const std::string& t, const templates::TemplateBank& bank) {
  if (t == "pretrain") return templates::TemplateBank::kPretrain;
  try {
    std::size_t used = 0;
    const int id = std::stoi(t, &used);
    if (used == t.size()) {
      bank.at(id);
      return id;
    }
  } catch (const std::invalid_argument&) {
  }
  throw ConfigError("--template: expected 'pretrain' or a template id, got '" + t + "'");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"lslm: gesture tokenizer, alignment and language backbone"};
  app.require_subcommand(1);

  // synth-data
  auto* synth = app.add_subcommand("synth-data", "write a procedural gesture corpus");
  motion::SynthConfig sc;
  std::string synth_out;
  bool force = false;
  synth->add_option("--seed", sc.seed, "corpus seed")->capture_default_str();
  synth->add_option("--samples", sc.samples, "number of clips")->capture_default_str();
  synth->add_option("--gesture-vocab", sc.gesture_vocab, "distinct gesture words")->capture_default_str();
  synth->add_option("--out", synth_out, "output directory")->required();
  synth->add_flag("--force", force, "overwrite a non-empty output directory");

  // stages
  std::string cfg_path, run_dir, scheme, tune;
  auto* stage1 = app.add_subcommand("train-tokenizer", "stage 1: train the VQ tokenizer");
  auto* pre = app.add_subcommand("pretrain", "stage 2: gesture-caption pretraining");
  auto* ins = app.add_subcommand("instruct", "stage 3: instruction tuning");
  for (auto* s : {stage1, pre, ins}) {
    s->add_option("--config", cfg_path, "run config JSON")->required();
    s->add_option("--run-dir", run_dir, "override the config's run_dir");
  }
  pre->add_option("--scheme", scheme, "mlp | joint | staged (default: config)");
  ins->add_option("--tune", tune, "llm | joint (default: config)");

  // codebook-study
  auto* study = app.add_subcommand("codebook-study", "train one tokenizer per codebook size");
  std::string sizes = "64,256,1024", study_out;
  bool no_train = false;
  study->add_option("--config", cfg_path, "run config JSON")->required();
  study->add_option("--sizes", sizes, "comma-separated codebook sizes")->capture_default_str();
  study->add_option("--out", study_out, "output directory (default: <run_dir>/codebook_study)");
  study->add_flag("--no-train", no_train, "re-render the table from saved checkpoints");

  // translate / evaluate
  std::string ckpt_dir, motion_file, instruction, split = "test", template_name, corpus_override, report_out;
  int max_new = 40;
  auto* tr = app.add_subcommand("translate", "translate one motion file");
  tr->add_option("--checkpoint", ckpt_dir, "pretrain or instruct checkpoint directory")->required();
  tr->add_option("--motion", motion_file, "motion .bin file (with .json sidecar)")->required();
  tr->add_option("--instruction", instruction, "instruction text containing <Motion_Placeholder>");
  tr->add_option("--max-new", max_new, "generation budget")->capture_default_str();
  auto* ev = app.add_subcommand("evaluate", "score a checkpoint on a manifest split");
  ev->add_option("--checkpoint", ckpt_dir, "checkpoint directory")->required();
  ev->add_option("--split", split, "train | val | test")->capture_default_str();
  ev->add_option("--template", template_name, "'pretrain' or a template id (default by stage)");
  ev->add_option("--corpus", corpus_override, "manifest (default: the checkpoint's config)");
  ev->add_option("--out", report_out, "report path (default: <checkpoint>/../eval_<split>.json)");
  ev->add_option("--max-new", max_new, "generation budget")->capture_default_str();

  // gradcheck
  auto* gc = app.add_subcommand("gradcheck", "finite-difference check of every differentiable op (64-bit)");
  std::string corrupt;
  gc->add_option("--corrupt", corrupt, "negative control: perturb this op's backward rule");

  CLI11_PARSE(app, argc, argv);

  try {
    check_threads();
    if (synth->parsed()) {
      const auto es = data::write_synth_corpus(sc, synth_out, force);
      std::size_t n[3] = {0, 0, 0};
      for (const auto& e : es) ++n[static_cast<int>(e.split)];
      std::cout << "wrote " << es.size() << " clips to " << synth_out << " (train " << n[0] << ", val " << n[1]
                << ", test " << n[2] << ")\n";
    } else if (stage1->parsed()) {
      const auto c = load_config(cfg_path, run_dir);
      const auto ck = schemes::run_stage1(c, note);
      std::cout << "tokenizer checkpoint: " << (fs::path(c.run_dir) / "tokenizer").string() << " (loss "
                << ck.extra["initial_loss"].get<double>() << " -> " << ck.extra["final_loss"].get<double>() << ")\n";
    } else if (pre->parsed()) {
      auto c = load_config(cfg_path, run_dir);
      if (!scheme.empty()) c.scheme.pretrain = config::parse_pretrain(scheme);
      schemes::run_pretrain(c, note);
      std::cout << "pretrain checkpoint: " << (fs::path(c.run_dir) / "pretrain").string() << "\n";
    } else if (ins->parsed()) {
      auto c = load_config(cfg_path, run_dir);
      if (!tune.empty()) c.scheme.instruct = config::parse_instruct(tune);
      schemes::run_instruct(c, note);
      std::cout << "instruct checkpoint: " << (fs::path(c.run_dir) / "instruct").string() << "\n";
    } else if (study->parsed()) {
      const auto c = load_config(cfg_path, "");
      const fs::path out = study_out.empty() ? fs::path(c.run_dir) / "codebook_study" : fs::path(study_out);
      const auto rows = schemes::codebook_study(c, parse_sizes(sizes), out, !no_train, note);
      std::cout << std::left << std::setw(8) << "K" << std::setw(14) << "FID" << std::setw(14) << "MPJPE"
                << std::setw(14) << "PAMPJPE" << "perplexity\n";
      for (const auto& r : rows)
        std::cout << std::setw(8) << r.report.codebook_size << std::setw(14) << r.report.fid << std::setw(14)
                  << r.report.mpjpe << std::setw(14) << r.report.pampjpe << r.report.perplexity << "\n";
      std::cout << "table: " << (out / "codebook_study.csv").string() << "\n";
    } else if (tr->parsed()) {
      const auto ck = ckpt::load(ckpt_dir);
      const auto m = schemes::model_from_checkpoint(ck);
      const auto bank = templates::TemplateBank::standard();
      std::string prompt;
      if (instruction.empty()) {
        prompt = schemes::prompt_for(bank, ck.stage == "instruct" ? bank.training_ids().front()
                                                                  : templates::TemplateBank::kPretrain);
      } else {
        std::string text = instruction;
        if (text.find(templates::kMotionPlaceholder) == std::string::npos) {
          note(std::string("warning: instruction has no ") + templates::kMotionPlaceholder + "; appending it");
          text += std::string(" ") + templates::kMotionPlaceholder;
        }
        if (templates::count_of(text, templates::kMotionPlaceholder) != 1)
          throw ConfigError(std::string("--instruction must contain exactly one ") + templates::kMotionPlaceholder);
        prompt = templates::replace_all(text, templates::kMotionPlaceholder, data::kMotionToken);
      }
      const auto seq = schemes::load_normalized(motion_file, m.stats);
      const auto p = schemes::pair_from(m, fs::path(motion_file).stem().string(), "", data::Split::none, seq);
      std::cout << schemes::translate(m, p.quantized, prompt, max_new) << "\n";
    } else if (ev->parsed()) {
      const auto ck = ckpt::load(ckpt_dir);
      const auto m = schemes::model_from_checkpoint(ck);
      const auto bank = templates::TemplateBank::standard();
      const std::string corpus = corpus_override.empty() ? ck.config.value("corpus", std::string{}) : corpus_override;
      if (corpus.empty()) throw ConfigError("evaluate: no corpus recorded in the checkpoint; pass --corpus");
      const auto man = data::read_manifest(corpus);
      const int tid = !template_name.empty() ? parse_template(template_name, bank)
                      : ck.stage == "instruct" ? bank.training_ids().front()
                                               : templates::TemplateBank::kPretrain;
      const auto pairs = schemes::in_split(schemes::load_pairs(m, man), data::parse_split(split));
      if (pairs.empty()) throw ConfigError("evaluate: split '" + split + "' is empty");
      const auto r = schemes::evaluate_pairs(m, pairs, tid, max_new, bank);
      auto j = r.to_json();
      nlohmann::ordered_json out;
      out["checkpoint"] = fs::path(ckpt_dir).string();
      out["stage"] = ck.stage;
      out["split"] = split;
      out["template"] = schemes::template_label(tid);
      for (auto it = j.begin(); it != j.end(); ++it) out[it.key()] = it.value();
      out["config"] = ck.config;
      const fs::path path = report_out.empty() ? fs::path(ckpt_dir).parent_path() / ("eval_" + split + ".json") : fs::path(report_out);
      io::write_file(path, out.dump(2) + "\n");
      std::cout << std::fixed << std::setprecision(4) << "bleu1 " << r.bleu1 << "  bleu4 " << r.bleu4 << "  rougeL "
                << r.rougeL << "  cider " << r.cider << "  wer " << r.wer << "%  (ins " << r.ins << ", del " << r.del
                << ", sub " << r.sub << " per sample)\nreport: " << path.string() << "\n";
    } else if (gc->parsed()) {
      GradcheckOptions opt;
      opt.corrupt_op = corrupt;
      if (!corrupt.empty()) {
        const auto ops = gradcheck_ops();
        if (std::find(ops.begin(), ops.end(), corrupt) == ops.end()) throw ConfigError("--corrupt: unknown op '" + corrupt + "'");
      }
      bool ok = true;
      std::cout << std::left << std::setw(22) << "op" << std::setw(8) << "cases" << std::setw(16) << "max_rel_error"
                << "status\n";
      for (const auto& r : run_gradcheck(opt)) {
        ok = ok && r.passed;
        std::cout << std::setw(22) << r.op << std::setw(8) << r.cases << std::setw(16) << std::scientific
                  << std::setprecision(3) << r.max_rel_error << std::defaultfloat << (r.passed ? "ok" : "FAIL") << "\n";
      }
      if (!ok) {
        std::cerr << "gradcheck failed\n";
        return 1;
      }
    }
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const StageOrderError& e) {
    std::cerr << "stage error: " << e.what() << "\n";
    return 3;
  } catch (const NumericError& e) {
    std::cerr << "numeric error: " << e.what() << "\n";
    return 4;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
