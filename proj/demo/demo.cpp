// SPDX-License-Identifier: Apache-2.0
//
// Minimal end-to-end run on a small synthetic corpus: tokenizer, joint
// pretraining, LLM instruction tuning, then one translation.
#include <iostream>

#include "lslm/lslm.hpp"

using namespace lslm;
namespace fs = std::filesystem;

int main(int argc, char** argv) {
  const fs::path root = argc > 1 ? fs::path(argv[1]) : fs::temp_directory_path() / "lslm_demo";
  motion::SynthConfig sc;
  sc.seed = 3;
  sc.samples = 24;
  sc.gesture_vocab = 4;
  data::write_synth_corpus(sc, root / "corpus", true);

  config::RunConfig cfg;
  cfg.corpus = (root / "corpus" / "manifest.jsonl").string();
  cfg.run_dir = (root / "run").string();
  cfg.tokenizer.steps = 200;
  cfg.lm.d_model = 64;
  cfg.lm.n_layers = 2;
  cfg.lm.n_heads = 4;
  cfg.scheme.pretrain_steps = 200;
  cfg.scheme.instruct_steps = 200;
  cfg.scheme.lr_mlp = 2e-3;
  cfg.scheme.lr_llm = 1e-3;
  cfg.eval.max_new = 12;

  auto log = [](const std::string& s) { std::cerr << s << "\n"; };
  schemes::run_stage1(cfg, log);
  schemes::run_pretrain(cfg, log);
  schemes::run_instruct(cfg, log);

  const auto m = schemes::load_model(root / "run" / "instruct");
  const auto bank = templates::TemplateBank::standard();
  const auto pairs = schemes::load_pairs(m, data::read_manifest(cfg.corpus));
  const auto& p = pairs.front();
  const auto prompt = schemes::prompt_for(bank, bank.holdout_ids().front());
  std::cout << "prompt:    " << prompt << "\n"
            << "reference: " << p.caption << "\n"
            << "output:    " << schemes::translate(m, p.quantized, prompt, 12) << "\n";
}
