// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "lslm/alignment.hpp"
#include "lslm/checkpoint.hpp"
#include "lslm/config.hpp"
#include "lslm/dataset.hpp"
#include "lslm/errors.hpp"
#include "lslm/gradcheck.hpp"
#include "lslm/io.hpp"
#include "lslm/lm.hpp"
#include "lslm/metrics.hpp"
#include "lslm/motion.hpp"
#include "lslm/ops.hpp"
#include "lslm/optim.hpp"
#include "lslm/rng.hpp"
#include "lslm/schemes.hpp"
#include "lslm/templates.hpp"
#include "lslm/tensor.hpp"
#include "lslm/vq.hpp"
