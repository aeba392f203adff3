#pragma once

// Umbrella header for the whole library.

#include "cksp/archive.hpp"
#include "cksp/batching.hpp"
#include "cksp/checkpoint.hpp"
#include "cksp/diagnostics.hpp"
#include "cksp/experiment.hpp"
#include "cksp/folds.hpp"
#include "cksp/grad_check.hpp"
#include "cksp/gradcheck_suite.hpp"
#include "cksp/ingest.hpp"
#include "cksp/loss.hpp"
#include "cksp/metrics.hpp"
#include "cksp/model.hpp"
#include "cksp/ops.hpp"
#include "cksp/optim.hpp"
#include "cksp/preprocessing.hpp"
#include "cksp/synthetic.hpp"
#include "cksp/tape.hpp"
#include "cksp/tensor.hpp"
#include "cksp/train.hpp"
