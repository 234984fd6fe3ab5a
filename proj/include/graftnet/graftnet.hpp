#pragma once

#include "graftnet/backbone.hpp"
#include "graftnet/branch_trainer.hpp"
#include "graftnet/dataset.hpp"
#include "graftnet/emd.hpp"
#include "graftnet/error.hpp"
#include "graftnet/evaluator.hpp"
#include "graftnet/kernels.hpp"
#include "graftnet/kmeans.hpp"
#include "graftnet/miner.hpp"
#include "graftnet/optim.hpp"
#include "graftnet/pretrain.hpp"
#include "graftnet/registry.hpp"
#include "graftnet/synth.hpp"
#include "graftnet/tape.hpp"
#include "graftnet/tensor.hpp"
#include "graftnet/weights_io.hpp"
