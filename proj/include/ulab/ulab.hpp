#pragma once

// Umbrella header for the unlearn-lab library.

#include "ulab/autodiff.hpp"
#include "ulab/checkpoint.hpp"
#include "ulab/common.hpp"
#include "ulab/corpus.hpp"
#include "ulab/experiment.hpp"
#include "ulab/losses.hpp"
#include "ulab/metrics.hpp"
#include "ulab/model.hpp"
#include "ulab/stats.hpp"
#include "ulab/tensor.hpp"
#include "ulab/train.hpp"
#include "ulab/vocab.hpp"
