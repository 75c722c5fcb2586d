#pragma once

// Umbrella header for the CCSI library: data-free class-incremental learning
// with continual-normalization-guided class-impression synthesis.

#include "ccsi/backbone.hpp"
#include "ccsi/classifier.hpp"
#include "ccsi/common.hpp"
#include "ccsi/config.hpp"
#include "ccsi/continual_norm.hpp"
#include "ccsi/conv.hpp"
#include "ccsi/dataset.hpp"
#include "ccsi/image_io.hpp"
#include "ccsi/losses.hpp"
#include "ccsi/report.hpp"
#include "ccsi/serialize.hpp"
#include "ccsi/synthcells.hpp"
#include "ccsi/synthesis.hpp"
#include "ccsi/tensor.hpp"
#include "ccsi/trainer.hpp"
