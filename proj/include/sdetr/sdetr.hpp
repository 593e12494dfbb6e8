// Umbrella header.
#pragma once

#include "sdetr/analysis.hpp"
#include "sdetr/backbone.hpp"
#include "sdetr/checkpoint.hpp"
#include "sdetr/config.hpp"
#include "sdetr/geometry.hpp"
#include "sdetr/hungarian.hpp"
#include "sdetr/image.hpp"
#include "sdetr/losses.hpp"
#include "sdetr/metrics.hpp"
#include "sdetr/nn.hpp"
#include "sdetr/ops.hpp"
#include "sdetr/optim.hpp"
#include "sdetr/rng.hpp"
#include "sdetr/synthetic_data.hpp"
#include "sdetr/tensor.hpp"
#include "sdetr/training.hpp"
#include "sdetr/transformer.hpp"
#include "sdetr/view_pipeline.hpp"
