#pragma once

#include "disent/tensor.hpp"
#include "disent/ops.hpp"
#include "disent/nn.hpp"
#include "disent/optim.hpp"
#include "disent/prob.hpp"
#include "disent/losses.hpp"
#include "disent/schedules.hpp"
#include "disent/image_io.hpp"
#include "disent/synth_data.hpp"
#include "disent/metrics.hpp"
#include "disent/checkpoint.hpp"
#include "disent/config.hpp"
#include "disent/train.hpp"
