#pragma once

#include "gbt/errors.hpp"
#include "gbt/tensor.hpp"
#include "gbt/ops.hpp"
#include "gbt/optim.hpp"
#include "gbt/nn.hpp"
#include "gbt/attention.hpp"
#include "gbt/data.hpp"
#include "gbt/stage1.hpp"
#include "gbt/stage2.hpp"
#include "gbt/config.hpp"
#include "gbt/checkpoint.hpp"
#include "gbt/metrics.hpp"
#include "gbt/trainer.hpp"
#include "gbt/diagnostics.hpp"
