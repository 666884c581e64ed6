#pragma once

#include "test_util.hpp"

namespace gbt::testing {

/// A seconds-scale two-stage configuration on the synthetic series.
inline TrainConfig tiny_config() {
  TrainConfig c;
  c.data.synthetic.length = 600;
  c.data.synthetic.trend_per_step = 0.0005;
  c.data.synthetic.shift_scale = 1.0;
  c.model.input_len = 16;
  c.model.horizon = 4;
  c.model.d1 = 8;
  c.model.heads1 = 2;
  c.model.d2 = 8;
  c.model.heads2 = 2;
  c.model.layers = 1;
  c.train.lr = 1e-3;
  c.train.max_epochs = 2;
  c.train.max_batches_per_epoch = 6;
  c.train.seed = 7;
  return c;
}

}  // namespace gbt::testing
