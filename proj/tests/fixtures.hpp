#pragma once

#include "textcond/synth_data.hpp"
#include "textcond/train_config.hpp"

namespace testsupport {

/// Scaled-down desk configuration that trains in well under a second per epoch.
inline textcond::TrainConfig tiny_train_config() {
  auto c = textcond::TrainConfig::desk();
  c.net.input_size = 64;
  c.net.stage_channels = {8, 8, 8, 8};
  c.net.decoder_channels = {8, 8, 8};
  c.net.head_channels = 8;
  c.net.embed_dim = 16;
  c.batch_size = 4;
  c.epochs = 2;
  c.folds = 5;
  return c;
}

inline textcond::Dataset tiny_dataset(int n_cases = 10, std::uint64_t seed = 7) {
  textcond::DatasetOptions o;
  o.seed = seed;
  o.n_cases = n_cases;
  o.n_slices = 1;
  o.image_size = 64;
  return textcond::build_dataset(o);
}

}  // namespace testsupport
