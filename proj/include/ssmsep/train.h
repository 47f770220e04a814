// Copyright 2026 The ssm-sep Authors
// License: Apache 2.0 (http://www.apache.org/licenses/LICENSE-2.0)

#ifndef SSMSEP_TRAIN_H_
#define SSMSEP_TRAIN_H_

#include <filesystem>
#include <functional>
#include <limits>
#include <string>
#include <vector>

#include "ssmsep/objective.h"
#include "ssmsep/separator.h"

namespace ssmsep {

// One training item. Every reference has the mixture's length.
struct Example {
  std::vector<double> mix;
  std::vector<std::vector<double>> refs;
};

struct TrainConfig {
  std::size_t epochs = 100;
  std::size_t batch = 1;         // items accumulated per optimizer step
  std::size_t crop_samples = 0;  // random training crops; 0 trains on full items
  AdamConfig adam;
  std::size_t halve_patience = 10;
  std::size_t stop_patience = 20;
  double time_limit_s = 0;  // checked after each epoch; 0 disables
  double target_sisnri = std::numeric_limits<double>::infinity();  // stop once validation reaches it
  bool shuffle = true;
  std::uint64_t seed = 0;
};

struct EpochMetrics {
  std::size_t epoch = 0;  // 1-based
  double train_loss = 0;
  double val_loss = 0;
  double val_sisnri = 0;  // dB, mean over items and sources
  double lr = 0;
};

struct TrainResult {
  std::vector<EpochMetrics> history;
  std::string stop_reason;  // "epochs", "plateau", "time" or "target"
};

using EpochCallback = std::function<void(const EpochMetrics&)>;

// Trains `model` in place with PIT negative-SNR loss and Adam. Validation
// runs on full items; an empty `val` validates on `train`. Throws
// ContractError on an empty or malformed dataset.
template <typename T>
TrainResult train_toy(Separator<T>& model, const std::vector<Example>& train, const std::vector<Example>& val,
                      const TrainConfig& config, const EpochCallback& on_epoch = {});

struct EvalResult {
  double loss = 0;
  double sisnri = 0;
};

// Mean PIT loss and SI-SNRi (under the loss-optimal pairing) over `items`.
template <typename T>
EvalResult evaluate(const Separator<T>& model, const std::vector<Example>& items);

// Two sources of band-limited noise in disjoint halves of the spectrum,
// each with a random sub-band, level and on/off envelope.
std::vector<Example> make_band_noise_dataset(std::size_t items, double seconds, int sample_rate,
                                             std::uint64_t seed);

void write_metrics_csv(const std::filesystem::path& path, const std::vector<EpochMetrics>& history);

}  // namespace ssmsep

#endif  // SSMSEP_TRAIN_H_
