#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "ssd/rng.hpp"
#include "ssd/tensor.hpp"

namespace ssd {

// Per-channel standardization statistics, always derived from a training
// split and reused verbatim elsewhere.
struct ChannelStats {
  std::vector<float> mean;
  std::vector<float> stddev;  // floored at 1e-8
};

// In-memory time-series classification dataset, samples stored [m][C][L].
struct TimeSeriesDataset {
  std::int64_t count = 0;
  std::int64_t channels = 0;
  std::int64_t length = 0;
  std::vector<float> samples;
  std::vector<int> labels;
  int class_count = 0;
  std::vector<std::string> channel_names;

  std::span<const float> sample(std::int64_t i) const {
    return {samples.data() + i * channels * length,
            static_cast<std::size_t>(channels * length)};
  }

  // Materializes rows `indices` as a [B x C x L] batch tensor.
  Tensor batch(std::span<const std::int64_t> indices) const;
  std::vector<int> batch_labels(std::span<const std::int64_t> indices) const;

  TimeSeriesDataset take(std::span<const std::int64_t> indices) const;
};

struct UciHarData {
  TimeSeriesDataset train;
  TimeSeriesDataset test;
};

// Loads the UCI HAR raw inertial signals: 9 whitespace-delimited files of
// 128 columns under {train,test}/Inertial Signals plus y_{train,test}.txt.
// Labels are remapped from 1-based to 0-based; 6 classes.
UciHarData load_uci_har(const std::string& root);

// UCR-style TSV: label<TAB>v_1<TAB>...<TAB>v_L per row, uniform length.
// Labels are remapped to contiguous 0-based indices in ascending original
// order. NaN values and ragged rows raise IngestionError.
TimeSeriesDataset load_ucr_tsv(const std::string& path);

struct SynthSpec {
  int classes = 4;
  std::int64_t channels = 1;
  std::int64_t length = 64;
  std::int64_t samples = 2000;
  double sigma = 0.5;
};

// Seeded synthetic corpus: class k is a sinusoid at a class-specific
// frequency with a per-(sample, channel) random phase plus N(0, sigma^2)
// noise. Fully determined by (spec, seed).
TimeSeriesDataset synth_generate(const SynthSpec& spec, std::uint64_t seed);

ChannelStats compute_stats(const TimeSeriesDataset& ds);

// Per-channel (x - mean) / stddev using stats from the given source split.
TimeSeriesDataset standardize(const TimeSeriesDataset& ds,
                              const ChannelStats& stats);

struct SplitSpec {
  double fraction = 0.1;  // size of the second piece
  std::uint64_t seed = 0;
  bool stratified = true;
};

// Splits into (rest, held-out) index lists. Stratified splits preserve class
// proportions within one sample per class.
std::pair<std::vector<std::int64_t>, std::vector<std::int64_t>>
split_indices(const TimeSeriesDataset& ds, const SplitSpec& spec);

}  // namespace ssd
