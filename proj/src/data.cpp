#include "ssd/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <numbers>
#include <sstream>

#include "ssd/errors.hpp"

namespace ssd {

namespace fs = std::filesystem;

Tensor TimeSeriesDataset::batch(std::span<const std::int64_t> indices) const {
  const std::int64_t b = static_cast<std::int64_t>(indices.size());
  Tensor t = Tensor::zeros({b, channels, length});
  auto tv = t.data_mut();
  const std::int64_t stride = channels * length;
  for (std::int64_t i = 0; i < b; ++i) {
    if (indices[i] < 0 || indices[i] >= count)
      throw DimensionError("batch: sample index " + std::to_string(indices[i]) +
                           " outside dataset of " + std::to_string(count));
    std::copy_n(samples.data() + indices[i] * stride, stride,
                tv.data() + i * stride);
  }
  return t;
}

std::vector<int> TimeSeriesDataset::batch_labels(
    std::span<const std::int64_t> indices) const {
  std::vector<int> out;
  out.reserve(indices.size());
  for (auto i : indices) out.push_back(labels[static_cast<std::size_t>(i)]);
  return out;
}

TimeSeriesDataset TimeSeriesDataset::take(
    std::span<const std::int64_t> indices) const {
  TimeSeriesDataset out;
  out.count = static_cast<std::int64_t>(indices.size());
  out.channels = channels;
  out.length = length;
  out.class_count = class_count;
  out.channel_names = channel_names;
  const std::int64_t stride = channels * length;
  out.samples.resize(static_cast<std::size_t>(out.count * stride));
  out.labels.reserve(indices.size());
  for (std::int64_t i = 0; i < out.count; ++i) {
    std::copy_n(samples.data() + indices[i] * stride, stride,
                out.samples.data() + i * stride);
    out.labels.push_back(labels[static_cast<std::size_t>(indices[i])]);
  }
  return out;
}

namespace {

// Whitespace-delimited numeric matrix with a fixed column count.
std::vector<float> read_signal_file(const std::string& path,
                                    std::int64_t expect_cols,
                                    std::int64_t& rows_out) {
  std::ifstream in(path);
  if (!in) throw IngestionError("missing or unreadable file: " + path);
  std::vector<float> values;
  std::string line;
  std::int64_t rows = 0;
  while (std::getline(in, line)) {
    if (line.find_first_not_of(" \t\r\n") == std::string::npos) continue;
    std::istringstream ls(line);
    std::int64_t cols = 0;
    double v;
    while (ls >> v) {
      values.push_back(static_cast<float>(v));
      ++cols;
    }
    if (cols != expect_cols)
      throw IngestionError(path + ": row " + std::to_string(rows + 1) +
                           " has " + std::to_string(cols) + " columns, expected " +
                           std::to_string(expect_cols));
    ++rows;
  }
  rows_out = rows;
  return values;
}

std::vector<int> read_label_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IngestionError("missing or unreadable file: " + path);
  std::vector<int> labels;
  int v;
  while (in >> v) labels.push_back(v);
  return labels;
}

TimeSeriesDataset load_har_split(const fs::path& root, const std::string& split) {
  static const char* kChannels[9] = {
      "body_acc_x",  "body_acc_y",  "body_acc_z",
      "body_gyro_x", "body_gyro_y", "body_gyro_z",
      "total_acc_x", "total_acc_y", "total_acc_z"};
  constexpr std::int64_t kLen = 128;

  TimeSeriesDataset ds;
  ds.channels = 9;
  ds.length = kLen;
  ds.class_count = 6;

  std::vector<std::vector<float>> per_channel(9);
  std::int64_t rows = -1;
  for (int c = 0; c < 9; ++c) {
    fs::path p = root / split / "Inertial Signals" /
                 (std::string(kChannels[c]) + "_" + split + ".txt");
    std::int64_t r = 0;
    per_channel[static_cast<std::size_t>(c)] =
        read_signal_file(p.string(), kLen, r);
    if (rows < 0)
      rows = r;
    else if (r != rows)
      throw IngestionError(p.string() + ": has " + std::to_string(r) +
                           " rows, other channels have " + std::to_string(rows));
    ds.channel_names.emplace_back(kChannels[c]);
  }

  fs::path yp = root / split / ("y_" + split + ".txt");
  auto raw_labels = read_label_file(yp.string());
  if (static_cast<std::int64_t>(raw_labels.size()) != rows)
    throw IngestionError(yp.string() + ": " + std::to_string(raw_labels.size()) +
                         " labels for " + std::to_string(rows) + " rows");

  ds.count = rows;
  ds.samples.resize(static_cast<std::size_t>(rows * 9 * kLen));
  for (std::int64_t i = 0; i < rows; ++i)
    for (int c = 0; c < 9; ++c)
      std::copy_n(per_channel[static_cast<std::size_t>(c)].data() + i * kLen,
                  kLen, ds.samples.data() + (i * 9 + c) * kLen);

  ds.labels.reserve(raw_labels.size());
  for (int v : raw_labels) {
    if (v < 1 || v > 6)
      throw IngestionError(yp.string() + ": label " + std::to_string(v) +
                           " outside 1..6");
    ds.labels.push_back(v - 1);
  }
  return ds;
}

}  // namespace

UciHarData load_uci_har(const std::string& root) {
  UciHarData d;
  d.train = load_har_split(root, "train");
  d.test = load_har_split(root, "test");
  return d;
}

TimeSeriesDataset load_ucr_tsv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IngestionError("missing or unreadable file: " + path);

  std::vector<double> raw_labels;
  std::vector<float> values;
  std::int64_t length = -1, rows = 0;
  std::string line, token;
  while (std::getline(in, line)) {
    if (line.find_first_not_of(" \t\r\n") == std::string::npos) continue;
    std::istringstream ls(line);
    // strtod-based tokenizing so "nan"/"inf" markers are seen (istream
    // extraction rejects them silently)
    auto next_value = [&](double& out) {
      if (!(ls >> token)) return false;
      char* end = nullptr;
      out = std::strtod(token.c_str(), &end);
      if (end == token.c_str() || *end != '\0')
        throw IngestionError(path + ": row " + std::to_string(rows + 1) +
                             ": cannot parse '" + token + "'");
      return true;
    };
    double lab;
    if (!next_value(lab))
      throw IngestionError(path + ": row " + std::to_string(rows + 1) +
                           " has no label");
    std::int64_t cols = 0;
    double v;
    while (next_value(v)) {
      if (std::isnan(v))
        throw IngestionError(path + ": row " + std::to_string(rows + 1) +
                             " contains NaN");
      values.push_back(static_cast<float>(v));
      ++cols;
    }
    if (length < 0) length = cols;
    if (cols != length)
      throw IngestionError(path + ": row " + std::to_string(rows + 1) +
                           " has " + std::to_string(cols) +
                           " values, expected " + std::to_string(length));
    raw_labels.push_back(lab);
    ++rows;
  }
  if (rows == 0) throw IngestionError(path + ": no samples");

  // Remap labels to 0..K-1 in ascending original order.
  std::vector<double> uniq(raw_labels);
  std::sort(uniq.begin(), uniq.end());
  uniq.erase(std::unique(uniq.begin(), uniq.end()), uniq.end());
  std::map<double, int> remap;
  for (std::size_t i = 0; i < uniq.size(); ++i)
    remap[uniq[i]] = static_cast<int>(i);

  TimeSeriesDataset ds;
  ds.count = rows;
  ds.channels = 1;
  ds.length = length;
  ds.samples = std::move(values);
  ds.class_count = static_cast<int>(uniq.size());
  ds.channel_names = {"value"};
  ds.labels.reserve(raw_labels.size());
  for (double l : raw_labels) ds.labels.push_back(remap[l]);
  return ds;
}

TimeSeriesDataset synth_generate(const SynthSpec& spec, std::uint64_t seed) {
  if (spec.classes < 2) throw ConfigError("synth: need at least 2 classes");
  TimeSeriesDataset ds;
  ds.count = spec.samples;
  ds.channels = spec.channels;
  ds.length = spec.length;
  ds.class_count = spec.classes;
  for (std::int64_t c = 0; c < spec.channels; ++c)
    ds.channel_names.push_back("ch" + std::to_string(c));
  ds.samples.resize(
      static_cast<std::size_t>(spec.samples * spec.channels * spec.length));
  ds.labels.resize(static_cast<std::size_t>(spec.samples));

  RngStream rng(seed);
  const double two_pi = 2.0 * std::numbers::pi;
  for (std::int64_t s = 0; s < spec.samples; ++s) {
    int k = static_cast<int>(s % spec.classes);
    ds.labels[static_cast<std::size_t>(s)] = k;
    for (std::int64_t c = 0; c < spec.channels; ++c) {
      auto key = rng.key(static_cast<std::uint64_t>(s),
                         static_cast<std::uint64_t>(c));
      double phase = two_pi * key.uniform64(0);
      double freq = static_cast<double>(k + 1);
      float* row = ds.samples.data() + (s * spec.channels + c) * spec.length;
      for (std::int64_t t = 0; t < spec.length; ++t) {
        double clean = std::sin(two_pi * freq * static_cast<double>(t) /
                                    static_cast<double>(spec.length) +
                                phase);
        double noise = spec.sigma == 0.0
                           ? 0.0
                           : spec.sigma * key.normal(static_cast<std::uint64_t>(t) + 1);
        row[t] = static_cast<float>(clean + noise);
      }
    }
  }
  return ds;
}

ChannelStats compute_stats(const TimeSeriesDataset& ds) {
  ChannelStats st;
  st.mean.assign(static_cast<std::size_t>(ds.channels), 0.f);
  st.stddev.assign(static_cast<std::size_t>(ds.channels), 0.f);
  const std::int64_t per_channel = ds.count * ds.length;
  for (std::int64_t c = 0; c < ds.channels; ++c) {
    double acc = 0.0;
    for (std::int64_t s = 0; s < ds.count; ++s) {
      const float* row = ds.samples.data() + (s * ds.channels + c) * ds.length;
      for (std::int64_t t = 0; t < ds.length; ++t) acc += row[t];
    }
    double mean = acc / static_cast<double>(per_channel);
    double var = 0.0;
    for (std::int64_t s = 0; s < ds.count; ++s) {
      const float* row = ds.samples.data() + (s * ds.channels + c) * ds.length;
      for (std::int64_t t = 0; t < ds.length; ++t) {
        double d = row[t] - mean;
        var += d * d;
      }
    }
    var /= static_cast<double>(per_channel);
    st.mean[static_cast<std::size_t>(c)] = static_cast<float>(mean);
    st.stddev[static_cast<std::size_t>(c)] =
        static_cast<float>(std::max(std::sqrt(var), 1e-8));
  }
  return st;
}

TimeSeriesDataset standardize(const TimeSeriesDataset& ds,
                              const ChannelStats& stats) {
  if (static_cast<std::int64_t>(stats.mean.size()) != ds.channels)
    throw DimensionError("standardize: stats cover " +
                         std::to_string(stats.mean.size()) + " channels, dataset has " +
                         std::to_string(ds.channels));
  TimeSeriesDataset out = ds;
  for (std::int64_t s = 0; s < ds.count; ++s)
    for (std::int64_t c = 0; c < ds.channels; ++c) {
      float* row = out.samples.data() + (s * ds.channels + c) * ds.length;
      float m = stats.mean[static_cast<std::size_t>(c)];
      float sd = stats.stddev[static_cast<std::size_t>(c)];
      for (std::int64_t t = 0; t < ds.length; ++t) row[t] = (row[t] - m) / sd;
    }
  return out;
}

std::pair<std::vector<std::int64_t>, std::vector<std::int64_t>> split_indices(
    const TimeSeriesDataset& ds, const SplitSpec& spec) {
  if (spec.fraction < 0.0 || spec.fraction >= 1.0)
    throw ConfigError("split fraction must lie in [0, 1)");
  RngStream rng(spec.seed);
  std::vector<std::int64_t> rest, held;
  if (spec.stratified) {
    std::map<int, std::vector<std::int64_t>> by_class;
    for (std::int64_t i = 0; i < ds.count; ++i)
      by_class[ds.labels[static_cast<std::size_t>(i)]].push_back(i);
    for (auto& [cls, idx] : by_class) {
      seeded_shuffle(idx, rng.key(0x5B17, static_cast<std::uint64_t>(cls)));
      auto k = static_cast<std::size_t>(
          std::llround(spec.fraction * static_cast<double>(idx.size())));
      for (std::size_t i = 0; i < idx.size(); ++i)
        (i < k ? held : rest).push_back(idx[i]);
    }
  } else {
    std::vector<std::int64_t> idx(static_cast<std::size_t>(ds.count));
    for (std::int64_t i = 0; i < ds.count; ++i)
      idx[static_cast<std::size_t>(i)] = i;
    seeded_shuffle(idx, rng.key(0x5B17, 0));
    auto k = static_cast<std::size_t>(
        std::llround(spec.fraction * static_cast<double>(idx.size())));
    for (std::size_t i = 0; i < idx.size(); ++i)
      (i < k ? held : rest).push_back(idx[i]);
  }
  std::sort(rest.begin(), rest.end());
  std::sort(held.begin(), held.end());
  return {std::move(rest), std::move(held)};
}

}  // namespace ssd
