#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "ssd/data.hpp"
#include "ssd/ssd.hpp"
#include "ssd/train.hpp"

namespace ssd {

// ---------------------------------------------------------------------------
// Minimal TOML subset: [sections], key = value with strings, numbers,
// booleans, and flat homogeneous arrays. Comments start with '#'. Errors
// carry file:line positions.
// ---------------------------------------------------------------------------

struct TomlValue {
  enum class Kind { String, Number, Boolean, Array };
  Kind kind = Kind::Number;
  std::string str;
  double num = 0.0;
  bool boolean = false;
  std::vector<TomlValue> array;
  int line = 0;

  std::string as_string() const;
  double as_number() const;
  std::int64_t as_int() const;
  bool as_bool() const;
  std::vector<double> as_number_array() const;
};

using TomlSection = std::map<std::string, TomlValue>;
using TomlTable = std::map<std::string, TomlSection>;

TomlTable parse_toml(const std::string& text, const std::string& filename);
TomlTable parse_toml_file(const std::string& path);

// ---------------------------------------------------------------------------
// Experiment configuration ([data] / [model] / [teacher] / [ssd] /
// [ablation] / [compare] / [output] sections; unknown keys are rejected)
// ---------------------------------------------------------------------------

struct DataConfig {
  std::string kind = "synthetic";  // uci_har | ucr_tsv | synthetic
  std::string path;                // HAR root or UCR train TSV path
  std::string test_path;           // UCR test TSV
  std::uint64_t split_seed = 0;
  double val_fraction = 0.1;
  bool standardize = true;
  // synthetic generator
  int classes = 4;
  std::int64_t channels = 1;
  std::int64_t length = 64;
  std::int64_t samples = 2000;
  double sigma = 0.5;
  std::uint64_t synth_seed = 7;
  double test_fraction = 0.2;  // synthetic/derived test split
};

struct ModelConfig {
  std::string kind = "har_cnn";  // har_cnn | mlp
  double dropout = 0.2;
  std::int64_t hidden = 128;      // mlp
  std::int64_t feature_dim = 64;  // mlp
};

struct TeacherConfig {
  OptimizerConfig opt;
  SchedulerConfig sched;
  int epochs = 100;
  int batch_size = 128;
  std::uint64_t seed = 0;
  EarlyStopConfig early_stop;
};

struct StudentConfig {
  SSDConfig ssd;
  int epochs = -1;  // defaults to teacher epochs
  std::uint64_t seed = 1;
  bool init_from_teacher = true;
};

struct AblationConfig {
  std::vector<double> p_teacher;
  std::vector<int> n;
  std::vector<double> epsilon;
  bool attention_reg = false;  // add the h=1 vs h=default axis
  bool teacher_init = false;   // add the random-init vs teacher-init axis
  int epochs = -1;             // shorter sweeps; defaults to student epochs
};

struct CompareConfig {
  int ensemble_members = 25;
  int soup_members = 25;
  int finetune_epochs = 10;
  double finetune_lr_scale = 0.1;
};

struct OutputConfig {
  std::string dir = "runs/out";
};

struct ExperimentConfig {
  DataConfig data;
  ModelConfig model;
  TeacherConfig teacher;
  StudentConfig student;
  AblationConfig ablation;
  CompareConfig compare;
  OutputConfig output;

  static ExperimentConfig from_toml(const TomlTable& table,
                                    const std::string& filename);
  static ExperimentConfig from_file(const std::string& path);

  // Round-trippable resolved copy of every field.
  std::string to_toml_string() const;

  void validate() const;
};

struct LoadedData {
  TimeSeriesDataset train;
  TimeSeriesDataset test;
};

// Materializes [data]: loads or generates, standardizes with train-split
// stats. SSD_DATA_DIR is the fallback root for relative dataset paths.
LoadedData load_experiment_data(const DataConfig& cfg);

// Builds [model] (fresh Kaiming init from the given seed).
Model build_experiment_model(const ModelConfig& cfg, const DataConfig& data,
                             std::uint64_t seed);

}  // namespace ssd
