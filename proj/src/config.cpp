#include "ssd/config.hpp"

#include <cctype>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

namespace ssd {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// TOML subset parser
// ---------------------------------------------------------------------------

std::string TomlValue::as_string() const {
  if (kind != Kind::String)
    throw ConfigError("line " + std::to_string(line) + ": expected a string");
  return str;
}

double TomlValue::as_number() const {
  if (kind != Kind::Number)
    throw ConfigError("line " + std::to_string(line) + ": expected a number");
  return num;
}

std::int64_t TomlValue::as_int() const {
  double v = as_number();
  if (v != std::floor(v))
    throw ConfigError("line " + std::to_string(line) + ": expected an integer");
  return static_cast<std::int64_t>(v);
}

bool TomlValue::as_bool() const {
  if (kind != Kind::Boolean)
    throw ConfigError("line " + std::to_string(line) + ": expected a boolean");
  return boolean;
}

std::vector<double> TomlValue::as_number_array() const {
  if (kind != Kind::Array)
    throw ConfigError("line " + std::to_string(line) + ": expected an array");
  std::vector<double> out;
  for (auto& v : array) out.push_back(v.as_number());
  return out;
}

namespace {

std::string strip(const std::string& s) {
  auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

// Removes a trailing comment that is not inside a string literal.
std::string strip_comment(const std::string& s) {
  bool in_str = false;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (s[i] == '"') in_str = !in_str;
    if (s[i] == '#' && !in_str) return s.substr(0, i);
  }
  return s;
}

TomlValue parse_scalar(const std::string& raw, int line,
                       const std::string& where) {
  TomlValue v;
  v.line = line;
  std::string s = strip(raw);
  if (s.empty()) throw ConfigError(where + ": empty value");
  if (s.front() == '"') {
    if (s.size() < 2 || s.back() != '"')
      throw ConfigError(where + ": unterminated string");
    v.kind = TomlValue::Kind::String;
    v.str = s.substr(1, s.size() - 2);
    return v;
  }
  if (s == "true" || s == "false") {
    v.kind = TomlValue::Kind::Boolean;
    v.boolean = s == "true";
    return v;
  }
  char* end = nullptr;
  double num = std::strtod(s.c_str(), &end);
  if (end == s.c_str() || *end != '\0')
    throw ConfigError(where + ": cannot parse value '" + s + "'");
  v.kind = TomlValue::Kind::Number;
  v.num = num;
  return v;
}

TomlValue parse_value(const std::string& raw, int line,
                      const std::string& where) {
  std::string s = strip(raw);
  if (!s.empty() && s.front() == '[') {
    if (s.back() != ']') throw ConfigError(where + ": unterminated array");
    TomlValue v;
    v.kind = TomlValue::Kind::Array;
    v.line = line;
    std::string body = s.substr(1, s.size() - 2);
    std::string item;
    bool in_str = false;
    for (char c : body) {
      if (c == '"') in_str = !in_str;
      if (c == ',' && !in_str) {
        if (!strip(item).empty())
          v.array.push_back(parse_scalar(item, line, where));
        item.clear();
      } else {
        item.push_back(c);
      }
    }
    if (!strip(item).empty()) v.array.push_back(parse_scalar(item, line, where));
    return v;
  }
  return parse_scalar(raw, line, where);
}

}  // namespace

TomlTable parse_toml(const std::string& text, const std::string& filename) {
  TomlTable table;
  std::string section;
  std::istringstream in(text);
  std::string raw;
  int line_no = 0;
  while (std::getline(in, raw)) {
    ++line_no;
    std::string where = filename + ":" + std::to_string(line_no);
    std::string line = strip(strip_comment(raw));
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']')
        throw ConfigError(where + ": malformed section header '" + line + "'");
      section = strip(line.substr(1, line.size() - 2));
      if (section.empty()) throw ConfigError(where + ": empty section name");
      table[section];  // sections may be empty
      continue;
    }
    auto eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError(where + ": expected 'key = value', got '" + line + "'");
    std::string key = strip(line.substr(0, eq));
    if (key.empty()) throw ConfigError(where + ": empty key");
    if (section.empty())
      throw ConfigError(where + ": key '" + key + "' outside any [section]");
    if (table[section].count(key))
      throw ConfigError(where + ": duplicate key '" + key + "'");
    table[section].emplace(key,
                           parse_value(line.substr(eq + 1), line_no, where));
  }
  return table;
}

TomlTable parse_toml_file(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("cannot open config file " + path);
  std::string text((std::istreambuf_iterator<char>(f)),
                   std::istreambuf_iterator<char>());
  return parse_toml(text, path);
}

// ---------------------------------------------------------------------------
// ExperimentConfig
// ---------------------------------------------------------------------------

namespace {

// Tracks which keys a section consumed so leftovers can be rejected.
class SectionReader {
 public:
  SectionReader(const TomlTable& table, const std::string& name,
                const std::string& filename)
      : name_(name), filename_(filename) {
    auto it = table.find(name);
    if (it != table.end()) section_ = &it->second;
  }

  const TomlValue* get(const std::string& key) {
    used_.insert(key);
    if (!section_) return nullptr;
    auto it = section_->find(key);
    return it == section_->end() ? nullptr : &it->second;
  }

  void num(const std::string& key, double& out) {
    if (auto* v = get(key)) out = v->as_number();
  }
  void integer(const std::string& key, int& out) {
    if (auto* v = get(key)) out = static_cast<int>(v->as_int());
  }
  void integer64(const std::string& key, std::int64_t& out) {
    if (auto* v = get(key)) out = v->as_int();
  }
  void uinteger(const std::string& key, std::uint64_t& out) {
    if (auto* v = get(key)) out = static_cast<std::uint64_t>(v->as_int());
  }
  void str(const std::string& key, std::string& out) {
    if (auto* v = get(key)) out = v->as_string();
  }
  void boolean(const std::string& key, bool& out) {
    if (auto* v = get(key)) out = v->as_bool();
  }

  void finish() const {
    if (!section_) return;
    for (auto& [key, value] : *section_)
      if (!used_.count(key))
        throw ConfigError(filename_ + ":" + std::to_string(value.line) +
                          ": unknown key '" + key + "' in [" + name_ + "]");
  }

 private:
  std::string name_;
  std::string filename_;
  const TomlSection* section_ = nullptr;
  std::set<std::string> used_;
};

OptKind parse_opt_kind(const std::string& s) {
  if (s == "adam") return OptKind::Adam;
  if (s == "sgd") return OptKind::Sgd;
  throw ConfigError("optimizer must be 'adam' or 'sgd', got '" + s + "'");
}

SchedKind parse_sched_kind(const std::string& s) {
  if (s == "plateau") return SchedKind::ReduceOnPlateau;
  if (s == "cosine") return SchedKind::Cosine;
  if (s == "none") return SchedKind::None;
  throw ConfigError("scheduler must be 'plateau', 'cosine', or 'none', got '" +
                    s + "'");
}

MonitorMetric parse_monitor(const std::string& s) {
  if (s == "train_loss") return MonitorMetric::TrainLoss;
  if (s == "val_loss") return MonitorMetric::ValLoss;
  if (s == "val_accuracy") return MonitorMetric::ValAccuracy;
  throw ConfigError("monitor must be 'train_loss', 'val_loss', or "
                    "'val_accuracy', got '" + s + "'");
}

SelectionScheme parse_selection(const std::string& s) {
  if (s == "dynamic") return SelectionScheme::Dynamic;
  if (s == "top-k") return SelectionScheme::TopK;
  if (s == "distill-all") return SelectionScheme::DistillAll;
  throw ConfigError("selection must be 'dynamic', 'top-k', or 'distill-all', "
                    "got '" + s + "'");
}

}  // namespace

ExperimentConfig ExperimentConfig::from_toml(const TomlTable& table,
                                             const std::string& filename) {
  static const std::set<std::string> kKnownSections = {
      "data", "model", "teacher", "ssd", "ablation", "compare", "output"};
  for (auto& [name, section] : table)
    if (!kKnownSections.count(name))
      throw ConfigError(filename + ": unknown section [" + name + "]");

  ExperimentConfig cfg;

  {
    SectionReader r(table, "data", filename);
    r.str("kind", cfg.data.kind);
    r.str("path", cfg.data.path);
    r.str("test_path", cfg.data.test_path);
    r.uinteger("split_seed", cfg.data.split_seed);
    r.num("val_fraction", cfg.data.val_fraction);
    r.boolean("standardize", cfg.data.standardize);
    r.integer("classes", cfg.data.classes);
    r.integer64("channels", cfg.data.channels);
    r.integer64("length", cfg.data.length);
    r.integer64("samples", cfg.data.samples);
    r.num("sigma", cfg.data.sigma);
    r.uinteger("synth_seed", cfg.data.synth_seed);
    r.num("test_fraction", cfg.data.test_fraction);
    r.finish();
  }
  {
    SectionReader r(table, "model", filename);
    r.str("kind", cfg.model.kind);
    r.num("dropout", cfg.model.dropout);
    r.integer64("hidden", cfg.model.hidden);
    r.integer64("feature_dim", cfg.model.feature_dim);
    r.finish();
  }
  {
    SectionReader r(table, "teacher", filename);
    std::string opt = "adam", sched = "plateau", monitor = "train_loss";
    r.str("optimizer", opt);
    cfg.teacher.opt.kind = parse_opt_kind(opt);
    r.num("lr", cfg.teacher.opt.lr);
    r.num("momentum", cfg.teacher.opt.momentum);
    r.num("weight_decay", cfg.teacher.opt.weight_decay);
    r.str("scheduler", sched);
    cfg.teacher.sched.kind = parse_sched_kind(sched);
    r.str("monitor", monitor);
    cfg.teacher.sched.monitor = parse_monitor(monitor);
    r.integer("patience", cfg.teacher.sched.patience);
    r.num("factor", cfg.teacher.sched.factor);
    r.integer("t_max", cfg.teacher.sched.t_max);
    r.integer("epochs", cfg.teacher.epochs);
    r.integer("batch_size", cfg.teacher.batch_size);
    r.uinteger("seed", cfg.teacher.seed);
    r.boolean("early_stop", cfg.teacher.early_stop.enabled);
    r.integer("early_stop_patience", cfg.teacher.early_stop.patience);
    r.finish();
  }
  {
    SectionReader r(table, "ssd", filename);
    r.integer("n", cfg.student.ssd.n);
    r.num("p_teacher", cfg.student.ssd.p_teacher);
    r.num("p_student", cfg.student.ssd.p_student);
    r.num("h", cfg.student.ssd.h);
    r.num("epsilon", cfg.student.ssd.epsilon);
    r.num("lambda", cfg.student.ssd.lambda);
    r.boolean("renormalize", cfg.student.ssd.renormalize_after_mask);
    r.boolean("detach_attention", cfg.student.ssd.detach_attention);
    std::string sel = to_string(cfg.student.ssd.selection);
    r.str("selection", sel);
    cfg.student.ssd.selection = parse_selection(sel);
    r.integer("top_k", cfg.student.ssd.top_k);
    r.num("logit_kl", cfg.student.ssd.logit_kl);
    r.integer("epochs", cfg.student.epochs);
    r.uinteger("seed", cfg.student.seed);
    r.boolean("init_from_teacher", cfg.student.init_from_teacher);
    r.finish();
  }
  {
    SectionReader r(table, "ablation", filename);
    if (auto* v = r.get("p_teacher")) cfg.ablation.p_teacher = v->as_number_array();
    if (auto* v = r.get("n")) {
      for (double x : v->as_number_array())
        cfg.ablation.n.push_back(static_cast<int>(x));
    }
    if (auto* v = r.get("epsilon")) cfg.ablation.epsilon = v->as_number_array();
    r.boolean("attention_reg", cfg.ablation.attention_reg);
    r.boolean("teacher_init", cfg.ablation.teacher_init);
    r.integer("epochs", cfg.ablation.epochs);
    r.finish();
  }
  {
    SectionReader r(table, "compare", filename);
    r.integer("ensemble_members", cfg.compare.ensemble_members);
    r.integer("soup_members", cfg.compare.soup_members);
    r.integer("finetune_epochs", cfg.compare.finetune_epochs);
    r.num("finetune_lr_scale", cfg.compare.finetune_lr_scale);
    r.finish();
  }
  {
    SectionReader r(table, "output", filename);
    r.str("dir", cfg.output.dir);
    r.finish();
  }

  cfg.validate();
  return cfg;
}

ExperimentConfig ExperimentConfig::from_file(const std::string& path) {
  return from_toml(parse_toml_file(path), path);
}

void ExperimentConfig::validate() const {
  if (data.kind != "uci_har" && data.kind != "ucr_tsv" && data.kind != "synthetic")
    throw ConfigError("data.kind must be 'uci_har', 'ucr_tsv', or 'synthetic', "
                      "got '" + data.kind + "'");
  if (model.kind != "har_cnn" && model.kind != "mlp")
    throw ConfigError("model.kind must be 'har_cnn' or 'mlp', got '" +
                      model.kind + "'");
  if (model.dropout < 0.0 || model.dropout >= 1.0)
    throw ConfigError("model.dropout must lie in [0, 1)");
  if (teacher.epochs < 0) throw ConfigError("teacher.epochs must be >= 0");
  if (teacher.batch_size < 1) throw ConfigError("teacher.batch_size must be >= 1");
  teacher.opt.validate();
  teacher.sched.validate();
  student.ssd.validate();
  if (compare.ensemble_members < 1 || compare.soup_members < 1)
    throw ConfigError("compare member counts must be >= 1");
  if (data.val_fraction < 0.0 || data.val_fraction >= 1.0)
    throw ConfigError("data.val_fraction must lie in [0, 1)");
}

std::string ExperimentConfig::to_toml_string() const {
  std::ostringstream os;
  os.precision(17);
  os << "[data]\n";
  os << "kind = \"" << data.kind << "\"\n";
  os << "path = \"" << data.path << "\"\n";
  os << "test_path = \"" << data.test_path << "\"\n";
  os << "split_seed = " << data.split_seed << "\n";
  os << "val_fraction = " << data.val_fraction << "\n";
  os << "standardize = " << (data.standardize ? "true" : "false") << "\n";
  os << "classes = " << data.classes << "\n";
  os << "channels = " << data.channels << "\n";
  os << "length = " << data.length << "\n";
  os << "samples = " << data.samples << "\n";
  os << "sigma = " << data.sigma << "\n";
  os << "synth_seed = " << data.synth_seed << "\n";
  os << "test_fraction = " << data.test_fraction << "\n\n";
  os << "[model]\n";
  os << "kind = \"" << model.kind << "\"\n";
  os << "dropout = " << model.dropout << "\n";
  os << "hidden = " << model.hidden << "\n";
  os << "feature_dim = " << model.feature_dim << "\n\n";
  os << "[teacher]\n";
  os << "optimizer = \"" << (teacher.opt.kind == OptKind::Adam ? "adam" : "sgd")
     << "\"\n";
  os << "lr = " << teacher.opt.lr << "\n";
  os << "momentum = " << teacher.opt.momentum << "\n";
  os << "weight_decay = " << teacher.opt.weight_decay << "\n";
  os << "scheduler = \""
     << (teacher.sched.kind == SchedKind::ReduceOnPlateau ? "plateau"
         : teacher.sched.kind == SchedKind::Cosine        ? "cosine"
                                                          : "none")
     << "\"\n";
  os << "monitor = \""
     << (teacher.sched.monitor == MonitorMetric::TrainLoss    ? "train_loss"
         : teacher.sched.monitor == MonitorMetric::ValLoss    ? "val_loss"
                                                              : "val_accuracy")
     << "\"\n";
  os << "patience = " << teacher.sched.patience << "\n";
  os << "factor = " << teacher.sched.factor << "\n";
  os << "t_max = " << teacher.sched.t_max << "\n";
  os << "epochs = " << teacher.epochs << "\n";
  os << "batch_size = " << teacher.batch_size << "\n";
  os << "seed = " << teacher.seed << "\n";
  os << "early_stop = " << (teacher.early_stop.enabled ? "true" : "false")
     << "\n";
  os << "early_stop_patience = " << teacher.early_stop.patience << "\n\n";
  os << "[ssd]\n";
  os << "n = " << student.ssd.n << "\n";
  os << "p_teacher = " << student.ssd.p_teacher << "\n";
  os << "p_student = " << student.ssd.p_student << "\n";
  os << "h = " << student.ssd.h << "\n";
  os << "epsilon = " << student.ssd.epsilon << "\n";
  os << "lambda = " << student.ssd.lambda << "\n";
  os << "renormalize = "
     << (student.ssd.renormalize_after_mask ? "true" : "false") << "\n";
  os << "detach_attention = "
     << (student.ssd.detach_attention ? "true" : "false") << "\n";
  os << "selection = \"" << to_string(student.ssd.selection) << "\"\n";
  os << "top_k = " << student.ssd.top_k << "\n";
  os << "logit_kl = " << student.ssd.logit_kl << "\n";
  os << "epochs = " << student.epochs << "\n";
  os << "seed = " << student.seed << "\n";
  os << "init_from_teacher = "
     << (student.init_from_teacher ? "true" : "false") << "\n\n";
  os << "[ablation]\n";
  auto arr = [&](const char* key, const auto& vals) {
    os << key << " = [";
    for (std::size_t i = 0; i < vals.size(); ++i)
      os << (i ? ", " : "") << vals[i];
    os << "]\n";
  };
  arr("p_teacher", ablation.p_teacher);
  arr("n", ablation.n);
  arr("epsilon", ablation.epsilon);
  os << "attention_reg = " << (ablation.attention_reg ? "true" : "false")
     << "\n";
  os << "teacher_init = " << (ablation.teacher_init ? "true" : "false") << "\n";
  os << "epochs = " << ablation.epochs << "\n\n";
  os << "[compare]\n";
  os << "ensemble_members = " << compare.ensemble_members << "\n";
  os << "soup_members = " << compare.soup_members << "\n";
  os << "finetune_epochs = " << compare.finetune_epochs << "\n";
  os << "finetune_lr_scale = " << compare.finetune_lr_scale << "\n\n";
  os << "[output]\n";
  os << "dir = \"" << output.dir << "\"\n";
  return os.str();
}

// ---------------------------------------------------------------------------
// Data / model materialization
// ---------------------------------------------------------------------------

namespace {

std::string resolve_data_path(const std::string& path) {
  if (path.empty() || fs::path(path).is_absolute() || fs::exists(path))
    return path;
  if (const char* root = std::getenv("SSD_DATA_DIR")) {
    fs::path candidate = fs::path(root) / path;
    if (fs::exists(candidate)) return candidate.string();
  }
  return path;
}

}  // namespace

LoadedData load_experiment_data(const DataConfig& cfg) {
  LoadedData out;
  if (cfg.kind == "uci_har") {
    auto har = load_uci_har(resolve_data_path(cfg.path));
    out.train = std::move(har.train);
    out.test = std::move(har.test);
  } else if (cfg.kind == "ucr_tsv") {
    out.train = load_ucr_tsv(resolve_data_path(cfg.path));
    out.test = load_ucr_tsv(resolve_data_path(cfg.test_path));
  } else {
    SynthSpec spec;
    spec.classes = cfg.classes;
    spec.channels = cfg.channels;
    spec.length = cfg.length;
    spec.samples = cfg.samples;
    spec.sigma = cfg.sigma;
    TimeSeriesDataset full = synth_generate(spec, cfg.synth_seed);
    auto [train_idx, test_idx] = split_indices(
        full, SplitSpec{cfg.test_fraction, cfg.split_seed, true});
    out.train = full.take(train_idx);
    out.test = full.take(test_idx);
  }
  if (cfg.standardize) {
    ChannelStats stats = compute_stats(out.train);
    out.train = standardize(out.train, stats);
    out.test = standardize(out.test, stats);
  }
  return out;
}

Model build_experiment_model(const ModelConfig& cfg, const DataConfig& data,
                             std::uint64_t seed) {
  RngStream init(RngStream(seed).fork(kInitStreamTag).base_seed());
  if (cfg.kind == "har_cnn") return build_har_cnn<float>(cfg.dropout, init);
  MlpSpec spec;
  spec.channels = data.channels;
  spec.length = data.length;
  spec.hidden = cfg.hidden;
  spec.feature_dim = cfg.feature_dim;
  spec.classes = data.classes;
  spec.dropout_p = cfg.dropout;
  return build_mlp<float>(spec, init);
}

}  // namespace ssd
