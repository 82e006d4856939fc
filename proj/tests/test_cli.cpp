#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "ssd/config.hpp"

using namespace ssd;
namespace fs = std::filesystem;

namespace {

// Built binary path, exported by ctest; empty disables the process tests.
std::string cli_path() {
  const char* p = std::getenv("SSD_CLI_BIN");
  return p ? p : "";
}

int run_cli(const std::string& args) {
  std::string cmd = cli_path() + " " + args + " >/dev/null 2>&1";
  int rc = std::system(cmd.c_str());
  return WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
}

fs::path fresh_dir(const std::string& tag) {
  fs::path p = fs::temp_directory_path() / ("ssd_cli_" + tag);
  fs::remove_all(p);
  return p;
}

std::string tiny_config(const fs::path& out_dir, const std::string& extra_ssd = "") {
  std::ostringstream os;
  os << "[data]\n"
     << "kind = \"synthetic\"\n"
     << "classes = 3\n"
     << "length = 24\n"
     << "samples = 120\n"
     << "sigma = 0.4\n\n"
     << "[model]\n"
     << "kind = \"mlp\"\n"
     << "hidden = 16\n"
     << "feature_dim = 8\n"
     << "dropout = 0.1\n\n"
     << "[teacher]\n"
     << "epochs = 2\n"
     << "batch_size = 32\n"
     << "lr = 0.003\n"
     << "scheduler = \"none\"\n\n"
     << "[ssd]\n"
     << "n = 3\n"
     << "epochs = 1\n"
     << extra_ssd << "\n"
     << "[output]\n"
     << "dir = \"" << out_dir.string() << "\"\n";
  return os.str();
}

fs::path write_config(const std::string& tag, const std::string& text) {
  fs::path p = fs::temp_directory_path() / ("ssd_cli_cfg_" + tag + ".toml");
  std::ofstream f(p, std::ios::trunc);
  f << text;
  return p;
}

}  // namespace

TEST_SUITE_BEGIN("cli");

TEST_CASE("toml: parses sections, values, arrays, and comments") {
  auto table = parse_toml(
      "# experiment\n[data]\nkind = \"synthetic\"  # inline\nsamples = 40\n"
      "flag = true\n[ablation]\nepsilon = [20, 50, 90]\n",
      "test.toml");
  CHECK(table.at("data").at("kind").as_string() == "synthetic");
  CHECK(table.at("data").at("samples").as_int() == 40);
  CHECK(table.at("data").at("flag").as_bool());
  CHECK(table.at("ablation").at("epsilon").as_number_array() ==
        std::vector<double>{20, 50, 90});
}

TEST_CASE("toml: malformed lines carry positions") {
  try {
    parse_toml("[data]\nkind \"oops\"\n", "bad.toml");
    FAIL("expected ConfigError");
  } catch (const ConfigError& e) {
    CHECK(std::string(e.what()).find("bad.toml:2") != std::string::npos);
  }
  CHECK_THROWS_AS(parse_toml("key = 1\n", "x.toml"), ConfigError);
  CHECK_THROWS_AS(parse_toml("[s]\nk = \n", "x.toml"), ConfigError);
  CHECK_THROWS_AS(parse_toml("[s]\nk = 1\nk = 2\n", "x.toml"), ConfigError);
}

TEST_CASE("config: unknown keys and sections are rejected") {
  auto bad_key = parse_toml("[data]\nkind = \"synthetic\"\nbogus = 1\n", "c.toml");
  CHECK_THROWS_WITH_AS(ExperimentConfig::from_toml(bad_key, "c.toml"),
                       doctest::Contains("bogus"), ConfigError);
  auto bad_section = parse_toml("[nonsense]\nx = 1\n", "c.toml");
  CHECK_THROWS_WITH_AS(ExperimentConfig::from_toml(bad_section, "c.toml"),
                       doctest::Contains("nonsense"), ConfigError);
}

TEST_CASE("config: invalid epsilon names the field") {
  auto t = parse_toml("[ssd]\nepsilon = 150\n", "c.toml");
  CHECK_THROWS_WITH_AS(ExperimentConfig::from_toml(t, "c.toml"),
                       doctest::Contains("epsilon"), ConfigError);
}

TEST_CASE("config: resolved copy round-trips") {
  auto cfg = ExperimentConfig::from_toml(
      parse_toml("[ssd]\nepsilon = 75\nn = 12\n[data]\nsigma = 0.25\n", "c.toml"),
      "c.toml");
  auto text = cfg.to_toml_string();
  auto cfg2 = ExperimentConfig::from_toml(parse_toml(text, "resolved.toml"),
                                          "resolved.toml");
  CHECK(cfg2.student.ssd.epsilon == 75.0);
  CHECK(cfg2.student.ssd.n == 12);
  CHECK(cfg2.data.sigma == 0.25);
  CHECK(cfg2.to_toml_string() == text);
}

TEST_CASE("cli: train-teacher writes checkpoint, history, and manifest") {
  if (cli_path().empty()) return;
  fs::path out = fresh_dir("teacher");
  fs::path cfg = write_config("teacher", tiny_config(out));
  CHECK(run_cli("train-teacher --config " + cfg.string()) == 0);
  CHECK(fs::exists(out / "teacher.ssdt"));
  CHECK(fs::exists(out / "history.csv"));
  CHECK(fs::exists(out / "manifest.json"));
  CHECK(fs::exists(out / "resolved.toml"));
  CHECK(fs::exists(out / "report.json"));

  SUBCASE("rerun refuses to overwrite without --force") {
    CHECK(run_cli("train-teacher --config " + cfg.string()) == 1);
    CHECK(run_cli("train-teacher --config " + cfg.string() + " --force") == 0);
  }
}

TEST_CASE("cli: invalid epsilon in config exits with code 2") {
  if (cli_path().empty()) return;
  fs::path out = fresh_dir("badeps");
  fs::path cfg = write_config("badeps", tiny_config(out, "epsilon = 150\n"));
  CHECK(run_cli("train-teacher --config " + cfg.string()) == 2);
}

TEST_CASE("cli: rerun with the same seed reproduces history.csv exactly") {
  if (cli_path().empty()) return;
  fs::path out1 = fresh_dir("det1");
  fs::path out2 = fresh_dir("det2");
  fs::path cfg1 = write_config("det1", tiny_config(out1));
  fs::path cfg2 = write_config("det2", tiny_config(out2));
  REQUIRE(run_cli("train-teacher --config " + cfg1.string()) == 0);
  REQUIRE(run_cli("train-teacher --config " + cfg2.string()) == 0);
  std::ifstream f1(out1 / "history.csv"), f2(out2 / "history.csv");
  std::string a((std::istreambuf_iterator<char>(f1)), {});
  std::string b((std::istreambuf_iterator<char>(f2)), {});
  CHECK(a == b);
  CHECK_FALSE(a.empty());
}

TEST_CASE("cli: train-student emits diagnostics and a delta report") {
  if (cli_path().empty()) return;
  fs::path out_t = fresh_dir("stu_teacher");
  fs::path cfg_t = write_config("stu_teacher", tiny_config(out_t));
  REQUIRE(run_cli("train-teacher --config " + cfg_t.string()) == 0);

  fs::path out_s = fresh_dir("stu_student");
  fs::path cfg_s = write_config("stu_student", tiny_config(out_s));
  REQUIRE(run_cli("train-student --config " + cfg_s.string() + " --teacher " +
                  (out_t / "teacher.ssdt").string()) == 0);
  CHECK(fs::exists(out_s / "student.ssdt"));
  CHECK(fs::exists(out_s / "diagnostics.csv"));
  std::ifstream rf(out_s / "report.json");
  std::string report((std::istreambuf_iterator<char>(rf)), {});
  CHECK(report.find("accuracy_delta") != std::string::npos);

  SUBCASE("distill-all selection keeps every representation") {
    fs::path out_d = fresh_dir("stu_da");
    fs::path cfg_d = write_config("stu_da", tiny_config(out_d));
    REQUIRE(run_cli("train-student --config " + cfg_d.string() +
                    " --selection distill-all --teacher " +
                    (out_t / "teacher.ssdt").string()) == 0);
    std::ifstream df(out_d / "diagnostics.csv");
    std::string line;
    std::getline(df, line);  // header
    int rows = 0;
    while (std::getline(df, line)) {
      ++rows;
      // mean_kept is the 5th column; with n=3 it must equal 3 every step
      std::size_t pos = 0;
      for (int c = 0; c < 4; ++c) pos = line.find(',', pos) + 1;
      CHECK(line.substr(pos, line.find(',', pos) - pos) == "3");
    }
    CHECK(rows > 0);
  }
}

TEST_CASE("cli: ablate runs the grid and emits one row per point") {
  if (cli_path().empty()) return;
  fs::path out_t = fresh_dir("abl_teacher");
  fs::path cfg_t = write_config("abl_teacher", tiny_config(out_t));
  REQUIRE(run_cli("train-teacher --config " + cfg_t.string()) == 0);

  fs::path out_a = fresh_dir("abl_sweep");
  std::string text = tiny_config(out_a);
  text += "\n[ablation]\nepsilon = [50, 90]\nepochs = 1\n";
  fs::path cfg_a = write_config("abl_sweep", text);
  REQUIRE(run_cli("ablate --config " + cfg_a.string() + " --teacher " +
                  (out_t / "teacher.ssdt").string()) == 0);
  std::ifstream f(out_a / "sweep.csv");
  std::string line;
  std::getline(f, line);
  CHECK(line ==
        "p_teacher,n,epsilon,attention_reg,teacher_init,accuracy,"
        "rep_variance,mean_kept");
  int rows = 0;
  while (std::getline(f, line)) ++rows;
  CHECK(rows == 2);
}

TEST_CASE("cli: compare reports all six methods with param counts") {
  if (cli_path().empty()) return;
  fs::path out = fresh_dir("cmp");
  std::string text = tiny_config(out);
  text += "\n[compare]\nensemble_members = 2\nsoup_members = 2\n"
          "finetune_epochs = 1\n";
  fs::path cfg = write_config("cmp", text);
  REQUIRE(run_cli("compare --config " + cfg.string() + " --train-members") == 0);
  std::ifstream f(out / "report.csv");
  std::string line;
  std::getline(f, line);
  CHECK(line == "method,accuracy,inference_params,train_flops");
  std::vector<std::string> methods;
  while (std::getline(f, line))
    methods.push_back(line.substr(0, line.find(',')));
  CHECK(methods == std::vector<std::string>{"baseline", "ensemble_vote",
                                            "ensemble_average", "uniform_soup",
                                            "greedy_soup", "ssd_student"});
  // ensemble params = 2x baseline, soup/ssd = 1x
  std::ifstream jf(out / "report.json");
  std::string js((std::istreambuf_iterator<char>(jf)), {});
  CHECK(js.find("ensemble.json") == std::string::npos);
  CHECK(fs::exists(out / "members" / "ensemble.json"));
}

TEST_CASE("cli: export-embeddings writes m x n rows") {
  if (cli_path().empty()) return;
  fs::path out_t = fresh_dir("exp_teacher");
  fs::path cfg_t = write_config("exp_teacher", tiny_config(out_t));
  REQUIRE(run_cli("train-teacher --config " + cfg_t.string()) == 0);

  fs::path csv = fs::temp_directory_path() / "ssd_cli_embed.csv";
  fs::remove(csv);
  REQUIRE(run_cli("export-embeddings --config " + cfg_t.string() +
                  " --checkpoint " + (out_t / "teacher.ssdt").string() +
                  " --split test --csv " + csv.string() + " --n 3") == 0);
  std::ifstream f(csv);
  std::string line;
  std::getline(f, line);
  CHECK(line.substr(0, 26) == "sample_id,pass_index,label");
  int rows = 0;
  while (std::getline(f, line)) ++rows;
  // synthetic config: 120 samples, 20% test -> 24 samples x 3 passes
  CHECK(rows == 24 * 3);
}

TEST_SUITE_END();
