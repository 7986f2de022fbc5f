#include "doctest.h"

#include "robomal/cli.hpp"
#include "robomal/corpus.hpp"

#include "json.hpp"

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

using namespace robomal;
namespace fs = std::filesystem;

namespace {

struct Run {
  int code = 0;
  std::string out;
  std::string err;
};

Run cli(std::vector<std::string> args) {
  args.insert(args.begin(), "robomal");
  std::ostringstream out, err;
  Run r;
  r.code = run_cli(args, out, err);
  r.out = out.str();
  r.err = err.str();
  return r;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

fs::path scratch(const std::string& name) {
  fs::path dir = fs::temp_directory_path() / ("robomal_test_cli_" + name);
  fs::remove_all(dir);
  return dir;
}

nlohmann::json load_json(const fs::path& p) { return nlohmann::json::parse(slurp(p)); }

}  // namespace

TEST_CASE("gen prints class counts and is reproducible") {
  const fs::path a = scratch("gen_a"), b = scratch("gen_b");
  const Run r = cli({"gen", "--count", "450", "--seed", "42", "--out", a.string()});
  CHECK(r.code == 0);
  CHECK(r.out.find("malware=232 good=218") != std::string::npos);
  CHECK(cli({"gen", "--count", "450", "--seed", "42", "--out", b.string()}).code == 0);
  CHECK(slurp(a / "manifest.csv") == slurp(b / "manifest.csv"));
  fs::remove_all(a);
  fs::remove_all(b);
}

TEST_CASE("gen rejects impossible requests") {
  const fs::path dir = scratch("gen_bad");
  const Run one = cli({"gen", "--count", "1", "--out", dir.string()});
  CHECK(one.code == 1);
  CHECK(one.err.find("both classes") != std::string::npos);
  CHECK(cli({"gen", "--count", "4", "--out", "/proc/robomal_cannot_write"}).code == 1);
  CHECK(cli({"gen", "--count", "many"}).code == 1);
  CHECK(cli({}).code == 1);
  CHECK(cli({"--help"}).code == 0);
}

TEST_CASE("seed falls back to ROBOMAL_SEED") {
  const fs::path a = scratch("env_a"), b = scratch("env_b");
  ::setenv("ROBOMAL_SEED", "7", 1);
  CHECK(cli({"gen", "--count", "6", "--out", a.string()}).code == 0);
  ::unsetenv("ROBOMAL_SEED");
  CHECK(cli({"gen", "--count", "6", "--seed", "7", "--out", b.string()}).code == 0);
  CHECK(slurp(a / "manifest.csv") == slurp(b / "manifest.csv"));
  fs::remove_all(a);
  fs::remove_all(b);
}

TEST_CASE("crossval writes a report per model over the same folds") {
  const fs::path data = scratch("cv_data"), lstm = scratch("cv_lstm"), ann = scratch("cv_ann");
  REQUIRE(cli({"gen", "--count", "24", "--seed", "3", "--out", data.string()}).code == 0);
  const Run r1 = cli({"crossval", "--model", "lstm", "--data", data.string(), "--folds", "3", "--seed", "7",
                      "--steps", "4", "--jobs", "2", "--out", lstm.string()});
  REQUIRE(r1.code == 0);
  CHECK(r1.out.find("Accuracy") != std::string::npos);
  const Run r2 = cli({"crossval", "--model", "ann", "--data", data.string(), "--folds", "3", "--seed", "7",
                      "--steps", "4", "--out", ann.string()});
  REQUIRE(r2.code == 0);

  const auto j1 = load_json(lstm / "report.json");
  const auto j2 = load_json(ann / "report.json");
  CHECK(j1["model"] == "lstm");
  CHECK(j2["model"] == "ann");
  REQUIRE(j1["per_fold"].size() == 3);
  CHECK(j1["folds"] == 3);
  for (const char* key : {"accuracy", "precision", "recall", "f1", "fpr_paper", "fpr_standard", "fnr"})
    CHECK(j1.contains(key));
  for (std::size_t f = 0; f < 3; ++f) {
    CHECK(j1["per_fold"][f]["test_indices"] == j2["per_fold"][f]["test_indices"]);
    CHECK(fs::exists(lstm / j1["per_fold"][f]["checkpoint"].get<std::string>()));
    CHECK(j1["per_fold"][f]["loss_curve"].size() == 1);
  }

  // corpus smaller than the fold count
  CHECK(cli({"crossval", "--data", data.string(), "--folds", "30", "--steps", "2", "--out", lstm.string()}).code ==
        1);
  CHECK(cli({"crossval", "--data", data.string(), "--steps", "2", "--paper-steps"}).code == 1);
  CHECK(cli({"crossval", "--data", "/nonexistent", "--steps", "2"}).code == 1);

  // report over both runs
  const fs::path csv = lstm / "loss.csv";
  const Run rep = cli({"report", (lstm / "report.json").string(), (ann / "report.json").string(), "--loss-csv",
                       csv.string()});
  REQUIRE(rep.code == 0);
  std::istringstream lines(rep.out);
  std::string header, row1, row2;
  std::getline(lines, header);
  std::getline(lines, row1);
  std::getline(lines, row2);
  const char* columns[] = {"Accuracy", "Precision", "Recall", "F1", "FPR", "FNR"};
  std::size_t at = 0;
  for (const char* c : columns) {
    const std::size_t pos = header.find(c, at);
    CHECK(pos != std::string::npos);
    at = pos + 1;
  }
  CHECK(row1.rfind("lstm", 0) == 0);
  CHECK(row2.rfind("ann", 0) == 0);
  CHECK(row1.size() == header.size());

  std::ifstream csv_in(csv);
  std::string line;
  std::size_t rows = 0;
  std::getline(csv_in, line);
  CHECK(line == "model,fold,step,loss");
  while (std::getline(csv_in, line)) ++rows;
  CHECK(rows == 6);  // two reports, three folds, one window each

  for (const auto& d : {data, lstm, ann}) fs::remove_all(d);
}

TEST_CASE("report rejects empty and corrupt files") {
  const fs::path dir = scratch("report_bad");
  fs::create_directories(dir);
  { std::ofstream(dir / "empty.json"); }
  { std::ofstream(dir / "bad.json") << "{\"accuracy\": 1"; }
  { std::ofstream(dir / "nofolds.json") << "{\"accuracy\": 1}"; }
  const Run empty = cli({"report", (dir / "empty.json").string()});
  CHECK(empty.code == 1);
  CHECK(empty.out.empty());
  CHECK(cli({"report", (dir / "bad.json").string()}).code == 1);
  CHECK(cli({"report", (dir / "nofolds.json").string()}).code == 1);
  CHECK(cli({"report", (dir / "missing.json").string()}).code == 1);
  fs::remove_all(dir);
}

TEST_CASE("scan verdicts and exit codes") {
  const fs::path data = scratch("scan_data");
  REQUIRE(cli({"gen", "--count", "40", "--seed", "5", "--out", data.string()}).code == 0);
  const fs::path ckpt = data / "model.rmck";
  REQUIRE(cli({"train", "--model", "ann", "--data", data.string(), "--steps", "150", "--out", ckpt.string()}).code ==
          0);

  // exit codes agree with the printed verdict and the threshold rule
  const CorpusManifest m = read_manifest(data / kManifestName);
  std::size_t correct_good = 0, correct_bad = 0;
  for (const auto& row : m.rows) {
    const Run r = cli({"scan", (data / row.filename).string(), "--checkpoint", ckpt.string()});
    REQUIRE((r.code == 0 || r.code == 2));
    const double p = std::stod(r.out.substr(r.out.find("probability=") + 12));
    if (r.code == 0) {
      CHECK(r.out.rfind("good", 0) == 0);
      CHECK(p < 0.5);
      correct_good += row.label == 0;
    } else {
      CHECK(r.out.rfind("malware", 0) == 0);
      CHECK(p >= 0.5);
      correct_bad += row.label == 1;
    }
  }
  CHECK(correct_good > 0);  // at least one correctly classified good fixture
  CHECK(correct_bad > 0);

  const fs::path junk = data / "junk.bin";
  {
    std::ofstream out(junk, std::ios::binary);
    for (int i = 0; i < 1500; ++i) out.put(static_cast<char>((i * 37 + 11) & 0xFF));
  }
  const Run bad = cli({"scan", junk.string(), "--checkpoint", ckpt.string()});
  CHECK(bad.code == 1);
  CHECK(bad.err.find("malformed ELF") != std::string::npos);

  const Run raw = cli({"scan", junk.string(), "--checkpoint", ckpt.string(), "--raw-offset", "100", "--raw-length",
                       "1300"});
  CHECK((raw.code == 0 || raw.code == 2));
  CHECK(cli({"scan", junk.string(), "--checkpoint", ckpt.string(), "--raw-offset", "5000", "--raw-length", "10"})
            .code == 1);
  CHECK(cli({"scan", junk.string(), "--checkpoint", ckpt.string(), "--raw-offset", "100"}).code == 1);
  CHECK(cli({"scan", junk.string(), "--checkpoint", ckpt.string(), "--section", ".pydata", "--raw-offset", "1",
             "--raw-length", "2"})
            .code == 1);

  const Run missing = cli({"scan", (data / m.rows[0].filename).string(), "--checkpoint", ckpt.string(), "--section",
                           ".nope"});
  CHECK(missing.code == 1);
  CHECK(missing.err.find("missing section") != std::string::npos);

  const fs::path hollow = data / "hollow.elf";
  elf::ElfBuildSpec spec;
  spec.sections = {{".text", {1, 2, 3}}, {".pydata", {}}};
  elf::write_file(hollow, elf::build_elf(spec));
  const Run empty = cli({"scan", hollow.string(), "--checkpoint", ckpt.string()});
  CHECK(empty.code == 1);
  CHECK(empty.err.find("empty payload") != std::string::npos);

  CHECK(cli({"scan", (data / m.rows[0].filename).string(), "--checkpoint", junk.string()}).code == 1);
  CHECK(cli({"scan", (data / "absent.elf").string(), "--checkpoint", ckpt.string()}).code == 1);
  fs::remove_all(data);
}
