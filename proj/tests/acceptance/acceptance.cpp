// End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
// exits non-zero when any criterion fails.

#include "robomal/cli.hpp"
#include "robomal/corpus.hpp"
#include "robomal/metrics.hpp"
#include "support/elf_cases.hpp"
#include "support/model_cases.hpp"
#include "support/op_cases.hpp"

#include "json.hpp"

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <regex>
#include <sstream>

using namespace robomal;
using namespace robomal::testing;
namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

namespace {

// Tolerances and budgets.
constexpr double kGradTolerance = 1e-5;
constexpr double kGradBudgetSeconds = 60.0;
constexpr std::size_t kElfRoundTrips = 100;
constexpr std::size_t kElfMutations = 1000;
constexpr double kElfBudgetSeconds = 30.0;
constexpr std::size_t kMetricTrials = 1000;
constexpr double kFloatIdentityTolerance = 1e-12;
constexpr double kTargetAccuracy = 0.85;
constexpr double kRuntimeBudgetSeconds = 15.0 * 60.0;
constexpr std::size_t kProjectedCores = 4;
constexpr double kLossRatio = 0.5;
constexpr std::size_t kLossFoldsRequired = 9;
constexpr std::size_t kCorpusCount = 450;
constexpr std::size_t kExpectedMalware = 232;
constexpr std::size_t kExpectedGood = 218;
// Baselines only need to complete and report; they run shortened schedules.
constexpr const char* kBaselineSteps[][2] = {{"gru", "500"}, {"cnn", "500"}, {"ann", "5000"}};

int failures = 0;
std::ofstream verdict_log;  // ctest hides stdout of passing tests

void verdict(int n, bool pass, const std::string& what, const std::string& detail) {
  char head[64];
  std::snprintf(head, sizeof head, "ACCEPTANCE %d %s: ", n, pass ? "PASS" : "FAIL");
  const std::string line = head + what + " [" + detail + "]\n";
  std::fputs(line.c_str(), stdout);
  std::fflush(stdout);
  verdict_log << line << std::flush;
  if (!pass) ++failures;
}

double since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

struct CliRun {
  int code = 0;
  std::string out, err;
  double seconds = 0.0;
};

CliRun cli(std::vector<std::string> args) {
  args.insert(args.begin(), "robomal");
  std::ostringstream out, err;
  CliRun r;
  const auto t0 = Clock::now();
  r.code = run_cli(args, out, err);
  r.seconds = since(t0);
  r.out = out.str();
  r.err = err.str();
  std::cerr << r.err;
  return r;
}

nlohmann::json read_json(const fs::path& p) {
  std::ifstream in(p);
  return nlohmann::json::parse(in);
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// ---------------------------------------------------------------------------

void criterion_gradients() {
  const auto t0 = Clock::now();
  double worst = 0.0;
  std::string worst_name = "none";
  std::size_t cases = 0;
  Rng rng(2024);
  for (OpKind kind : differentiable_ops()) {
    for (int rep = 0; rep < 3; ++rep) {
      const OpCase c = make_op_case(kind, rng);
      const GradReport r = check_op_case(c, rng.next());
      ++cases;
      if (!(r.max_error <= worst)) {
        worst = r.max_error;
        worst_name = c.label + ":" + r.worst;
      }
    }
  }
  for (ModelKind kind : {ModelKind::BiLSTM, ModelKind::GRU, ModelKind::CNN, ModelKind::ANN}) {
    const GradReport r = check_model_gradients(kind, 77);
    ++cases;
    if (r.compared == 0 || !(r.max_error <= worst)) {
      worst = r.compared == 0 ? INFINITY : r.max_error;
      worst_name = std::string(to_string(kind)) + ":" + r.worst;
    }
  }
  const double secs = since(t0);
  verdict(1, worst < kGradTolerance && secs < kGradBudgetSeconds, "gradient correctness",
          std::to_string(cases) + " op/model cases, max rel err " + fmt("%.3g", worst) + " at " + worst_name + ", " +
              fmt("%.1f s", secs));
}

void criterion_elf() {
  const auto t0 = Clock::now();
  Rng rng(99);
  std::size_t round_trip_failures = 0;
  for (std::size_t i = 0; i < kElfRoundTrips; ++i) {
    const elf::ElfBuildSpec spec = random_build_spec(rng);
    try {
      const elf::ElfFile f = elf::parse_elf(elf::build_elf(spec));
      for (const auto& [name, bytes] : spec.sections)
        if (elf::extract_section(f, name) != bytes) ++round_trip_failures;
    } catch (const std::exception&) {
      ++round_trip_failures;
    }
  }
  std::size_t rejected = 0, accepted = 0, wrong_error = 0;
  for (std::size_t i = 0; i < kElfMutations; ++i) {
    const elf::Bytes image = mutate(elf::build_elf(random_build_spec(rng)), rng);
    try {
      const elf::ElfFile f = elf::parse_elf(image);
      for (const auto& s : f.sections)
        if (s.type != elf::kShtNobits && s.bytes.size() != s.size) ++wrong_error;
      ++accepted;
    } catch (const elf::ElfError&) {
      ++rejected;
    } catch (...) {
      ++wrong_error;
    }
  }
  const double secs = since(t0);
  verdict(2, round_trip_failures == 0 && wrong_error == 0 && secs < kElfBudgetSeconds, "ELF round trip and fuzzing",
          std::to_string(kElfRoundTrips - round_trip_failures) + "/" + std::to_string(kElfRoundTrips) +
              " round trips exact; " + std::to_string(kElfMutations) + " mutants: " + std::to_string(rejected) +
              " rejected, " + std::to_string(accepted) + " parsed, " + std::to_string(wrong_error) +
              " unexpected; " + fmt("%.1f s", secs));
}

void criterion_metrics() {
  Rng rng(7);
  std::size_t bad_counts = 0, bad_identity = 0, checked = 0;
  double worst = 0.0;
  auto check = [&](double a, double b) {
    ++checked;
    const double e = std::abs(a - b);
    worst = std::max(worst, e);
    if (!(e <= kFloatIdentityTolerance)) ++bad_identity;
  };
  for (std::size_t trial = 0; trial < kMetricTrials; ++trial) {
    // random labels with occasionally empty classes, tallied independently
    const std::size_t n = 1 + rng.below(200);
    const double p_true = rng.uniform() < 0.1 ? 0.0 : rng.uniform();
    const double p_pred = rng.uniform() < 0.1 ? 1.0 : rng.uniform();
    std::vector<int> pred(n), truth(n);
    std::size_t tally[4] = {};  // tp, tn, fp, fn
    for (std::size_t i = 0; i < n; ++i) {
      truth[i] = rng.uniform() < p_true;
      pred[i] = rng.uniform() < p_pred;
      tally[pred[i] == truth[i] ? (truth[i] ? 0 : 1) : (pred[i] ? 2 : 3)]++;
    }
    const ConfusionMatrix cm = confusion(pred, truth);
    if (cm.tp != tally[0] || cm.tn != tally[1] || cm.fp != tally[2] || cm.fn != tally[3] || cm.total() != n)
      ++bad_counts;
    const MetricsReport r = compute_metrics(cm);
    if (!r.accuracy) ++bad_identity;
    else check(*r.accuracy * static_cast<double>(n), static_cast<double>(cm.tp + cm.tn));
    if (cm.tp + cm.fp > 0) {
      if (!r.precision || !r.fpr_paper) ++bad_identity;
      else check(*r.precision + *r.fpr_paper, 1.0);
    } else if (r.precision || r.fpr_paper) {
      ++bad_identity;
    }
    if (cm.tp + cm.fn > 0) {
      if (!r.recall || !r.fnr) ++bad_identity;
      else check(*r.recall + *r.fnr, 1.0);
    } else if (r.recall || r.fnr) {
      ++bad_identity;
    }
    if (r.precision && r.recall && *r.precision > 0 && *r.recall > 0) {
      if (!r.f1) ++bad_identity;
      else check(*r.f1, 2.0 / (1.0 / *r.precision + 1.0 / *r.recall));
    }
    for (std::size_t m = 0; m < MetricsReport::kCount; ++m)
      if (r.at(m) && !(*r.at(m) >= 0.0 && *r.at(m) <= 1.0)) ++bad_identity;
  }
  verdict(3, bad_counts == 0 && bad_identity == 0, "metric identities",
          std::to_string(kMetricTrials) + " matrices, " + std::to_string(bad_counts) + " tally mismatches, " +
              std::to_string(checked) + " float identities, max dev " + fmt("%.3g", worst) + ", " +
              std::to_string(bad_identity) + " violations");
}

// Wall time of folds handed out in order to `workers` parallel workers.
double projected_wall(const std::vector<double>& fold_seconds, std::size_t workers) {
  std::vector<double> busy(workers, 0.0);
  for (double s : fold_seconds) *std::min_element(busy.begin(), busy.end()) += s;
  return *std::max_element(busy.begin(), busy.end());
}

std::vector<double> fold_durations(const std::string& log) {
  // sequential runs print cumulative seconds after each fold
  static const std::regex line(R"(fold \d+/\d+ .*\(([0-9.]+) s\))");
  std::vector<double> out;
  double prev = 0.0;
  for (std::sregex_iterator it(log.begin(), log.end(), line), end; it != end; ++it) {
    const double t = std::stod((*it)[1]);
    out.push_back(t - prev);
    prev = t;
  }
  return out;
}

}  // namespace

int main() {
  const char* env_dir = std::getenv("ROBOMAL_ACCEPTANCE_DIR");
  const fs::path work = env_dir ? fs::path(env_dir) : fs::temp_directory_path() / "robomal_acceptance";
  fs::remove_all(work);
  fs::create_directories(work);
  verdict_log.open(work / "acceptance.log");
  const fs::path corpus = work / "corpus";

  criterion_gradients();
  criterion_elf();
  criterion_metrics();

  // 4: generate, then cross-validate the BiLSTM at desk scale
  const CliRun gen = cli({"gen", "--count", std::to_string(kCorpusCount), "--seed", "42", "--out", corpus.string()});
  const CliRun lstm = cli({"crossval", "--model", "lstm", "--data", corpus.string(), "--folds", "10", "--jobs", "1",
                           "--out", (work / "lstm").string()});
  nlohmann::json report;
  bool lstm_ok = gen.code == 0 && lstm.code == 0;
  if (lstm_ok) report = read_json(work / "lstm" / "report.json");
  {
    const std::vector<double> folds = fold_durations(lstm.err);
    double serial = 0.0;
    for (double s : folds) serial += s;
    const double overhead = gen.seconds + (lstm.seconds - serial);
    const double projected = overhead + projected_wall(folds, kProjectedCores);
    std::string baselines;
    bool baselines_ok = true;
    for (const auto& [model, steps] : kBaselineSteps) {
      const CliRun r = cli({"crossval", "--model", model, "--data", corpus.string(), "--folds", "10", "--steps", steps,
                            "--jobs", "1", "--out", (work / model).string()});
      bool complete = r.code == 0;
      std::string acc = "n/a";
      if (complete) {
        const auto j = read_json(work / model / "report.json");
        for (const char* key : {"accuracy", "precision", "recall", "f1", "fpr_paper", "fpr_standard", "fnr"})
          complete = complete && j.contains(key) && j[key].is_number();
        if (j["accuracy"].is_number()) acc = fmt("%.4f", j["accuracy"].get<double>());
      }
      baselines_ok = baselines_ok && complete;
      baselines += std::string(", ") + model + "@" + steps + " acc " + acc + (complete ? "" : " INCOMPLETE");
    }
    const double accuracy = lstm_ok && report["accuracy"].is_number() ? report["accuracy"].get<double>() : 0.0;
    verdict(4,
            lstm_ok && folds.size() == 10 && accuracy >= kTargetAccuracy && projected < kRuntimeBudgetSeconds &&
                baselines_ok,
            "end-to-end learning",
            "lstm 10-fold accuracy " + fmt("%.4f", accuracy) + " (target " + fmt("%.2f", kTargetAccuracy) +
                "); serial " + fmt("%.0f s", lstm.seconds + gen.seconds) + ", projected on " +
                std::to_string(kProjectedCores) + " cores " + fmt("%.0f s", projected) + " (budget " +
                fmt("%.0f s", kRuntimeBudgetSeconds) + ")" + baselines);
  }

  // 5: loss curves of the same folds
  {
    std::size_t decreasing = 0, total = 0;
    std::string ratios;
    if (lstm_ok) {
      for (const auto& f : report["per_fold"]) {
        const double first = f["initial_loss"].get<double>(), last = f["final_loss"].get<double>();
        ++total;
        if (last < kLossRatio * first) ++decreasing;
        ratios += (ratios.empty() ? "" : " ") + fmt("%.3f", last / first);
      }
    }
    verdict(5, decreasing >= kLossFoldsRequired, "loss-curve decrease",
            std::to_string(decreasing) + "/" + std::to_string(total) + " folds end below " + fmt("%.1f", kLossRatio) +
                "x initial loss; ratios " + ratios);
  }

  // 6: identical seeds reproduce the report; the rerun uses two workers
  {
    const CliRun again = cli({"crossval", "--model", "lstm", "--data", corpus.string(), "--folds", "10", "--jobs", "2",
                              "--out", (work / "lstm_again").string()});
    const bool same = lstm_ok && again.code == 0 &&
                      slurp(work / "lstm" / "report.json") == slurp(work / "lstm_again" / "report.json");
    verdict(6, same, "determinism", same ? "report.json byte-identical across runs (1 vs 2 workers)"
                                         : "reports differ or a run failed");
  }

  // 7: corpus fidelity
  {
    std::size_t bad_len = 0, bad_label = 0, malware = 0, good = 0, rows = 0;
    std::size_t min_len = SIZE_MAX, max_len = 0;
    try {
      const CorpusManifest m = read_manifest(corpus / kManifestName);
      rows = m.rows.size();
      for (const auto& row : m.rows) {
        (row.label ? malware : good)++;
        const elf::Bytes payload =
            elf::extract_section(elf::parse_elf(elf::read_file(corpus / row.filename)), kPayloadSection);
        min_len = std::min(min_len, payload.size());
        max_len = std::max(max_len, payload.size());
        if (payload.size() < kPayloadMinLength || payload.size() > kPayloadMaxLength) ++bad_len;
        const SimResult sim = simulate(decode_payload(payload));
        if (sim.behavior != row.behavior || label_for(sim.behavior) != row.label) ++bad_label;
      }
    } catch (const std::exception& e) {
      std::cerr << "corpus check failed: " << e.what() << '\n';
      ++bad_label;
    }
    verdict(7,
            gen.code == 0 && gen.out.find("malware=232 good=218") != std::string::npos && rows == kCorpusCount &&
                malware == kExpectedMalware && good == kExpectedGood && bad_len == 0 && bad_label == 0,
            "corpus fidelity",
            "malware=" + std::to_string(malware) + " good=" + std::to_string(good) + ", payload lengths " +
                std::to_string(min_len) + ".." + std::to_string(max_len) + ", " + std::to_string(bad_label) +
                " label mismatches on re-simulation");
  }

  std::printf("ACCEPTANCE SUMMARY: %d of 7 criteria failed\n", failures);
  verdict_log << "ACCEPTANCE SUMMARY: " << failures << " of 7 criteria failed\n";
  return failures == 0 ? 0 : 1;
}
