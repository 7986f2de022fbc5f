#include "robomal/cli.hpp"

#include "robomal/corpus.hpp"
#include "robomal/featurize.hpp"
#include "robomal/metrics.hpp"

#include "CLI11.hpp"
#include "json.hpp"

#include <chrono>
#include <cstdio>
#include <fstream>
#include <iomanip>
#include <ostream>
#include <sstream>
#include <thread>

namespace robomal {

namespace fs = std::filesystem;
using nlohmann::json;

void Extraction::validate() const {
  const bool raw = raw_offset.has_value() || raw_length.has_value();
  if (section && raw) throw std::invalid_argument("choose either --section or --raw-offset/--raw-length, not both");
  if (!section && !raw) throw std::invalid_argument("no extraction mode given");
  if (raw && !(raw_offset && raw_length))
    throw std::invalid_argument("--raw-offset and --raw-length must be given together");
}

elf::Bytes Extraction::extract(elf::ByteView file) const {
  validate();
  if (section) return elf::extract_section(elf::parse_elf(file), *section);
  return elf::extract_range(file, *raw_offset, *raw_length);
}

Dataset load_corpus(const fs::path& dir, const Extraction& how) {
  how.validate();
  const CorpusManifest manifest = read_manifest(dir / kManifestName);
  if (manifest.rows.empty()) throw std::runtime_error("manifest in " + dir.string() + " lists no files");
  Dataset d;
  d.sequences.reserve(manifest.rows.size());
  for (const auto& row : manifest.rows) {
    try {
      const elf::Bytes file = elf::read_file(dir / row.filename);
      d.sequences.push_back(featurize(how.extract(file)));
    } catch (const std::exception& e) {
      throw std::runtime_error(row.filename + ": " + e.what());
    }
    d.labels.push_back(row.label);
  }
  return d;
}

namespace {

struct CliError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

std::string format_metric(const std::optional<double>& v) {
  if (!v) return "n/a";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.4f", *v);
  return buf;
}

std::string seconds_since(std::chrono::steady_clock::time_point t0) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.1f s",
                std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
  return buf;
}

// Table columns: Accuracy, Precision, Recall, F1, FPR (as printed), FNR, then FPR over negatives.
constexpr std::size_t kTableMetrics[] = {0, 1, 2, 3, 4, 6, 5};
constexpr const char* kTableHeads[] = {"Accuracy", "Precision", "Recall", "F1", "FPR", "FNR", "FPR(std)"};

void print_table(std::ostream& out, const std::vector<std::pair<std::string, MetricsReport>>& rows) {
  std::size_t name_w = 5;
  for (const auto& [name, r] : rows) name_w = std::max(name_w, name.size());
  out << std::left << std::setw(static_cast<int>(name_w)) << "Model";
  for (const char* h : kTableHeads) out << "  " << std::right << std::setw(9) << h;
  out << '\n';
  for (const auto& [name, r] : rows) {
    out << std::left << std::setw(static_cast<int>(name_w)) << name;
    for (std::size_t m : kTableMetrics) out << "  " << std::right << std::setw(9) << format_metric(r.at(m));
    out << '\n';
  }
}

void add_extraction_options(CLI::App* cmd, Extraction& ex) {
  auto* section = cmd->add_option("--section", ex.section, "ELF section holding the controller (default .pydata)");
  auto* offset = cmd->add_option("--raw-offset", ex.raw_offset, "read a raw byte range instead of a section");
  auto* length = cmd->add_option("--raw-length", ex.raw_length, "length of the raw byte range");
  section->excludes(offset)->excludes(length);
  offset->needs(length);
  length->needs(offset);
}

void finish_extraction(Extraction& ex) {
  if (!ex.section && !ex.raw_offset && !ex.raw_length) ex.section = std::string(kPayloadSection);
  ex.validate();
}

json read_report(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw CliError("cannot open report " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  const std::string text = ss.str();
  if (text.find_first_not_of(" \t\r\n") == std::string::npos) throw CliError("report " + path.string() + " is empty");
  json j;
  try {
    j = json::parse(text);
    if (!j.is_object() || !j.contains("per_fold") || !j["per_fold"].is_array())
      throw CliError("report " + path.string() + " has no per_fold entries");
    metrics_from_json(j);
  } catch (const json::exception& e) {
    throw CliError("report " + path.string() + " is corrupt: " + e.what());
  } catch (const std::runtime_error& e) {
    throw CliError("report " + path.string() + " is corrupt: " + e.what());
  }
  return j;
}

// ---------------------------------------------------------------------------

int cmd_gen(std::size_t count, double fraction, std::uint64_t seed, const fs::path& out_dir, std::ostream& out) {
  CorpusOptions opt;
  opt.count = count;
  opt.malware_fraction = fraction;
  opt.seed = seed;
  const CorpusManifest m = generate_corpus(opt, out_dir);
  out << "wrote " << m.rows.size() << " files and " << (out_dir / kManifestName).string() << '\n';
  out << "malware=" << m.malware_count() << " good=" << m.good_count() << '\n';
  return 0;
}

struct TrainArgs {
  std::string model = "lstm";
  fs::path data;
  std::uint64_t seed = 42;
  std::optional<std::size_t> steps;
  bool paper_steps = false;
  Extraction extraction;
};

TrainConfig make_train_config(const TrainArgs& a) {
  TrainConfig cfg = TrainConfig::defaults(parse_model_kind(a.model), a.paper_steps);
  if (a.steps) cfg.max_steps = *a.steps;
  cfg.seed = a.seed;
  return cfg;
}

int cmd_train(TrainArgs a, const fs::path& out_path, std::ostream& out, std::ostream& err) {
  finish_extraction(a.extraction);
  const TrainConfig cfg = make_train_config(a);
  const Dataset data = load_corpus(a.data, a.extraction);
  std::vector<std::size_t> all(data.size());
  for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
  const auto t0 = std::chrono::steady_clock::now();
  const std::size_t every = std::max<std::size_t>(cfg.max_steps / 10, 1);
  const Checkpoint ckpt = train(cfg, data, all, 0, [&](std::size_t step, double loss) {
    if ((step + 1) % every == 0) err << "step " << step + 1 << "/" << cfg.max_steps << " loss " << loss << '\n';
  });
  save_checkpoint(ckpt, out_path);
  out << "trained " << to_string(cfg.model.kind) << " for " << ckpt.steps << " steps on " << data.size()
      << " samples, final loss " << ckpt.final_loss << '\n';
  out << "checkpoint " << out_path.string() << '\n';
  err << "training took " << seconds_since(t0) << '\n';
  return 0;
}

int cmd_crossval(TrainArgs a, std::size_t folds, std::size_t jobs, const fs::path& out_dir, std::ostream& out,
                 std::ostream& err) {
  finish_extraction(a.extraction);
  TrainConfig cfg = make_train_config(a);
  cfg.folds = folds;
  cfg.validate();
  const Dataset data = load_corpus(a.data, a.extraction);
  if (data.size() < folds)
    throw CliError("corpus has " + std::to_string(data.size()) + " samples, fewer than " + std::to_string(folds) +
                   " folds");
  const FoldPlan plan = make_folds(data.size(), folds, cfg.seed);
  fs::create_directories(out_dir);

  const auto t0 = std::chrono::steady_clock::now();
  const auto results = cross_validate(cfg, data, plan, jobs, [&](std::size_t f, const FoldResult& r) {
    std::vector<int> pred, truth;
    for (const auto& p : r.predictions) {
      pred.push_back(p.predicted);
      truth.push_back(p.truth);
    }
    const MetricsReport m = compute_metrics(confusion(pred, truth));
    err << "fold " << f + 1 << "/" << folds << " accuracy " << format_metric(m.accuracy) << " final loss "
        << r.checkpoint.loss_curve.back() << " (" << seconds_since(t0) << ")\n";
  });

  json per_fold = json::array();
  std::vector<MetricsReport> fold_reports;
  ConfusionMatrix pooled;
  for (std::size_t f = 0; f < results.size(); ++f) {
    const auto& r = results[f];
    std::vector<int> pred, truth;
    for (const auto& p : r.predictions) {
      pred.push_back(p.predicted);
      truth.push_back(p.truth);
    }
    const ConfusionMatrix cm = confusion(pred, truth);
    pooled += cm;
    fold_reports.push_back(compute_metrics(cm));
    char name[32];
    std::snprintf(name, sizeof name, "fold_%02zu.rmck", f);
    save_checkpoint(r.checkpoint, out_dir / name);

    json entry = to_json(fold_reports.back());
    entry["fold"] = f;
    entry["confusion"] = to_json(cm);
    entry["test_indices"] = plan.folds[f];
    entry["checkpoint"] = name;
    entry["initial_loss"] = r.checkpoint.loss_curve.front();
    entry["final_loss"] = r.checkpoint.loss_curve.back();
    entry["loss_curve"] = r.checkpoint.loss_curve;
    per_fold.push_back(std::move(entry));
  }
  const AggregateReport agg = aggregate(fold_reports);

  json report = to_json(agg.mean);
  report["model"] = std::string(to_string(cfg.model.kind));
  report["folds"] = folds;
  report["seed"] = cfg.seed;
  report["steps"] = cfg.max_steps;
  report["batch_size"] = cfg.batch_size;
  report["lr"] = cfg.lr;
  report["weight_decay"] = cfg.weight_decay;
  report["samples"] = data.size();
  report["loss_curve_stride"] = kLossCurveStride;
  json defined = json::object();
  for (std::size_t m = 0; m < MetricsReport::kCount; ++m)
    defined[std::string(MetricsReport::kNames[m])] = agg.defined_folds[m];
  report["defined_folds"] = defined;
  report["pooled_confusion"] = to_json(pooled);
  report["per_fold"] = per_fold;

  const fs::path report_path = out_dir / "report.json";
  std::ofstream rf(report_path, std::ios::trunc);
  if (!rf) throw CliError("cannot write " + report_path.string());
  rf << report.dump(2) << '\n';
  if (!rf) throw CliError("write failed for " + report_path.string());

  print_table(out, {{report["model"].get<std::string>(), agg.mean}});
  out << "report " << report_path.string() << '\n';
  err << "cross-validation took " << seconds_since(t0) << '\n';
  return 0;
}

int cmd_scan(const fs::path& file, const fs::path& ckpt_path, Extraction ex, std::ostream& out,
             std::ostream& err) {
  finish_extraction(ex);
  const Checkpoint ckpt = load_checkpoint(ckpt_path);
  elf::Bytes bytes;
  try {
    bytes = elf::read_file(file);
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return 1;
  }
  elf::Bytes payload;
  try {
    payload = ex.extract(bytes);
  } catch (const elf::SectionNotFound& e) {
    err << "error: missing section: " << e.what() << '\n';
    return 1;
  } catch (const elf::RangeError& e) {
    err << "error: byte range outside file: " << e.what() << '\n';
    return 1;
  } catch (const elf::ElfError& e) {
    err << "error: malformed ELF: " << e.what() << '\n';
    return 1;
  }
  if (payload.empty()) {
    err << "error: empty payload in " << file.string() << '\n';
    return 1;
  }
  const TokenSequence seq = featurize(payload, ckpt.model.sequence_length);
  const ForwardOutput fo = forward(ckpt.model, ckpt.params, std::span(&seq, 1), Mode::Eval);
  const double p = sigmoid(fo.logits[0]);
  const int verdict = decide(p);
  out << (verdict ? "malware" : "good") << " probability=" << format_metric(p) << ' ' << file.string() << '\n';
  return verdict ? 2 : 0;
}

int cmd_report(const std::vector<fs::path>& paths, const std::optional<fs::path>& loss_csv, std::ostream& out) {
  std::vector<std::pair<std::string, MetricsReport>> rows;
  std::vector<json> reports;
  for (const auto& path : paths) {
    json j = read_report(path);
    rows.emplace_back(j.value("model", path.stem().string()), metrics_from_json(j));
    reports.push_back(std::move(j));
  }
  print_table(out, rows);
  if (loss_csv) {
    std::ofstream csv(*loss_csv, std::ios::trunc);
    if (!csv) throw CliError("cannot write " + loss_csv->string());
    csv << "model,fold,step,loss\n";
    std::size_t written = 0;
    for (const auto& j : reports) {
      const std::string model = j.value("model", "model");
      const std::size_t stride = j.value("loss_curve_stride", kLossCurveStride);
      for (const auto& fold : j["per_fold"]) {
        if (!fold.contains("loss_curve")) continue;
        const auto f = fold.value("fold", std::size_t{0});
        std::size_t i = 0;
        for (const auto& v : fold["loss_curve"]) {
          csv << model << ',' << f << ',' << i * stride << ',' << std::setprecision(17) << v.get<double>() << '\n';
          ++i;
          ++written;
        }
      }
    }
    if (!csv) throw CliError("write failed for " + loss_csv->string());
    out << "loss curve: " << written << " rows in " << loss_csv->string() << '\n';
  }
  return 0;
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Detect tampered robot controller binaries with byte-sequence classifiers", "robomal"};
  app.require_subcommand(1);

  std::uint64_t seed = 42;
  auto add_seed = [&](CLI::App* cmd) {
    cmd->add_option("--seed", seed, "random seed")->envname("ROBOMAL_SEED")->capture_default_str();
  };

  // gen
  auto* gen = app.add_subcommand("gen", "generate a labelled synthetic ELF corpus");
  std::size_t count = 450;
  double fraction = 232.0 / 450.0;
  fs::path gen_out = "corpus";
  gen->add_option("--count", count, "number of files")->capture_default_str();
  gen->add_option("--malware-fraction", fraction, "share of malware files")->capture_default_str();
  gen->add_option("--out", gen_out, "output directory")->capture_default_str();
  add_seed(gen);

  // train / crossval share their model options
  TrainArgs targs;
  auto add_train_options = [&](CLI::App* cmd) {
    cmd->add_option("--model", targs.model, "lstm, gru, cnn or ann")->capture_default_str();
    cmd->add_option("--data", targs.data, "corpus directory containing manifest.csv")->required();
    auto* steps = cmd->add_option("--steps", targs.steps, "gradient updates (default 5000)");
    auto* paper = cmd->add_flag("--paper-steps", targs.paper_steps, "use 100000 (lstm, gru) or 50000 (cnn, ann)");
    steps->excludes(paper);
    add_seed(cmd);
    add_extraction_options(cmd, targs.extraction);
  };
  auto* train_cmd = app.add_subcommand("train", "train one model on a whole corpus");
  add_train_options(train_cmd);
  fs::path train_out = "model.rmck";
  train_cmd->add_option("--out", train_out, "checkpoint path")->capture_default_str();

  auto* cv = app.add_subcommand("crossval", "k-fold cross-validation with a JSON report");
  add_train_options(cv);
  std::size_t folds = 10;
  std::size_t jobs = std::max(1u, std::thread::hardware_concurrency());
  fs::path cv_out = "crossval";
  cv->add_option("--folds", folds, "number of folds")->capture_default_str();
  cv->add_option("--jobs", jobs, "folds trained in parallel")->capture_default_str();
  cv->add_option("--out", cv_out, "directory for report.json and fold checkpoints")->capture_default_str();

  // scan
  auto* scan = app.add_subcommand("scan", "classify one file (exit 0 good, 2 malware, 1 error)");
  fs::path scan_file, scan_ckpt;
  Extraction scan_ex;
  scan->add_option("file", scan_file, "ELF file to scan")->required();
  scan->add_option("--checkpoint", scan_ckpt, "trained model")->required();
  add_extraction_options(scan, scan_ex);

  // report
  auto* report = app.add_subcommand("report", "print cross-validation reports as a table");
  std::vector<fs::path> report_paths;
  std::optional<fs::path> loss_csv;
  report->add_option("reports", report_paths, "report.json files")->required();
  report->add_option("--loss-csv", loss_csv, "write training loss curves as CSV");

  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::Success& e) {
    return app.exit(e, out, err);
  } catch (const CLI::ParseError& e) {
    app.exit(e, out, err);
    return 1;
  }

  try {
    if (gen->parsed()) return cmd_gen(count, fraction, seed, gen_out, out);
    targs.seed = seed;
    if (train_cmd->parsed()) return cmd_train(targs, train_out, out, err);
    if (cv->parsed()) return cmd_crossval(targs, folds, jobs, cv_out, out, err);
    if (scan->parsed()) return cmd_scan(scan_file, scan_ckpt, scan_ex, out, err);
    if (report->parsed()) return cmd_report(report_paths, loss_csv, out);
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return 1;
  }
  return 1;
}

}  // namespace robomal
