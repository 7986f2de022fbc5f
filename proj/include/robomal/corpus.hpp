#ifndef ROBOMAL_CORPUS_HPP
#define ROBOMAL_CORPUS_HPP

#include "robomal/elf.hpp"

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace robomal {

enum class Behavior { Nominal, Crash, Stalled, WrongDirection, ExcessiveDeviation };

std::string_view to_string(Behavior b);
Behavior parse_behavior(std::string_view name);
/// 0 for nominal (good software), 1 for any fault (malware).
inline int label_for(Behavior b) { return b == Behavior::Nominal ? 0 : 1; }

/// Gains and set points of the wall-following PD controller.
struct ControllerParams {
  double kp = 0.0;
  double kd = 0.0;
  double v = 0.0;      // commanded speed, m/s, signed
  double d_ref = 0.0;  // desired wall distance, m
  int steer_sign = 1;  // +1 or -1

  friend bool operator==(const ControllerParams&, const ControllerParams&) = default;
};

/// Simulation constants. The corridor is 2 m wide with the wall at d = 0.
struct SimSettings {
  double dt = 0.02;
  double duration = 30.0;
  double wheelbase = 0.3;
  double max_steer = 0.4;
  double corridor = 2.0;
  double initial_heading = 0.05;
  double initial_offset = 0.2;  // d0 = d_ref + initial_offset
  double stall_speed = 0.05;
  double max_deviation = 0.5;
};

struct SimResult {
  Behavior behavior = Behavior::Nominal;
  double max_deviation = 0.0;  // max |d - d_ref|
  double progress = 0.0;       // distance along the corridor
  std::size_t steps = 0;
};

/// Kinematic wall-following run; the first fault found decides the behavior
/// (stall, then crash, then wrong direction, then excessive deviation).
SimResult simulate(const ControllerParams& p, const SimSettings& s = {});

inline constexpr std::size_t kPayloadMinLength = 1000;
inline constexpr std::size_t kPayloadMaxLength = 1300;
inline constexpr std::size_t kPayloadHeaderSize = 37;  // magic, four f64, steer byte
inline constexpr std::string_view kPayloadSection = ".pydata";

class PayloadError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// "RMPD", kp, kd, v, d_ref as little-endian f64, steer byte (0x01 / 0xFF),
/// then script-like filler seeded by `noise_seed`, exactly `target_length` bytes.
elf::Bytes serialize_payload(const ControllerParams& p, std::size_t target_length, std::uint64_t noise_seed);
ControllerParams decode_payload(elf::ByteView payload);

struct ManifestRow {
  std::string filename;
  int label = 0;
  ControllerParams params;
  Behavior behavior = Behavior::Nominal;
  std::size_t payload_length = 0;
  std::uint64_t seed = 0;
};

struct CorpusManifest {
  std::vector<ManifestRow> rows;

  std::size_t malware_count() const;
  std::size_t good_count() const { return rows.size() - malware_count(); }
};

struct CorpusOptions {
  std::size_t count = 450;
  double malware_fraction = 232.0 / 450.0;
  std::uint64_t seed = 42;
  std::size_t max_attempts = 1000;  // candidate draws per file before giving up
};

/// round(count * fraction), kept within [1, count - 1] so both classes exist.
std::size_t malware_target(std::size_t count, double fraction);

/// Draws parameter sets, labels them by simulation, writes one ELF per sample
/// plus manifest.csv into `out_dir`, and returns the manifest.
CorpusManifest generate_corpus(const CorpusOptions& options, const std::filesystem::path& out_dir);

inline constexpr std::string_view kManifestName = "manifest.csv";

void write_manifest(const CorpusManifest& manifest, const std::filesystem::path& path);
/// Reads a manifest. Only `filename` and `label` are required; other columns
/// default when absent, so externally labelled corpora can be used.
CorpusManifest read_manifest(const std::filesystem::path& path);

}  // namespace robomal

#endif  // ROBOMAL_CORPUS_HPP
