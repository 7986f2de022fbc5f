#ifndef ROBOMAL_CLI_HPP
#define ROBOMAL_CLI_HPP

#include "robomal/elf.hpp"
#include "robomal/trainer.hpp"

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

namespace robomal {

/// Where the controller bytes live: a named section, or a raw file range.
struct Extraction {
  std::optional<std::string> section;
  std::optional<std::uint64_t> raw_offset;
  std::optional<std::uint64_t> raw_length;

  static Extraction named(std::string name) { return {std::move(name), std::nullopt, std::nullopt}; }
  /// Throws unless exactly one mode is chosen and the raw pair is complete.
  void validate() const;
  elf::Bytes extract(elf::ByteView file) const;
};

/// Reads manifest.csv in `dir`, extracts and featurizes every listed file.
Dataset load_corpus(const std::filesystem::path& dir, const Extraction& how = Extraction::named(".pydata"));

/// Entry point shared by the robomal binary and the tests. args[0] is the
/// program name. Returns the process exit code: 0 success (or a good
/// verdict), 2 malware verdict, 1 any error.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace robomal

#endif  // ROBOMAL_CLI_HPP
