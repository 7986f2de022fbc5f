#ifndef ROBOMAL_ELF_HPP
#define ROBOMAL_ELF_HPP

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace robomal::elf {

using Bytes = std::vector<std::uint8_t>;
using ByteView = std::span<const std::uint8_t>;

class ElfError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Not an ELF image, or an image whose tables point outside the buffer.
class MalformedImage : public ElfError {
 public:
  using ElfError::ElfError;
};

/// A well-formed ELF variant this tool does not read (ELF32, big-endian).
class Unsupported : public ElfError {
 public:
  using ElfError::ElfError;
};

class SectionNotFound : public ElfError {
 public:
  using ElfError::ElfError;
};

class RangeError : public ElfError {
 public:
  using ElfError::ElfError;
};

inline constexpr std::uint32_t kShtNull = 0;
inline constexpr std::uint32_t kShtProgbits = 1;
inline constexpr std::uint32_t kShtStrtab = 3;
inline constexpr std::uint32_t kShtNobits = 8;

inline constexpr std::size_t kEhdrSize = 64;
inline constexpr std::size_t kShdrSize = 64;

struct Header {
  std::uint16_t type = 0;
  std::uint16_t machine = 0;
  std::uint64_t entry = 0;
  std::uint64_t shoff = 0;
  std::uint16_t shentsize = 0;
  std::uint16_t shnum = 0;
  std::uint16_t shstrndx = 0;
};

/// One section with its content. bytes.size() == size for every section that
/// occupies file space; SHT_NOBITS sections carry no bytes.
struct Section {
  std::string name;
  std::uint32_t type = kShtNull;
  std::uint64_t file_offset = 0;
  std::uint64_t size = 0;
  Bytes bytes;
};

struct ElfFile {
  Header header;
  std::vector<Section> sections;  // index 0 is the null section when present

  const Section* find(std::string_view name) const;
  std::vector<std::string> section_names() const;
};

struct ElfBuildSpec {
  std::vector<std::pair<std::string, Bytes>> sections;
  /// When set, this section must be present and non-empty.
  std::optional<std::string> payload_section;
};

/// Parses a little-endian ELF64 image. Never reads outside `image`.
ElfFile parse_elf(ByteView image);

/// Content of the named section; throws SectionNotFound listing what exists.
Bytes extract_section(const ElfFile& elf, std::string_view name);

/// image[offset, offset + length), clamped at the end of the image.
/// Throws RangeError when offset lies past the end.
Bytes extract_range(ByteView image, std::uint64_t offset, std::uint64_t length);

/// Emits a section-only ELF64 image: header, 8-byte-aligned section contents,
/// .shstrtab, then the section header table.
Bytes build_elf(const ElfBuildSpec& spec);

Bytes read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, ByteView bytes);

}  // namespace robomal::elf

#endif  // ROBOMAL_ELF_HPP
