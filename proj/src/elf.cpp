#include "robomal/elf.hpp"

#include <algorithm>
#include <fstream>
#include <iterator>
#include <set>

namespace robomal::elf {

namespace {

constexpr std::uint8_t kMagic[4] = {0x7F, 'E', 'L', 'F'};
constexpr std::uint8_t kClass64 = 2;
constexpr std::uint8_t kDataLsb = 1;
constexpr std::uint16_t kEtExec = 2;
constexpr std::uint16_t kEmX86_64 = 62;
constexpr std::uint16_t kShnLoreserve = 0xFF00;

// Bounds-checked little-endian reader over the whole image.
class Reader {
 public:
  explicit Reader(ByteView image) : image_(image) {}

  template <typename T>
  T read(std::uint64_t offset) const {
    if (offset > image_.size() || image_.size() - offset < sizeof(T))
      throw MalformedImage("read of " + std::to_string(sizeof(T)) + " bytes at offset " + std::to_string(offset) +
                           " exceeds image size " + std::to_string(image_.size()));
    T value = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i) value |= static_cast<T>(image_[offset + i]) << (8 * i);
    return value;
  }

  bool contains(std::uint64_t offset, std::uint64_t length) const {
    return offset <= image_.size() && length <= image_.size() - offset;
  }

 private:
  ByteView image_;
};

class Writer {
 public:
  template <typename T>
  void put(T value) {
    for (std::size_t i = 0; i < sizeof(T); ++i) out_.push_back(static_cast<std::uint8_t>(value >> (8 * i)));
  }
  template <typename T>
  void put_at(std::size_t offset, T value) {
    for (std::size_t i = 0; i < sizeof(T); ++i) out_[offset + i] = static_cast<std::uint8_t>(value >> (8 * i));
  }
  void append(ByteView bytes) { out_.insert(out_.end(), bytes.begin(), bytes.end()); }
  void align(std::size_t to) {
    while (out_.size() % to) out_.push_back(0);
  }
  std::size_t size() const { return out_.size(); }
  Bytes take() { return std::move(out_); }

 private:
  Bytes out_;
};

std::string resolve_name(const Section& strtab, std::uint32_t offset) {
  if (offset >= strtab.bytes.size())
    throw MalformedImage("section name offset " + std::to_string(offset) + " outside string table of " +
                         std::to_string(strtab.bytes.size()) + " bytes");
  auto begin = strtab.bytes.begin() + offset;
  auto nul = std::find(begin, strtab.bytes.end(), std::uint8_t{0});
  if (nul == strtab.bytes.end()) throw MalformedImage("unterminated section name at offset " + std::to_string(offset));
  return std::string(begin, nul);
}

}  // namespace

const Section* ElfFile::find(std::string_view name) const {
  for (const auto& s : sections)
    if (s.name == name) return &s;
  return nullptr;
}

std::vector<std::string> ElfFile::section_names() const {
  std::vector<std::string> out;
  for (const auto& s : sections)
    if (!s.name.empty()) out.push_back(s.name);
  return out;
}

ElfFile parse_elf(ByteView image) {
  if (image.size() < kEhdrSize)
    throw MalformedImage("image of " + std::to_string(image.size()) + " bytes is shorter than an ELF64 header");
  if (!std::equal(std::begin(kMagic), std::end(kMagic), image.begin())) throw MalformedImage("bad ELF magic");
  if (image[4] != kClass64) {
    if (image[4] == 1) throw Unsupported("ELF32 images are not supported");
    throw MalformedImage("invalid ELF class " + std::to_string(image[4]));
  }
  if (image[5] != kDataLsb) {
    if (image[5] == 2) throw Unsupported("big-endian ELF images are not supported");
    throw MalformedImage("invalid ELF data encoding " + std::to_string(image[5]));
  }

  const Reader r(image);
  ElfFile elf;
  Header& h = elf.header;
  h.type = r.read<std::uint16_t>(16);
  h.machine = r.read<std::uint16_t>(18);
  h.entry = r.read<std::uint64_t>(24);
  h.shoff = r.read<std::uint64_t>(40);
  h.shentsize = r.read<std::uint16_t>(58);
  h.shnum = r.read<std::uint16_t>(60);
  h.shstrndx = r.read<std::uint16_t>(62);

  if (h.shnum == 0) return elf;
  if (h.shentsize < kShdrSize) throw MalformedImage("section header entry size " + std::to_string(h.shentsize));
  if (!r.contains(h.shoff, static_cast<std::uint64_t>(h.shnum) * h.shentsize))
    throw MalformedImage("section header table (" + std::to_string(h.shnum) + " entries at offset " +
                         std::to_string(h.shoff) + ") exceeds the image");
  if (h.shstrndx >= kShnLoreserve) throw Unsupported("extended section string table index");
  if (h.shstrndx >= h.shnum)
    throw MalformedImage("string table index " + std::to_string(h.shstrndx) + " out of " + std::to_string(h.shnum));

  std::vector<std::uint32_t> name_offsets;
  elf.sections.reserve(h.shnum);
  for (std::uint16_t i = 0; i < h.shnum; ++i) {
    const std::uint64_t at = h.shoff + static_cast<std::uint64_t>(i) * h.shentsize;
    Section s;
    name_offsets.push_back(r.read<std::uint32_t>(at));
    s.type = r.read<std::uint32_t>(at + 4);
    s.file_offset = r.read<std::uint64_t>(at + 24);
    s.size = r.read<std::uint64_t>(at + 32);
    if (s.type != kShtNobits && s.type != kShtNull && s.size > 0) {
      if (!r.contains(s.file_offset, s.size))
        throw MalformedImage("section " + std::to_string(i) + " range [" + std::to_string(s.file_offset) + ", +" +
                             std::to_string(s.size) + ") exceeds image size " + std::to_string(image.size()));
      auto first = image.begin() + static_cast<std::ptrdiff_t>(s.file_offset);
      s.bytes.assign(first, first + static_cast<std::ptrdiff_t>(s.size));
    } else if (s.type == kShtNull) {
      s.size = 0;
    }
    elf.sections.push_back(std::move(s));
  }

  const Section& strtab = elf.sections[h.shstrndx];
  if (strtab.type != kShtStrtab) throw MalformedImage("section string table has type " + std::to_string(strtab.type));
  for (std::size_t i = 0; i < elf.sections.size(); ++i) {
    if (i == 0 && name_offsets[i] == 0 && elf.sections[i].type == kShtNull) continue;
    elf.sections[i].name = resolve_name(strtab, name_offsets[i]);
  }
  return elf;
}

Bytes extract_section(const ElfFile& elf, std::string_view name) {
  if (const Section* s = elf.find(name)) return s->bytes;
  std::string available;
  for (const auto& n : elf.section_names()) available += (available.empty() ? "" : ", ") + n;
  throw SectionNotFound("section '" + std::string(name) + "' not found; available: " +
                        (available.empty() ? "(none)" : available));
}

Bytes extract_range(ByteView image, std::uint64_t offset, std::uint64_t length) {
  if (offset > image.size())
    throw RangeError("offset " + std::to_string(offset) + " beyond image of " + std::to_string(image.size()) +
                     " bytes");
  const std::uint64_t take = std::min<std::uint64_t>(length, image.size() - offset);
  auto first = image.begin() + static_cast<std::ptrdiff_t>(offset);
  return Bytes(first, first + static_cast<std::ptrdiff_t>(take));
}

Bytes build_elf(const ElfBuildSpec& spec) {
  std::set<std::string> names;
  for (const auto& [name, bytes] : spec.sections) {
    if (name.empty()) throw std::invalid_argument("build_elf: empty section name");
    if (name.find('\0') != std::string::npos) throw std::invalid_argument("build_elf: NUL in section name");
    if (name == ".shstrtab") throw std::invalid_argument("build_elf: .shstrtab is reserved");
    if (!names.insert(name).second) throw std::invalid_argument("build_elf: duplicate section name '" + name + "'");
  }
  if (spec.payload_section) {
    auto it = std::find_if(spec.sections.begin(), spec.sections.end(),
                           [&](const auto& s) { return s.first == *spec.payload_section; });
    if (it == spec.sections.end()) throw std::invalid_argument("build_elf: payload section missing");
    if (it->second.empty()) throw std::invalid_argument("build_elf: payload section is empty");
  }
  if (spec.sections.size() + 2 > kShnLoreserve) throw std::invalid_argument("build_elf: too many sections");

  // .shstrtab content: leading NUL, then each name NUL-terminated.
  Bytes strtab{0};
  std::vector<std::uint32_t> name_offsets;
  for (const auto& [name, bytes] : spec.sections) {
    name_offsets.push_back(static_cast<std::uint32_t>(strtab.size()));
    strtab.insert(strtab.end(), name.begin(), name.end());
    strtab.push_back(0);
  }
  const std::uint32_t strtab_name = static_cast<std::uint32_t>(strtab.size());
  const std::string own = ".shstrtab";
  strtab.insert(strtab.end(), own.begin(), own.end());
  strtab.push_back(0);

  Writer w;
  w.append(kMagic);
  w.put<std::uint8_t>(kClass64);
  w.put<std::uint8_t>(kDataLsb);
  w.put<std::uint8_t>(1);  // EV_CURRENT
  for (int i = 7; i < 16; ++i) w.put<std::uint8_t>(0);
  w.put<std::uint16_t>(kEtExec);
  w.put<std::uint16_t>(kEmX86_64);
  w.put<std::uint32_t>(1);
  w.put<std::uint64_t>(0);  // entry
  w.put<std::uint64_t>(0);  // phoff
  const std::size_t shoff_at = w.size();
  w.put<std::uint64_t>(0);  // shoff, patched below
  w.put<std::uint32_t>(0);  // flags
  w.put<std::uint16_t>(kEhdrSize);
  w.put<std::uint16_t>(0);  // phentsize
  w.put<std::uint16_t>(0);  // phnum
  w.put<std::uint16_t>(kShdrSize);
  const auto shnum = static_cast<std::uint16_t>(spec.sections.size() + 2);
  w.put<std::uint16_t>(shnum);
  w.put<std::uint16_t>(static_cast<std::uint16_t>(shnum - 1));

  std::vector<std::uint64_t> offsets;
  for (const auto& [name, bytes] : spec.sections) {
    w.align(8);
    offsets.push_back(w.size());
    w.append(bytes);
  }
  w.align(8);
  const std::uint64_t strtab_offset = w.size();
  w.append(strtab);
  w.align(8);
  const std::uint64_t shoff = w.size();
  w.put_at<std::uint64_t>(shoff_at, shoff);

  auto header = [&](std::uint32_t name, std::uint32_t type, std::uint64_t offset, std::uint64_t size) {
    w.put<std::uint32_t>(name);
    w.put<std::uint32_t>(type);
    w.put<std::uint64_t>(0);  // flags
    w.put<std::uint64_t>(0);  // addr
    w.put<std::uint64_t>(offset);
    w.put<std::uint64_t>(size);
    w.put<std::uint32_t>(0);  // link
    w.put<std::uint32_t>(0);  // info
    w.put<std::uint64_t>(type == kShtNull ? 0 : 1);  // addralign
    w.put<std::uint64_t>(0);  // entsize
  };
  header(0, kShtNull, 0, 0);
  for (std::size_t i = 0; i < spec.sections.size(); ++i)
    header(name_offsets[i], kShtProgbits, offsets[i], spec.sections[i].second.size());
  header(strtab_name, kShtStrtab, strtab_offset, strtab.size());
  return w.take();
}

Bytes read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  return Bytes(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

void write_file(const std::filesystem::path& path, ByteView bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw std::runtime_error("write failed for " + path.string());
}

}  // namespace robomal::elf
