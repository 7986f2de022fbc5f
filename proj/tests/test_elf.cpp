#include "doctest.h"

#include "robomal/elf.hpp"
#include "support/elf_cases.hpp"

using namespace robomal;
using namespace robomal::elf;

TEST_CASE("round trip with own writer") {
  ElfBuildSpec spec;
  spec.sections = {{".text", {1, 2, 3, 4}}, {".pydata", {0xDE, 0xAD, 0xBE, 0xEF}}};
  spec.payload_section = ".pydata";
  const Bytes image = build_elf(spec);
  const ElfFile elf = parse_elf(image);
  CHECK(extract_section(elf, ".pydata") == Bytes{0xDE, 0xAD, 0xBE, 0xEF});
  CHECK(extract_section(elf, ".text") == Bytes{1, 2, 3, 4});
  CHECK(elf.header.shentsize == 64);
  CHECK(elf.sections.size() == 4);  // null, .text, .pydata, .shstrtab
  for (const auto& s : elf.sections) CHECK(s.file_offset % 8 == 0);
}

TEST_CASE("header fields are written little-endian") {
  const Bytes image = build_elf({});
  REQUIRE(image.size() >= 64);
  CHECK(image[0] == 0x7F);
  CHECK(image[1] == 'E');
  CHECK(image[4] == 2);
  CHECK(image[5] == 1);
  CHECK(image[58] == 64);  // shentsize low byte
  CHECK(image[60] == 2);   // null + .shstrtab
  CHECK(image[62] == 1);
}

TEST_CASE("empty spec yields a parseable file with no payload sections") {
  const ElfFile elf = parse_elf(build_elf({}));
  CHECK(elf.section_names() == std::vector<std::string>{".shstrtab"});
}

TEST_CASE("parse errors") {
  Bytes ten(10, 0x41);
  CHECK_THROWS_AS(parse_elf(ten), MalformedImage);

  Bytes image = build_elf({});
  Bytes bad_magic = image;
  bad_magic[1] = 'X';
  CHECK_THROWS_AS(parse_elf(bad_magic), MalformedImage);

  Bytes elf32 = image;
  elf32[4] = 1;
  CHECK_THROWS_AS(parse_elf(elf32), Unsupported);

  Bytes big_endian = image;
  big_endian[5] = 2;
  CHECK_THROWS_AS(parse_elf(big_endian), Unsupported);

  Bytes truncated = image;
  truncated.resize(truncated.size() - 10);
  CHECK_THROWS_AS(parse_elf(truncated), MalformedImage);
}

TEST_CASE("out-of-range section is malformed") {
  ElfBuildSpec spec;
  spec.sections = {{".pydata", Bytes(16, 7)}};
  Bytes image = build_elf(spec);
  const ElfFile elf = parse_elf(image);
  const std::uint64_t header_at = elf.header.shoff + 64;  // section 1
  image[header_at + 32 + 3] = 0x10;                       // size += 2^24
  CHECK_THROWS_AS(parse_elf(image), MalformedImage);
}

TEST_CASE("extract_section") {
  ElfBuildSpec spec;
  spec.sections = {{".pydata", Bytes(1200, 0x5A)}, {".empty", {}}};
  const ElfFile elf = parse_elf(build_elf(spec));
  CHECK(extract_section(elf, ".pydata").size() == 1200);
  CHECK(extract_section(elf, ".empty").empty());
  CHECK_THROWS_WITH_AS(extract_section(elf, ".nope"), doctest::Contains(".pydata"), SectionNotFound);
}

TEST_CASE("extract_range clamps and rejects offsets past the end") {
  Bytes image(100);
  for (std::size_t i = 0; i < image.size(); ++i) image[i] = static_cast<std::uint8_t>(i);
  const Bytes tail = extract_range(image, 90, 20);
  CHECK(tail.size() == 10);
  CHECK(tail.front() == 90);
  CHECK(extract_range(image, 0, 0).empty());
  CHECK(extract_range(image, 100, 5).empty());
  CHECK_THROWS_AS(extract_range(image, 101, 1), RangeError);
}

TEST_CASE("build_elf rejects invalid specs") {
  ElfBuildSpec dup;
  dup.sections = {{".a", {1}}, {".a", {2}}};
  CHECK_THROWS_AS(build_elf(dup), std::invalid_argument);

  ElfBuildSpec empty_payload;
  empty_payload.sections = {{".pydata", {}}};
  empty_payload.payload_section = ".pydata";
  CHECK_THROWS_AS(build_elf(empty_payload), std::invalid_argument);

  ElfBuildSpec reserved;
  reserved.sections = {{".shstrtab", {1}}};
  CHECK_THROWS_AS(build_elf(reserved), std::invalid_argument);
}

TEST_CASE("randomized build/parse round trip and range cross-check") {
  Rng rng(2024);
  for (int trial = 0; trial < 100; ++trial) {
    const ElfBuildSpec spec = robomal::testing::random_build_spec(rng);
    const Bytes image = build_elf(spec);
    const ElfFile elf = parse_elf(image);
    for (const auto& [name, bytes] : spec.sections) {
      const Section* s = elf.find(name);
      REQUIRE(s != nullptr);
      CHECK(s->bytes == bytes);
      CHECK(extract_range(image, s->file_offset, s->size) == extract_section(elf, name));
    }
    CHECK(elf.section_names().size() == spec.sections.size() + 1);
  }
}

TEST_CASE("mutated images raise ElfError or parse cleanly") {
  Rng rng(77);
  int rejected = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    const Bytes image = robomal::testing::mutate(build_elf(robomal::testing::random_build_spec(rng)), rng);
    try {
      const ElfFile elf = parse_elf(image);
      for (const auto& s : elf.sections)
        if (s.type != kShtNobits) CHECK(s.bytes.size() == s.size);
    } catch (const ElfError&) {
      ++rejected;
    }
  }
  CHECK(rejected > 100);
}
