#ifndef ROBOMAL_FEATURIZE_HPP
#define ROBOMAL_FEATURIZE_HPP

#include <cstdint>
#include <span>
#include <stdexcept>
#include <vector>

namespace robomal {

inline constexpr std::int32_t kPadToken = 256;
inline constexpr std::size_t kVocabSize = 257;  // 256 byte values + PAD
inline constexpr std::size_t kSequenceCap = 2000;

class EmptyPayload : public std::invalid_argument {
 public:
  EmptyPayload() : std::invalid_argument("empty controller payload cannot be classified") {}
};

/// Byte values as categorical tokens, padded with kPadToken to a fixed length.
struct TokenSequence {
  std::vector<std::int32_t> tokens;
  std::size_t true_length = 0;

  std::size_t length() const { return tokens.size(); }
  friend bool operator==(const TokenSequence&, const TokenSequence&) = default;
};

/// Maps byte b at position i to token b, truncating at `cap` and padding to it.
TokenSequence featurize(std::span<const std::uint8_t> payload, std::size_t cap = kSequenceCap);

}  // namespace robomal

#endif  // ROBOMAL_FEATURIZE_HPP
