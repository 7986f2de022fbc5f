#include "robomal/featurize.hpp"

#include <algorithm>

namespace robomal {

TokenSequence featurize(std::span<const std::uint8_t> payload, std::size_t cap) {
  if (payload.empty()) throw EmptyPayload();
  if (cap == 0) throw std::invalid_argument("featurize: cap must be positive");
  TokenSequence seq;
  seq.true_length = std::min(payload.size(), cap);
  seq.tokens.assign(cap, kPadToken);
  std::copy_n(payload.begin(), seq.true_length, seq.tokens.begin());
  return seq;
}

}  // namespace robomal
