#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace hookrt {

// Byte-level tokenizer: token id == byte value for ids < 256. Ids 256+ are
// reserved for specials and render as empty text.
inline constexpr int kBosToken = 256;
inline constexpr int kEosToken = 257;
inline constexpr int kMinVocab = 258;  // bytes plus BOS/EOS

using TokenSequence = std::vector<int>;

inline TokenSequence tokenize(const std::string& text) {
  TokenSequence out;
  out.reserve(text.size());
  for (unsigned char c : text) out.push_back(static_cast<int>(c));
  return out;
}

inline std::string detokenize(const TokenSequence& tokens, int vocab_size) {
  std::string out;
  out.reserve(tokens.size());
  for (int t : tokens) {
    if (t < 0 || t >= vocab_size)
      throw std::out_of_range("detokenize: token id " + std::to_string(t) +
                              " outside vocab of " + std::to_string(vocab_size));
    if (t < 256) out.push_back(static_cast<char>(static_cast<unsigned char>(t)));
    // specials produce no text
  }
  return out;
}

}  // namespace hookrt
