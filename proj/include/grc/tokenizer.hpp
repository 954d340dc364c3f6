#pragma once

#include <string>
#include <string_view>
#include <vector>

#include "grc/model.hpp"

namespace grc {

/// Byte-level tokenizer. Ids 0..15 are reserved for special markers; byte b
/// maps to id 16 + b, so plain text never produces a reserved id.
namespace tok {

inline constexpr TokenId kPad = 0;
inline constexpr TokenId kBos = 1;
inline constexpr TokenId kEos = 2;
inline constexpr TokenId kImStart = 3;
inline constexpr TokenId kImEnd = 4;
inline constexpr TokenId kUser = 5;
inline constexpr TokenId kAssistant = 6;
inline constexpr TokenId kSep = 7;
inline constexpr TokenId kNumReserved = 16;
inline constexpr TokenId kByteVocab = kNumReserved + 256;

inline std::vector<TokenId> encode(std::string_view text) {
  std::vector<TokenId> ids;
  ids.reserve(text.size());
  for (unsigned char c : text) ids.push_back(kNumReserved + c);
  return ids;
}

inline bool is_special(TokenId id) { return id < kNumReserved; }

/// Text for a reserved id when rendered.
inline std::string_view marker(TokenId id) {
  switch (id) {
    case kPad: return "<|pad|>";
    case kBos: return "<|bos|>";
    case kEos: return "<|eos|>";
    case kImStart: return "<|im_start|>";
    case kImEnd: return "<|im_end|>\n";
    case kUser: return "user\n";
    case kAssistant: return "assistant\n";
    case kSep: return "\n";
    default: return "<|reserved|>";
  }
}

/// Inverse of encode. Reserved ids render as their marker text and ids past
/// the byte range as "<|unk|>".
inline std::string decode(std::span<const TokenId> ids) {
  std::string out;
  for (TokenId id : ids) {
    if (is_special(id))
      out += marker(id);
    else if (id < kByteVocab)
      out.push_back(char(id - kNumReserved));
    else
      out += "<|unk|>";
  }
  return out;
}

inline void append(std::vector<TokenId>& dst, std::span<const TokenId> src) { dst.insert(dst.end(), src.begin(), src.end()); }

/// Chat framing of (instruction, query, response). The response span (plus
/// the closing marker) is returned through response_begin so the generation
/// loss can target it.
inline std::vector<TokenId> chat(std::string_view u, std::string_view x, std::string_view y,
                                 std::size_t* response_begin = nullptr) {
  std::vector<TokenId> ids{kImStart, kUser};
  append(ids, encode(u));
  ids.push_back(kSep);
  append(ids, encode(x));
  ids.insert(ids.end(), {kImEnd, kImStart, kAssistant});
  if (response_begin) *response_begin = ids.size();
  append(ids, encode(y));
  ids.push_back(kImEnd);
  return ids;
}

/// Prompt part of chat(): everything up to the point where the response starts.
inline std::vector<TokenId> chat_prompt(std::string_view u, std::string_view x) {
  std::vector<TokenId> ids{kImStart, kUser};
  append(ids, encode(u));
  ids.push_back(kSep);
  append(ids, encode(x));
  ids.insert(ids.end(), {kImEnd, kImStart, kAssistant});
  return ids;
}

/// Framed reconstruction instruction; the recovered context follows directly.
inline std::vector<TokenId> recon_instruction(std::string_view prompt) {
  std::vector<TokenId> ids{kImStart, kUser};
  append(ids, encode(prompt));
  ids.insert(ids.end(), {kImEnd, kImStart, kAssistant});
  return ids;
}

}  // namespace tok
}  // namespace grc
