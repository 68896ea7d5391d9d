#pragma once

#include <vector>

namespace blspkd {

using TokenSequence = std::vector<int>;

// Toy vocabulary layout: seven reserved ids followed by content symbols.
namespace vocab {
inline constexpr int kSize = 64;
inline constexpr int kPad = 0;
inline constexpr int kBos = 1;
inline constexpr int kEos = 2;
// Prompt markers.
inline constexpr int kContinue = 3;  // continuation-writing prompt c
inline constexpr int kRepeat = 4;    // "repeat the following words"
inline constexpr int kEndOfInput = 5;
inline constexpr int kPlain = 6;  // reserved, unused by the presets
inline constexpr int kFirstContent = 7;
inline constexpr int kContentCount = kSize - kFirstContent;

inline constexpr bool is_content(int id) { return id >= kFirstContent && id < kSize; }
}  // namespace vocab

}  // namespace blspkd
