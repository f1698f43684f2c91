#pragma once

#include <string_view>

namespace kra {

enum class Label : int { real = 0, fake = 1 };

inline std::string_view to_string(Label label) {
  return label == Label::fake ? "fake" : "real";
}

inline Label flipped(Label label) {
  return label == Label::fake ? Label::real : Label::fake;
}

}  // namespace kra
