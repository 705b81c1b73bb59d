#pragma once

#include <compare>
#include <string>

namespace icl {

/// (layer, head) pair; ordered by layer, then head.
struct HeadId {
  int layer = 0;
  int head = 0;

  friend auto operator<=>(const HeadId&, const HeadId&) = default;

  std::string str() const { return "(" + std::to_string(layer) + "," + std::to_string(head) + ")"; }
};

}  // namespace icl
