#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

namespace cmcl {

// Reserved token ids. Content tokens start at kFirstContentToken.
inline constexpr std::size_t kClsToken = 0;
inline constexpr std::size_t kSepToken = 1;
inline constexpr std::size_t kFirstContentToken = 2;

// One discourse-unit pair with a single class label.
struct Instance {
  std::int64_t id = 0;
  std::vector<std::size_t> du1;
  std::vector<std::size_t> du2;
  std::size_t label = 0;

  friend bool operator==(const Instance&, const Instance&) = default;
};

using Split = std::vector<Instance>;

}  // namespace cmcl
