#pragma once

#include <cstddef>
#include <cstdint>
#include <deque>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "cmcl/tensor.hpp"

namespace cmcl {

// Which part of the network a parameter belongs to. Gradient routing and
// parameter-count audits are expressed as sets of groups.
enum class ParamGroup : std::uint8_t {
  kFrozen = 0,   // encoder token/position tables and mixer
  kSegment,      // learnable segment embeddings (the only trainable layer-1 weights)
  kFusion,
  kAggregation,
  kPrediction,
  kHead1,
  kHead2,
  kHead3,
  kAux1,
  kAux2,
  kAux3,
};

using GroupMask = std::uint32_t;

constexpr GroupMask group_bit(ParamGroup g) { return GroupMask{1} << static_cast<unsigned>(g); }
constexpr GroupMask kFreeLeafBit = GroupMask{1} << 31;
constexpr GroupMask kAllGroups = ~GroupMask{0};

template <typename... G>
constexpr GroupMask groups(G... g) {
  return (group_bit(g) | ...);
}

std::string_view group_name(ParamGroup g);

struct Parameter {
  std::string name;
  ParamGroup group = ParamGroup::kFrozen;
  bool trainable = false;
  Tensor value;
  Tensor grad;  // same shape as value; accumulated by Tape::accumulate_param_grads
};

// Named parameter collection. Entries are addressed by index so that copies
// of a store (best-checkpoint snapshots) stay self-consistent.
class ParamStore {
 public:
  std::size_t add(std::string name, ParamGroup group, bool trainable, Tensor init);

  Parameter& operator[](std::size_t i) { return params_.at(i); }
  const Parameter& operator[](std::size_t i) const { return params_.at(i); }

  Parameter& get(std::string_view name);
  const Parameter& get(std::string_view name) const;
  const Parameter* find(std::string_view name) const;
  Parameter* find(std::string_view name);

  std::size_t size() const { return params_.size(); }
  auto begin() { return params_.begin(); }
  auto end() { return params_.end(); }
  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }

  void zero_grad();
  // Number of trainable scalar elements whose group is in `mask`.
  std::size_t trainable_elements(GroupMask mask = kAllGroups) const;

 private:
  std::deque<Parameter> params_;
  std::map<std::string, std::size_t, std::less<>> index_;
};

}  // namespace cmcl
