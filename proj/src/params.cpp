#include "cmcl/params.hpp"

#include "cmcl/error.hpp"

namespace cmcl {

std::string_view group_name(ParamGroup g) {
  switch (g) {
    case ParamGroup::kFrozen: return "frozen";
    case ParamGroup::kSegment: return "segment";
    case ParamGroup::kFusion: return "fusion";
    case ParamGroup::kAggregation: return "aggregation";
    case ParamGroup::kPrediction: return "prediction";
    case ParamGroup::kHead1: return "head1";
    case ParamGroup::kHead2: return "head2";
    case ParamGroup::kHead3: return "head3";
    case ParamGroup::kAux1: return "aux1";
    case ParamGroup::kAux2: return "aux2";
    case ParamGroup::kAux3: return "aux3";
  }
  return "?";
}

std::size_t ParamStore::add(std::string name, ParamGroup group, bool trainable, Tensor init) {
  if (index_.count(name)) throw ValidationError("ParamStore: duplicate parameter '" + name + "'");
  const std::size_t id = params_.size();
  Tensor grad(init.shape(), 0.0);
  index_.emplace(name, id);
  params_.push_back(Parameter{std::move(name), group, trainable, std::move(init), std::move(grad)});
  return id;
}

Parameter* ParamStore::find(std::string_view name) {
  auto it = index_.find(name);
  return it == index_.end() ? nullptr : &params_[it->second];
}

const Parameter* ParamStore::find(std::string_view name) const {
  auto it = index_.find(name);
  return it == index_.end() ? nullptr : &params_[it->second];
}

Parameter& ParamStore::get(std::string_view name) {
  if (auto* p = find(name)) return *p;
  throw ValidationError("ParamStore: unknown parameter '" + std::string(name) + "'");
}

const Parameter& ParamStore::get(std::string_view name) const {
  if (const auto* p = find(name)) return *p;
  throw ValidationError("ParamStore: unknown parameter '" + std::string(name) + "'");
}

void ParamStore::zero_grad() {
  for (auto& p : params_) p.grad.fill(0.0);
}

std::size_t ParamStore::trainable_elements(GroupMask mask) const {
  std::size_t n = 0;
  for (const auto& p : params_) {
    if (p.trainable && (group_bit(p.group) & mask)) n += p.value.size();
  }
  return n;
}

}  // namespace cmcl
