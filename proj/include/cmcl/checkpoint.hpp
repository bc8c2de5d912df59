#pragma once

#include <filesystem>

#include <nlohmann/json.hpp>

#include "cmcl/params.hpp"

namespace cmcl {

// {"name": {"shape": [...], "values": [...]}, ...}. Doubles are written in
// shortest round-trip form, so save/load is bit-exact.
nlohmann::json params_to_json(const ParamStore& store);
// Overwrites values of parameters present in `j`; names or shapes that do not
// match the store raise ValidationError.
void params_from_json(const nlohmann::json& j, ParamStore& store);

void write_json(const nlohmann::json& j, const std::filesystem::path& path);
nlohmann::json read_json(const std::filesystem::path& path);

}  // namespace cmcl
