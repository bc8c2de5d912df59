#include "cmcl/checkpoint.hpp"

#include <fstream>
#include <sstream>

#include "cmcl/error.hpp"

namespace cmcl {

nlohmann::json params_to_json(const ParamStore& store) {
  nlohmann::json out = nlohmann::json::object();
  for (const auto& p : store) out[p.name] = {{"shape", p.value.shape()}, {"values", p.value.values()}};
  return out;
}

void params_from_json(const nlohmann::json& j, ParamStore& store) {
  if (!j.is_object()) throw ValidationError("checkpoint: parameter block must be an object");
  for (const auto& [name, entry] : j.items()) {
    Parameter* p = store.find(name);
    if (p == nullptr) throw ValidationError("checkpoint: unknown parameter '" + name + "'");
    try {
      Shape shape = entry.at("shape").get<Shape>();
      if (shape != p->value.shape()) {
        throw ValidationError("checkpoint: shape mismatch for '" + name + "': file " + shape_str(shape) + ", model " +
                              shape_str(p->value.shape()));
      }
      p->value = Tensor(std::move(shape), entry.at("values").get<std::vector<double>>());
    } catch (const nlohmann::json::exception& e) {
      throw ValidationError("checkpoint: bad entry for '" + name + "' (" + e.what() + ")");
    } catch (const ShapeError& e) {
      throw ValidationError("checkpoint: bad entry for '" + name + "' (" + e.what() + ")");
    }
  }
}

void write_json(const nlohmann::json& j, const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream f(path, std::ios::binary);
  if (!f) throw ValidationError("cannot write " + path.string());
  f << j.dump(1) << '\n';
  if (!f) throw ValidationError("write failed for " + path.string());
}

nlohmann::json read_json(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw ValidationError("cannot open " + path.string());
  std::stringstream buf;
  buf << f.rdbuf();
  try {
    return nlohmann::json::parse(buf.str());
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(path.string() + ": malformed JSON (" + e.what() + ")");
  }
}

}  // namespace cmcl
