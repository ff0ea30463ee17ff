#pragma once

#include <filesystem>
#include <string>

#include <nlohmann/json.hpp>

#include "dsspn/dataset.hpp"
#include "dsspn/model.hpp"
#include "dsspn/tensor_io.hpp"

namespace dsspn {

inline constexpr const char* kCheckpointFormat = "dsspn-checkpoint";
inline constexpr int kCheckpointVersion = 1;

struct Checkpoint {
  NeuronGraph<float> model;
  HierarchyDocument document;
};

// Writes manifest.json plus one DSPN file per parameter into `dir`. The
// hierarchy and its dataset tables are embedded so a checkpoint is
// self-contained.
template <typename T>
void save_checkpoint(const std::filesystem::path& dir, const NeuronGraph<T>& g, const std::vector<DatasetSpec>& datasets) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create checkpoint directory " + dir.string() + ": " + ec.message());
  nlohmann::json params = nlohmann::json::object();
  for (const auto& p : g.params()) {
    const std::string file = p.name + ".dspn";
    const Shape s = p.value.shape();
    io::save_file(dir / file, io::to_file(p.value, {static_cast<std::uint32_t>(s.n), static_cast<std::uint32_t>(s.c),
                                                    static_cast<std::uint32_t>(s.h), static_cast<std::uint32_t>(s.w)}));
    params[p.name] = file;
  }
  nlohmann::json manifest{{"format", kCheckpointFormat},
                          {"version", kCheckpointVersion},
                          {"model", g.config()},
                          {"hierarchy", to_json(g.hierarchy(), datasets)},
                          {"parameters", std::move(params)}};
  write_json_file(dir / "manifest.json", manifest);
}

// Rebuilds the model from its config, then overwrites every parameter from
// disk. Missing or misshapen parameter files are errors.
inline Checkpoint load_checkpoint(const std::filesystem::path& dir) {
  const std::filesystem::path manifest_path = std::filesystem::is_directory(dir) ? dir / "manifest.json" : dir;
  const nlohmann::json j = read_json_file(manifest_path);
  const std::filesystem::path base = manifest_path.parent_path();
  if (j.value("format", std::string()) != kCheckpointFormat || j.value("version", 0) != kCheckpointVersion) {
    throw ValidationError(manifest_path.string() + " is not a version-1 checkpoint manifest");
  }
  HierarchyDocument doc = parse_hierarchy(j.at("hierarchy"));
  ModelConfig cfg;
  try {
    cfg = j.at("model").get<ModelConfig>();
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("checkpoint model config: ") + e.what());
  }
  NeuronGraph<float> g = build_model<float>(doc.hierarchy, cfg, 0);
  const auto& files = j.at("parameters");
  for (ParamId id = 0; id < g.params().size(); ++id) {
    auto& p = g.params()[id];
    if (!files.contains(p.name)) throw ValidationError("checkpoint is missing parameter " + p.name);
    const io::TensorFile tf = io::load_file(base / files.at(p.name).get<std::string>());
    const Shape s = p.value.shape();
    if (tf.extents != std::vector<std::uint32_t>{static_cast<std::uint32_t>(s.n), static_cast<std::uint32_t>(s.c),
                                                  static_cast<std::uint32_t>(s.h), static_cast<std::uint32_t>(s.w)}) {
      throw ValidationError("checkpoint parameter " + p.name + " does not have shape " + s.str());
    }
    p.value = io::from_file<float>(tf, s);
  }
  if (files.size() != g.params().size()) throw ValidationError("checkpoint holds parameters the model does not have");
  return {std::move(g), std::move(doc)};
}

}  // namespace dsspn
