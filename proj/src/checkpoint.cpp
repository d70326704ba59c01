#include "flowseg/checkpoint.hpp"

#include <set>

namespace flowseg {

namespace fs = io::fs;
using io::json;

void save_checkpoint(const fs::path& dir, const ParameterList& params, const json& meta,
                     const optim::AdamState* adam) {
  fs::path tmp = dir;
  tmp += ".tmp";
  fs::remove_all(tmp);
  fs::create_directories(tmp / "params");

  json manifest = meta;
  manifest["format"] = 1;
  json plist = json::array();
  std::set<std::string> seen;
  for (const auto* p : params) {
    if (!seen.insert(p->name).second) throw Error("save_checkpoint: duplicate parameter name '" + p->name + "'");
    const std::string file = "params/" + p->name + ".bin";
    io::save_ndarray(tmp / file, p->value);
    plist.push_back({{"name", p->name}, {"file", file}, {"shape", p->value.shape()}});
  }
  manifest["parameters"] = plist;
  if (adam) {
    fs::create_directories(tmp / "optimizer");
    for (std::size_t k = 0; k < params.size(); ++k) {
      io::save_ndarray(tmp / "optimizer" / (params[k]->name + ".m.bin"), adam->m.at(k));
      io::save_ndarray(tmp / "optimizer" / (params[k]->name + ".v.bin"), adam->v.at(k));
    }
    manifest["optimizer"] = {{"kind", "adam"},
                             {"beta1", adam->beta1},
                             {"beta2", adam->beta2},
                             {"eps", adam->eps},
                             {"step", adam->step}};
  } else {
    manifest["optimizer"] = nullptr;
  }
  io::write_json(tmp / "manifest.json", manifest);
  fs::remove_all(dir);
  if (dir.has_parent_path()) fs::create_directories(dir.parent_path());
  fs::rename(tmp, dir);
}

json read_manifest(const fs::path& dir) {
  if (!fs::exists(dir / "manifest.json")) throw Error("checkpoint not found: " + dir.string());
  return io::read_json(dir / "manifest.json");
}

json load_checkpoint(const fs::path& dir, const ParameterList& params, optim::AdamState* adam) {
  json manifest = read_manifest(dir);
  std::map<std::string, json> by_name;
  for (const auto& e : manifest.at("parameters")) by_name[e.at("name").get<std::string>()] = e;
  if (by_name.size() != params.size()) {
    throw Error("load_checkpoint: " + dir.string() + " holds " + std::to_string(by_name.size()) +
                " parameters, model expects " + std::to_string(params.size()));
  }
  for (auto* p : params) {
    auto it = by_name.find(p->name);
    if (it == by_name.end()) throw Error("load_checkpoint: missing parameter '" + p->name + "' in " + dir.string());
    NdArr v = io::load_ndarray(dir / it->second.at("file").get<std::string>());
    if (v.shape() != p->value.shape()) {
      throw ShapeError("load_checkpoint: parameter '" + p->name + "' has shape " + shape_str(v.shape()) +
                       ", model expects " + shape_str(p->value.shape()));
    }
    p->value = std::move(v);
    p->zero_grad();
  }
  if (adam && manifest.contains("optimizer") && !manifest["optimizer"].is_null()) {
    const json& o = manifest["optimizer"];
    optim::AdamState s(params);
    s.beta1 = o.at("beta1").get<Real>();
    s.beta2 = o.at("beta2").get<Real>();
    s.eps = o.at("eps").get<Real>();
    s.step = o.at("step").get<std::int64_t>();
    for (std::size_t k = 0; k < params.size(); ++k) {
      s.m[k] = io::load_ndarray(dir / "optimizer" / (params[k]->name + ".m.bin"));
      s.v[k] = io::load_ndarray(dir / "optimizer" / (params[k]->name + ".v.bin"));
    }
    *adam = std::move(s);
  }
  return manifest;
}

std::string checkpoint_hash(const fs::path& dir) {
  json manifest = read_manifest(dir);
  std::string acc = io::file_hash(dir / "manifest.json");
  for (const auto& e : manifest.at("parameters")) acc += io::file_hash(dir / e.at("file").get<std::string>());
  return io::bytes_hash(acc);
}

}  // namespace flowseg
