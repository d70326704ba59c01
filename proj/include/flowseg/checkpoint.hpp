#pragma once

#include "flowseg/autodiff.hpp"
#include "flowseg/io.hpp"
#include "flowseg/optim.hpp"

namespace flowseg {

/// Checkpoint directory:
///
///   manifest.json          {"format": 1, "kind", "architecture", "layer_order", "init_flags",
///                           "parameters": [{"name", "file", "shape"}], "optimizer": {...} | null, ...}
///   params/<name>.bin      one NdArr file per parameter
///   optimizer/<name>.m.bin / <name>.v.bin   Adam moments, when saved
///
/// Fields of `meta` are merged into the manifest. The directory is written
/// beside the target and renamed into place.
void save_checkpoint(const io::fs::path& dir, const ParameterList& params, const io::json& meta,
                     const optim::AdamState* adam = nullptr);

/// Restores parameter values (matched by name, shapes must agree) and the
/// optimizer state when `adam` is non-null and one was saved. Returns the manifest.
io::json load_checkpoint(const io::fs::path& dir, const ParameterList& params, optim::AdamState* adam = nullptr);

io::json read_manifest(const io::fs::path& dir);

/// Hash over the manifest and every parameter file.
std::string checkpoint_hash(const io::fs::path& dir);

}  // namespace flowseg
