#pragma once

#include <filesystem>
#include <string>

#include "json.hpp"

#include "flowseg/ndarray.hpp"

namespace flowseg::io {

namespace fs = std::filesystem;
using json = nlohmann::json;

/// NdArr file layout (all integers little-endian):
///
///   offset 0   8 bytes  magic "FSNDARR1"
///   offset 8   u64      header length L
///   offset 16  L bytes  UTF-8 JSON {"dtype": "f64" | "f32", "shape": [d0, d1, ...]}
///   offset 16+L         prod(shape) IEEE-754 values of dtype, row-major
///
/// Files are written in the build's Real precision; either dtype loads.
void save_ndarray(const fs::path& path, const NdArr& a);
NdArr load_ndarray(const fs::path& path);

const char* native_dtype();

/// 64-bit FNV-1a of a file's bytes, as 16 lowercase hex digits.
std::string file_hash(const fs::path& path);
std::string bytes_hash(const std::string& bytes);

json read_json(const fs::path& path);
/// Pretty-printed with a trailing newline; keys sorted, so output is stable.
void write_json(const fs::path& path, const json& j);
void append_jsonl(const fs::path& path, const json& j);


/// Throws Error naming the first key of `j` not listed in `allowed`.
void require_keys_subset(const json& j, std::initializer_list<const char*> allowed, const std::string& context);

}  // namespace flowseg::io
