#include "flowseg/io.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <sstream>

namespace flowseg::io {

static_assert(std::endian::native == std::endian::little, "NdArr files assume a little-endian host");

namespace {

constexpr char kMagic[8] = {'F', 'S', 'N', 'D', 'A', 'R', 'R', '1'};

template <class T>
void read_values(std::istream& in, NdArr& out, const fs::path& path) {
  std::vector<T> buf(static_cast<std::size_t>(out.size()));
  in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size() * sizeof(T)));
  if (!in) throw Error("load_ndarray: truncated data in " + path.string());
  for (std::size_t i = 0; i < buf.size(); ++i) out[static_cast<std::int64_t>(i)] = static_cast<Real>(buf[i]);
}

}  // namespace

const char* native_dtype() { return sizeof(Real) == 8 ? "f64" : "f32"; }

void save_ndarray(const fs::path& path, const NdArr& a) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  const std::string header = json{{"dtype", native_dtype()}, {"shape", a.shape()}}.dump();
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("save_ndarray: cannot open " + path.string());
  const std::uint64_t len = header.size();
  out.write(kMagic, sizeof kMagic);
  out.write(reinterpret_cast<const char*>(&len), sizeof len);
  out.write(header.data(), static_cast<std::streamsize>(header.size()));
  out.write(reinterpret_cast<const char*>(a.data()), static_cast<std::streamsize>(a.size() * sizeof(Real)));
  if (!out) throw Error("save_ndarray: write failed for " + path.string());
}

NdArr load_ndarray(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("load_ndarray: cannot open " + path.string());
  char magic[8];
  std::uint64_t len = 0;
  in.read(magic, sizeof magic);
  in.read(reinterpret_cast<char*>(&len), sizeof len);
  if (!in || std::memcmp(magic, kMagic, sizeof magic) != 0) throw Error("load_ndarray: bad magic in " + path.string());
  if (len > (1u << 20)) throw Error("load_ndarray: implausible header length in " + path.string());
  std::string header(len, '\0');
  in.read(header.data(), static_cast<std::streamsize>(len));
  if (!in) throw Error("load_ndarray: truncated header in " + path.string());
  json h;
  try {
    h = json::parse(header);
  } catch (const json::exception& e) {
    throw Error("load_ndarray: malformed header in " + path.string() + ": " + e.what());
  }
  const auto dtype = h.at("dtype").get<std::string>();
  NdArr out(h.at("shape").get<Shape>());
  if (dtype == "f64") {
    read_values<double>(in, out, path);
  } else if (dtype == "f32") {
    read_values<float>(in, out, path);
  } else {
    throw Error("load_ndarray: unsupported dtype '" + dtype + "' in " + path.string());
  }
  return out;
}

std::string bytes_hash(const std::string& bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << h;
  return os.str();
}

std::string file_hash(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("file_hash: cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return bytes_hash(ss.str());
}

json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open " + path.string());
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw Error("malformed JSON in " + path.string() + ": " + e.what());
  }
}

void write_json(const fs::path& path, const json& j) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error("cannot write " + path.string());
  out << j.dump(2) << '\n';
}

void append_jsonl(const fs::path& path, const json& j) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::app);
  if (!out) throw Error("cannot append to " + path.string());
  out << j.dump() << '\n';
}


void require_keys_subset(const json& j, std::initializer_list<const char*> allowed, const std::string& context) {
  if (!j.is_object()) throw Error(context + ": expected a JSON object");
  for (const auto& [key, value] : j.items()) {
    bool ok = false;
    for (const char* a : allowed) ok = ok || key == a;
    if (!ok) throw Error(context + ": unknown key '" + key + "'");
  }
}

}  // namespace flowseg::io
