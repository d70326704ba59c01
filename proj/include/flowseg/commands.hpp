#pragma once

#include <iosfwd>
#include <optional>
#include <string>

#include "flowseg/io.hpp"

namespace flowseg::cli {

/// Bad flags or an invalid config. Maps to exit code 2.
class UsageError : public Error {
 public:
  using Error::Error;
};

struct RunOptions {
  std::string command;
  io::json config = io::json::object();
  std::string preset = "desk";
  std::optional<std::uint64_t> seed;
  io::fs::path out;
};

/// Fills defaults for the command and preset, applies flag overrides, and
/// validates. Throws UsageError on unknown keys or invalid values.
io::json resolve_config(const RunOptions& opts);

/// Runs a resolved config, writing results under `out` and a summary line to
/// `log`. Writes the resolved config to out/config.json first.
io::json run_command(const std::string& command, const io::json& cfg, const io::fs::path& out, std::ostream& log);

/// Parses argv and runs. Returns 0 on success, 2 on usage errors, 1 on
/// runtime failures; messages go to `err`.
int main(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace flowseg::cli
