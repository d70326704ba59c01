#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "doctest.h"
#include "flowseg/checkpoint.hpp"
#include "flowseg/commands.hpp"
#include "flowseg/data.hpp"
#include "flowseg/segeval.hpp"
#include "flowseg/vae.hpp"

using namespace flowseg;
using io::json;
namespace fs = std::filesystem;

namespace {

struct Run {
  int code;
  std::string out, err;
};

Run run_cli(std::vector<std::string> args) {
  args.insert(args.begin(), "flowseg");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  const int code = flowseg::cli::main(static_cast<int>(argv.size()), argv.data(), out, err);
  return {code, out.str(), err.str()};
}

fs::path scratch(const std::string& name) {
  const auto d = fs::temp_directory_path() / ("flowseg_test_cli_" + name);
  fs::remove_all(d);
  fs::create_directories(d);
  return d;
}

std::string write_config(const fs::path& dir, const std::string& name, const json& j) {
  io::write_json(dir / name, j);
  return (dir / name).string();
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

std::int64_t closed_form_count(std::int64_t extent, std::int64_t patch, std::int64_t stride) {
  if (extent < patch) return 0;
  const auto rem = (extent - patch) % stride;
  return (extent - patch) / stride + 1 + (rem ? 1 : 0);
}

/// Small demo section and its datasets, built once per test through the CLI.
fs::path demo_datasets(const fs::path& dir) {
  REQUIRE(run_cli({"demo-data", "--out", (dir / "demo").string(), "--config",
               write_config(dir, "demo.json", {{"height", 32}, {"width", 160}})})
              .code == 0);
  REQUIRE(run_cli({"patchify", "--out", (dir / "ds").string(), "--config",
               write_config(dir, "patch.json", {{"sections", {(dir / "demo" / "section.json").string()}}})})
              .code == 0);
  return dir / "ds";
}

json small_cnf_train(std::int64_t iterations) {
  return {{"dataset", ""},
          {"model", {{"levels", 2}, {"steps", 2}, {"hidden", 8}, {"prior_hidden", 8}, {"aux_hidden", 8}}},
          {"train", {{"iterations", iterations}, {"batch", 4}}},
          {"checkpoint_every", 4}};
}

json small_vae_train(std::int64_t iterations) {
  return {{"dataset", ""},
          {"model", {{"hidden", {32, 16, 8}}, {"latent", 4}}},
          {"train", {{"iterations", iterations}, {"warmup", 2}, {"batch", 8}}},
          {"checkpoint_every", 4}};
}

}  // namespace

TEST_CASE("usage errors exit 2") {
  const auto dir = scratch("usage");
  CHECK(run_cli({}).code == 2);
  CHECK(run_cli({"frobnicate", "--out", dir.string()}).code == 2);
  CHECK(run_cli({"patchify"}).code == 2);
  CHECK(run_cli({"train-vae", "--out", dir.string(), "--preset", "huge"}).code == 2);
  CHECK(run_cli({"train-vae", "--out", dir.string(), "--seed", "abc"}).code == 2);
  CHECK(run_cli({"train-vae", "--out", dir.string(), "--config", (dir / "missing.json").string()}).code == 2);
  const auto typo = run_cli({"train-vae", "--out", dir.string(), "--config", write_config(dir, "t.json", {{"datset", "x"}})});
  CHECK(typo.code == 2);
  CHECK(typo.err.find("datset") != std::string::npos);
  CHECK(run_cli({"train-cnf", "--out", dir.string(), "--config",
             write_config(dir, "t2.json", {{"dataset", "x"}, {"model", {{"level", 2}}}})})
            .code == 2);
  CHECK(run_cli({"patchify", "--out", dir.string(), "--config",
             write_config(dir, "o.json", {{"sections", {"a.json"}}, {"dataset", {{"generative_overlap", 1.0}}}})})
            .code == 2);
  CHECK(run_cli({"sweep", "--out", dir.string(), "--config", write_config(dir, "s.json", {{"dataset", "x"}})}).code == 2);
  std::ofstream(dir / "junk.json") << "{not json";
  CHECK(run_cli({"eval", "--out", dir.string(), "--config", (dir / "junk.json").string()}).code == 2);
  CHECK(run_cli({"eval", "--help"}).code == 0);
  fs::remove_all(dir);
}

TEST_CASE("runtime failures exit 1") {
  const auto dir = scratch("runtime");
  CHECK(run_cli({"patchify", "--out", (dir / "o").string(), "--config",
             write_config(dir, "p.json", {{"sections", {(dir / "none.json").string()}}})})
            .code == 1);
  const auto r = run_cli({"train-vae", "--out", (dir / "o").string(), "--config",
                      write_config(dir, "v.json", {{"dataset", (dir / "none").string()}})});
  CHECK(r.code == 1);
  CHECK(r.err.find("dataset not found") != std::string::npos);
  fs::remove_all(dir);
}

TEST_CASE("patchify counts match the closed form and reruns are identical") {
  const auto dir = scratch("patchify");
  const auto ds = demo_datasets(dir);
  const auto seg = io::read_json(ds / "segmentation" / "manifest.json");
  const std::int64_t P = 16, stride = 14;
  CHECK(seg["counts"]["train"] == 2 * closed_form_count(32, P, stride) * closed_form_count(96, P, stride));
  CHECK(seg["counts"]["val"] == 2 * closed_form_count(32, P, stride) * closed_form_count(32, P, stride));
  CHECK(seg["counts"]["test"] == 2 * closed_form_count(32, P, stride) * closed_form_count(32, P, stride));

  const auto gen = data::load_dataset(ds / "generative");
  for (const auto& [name, pairs] : gen.splits)
    for (const auto& p : pairs) {
      CHECK(data::salt_fraction(p.y) >= 0.1);
      CHECK(data::salt_fraction(p.y) <= 0.9);
    }

  const auto first = slurp(ds / "generative" / "manifest.json");
  REQUIRE(run_cli({"patchify", "--out", ds.string(), "--config", (dir / "patch.json").string()}).code == 0);
  CHECK(slurp(ds / "generative" / "manifest.json") == first);
  const auto cfg = io::read_json(ds / "config.json");
  CHECK(cfg["command"] == "patchify");
  CHECK(cfg["config"]["dataset"]["patch"] == 16);
  fs::remove_all(dir);
}

TEST_CASE("eval of the oracle predictor is perfect") {
  const auto dir = scratch("eval");
  const auto ds = demo_datasets(dir);
  const auto r = run_cli({"eval", "--out", (dir / "ev").string(), "--config",
                      write_config(dir, "e.json", {{"dataset", (ds / "segmentation").string()}})});
  REQUIRE(r.code == 0);
  const auto res = io::read_json(dir / "ev" / "eval.json");
  for (const char* s : {"train", "val", "test"}) CHECK(res["iou"][s] == 1.0);
  fs::remove_all(dir);
}

TEST_CASE("cnf training resumes bit-exact") {
  const auto dir = scratch("cnf_resume");
  const auto ds = demo_datasets(dir);
  auto cfg = small_cnf_train(12);
  cfg["dataset"] = (ds / "generative").string();
  const auto full = write_config(dir, "full.json", cfg);
  REQUIRE(run_cli({"train-cnf", "--out", (dir / "a").string(), "--config", full, "--seed", "3"}).code == 0);
  cfg["stop_at"] = 6;
  const auto part = write_config(dir, "part.json", cfg);
  REQUIRE(run_cli({"train-cnf", "--out", (dir / "b").string(), "--config", part, "--seed", "3"}).code == 0);
  CHECK(read_manifest(dir / "b" / "checkpoint")["iteration"] == 6);
  const auto resumed = run_cli({"train-cnf", "--out", (dir / "b").string(), "--config", full, "--seed", "3"});
  REQUIRE(resumed.code == 0);
  CHECK(json::parse(resumed.out)["start_iteration"] == 6);
  CHECK(slurp(dir / "a" / "log.jsonl") == slurp(dir / "b" / "log.jsonl"));
  CHECK(checkpoint_hash(dir / "a" / "checkpoint") == checkpoint_hash(dir / "b" / "checkpoint"));

  std::ifstream in(dir / "a" / "log.jsonl");
  std::string line;
  std::int64_t n = 0;
  while (std::getline(in, line)) {
    const auto rec = json::parse(line);
    CHECK(rec["iter"] == n++);
    for (const char* k : {"loss", "nll_bpd", "bce", "lr"}) CHECK(rec.contains(k));
  }
  CHECK(n == 12);

  REQUIRE(run_cli({"train-cnf", "--out", (dir / "c").string(), "--config", full, "--seed", "4"}).code == 0);
  CHECK(slurp(dir / "a" / "log.jsonl") != slurp(dir / "c" / "log.jsonl"));
  CHECK(run_cli({"train-cnf", "--out", (dir / "b").string(), "--config", full, "--seed", "4"}).code == 1);
  fs::remove_all(dir);
}

TEST_CASE("vae training resumes bit-exact") {
  const auto dir = scratch("vae_resume");
  const auto ds = demo_datasets(dir);
  auto cfg = small_vae_train(10);
  cfg["dataset"] = (ds / "generative").string();
  const auto full = write_config(dir, "full.json", cfg);
  REQUIRE(run_cli({"train-vae", "--out", (dir / "a").string(), "--config", full}).code == 0);
  cfg["stop_at"] = 5;
  REQUIRE(run_cli({"train-vae", "--out", (dir / "b").string(), "--config", write_config(dir, "part.json", cfg)}).code == 0);
  REQUIRE(run_cli({"train-vae", "--out", (dir / "b").string(), "--config", full}).code == 0);
  CHECK(slurp(dir / "a" / "log.jsonl") == slurp(dir / "b" / "log.jsonl"));
  const auto rec = json::parse(slurp(dir / "a" / "log.jsonl").substr(0, slurp(dir / "a" / "log.jsonl").find('\n')));
  for (const char* k : {"iter", "loss", "recon", "kl", "lr"}) CHECK(rec.contains(k));
  fs::remove_all(dir);
}

TEST_CASE("generate and sweep through the cli") {
  const auto dir = scratch("generate");
  const auto ds = demo_datasets(dir);
  auto vc = small_vae_train(4);
  vc["dataset"] = (ds / "generative").string();
  REQUIRE(run_cli({"train-vae", "--out", (dir / "vae").string(), "--config", write_config(dir, "v.json", vc)}).code == 0);
  auto cc = small_cnf_train(4);
  cc["dataset"] = (ds / "generative").string();
  REQUIRE(run_cli({"train-cnf", "--out", (dir / "cnf").string(), "--config", write_config(dir, "c.json", cc)}).code == 0);

  json gc = {{"vae_checkpoint", (dir / "vae" / "checkpoint").string()},
             {"cnf_checkpoint", (dir / "cnf" / "checkpoint").string()},
             {"count", 12},
             {"seed", 5}};
  const auto gpath = write_config(dir, "g.json", gc);
  REQUIRE(run_cli({"generate", "--out", (dir / "g1").string(), "--config", gpath}).code == 0);
  REQUIRE(run_cli({"generate", "--out", (dir / "g2").string(), "--config", gpath}).code == 0);
  const auto a = data::load_dataset(dir / "g1" / "dataset");
  const auto b = data::load_dataset(dir / "g2" / "dataset");
  REQUIRE(a.splits.at("generated").size() == 12);
  for (std::size_t i = 0; i < 12; ++i) {
    const auto& p = a.splits.at("generated")[i];
    CHECK(p.x == b.splits.at("generated")[i].x);
    CHECK(p.y == b.splits.at("generated")[i].y);
    for (std::int64_t k = 0; k < p.y.size(); ++k) CHECK((p.y[k] == 0 || p.y[k] == 1));
    for (std::int64_t k = 0; k < p.x.size(); ++k) CHECK(std::isfinite(p.x[k]));
  }
  CHECK(a.manifest["vae_checkpoint"]["hash"] == checkpoint_hash(dir / "vae" / "checkpoint"));
  CHECK(a.manifest["cnf_checkpoint"]["hash"] == checkpoint_hash(dir / "cnf" / "checkpoint"));
  CHECK(slurp(dir / "g1" / "dataset" / "manifest.json") == slurp(dir / "g2" / "dataset" / "manifest.json"));

  gc["count"] = 0;
  REQUIRE(run_cli({"generate", "--out", (dir / "g0").string(), "--config", write_config(dir, "g0.json", gc)}).code == 0);
  CHECK(data::load_dataset(dir / "g0" / "dataset").size() == 0);

  vae::VaeConfig small;
  small.patch = 8;
  small.hidden = {8, 8, 8};
  small.latent = 2;
  vae::VaeModel(small, 0).save(dir / "vae8");
  gc["vae_checkpoint"] = (dir / "vae8").string();
  const auto mismatch = run_cli({"generate", "--out", (dir / "gm").string(), "--config", write_config(dir, "gm.json", gc)});
  CHECK(mismatch.code == 1);
  CHECK(mismatch.err.find("patch size mismatch") != std::string::npos);

  const json sc = {{"dataset", (ds / "segmentation").string()},
                   {"sizes", {0, 4}},
                   {"trials", 2},
                   {"train", {{"epochs", 1}}},
                   {"unet", {{"blocks", 1}, {"filters", 4}}},
                   {"generator",
                    {{"vae_checkpoint", (dir / "vae" / "checkpoint").string()},
                     {"cnf_checkpoint", (dir / "cnf" / "checkpoint").string()}}}};
  REQUIRE(run_cli({"sweep", "--out", (dir / "sw").string(), "--config", write_config(dir, "s.json", sc)}).code == 0);
  const auto rep = io::read_json(dir / "sw" / "report.json");
  CHECK_NOTHROW(segeval::validate_sweep_report(rep));
  CHECK(rep["sizes"].size() == 2);
  CHECK(fs::exists(dir / "sw" / "report.csv"));
  CHECK(fs::exists(dir / "sw" / "models" / "size_4" / "manifest.json"));

  const json base = {{"dataset", (ds / "segmentation").string()},
                     {"sizes", {0}},
                     {"trials", 2},
                     {"train", {{"epochs", 1}}},
                     {"unet", {{"blocks", 1}, {"filters", 4}}}};
  REQUIRE(run_cli({"sweep", "--out", (dir / "sb").string(), "--config", write_config(dir, "sb.json", base)}).code == 0);
  const auto brep = io::read_json(dir / "sb" / "report.json");
  CHECK_NOTHROW(segeval::validate_sweep_report(brep));
  CHECK(brep["sizes"].size() == 1);
  CHECK(brep["best_size"] == 0);
  CHECK(brep["baseline_val_iou"] == rep["baseline_val_iou"]);
  fs::remove_all(dir);
}
