#include "flowseg/commands.hpp"

#include <CLI11.hpp>

#include <cmath>
#include <fstream>
#include <iostream>
#include <map>
#include <memory>

#include "flowseg/cnf.hpp"
#include "flowseg/data.hpp"
#include "flowseg/segeval.hpp"
#include "flowseg/vae.hpp"

namespace flowseg::cli {

using io::json;
namespace fs = io::fs;

namespace {

const std::vector<std::string> kCommands{"demo-data", "patchify", "train-vae", "train-cnf", "generate", "sweep", "eval"};

bool paper(const std::string& preset) { return preset == "paper"; }

json defaults(const std::string& command, const std::string& preset) {
  const bool p = paper(preset);
  if (command == "demo-data") return {{"seed", 0}, {"height", 64}, {"width", 640}};
  if (command == "patchify") {
    data::DatasetConfig d;
    d.patch = p ? 64 : 16;
    return {{"seed", 0}, {"sections", json::array()}, {"dataset", data::to_json(d)}};
  }
  if (command == "train-vae") {
    return {{"seed", 0},
            {"dataset", ""},
            {"splits", json::array()},
            {"model", vae::to_json(p ? vae::paper_config() : vae::desk_config())},
            {"train", to_json(p ? vae::paper_train_config() : vae::desk_train_config())},
            {"checkpoint_every", 100},
            {"stop_at", nullptr}};
  }
  if (command == "train-cnf") {
    return {{"seed", 0},
            {"dataset", ""},
            {"splits", json::array()},
            {"model", cnf::to_json(p ? cnf::paper_config() : cnf::desk_config())},
            {"train", to_json(p ? cnf::paper_train_config() : cnf::desk_train_config())},
            {"checkpoint_every", 100},
            {"stop_at", nullptr}};
  }
  if (command == "generate") {
    return {{"seed", 0}, {"vae_checkpoint", ""}, {"cnf_checkpoint", ""}, {"count", 100}, {"temperature", 1.0}};
  }
  if (command == "sweep") {
    return {{"seed", 0},
            {"dataset", ""},
            {"train_split", "train"},
            {"val_split", "val"},
            {"generator", nullptr},
            {"sizes", {0, 25, 50, 100}},
            {"trials", p ? 10 : 3},
            {"train", segeval::to_json(p ? segeval::paper_seg_train_config() : segeval::desk_seg_train_config())},
            {"unet", segeval::to_json(p ? segeval::paper_unet_config() : segeval::desk_unet_config())},
            {"threads", 0}};
  }
  if (command == "eval") return {{"seed", 0}, {"dataset", ""}, {"model", "oracle"}, {"splits", json::array()}};
  throw UsageError("unknown command '" + command + "'");
}

void require_known(const json& j, const json& reference, const std::string& context) {
  if (!j.is_object()) throw UsageError(context + ": expected a JSON object");
  for (auto it = j.begin(); it != j.end(); ++it)
    if (!reference.contains(it.key())) throw UsageError(context + ": unknown key '" + it.key() + "'");
}

void require_path(const json& cfg, const char* key) {
  if (!cfg.at(key).is_string() || cfg.at(key).get<std::string>().empty()) {
    throw UsageError(std::string("config: '") + key + "' must name a path");
  }
}

bool nonnegative(const json& v) { return v.is_number_integer() && v.get<std::int64_t>() >= 0; }

void require_positive(const json& cfg, const char* key) {
  if (!cfg.at(key).is_number_integer() || cfg.at(key).get<std::int64_t>() <= 0) {
    throw UsageError(std::string("config: '") + key + "' must be a positive integer");
  }
}

json validate(const std::string& command, json cfg) {
  if (!nonnegative(cfg.at("seed"))) throw UsageError("config: 'seed' must be a nonnegative integer");
  if (command == "demo-data") {
    require_positive(cfg, "height");
    require_positive(cfg, "width");
  } else if (command == "patchify") {
    if (!cfg.at("sections").is_array() || cfg.at("sections").empty()) throw UsageError("config: 'sections' must list section descriptors");
    for (const auto& s : cfg.at("sections"))
      if (!s.is_string()) throw UsageError("config: 'sections' entries must be paths");
    cfg["dataset"] = data::to_json(data::dataset_config_from_json(cfg.at("dataset")));
  } else if (command == "train-vae" || command == "train-cnf") {
    require_path(cfg, "dataset");
    cfg["splits"] = cfg.at("splits").get<std::vector<std::string>>();
    require_positive(cfg, "checkpoint_every");
    if (!cfg.at("stop_at").is_null() && !nonnegative(cfg.at("stop_at"))) {
      throw UsageError("config: 'stop_at' must be null or a nonnegative integer");
    }
    if (command == "train-vae") {
      cfg["model"] = vae::to_json(vae::vae_config_from_json(cfg.at("model")));
    } else {
      cfg["model"] = cnf::to_json(cnf::cnf_config_from_json(cfg.at("model")));
    }
    auto tc = train_config_from_json(cfg.at("train"));
    tc.seed = cfg.at("seed").get<std::uint64_t>();
    cfg["train"] = to_json(tc);
  } else if (command == "generate") {
    require_path(cfg, "vae_checkpoint");
    require_path(cfg, "cnf_checkpoint");
    if (!nonnegative(cfg.at("count"))) throw UsageError("config: 'count' must be a nonnegative integer");
    if (!cfg.at("temperature").is_number() || !(cfg.at("temperature").get<double>() >= 0)) {
      throw UsageError("config: 'temperature' must be nonnegative");
    }
  } else if (command == "sweep") {
    require_path(cfg, "dataset");
    const auto sizes = cfg.at("sizes").get<std::vector<std::int64_t>>();
    if (sizes.empty()) throw UsageError("config: 'sizes' is empty");
    bool needs_gen = false;
    for (auto s : sizes) {
      if (s < 0) throw UsageError("config: sizes must be nonnegative");
      needs_gen = needs_gen || s > 0;
    }
    require_positive(cfg, "trials");
    if (!nonnegative(cfg.at("threads"))) throw UsageError("config: 'threads' must be a nonnegative integer");
    cfg["train"] = segeval::to_json(segeval::seg_train_config_from_json(cfg.at("train")));
    cfg["unet"] = segeval::to_json(segeval::unet_config_from_json(cfg.at("unet")));
    const auto& gen = cfg.at("generator");
    if (gen.is_null()) {
      if (needs_gen) throw UsageError("config: nonzero sizes need a 'generator'");
    } else {
      io::require_keys_subset(gen, {"vae_checkpoint", "cnf_checkpoint", "temperature", "pool"}, "generator");
      if (gen.contains("pool") == (gen.contains("vae_checkpoint") || gen.contains("cnf_checkpoint"))) {
        throw UsageError("generator: give either 'pool' or both checkpoints");
      }
      if (!gen.contains("pool") && !(gen.contains("vae_checkpoint") && gen.contains("cnf_checkpoint"))) {
        throw UsageError("generator: give both 'vae_checkpoint' and 'cnf_checkpoint'");
      }
      if (!gen.contains("pool") && !gen.contains("temperature")) cfg["generator"]["temperature"] = 1.0;
    }
  } else if (command == "eval") {
    require_path(cfg, "dataset");
    require_path(cfg, "model");
    cfg["splits"] = cfg.at("splits").get<std::vector<std::string>>();
  }
  return cfg;
}

std::string write_line(const json& j) { return j.dump(); }

std::vector<data::PatchPair> pick_splits(const data::PatchDataset& ds, const std::vector<std::string>& splits,
                                         const std::string& path) {
  if (splits.empty()) return data::all_pairs(ds);
  std::vector<data::PatchPair> out;
  for (const auto& s : splits) {
    const auto it = ds.splits.find(s);
    if (it == ds.splits.end()) throw Error("dataset " + path + " has no split '" + s + "'");
    out.insert(out.end(), it->second.begin(), it->second.end());
  }
  return out;
}

void truncate_log(const fs::path& log, std::int64_t iteration) {
  if (!fs::exists(log)) return;
  std::vector<std::string> keep;
  {
    std::ifstream in(log);
    std::string line;
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      if (json::parse(line).at("iter").get<std::int64_t>() < iteration) keep.push_back(line);
    }
  }
  std::ofstream os(log, std::ios::trunc);
  for (const auto& l : keep) os << l << '\n';
  if (!os) throw Error("cannot rewrite " + log.string());
}

json run_identity(json cfg) {
  cfg.erase("stop_at");
  return cfg;
}

/// Shared resumable loop. `step` performs one iteration and returns its log record.
template <class Model, class Trainer, class Step>
json train_loop(const json& cfg, const fs::path& out, Model& model, Trainer& trainer, Step step) {
  const fs::path ckpt = out / "checkpoint", log = out / "log.jsonl";
  const json identity = run_identity(cfg);
  if (fs::exists(ckpt / "manifest.json")) {
    const json manifest = model.load(ckpt, &trainer.adam());
    if (manifest.value("run_config", json()) != identity) {
      throw Error("checkpoint in " + ckpt.string() + " was written by a different run config");
    }
    trainer.set_iteration(manifest.at("iteration").get<std::int64_t>());
    truncate_log(log, trainer.iteration());
  } else {
    fs::remove(log);
  }
  const auto total = trainer.config().iterations;
  const auto stop = cfg.at("stop_at").is_null() ? total : std::min<std::int64_t>(total, cfg.at("stop_at").get<std::int64_t>());
  const auto every = cfg.at("checkpoint_every").get<std::int64_t>();
  const auto start = trainer.iteration();
  json last = nullptr;
  while (trainer.iteration() < stop) {
    last = step();
    io::append_jsonl(log, last);
    if (trainer.iteration() % every == 0 || trainer.iteration() == stop) {
      model.save(ckpt, &trainer.adam(), {{"iteration", trainer.iteration()}, {"run_config", identity}});
    }
  }
  if (!fs::exists(ckpt / "manifest.json")) {
    model.save(ckpt, &trainer.adam(), {{"iteration", trainer.iteration()}, {"run_config", identity}});
  }
  return {{"checkpoint", ckpt.string()}, {"start_iteration", start}, {"iteration", trainer.iteration()}, {"last", last}};
}

std::pair<NdArr, NdArr> training_pairs(const json& cfg, std::int64_t patch) {
  const auto path = cfg.at("dataset").get<std::string>();
  const auto ds = data::load_dataset(path);
  const auto pairs = pick_splits(ds, cfg.at("splits").get<std::vector<std::string>>(), path);
  if (pairs.empty()) throw Error("dataset " + path + " has no pairs in the selected splits");
  auto xy = data::stack(pairs);
  if (xy.first.dim(2) != patch || xy.first.dim(3) != patch) {
    throw Error("dataset " + path + " holds " + std::to_string(xy.first.dim(2)) + "x" + std::to_string(xy.first.dim(3)) +
                " patches, model expects " + std::to_string(patch));
  }
  return xy;
}

json cmd_demo_data(const json& cfg, const fs::path& out) {
  const auto d = data::demo_section(cfg.at("seed").get<std::uint64_t>(), cfg.at("height").get<std::int64_t>(),
                                    cfg.at("width").get<std::int64_t>());
  io::save_ndarray(out / "image.bin", d.section.image);
  io::save_ndarray(out / "velocity.bin", d.velocity);
  json splits = json::array();
  for (const auto& s : d.section.splits) splits.push_back({{"name", s.name}, {"begin", s.begin}, {"end", s.end}});
  const json desc = {{"id", d.section.id},   {"image", "image.bin"}, {"velocity", "velocity.bin"},
                     {"threshold", 4400},    {"clip_lo", 1400},      {"clip_hi", 5000},
                     {"splits", splits}};
  io::write_json(out / "section.json", desc);
  return {{"descriptor", (out / "section.json").string()}, {"salt_fraction", data::salt_fraction(d.section.mask)}};
}

json cmd_patchify(const json& cfg, const fs::path& out) {
  std::vector<data::Section> sections;
  for (const auto& p : cfg.at("sections")) {
    const fs::path path = p.get<std::string>();
    if (!fs::exists(path)) throw Error("section descriptor not found: " + path.string());
    sections.push_back(data::load_section(path));
  }
  const auto ds = data::build_datasets(sections, data::dataset_config_from_json(cfg.at("dataset")));
  data::save_dataset(out / "generative", ds.generative);
  data::save_dataset(out / "segmentation", ds.segmentation);
  json counts = {{"generative", json::object()}, {"segmentation", json::object()}};
  for (const auto& [name, pairs] : ds.generative.splits) counts["generative"][name] = pairs.size();
  for (const auto& [name, pairs] : ds.segmentation.splits) counts["segmentation"][name] = pairs.size();
  return {{"counts", counts}};
}

json cmd_train_vae(const json& cfg, const fs::path& out) {
  const auto mc = vae::vae_config_from_json(cfg.at("model"));
  const auto tc = train_config_from_json(cfg.at("train"));
  const auto ys = training_pairs(cfg, mc.patch).second;
  vae::VaeModel model(mc, tc.seed);
  vae::VaeTrainer trainer(model, tc);
  return train_loop(cfg, out, model, trainer, [&] {
    const auto s = trainer.step_from(ys);
    return json{{"iter", s.iter}, {"loss", s.loss}, {"recon", s.recon}, {"kl", s.kl}, {"lr", s.lr}};
  });
}

json cmd_train_cnf(const json& cfg, const fs::path& out) {
  const auto mc = cnf::cnf_config_from_json(cfg.at("model"));
  const auto tc = train_config_from_json(cfg.at("train"));
  if (mc.channels != 1) throw Error("train-cnf: patch datasets are single-channel, model has " + std::to_string(mc.channels));
  const auto [xs, ys] = training_pairs(cfg, mc.patch);
  cnf::CnfModel model(mc, tc.seed);
  cnf::CnfTrainer trainer(model, tc);
  return train_loop(cfg, out, model, trainer, [&] {
    const auto s = trainer.step_from(xs, ys);
    return json{{"iter", s.iter}, {"loss", s.loss}, {"nll_bpd", s.bpd}, {"bce", s.bce}, {"lr", s.lr}};
  });
}

json checkpoint_ref(const fs::path& dir) { return {{"path", dir.string()}, {"hash", checkpoint_hash(dir)}}; }

struct LoadedGenerator {
  std::unique_ptr<vae::VaeModel> vae;
  std::unique_ptr<cnf::CnfModel> cnf;
};

LoadedGenerator load_generator(const fs::path& vae_dir, const fs::path& cnf_dir) {
  for (const auto& d : {vae_dir, cnf_dir})
    if (!fs::exists(d / "manifest.json")) throw Error("checkpoint not found: " + d.string());
  const auto vc = vae::VaeModel::read_config(vae_dir);
  const auto cc = cnf::CnfModel::read_config(cnf_dir);
  if (vc.patch != cc.patch) {
    throw Error("patch size mismatch: vae checkpoint has " + std::to_string(vc.patch) + ", cnf checkpoint has " +
                std::to_string(cc.patch));
  }
  if (cc.channels != 1) throw Error("cnf checkpoint is not single-channel");
  LoadedGenerator g{std::make_unique<vae::VaeModel>(vc, 0), std::make_unique<cnf::CnfModel>(cc, 0)};
  g.vae->load(vae_dir);
  g.cnf->load(cnf_dir);
  return g;
}

json cmd_generate(const json& cfg, const fs::path& out) {
  const fs::path vae_dir = cfg.at("vae_checkpoint").get<std::string>(), cnf_dir = cfg.at("cnf_checkpoint").get<std::string>();
  auto g = load_generator(vae_dir, cnf_dir);
  const auto count = cfg.at("count").get<std::int64_t>();
  std::int64_t redrawn = 0;
  const auto pairs = segeval::generate_pairs(*g.vae, *g.cnf, count, cfg.at("temperature").get<Real>(),
                                             cfg.at("seed").get<std::uint64_t>(), &redrawn);
  for (std::int64_t i = 0; i < pairs.x.size(); ++i)
    if (!std::isfinite(pairs.x[i])) throw Error("generate: non-finite patch value");
  for (std::int64_t i = 0; i < pairs.y.size(); ++i)
    if (pairs.y[i] != 0 && pairs.y[i] != 1) throw Error("generate: non-binary mask value");
  data::PatchDataset ds;
  ds.splits["generated"] = count ? data::unstack(pairs.x, pairs.y, "generated", "generator") : std::vector<data::PatchPair>{};
  ds.manifest = {{"kind", "generated"},
                 {"vae_checkpoint", checkpoint_ref(vae_dir)},
                 {"cnf_checkpoint", checkpoint_ref(cnf_dir)},
                 {"count", count},
                 {"temperature", cfg.at("temperature")},
                 {"seed", cfg.at("seed")},
                 {"patch", g.cnf->config().patch},
                 {"redrawn", redrawn}};
  data::save_dataset(out / "dataset", ds);
  return {{"dataset", (out / "dataset").string()}, {"count", count}, {"redrawn", redrawn}};
}

segeval::PairSet pair_set(const data::PatchDataset& ds, const std::string& split, const std::string& path) {
  const auto pairs = pick_splits(ds, {split}, path);
  if (pairs.empty()) return {};
  auto [x, y] = data::stack(pairs);
  return {std::move(x), std::move(y)};
}

json cmd_sweep(const json& cfg, const fs::path& out) {
  const auto path = cfg.at("dataset").get<std::string>();
  const auto ds = data::load_dataset(path);
  const auto train = pair_set(ds, cfg.at("train_split").get<std::string>(), path);
  const auto val = pair_set(ds, cfg.at("val_split").get<std::string>(), path);
  if (val.size() == 0) throw Error("sweep: validation split is empty");
  segeval::SweepConfig sc;
  sc.sizes = cfg.at("sizes").get<std::vector<std::int64_t>>();
  sc.trials = cfg.at("trials").get<std::int64_t>();
  sc.train = segeval::seg_train_config_from_json(cfg.at("train"));
  sc.unet = segeval::unet_config_from_json(cfg.at("unet"));
  sc.seed = cfg.at("seed").get<std::uint64_t>();
  sc.threads = cfg.at("threads").get<std::int64_t>();

  LoadedGenerator models;
  segeval::Generator gen = [](std::int64_t count, std::uint64_t) -> segeval::PairSet {
    if (count) throw Error("sweep: no generator configured");
    return {};
  };
  const json& g = cfg.at("generator");
  json generator_ref = nullptr;
  if (!g.is_null() && g.contains("pool")) {
    const auto pool_path = g.at("pool").get<std::string>();
    const auto pool = data::load_dataset(pool_path);
    const auto pairs = data::all_pairs(pool);
    if (!pairs.empty()) {
      auto [x, y] = data::stack(pairs);
      gen = segeval::pool_generator({std::move(x), std::move(y)});
    }
    generator_ref = {{"pool", pool_path}, {"size", pairs.size()}};
  } else if (!g.is_null()) {
    const fs::path vd = g.at("vae_checkpoint").get<std::string>(), cd = g.at("cnf_checkpoint").get<std::string>();
    models = load_generator(vd, cd);
    gen = segeval::model_generator(*models.vae, *models.cnf, g.at("temperature").get<Real>());
    generator_ref = {{"vae_checkpoint", checkpoint_ref(vd)}, {"cnf_checkpoint", checkpoint_ref(cd)}};
  }
  const auto results = segeval::augmentation_sweep(train, val, gen, sc, out / "models");
  json report = segeval::sweep_report(results);
  segeval::validate_sweep_report(report);
  report["generator"] = generator_ref;
  io::write_json(out / "report.json", report);
  std::ofstream(out / "report.csv") << segeval::sweep_csv(results);
  return {{"report", (out / "report.json").string()},
          {"baseline_val_iou", report.at("baseline_val_iou")},
          {"best_size", report.at("best_size")}};
}

json cmd_eval(const json& cfg, const fs::path& out) {
  const auto path = cfg.at("dataset").get<std::string>();
  const auto ds = data::load_dataset(path);
  const auto model_path = cfg.at("model").get<std::string>();
  std::optional<segeval::UNet> model;
  if (model_path != "oracle") {
    if (!fs::exists(fs::path(model_path) / "manifest.json")) throw Error("model checkpoint not found: " + model_path);
    model.emplace(segeval::unet_config_from_json(read_manifest(model_path).at("architecture")), 0);
    model->load(model_path);
  }
  auto splits = cfg.at("splits").get<std::vector<std::string>>();
  if (splits.empty())
    for (const auto& [name, pairs] : ds.splits) splits.push_back(name);
  json ious = json::object();
  for (const auto& s : splits) {
    const auto set = pair_set(ds, s, path);
    if (set.size() == 0) {
      ious[s] = nullptr;
      continue;
    }
    ious[s] = model ? segeval::evaluate(*model, set) : segeval::iou_at_threshold(set.y, set.y);
  }
  const json result = {{"model", model_path}, {"iou", ious}};
  io::write_json(out / "eval.json", result);
  return result;
}

}  // namespace

json resolve_config(const RunOptions& opts) {
  if (opts.preset != "desk" && opts.preset != "paper") throw UsageError("preset must be 'desk' or 'paper'");
  json cfg = defaults(opts.command, opts.preset);
  try {
    require_known(opts.config, cfg, "config");
    for (const char* sub : {"dataset", "model", "train", "unet"}) {
      if (opts.config.contains(sub) && opts.config.at(sub).is_object() && cfg.at(sub).is_object()) {
        require_known(opts.config.at(sub), cfg.at(sub), std::string("config.") + sub);
      }
    }
    json merged = cfg;
    for (auto it = opts.config.begin(); it != opts.config.end(); ++it) {
      if (it.value().is_object() && merged.at(it.key()).is_object()) {
        merged[it.key()].update(it.value());
      } else {
        merged[it.key()] = it.value();
      }
    }
    if (opts.seed) merged["seed"] = *opts.seed;
    return validate(opts.command, merged);
  } catch (const UsageError&) {
    throw;
  } catch (const std::exception& e) {
    throw UsageError(e.what());
  }
}

json run_command(const std::string& command, const json& cfg, const fs::path& out, std::ostream& log) {
  fs::create_directories(out);
  io::write_json(out / "config.json", {{"command", command}, {"config", cfg}});
  json summary;
  if (command == "demo-data") summary = cmd_demo_data(cfg, out);
  else if (command == "patchify") summary = cmd_patchify(cfg, out);
  else if (command == "train-vae") summary = cmd_train_vae(cfg, out);
  else if (command == "train-cnf") summary = cmd_train_cnf(cfg, out);
  else if (command == "generate") summary = cmd_generate(cfg, out);
  else if (command == "sweep") summary = cmd_sweep(cfg, out);
  else if (command == "eval") summary = cmd_eval(cfg, out);
  else throw UsageError("unknown command '" + command + "'");
  log << write_line(summary) << std::endl;
  return summary;
}

int main(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"flowseg: conditional flow and VAE data augmentation for salt segmentation"};
  app.require_subcommand(1, 1);
  struct Flags {
    std::string config, preset = "desk", out;
    std::optional<std::uint64_t> seed;
  };
  std::map<std::string, Flags> flags;
  for (const auto& name : kCommands) {
    auto* sub = app.add_subcommand(name);
    auto& f = flags[name];
    sub->add_option("--config", f.config, "JSON config file")->check(CLI::ExistingFile);
    sub->add_option("--seed", f.seed, "Random seed");
    sub->add_option("--out", f.out, "Output directory")->required();
    sub->add_option("--preset", f.preset, "Preset")->check(CLI::IsMember({"desk", "paper"}));
  }
  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e, out, err) == 0 ? 0 : 2;
  }
  const auto* sub = app.get_subcommands().front();
  const auto& f = flags.at(sub->get_name());
  try {
    RunOptions opts;
    opts.command = sub->get_name();
    opts.preset = f.preset;
    opts.seed = f.seed;
    opts.out = f.out;
    if (!f.config.empty()) {
      try {
        opts.config = io::read_json(f.config);
      } catch (const std::exception& e) {
        throw UsageError(std::string("cannot read config: ") + e.what());
      }
    }
    const json cfg = resolve_config(opts);
    run_command(opts.command, cfg, opts.out, out);
    return 0;
  } catch (const UsageError& e) {
    err << "usage error: " << e.what() << std::endl;
    return 2;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << std::endl;
    return 1;
  }
}

}  // namespace flowseg::cli
