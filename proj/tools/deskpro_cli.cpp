// deskpro: desk-scale cloth-changing re-identification pipeline.
//
// Exit codes: 0 success, 1 ablation sweep contained failed rows,
// 2 config error, 3 I/O error, 4 data error, 5 protocol error,
// 6 state error, 7 batch composition error, 8 numeric error,
// 9 shape error, 70 unexpected error. Usage errors use CLI11's codes.

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "deskpro/checkpoint.hpp"
#include "deskpro/dataset.hpp"
#include "deskpro/errors.hpp"
#include "deskpro/model.hpp"
#include "deskpro/plots.hpp"
#include "deskpro/retrieval.hpp"
#include "deskpro/trainer.hpp"

namespace fs = std::filesystem;
using nlohmann::ordered_json;
using namespace deskpro;

namespace {

ordered_json read_json_file(const fs::path& path) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot open: " + path.string());
  try {
    return ordered_json::parse(f);
  } catch (const std::exception& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

// Merges optional config file, --set overrides and --seed into one json blob.
ordered_json merged_config(const std::string& config_path,
                           const std::vector<std::string>& overrides,
                           const std::optional<uint64_t>& seed) {
  ordered_json j = ordered_json::object();
  if (!config_path.empty()) j = read_json_file(config_path);
  for (const auto& kv : overrides) apply_override(j, kv);
  if (seed) j["seed"] = *seed;
  return j;
}

GenConfig gen_config_from_json(const ordered_json& j) {
  GenConfig c;
  try {
    if (j.contains("seed")) c.seed = j.at("seed");
    if (j.contains("num_identities")) c.num_identities = j.at("num_identities");
    if (j.contains("outfits_per_identity"))
      c.outfits_per_identity = j.at("outfits_per_identity");
    if (j.contains("samples_per_outfit"))
      c.samples_per_outfit = j.at("samples_per_outfit");
    if (j.contains("image_height")) c.image_height = j.at("image_height");
    if (j.contains("image_width")) c.image_width = j.at("image_width");
    if (j.contains("face_size")) c.face_size = j.at("face_size");
    if (j.contains("faceless_fraction"))
      c.faceless_fraction = j.at("faceless_fraction");
    if (j.contains("degrade_downscale"))
      c.degrade_downscale = j.at("degrade_downscale");
    if (j.contains("degrade_noise_std"))
      c.degrade_noise_std = j.at("degrade_noise_std");
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("bad dataset config: ") + e.what());
  }
  return c;
}

// Re-splits an already loaded dataset for the requested protocol.
void apply_split(LoadedDataset& data, Protocol protocol) {
  data.manifest = split_protocol(std::move(data.manifest), protocol);
  data.train_idx.clear();
  data.query_idx.clear();
  data.gallery_idx.clear();
  for (size_t i = 0; i < data.manifest.samples.size(); ++i) {
    const Split s = data.manifest.samples[i].split;
    data.samples[i].split = s;
    const int idx = static_cast<int>(i);
    if (s == Split::kTrain) data.train_idx.push_back(idx);
    else if (s == Split::kQuery) data.query_idx.push_back(idx);
    else data.gallery_idx.push_back(idx);
  }
}

Tensor batch_of_one(const Tensor& img) {
  std::vector<int> shape = {1};
  for (int i = 0; i < img.ndims(); ++i) shape.push_back(img.dim(i));
  return Tensor(shape, img.raw());
}

ordered_json probes_to_json(const ProbeStats& p) {
  auto opt = [](const std::optional<double>& v) {
    return v ? ordered_json(*v) : ordered_json(nullptr);
  };
  ordered_json j;
  j["att_cloth_start"] = opt(p.att_cloth_start);
  j["att_cloth_end"] = opt(p.att_cloth_end);
  j["att_noncloth_end"] = opt(p.att_noncloth_end);
  j["kl_start"] = opt(p.kl_start);
  j["kl_end"] = opt(p.kl_end);
  return j;
}

bool needs_teacher(const TrainConfig& cfg) {
  return cfg.ablation.use_face_stream &&
         cfg.ablation.face_variant != "student_plain";
}

std::unique_ptr<ReidModel> load_teacher(const fs::path& path) {
  const Checkpoint ck = load_checkpoint(path);
  if (ck.metadata.value("kind", "") != "teacher")
    throw DataError("not a teacher checkpoint: " + path.string());
  return model_from_checkpoint(ck, "teacher");
}

// ---- subcommands ----

int cmd_generate_data(const ordered_json& j, const fs::path& out) {
  const GenConfig cfg = gen_config_from_json(j);
  const DatasetManifest m = generate_dataset(cfg, out);
  std::printf("generated %zu samples (%d identities) in %s\n",
              m.samples.size(), m.num_identities(), out.string().c_str());
  return 0;
}

int cmd_train_teacher(const ordered_json& j, const fs::path& data_dir,
                      const fs::path& out) {
  const TrainConfig cfg = train_config_from_json(j);
  const LoadedDataset data = load_dataset(data_dir);
  TeacherResult r = pretrain_teacher(data, cfg);
  fs::create_directories(out);
  save_checkpoint(teacher_checkpoint(*r.teacher, cfg, data.manifest.dataset_seed),
                  out / "teacher.ckpt");
  write_metrics_log(r.logs, out / "teacher_metrics.csv");
  std::printf("teacher trained: %d steps, final loss %.6f -> %s\n",
              cfg.optimizer.steps, r.logs.empty() ? 0.0 : r.logs.back().total,
              (out / "teacher.ckpt").string().c_str());
  return 0;
}

int cmd_train(const ordered_json& j, const fs::path& data_dir,
              const fs::path& out, const std::string& teacher_path) {
  const TrainConfig cfg = train_config_from_json(j);
  const LoadedDataset data = load_dataset(data_dir);
  std::unique_ptr<ReidModel> teacher;
  if (!teacher_path.empty()) {
    teacher = load_teacher(teacher_path);
  } else if (needs_teacher(cfg)) {
    throw StateError("face_variant " + cfg.ablation.face_variant +
                     " needs --teacher (run train-teacher first)");
  }
  JointResult r = train_joint(data, teacher.get(), cfg);
  fs::create_directories(out);
  save_checkpoint(joint_checkpoint(r, cfg, data.manifest.dataset_seed),
                  out / "joint.ckpt");
  write_metrics_log(r.logs, out / "metrics.csv");
  {
    std::ofstream f(out / "probes.json", std::ios::binary);
    if (!f) throw IoError("cannot write probes.json");
    f << probes_to_json(r.probes).dump(1) << "\n";
  }
  std::printf("trained: %d steps, final loss %.6f -> %s\n", cfg.optimizer.steps,
              r.logs.empty() ? 0.0 : r.logs.back().total,
              (out / "joint.ckpt").string().c_str());
  return 0;
}

EvalReport evaluate_checkpoint(const fs::path& ckpt_path,
                               const std::string& teacher_path,
                               LoadedDataset& data, Protocol protocol) {
  const Checkpoint ck = load_checkpoint(ckpt_path);
  const std::string kind = ck.metadata.value("kind", "");
  const TrainConfig cfg = train_config_from_json(ck.metadata.at("train_config"));

  std::unique_ptr<ReidModel> global, face;
  EmbedOptions opts;
  opts.l2_normalize_streams = cfg.model.l2_normalize_streams;
  if (kind == "teacher") {
    face = model_from_checkpoint(ck, "teacher");
    opts.face_use_clean = true;
  } else if (kind == "joint") {
    if (ck.metadata.at("models").contains("global"))
      global = model_from_checkpoint(ck, "global");
    if (ck.metadata.at("models").contains("student"))
      face = model_from_checkpoint(ck, "student");
    if (cfg.ablation.use_face_stream && cfg.ablation.face_variant == "teacher") {
      if (teacher_path.empty())
        throw StateError("checkpoint uses the teacher at inference; pass --teacher");
      face = load_teacher(teacher_path);
      opts.face_use_clean = true;
    }
    opts.use_attention = cfg.ablation.use_cam;
  } else {
    throw DataError("unknown checkpoint kind: " + kind);
  }
  apply_split(data, protocol);
  return evaluate(data, global.get(), face.get(), opts, protocol,
                  ckpt_path.string());
}

int cmd_evaluate(const fs::path& data_dir, const fs::path& ckpt_path,
                 const std::string& teacher_path, const std::string& proto_name,
                 const fs::path& out) {
  const Protocol protocol = protocol_from_name(proto_name);
  LoadedDataset data = load_dataset(data_dir);
  const EvalReport rep =
      evaluate_checkpoint(ckpt_path, teacher_path, data, protocol);
  fs::create_directories(out);
  write_eval_report(rep, out / ("eval_" + proto_name + ".json"));
  std::printf("%s  R-1 %.4f  R-5 %.4f  R-10 %.4f  mAP %.4f  (%d queries, %d gallery)\n",
              proto_name.c_str(), rep.rank1, rep.rank5, rep.rank10, rep.map,
              rep.num_queries, rep.num_gallery);
  return 0;
}

struct PresetDef {
  std::string name;
  AblationFlags flags;
  bool eval_teacher_directly = false;  // model 6: no joint phase
};

const std::vector<PresetDef>& preset_table() {
  static const std::vector<PresetDef> t = {
      {"1", {true, false, false, false, "student_plain"}, false},
      {"2", {true, true, false, false, "student_plain"}, false},
      {"3", {true, true, true, false, "student_plain"}, false},
      {"4", {false, false, false, true, "student_plain"}, false},
      {"5", {false, false, false, true, "student_distilled"}, false},
      {"6", {false, false, false, true, "teacher"}, true},
      {"7", {true, true, true, true, "student_plain"}, false},
      {"deskpro", {true, true, true, true, "student_distilled"}, false},
      {"deskpro+", {true, true, true, true, "teacher"}, false},
  };
  return t;
}

int cmd_ablate(const ordered_json& base_json, const fs::path& data_dir,
               const fs::path& out, int n_seeds) {
  if (n_seeds < 1) throw ConfigError("--seeds must be >= 1");
  const TrainConfig base_cfg = train_config_from_json(base_json);
  const LoadedDataset data = load_dataset(data_dir);
  fs::create_directories(out);

  struct Row {
    std::string name;
    std::vector<ordered_json> runs;
    std::vector<double> rank1, map;
    std::string error;
  };
  std::vector<Row> rows;
  for (const auto& p : preset_table()) rows.push_back({p.name, {}, {}, {}, ""});

  for (int si = 0; si < n_seeds; ++si) {
    const uint64_t seed = base_cfg.seed + static_cast<uint64_t>(si);
    TrainConfig cfg = base_cfg;
    cfg.seed = seed;

    const fs::path seed_dir = out / ("seed_" + std::to_string(seed));
    fs::create_directories(seed_dir);
    std::unique_ptr<ReidModel> teacher;
    auto get_teacher = [&]() -> ReidModel* {
      if (!teacher) {
        TeacherResult tr = pretrain_teacher(data, cfg);
        save_checkpoint(
            teacher_checkpoint(*tr.teacher, cfg, data.manifest.dataset_seed),
            seed_dir / "teacher.ckpt");
        teacher = std::move(tr.teacher);
      }
      return teacher.get();
    };

    for (size_t pi = 0; pi < preset_table().size(); ++pi) {
      const PresetDef& preset = preset_table()[pi];
      Row& row = rows[pi];
      try {
        TrainConfig pc = cfg;
        pc.ablation = preset.flags;
        pc.validate();
        const fs::path run_dir =
            seed_dir / ("preset_" + std::string(preset.name == "deskpro+"
                                                    ? "deskpro_plus"
                                                    : preset.name));
        fs::create_directories(run_dir);

        EvalReport rep;
        if (preset.eval_teacher_directly) {
          get_teacher();
          EmbedOptions opts;
          opts.l2_normalize_streams = pc.model.l2_normalize_streams;
          opts.face_use_clean = true;
          LoadedDataset eval_data = data;
          apply_split(eval_data, Protocol::kCrossClothes);
          rep = evaluate(eval_data, nullptr, teacher.get(), opts,
                         Protocol::kCrossClothes,
                         (seed_dir / "teacher.ckpt").string());
        } else {
          ReidModel* t = needs_teacher(pc) ? get_teacher() : nullptr;
          JointResult r = train_joint(data, t, pc);
          const fs::path ckpt = run_dir / "joint.ckpt";
          save_checkpoint(joint_checkpoint(r, pc, data.manifest.dataset_seed),
                          ckpt);
          write_metrics_log(r.logs, run_dir / "metrics.csv");
          EmbedOptions opts;
          opts.l2_normalize_streams = pc.model.l2_normalize_streams;
          opts.use_attention = pc.ablation.use_cam;
          const ReidModel* face = r.student.get();
          if (pc.ablation.use_face_stream &&
              pc.ablation.face_variant == "teacher") {
            face = teacher.get();
            opts.face_use_clean = true;
          }
          LoadedDataset eval_data = data;
          apply_split(eval_data, Protocol::kCrossClothes);
          rep = evaluate(eval_data, r.global.get(), face, opts,
                         Protocol::kCrossClothes, ckpt.string());
          write_eval_report(rep, run_dir / "eval_cross_clothes.json");
        }
        row.rank1.push_back(rep.rank1);
        row.map.push_back(rep.map);
        ordered_json run;
        run["seed"] = seed;
        run["rank1"] = rep.rank1;
        run["map"] = rep.map;
        row.runs.push_back(run);
      } catch (const Error& e) {
        row.error = e.what();
      }
    }
  }

  auto mean_std = [](const std::vector<double>& v) {
    double m = 0;
    for (double x : v) m += x;
    m /= static_cast<double>(v.size());
    double s = 0;
    for (double x : v) s += (x - m) * (x - m);
    return std::pair<double, double>(m, std::sqrt(s / v.size()));
  };

  ordered_json report;
  report["schema_version"] = 1;
  report["num_seeds"] = n_seeds;
  report["base_seed"] = base_cfg.seed;
  report["dataset_seed"] = data.manifest.dataset_seed;
  report["presets"] = ordered_json::array();

  std::string table;
  char line[160];
  std::snprintf(line, sizeof line, "%-10s %18s %18s\n", "model",
                "R-1 (mean+/-std)", "mAP (mean+/-std)");
  table += line;
  bool any_failed = false;
  for (const Row& row : rows) {
    ordered_json pj;
    pj["name"] = row.name;
    if (!row.error.empty() ||
        row.rank1.size() != static_cast<size_t>(n_seeds)) {
      any_failed = true;
      pj["failed"] = true;
      pj["error"] = row.error;
      std::snprintf(line, sizeof line, "%-10s %18s %18s\n", row.name.c_str(),
                    "FAILED", "FAILED");
    } else {
      const auto [r1m, r1s] = mean_std(row.rank1);
      const auto [mm, ms] = mean_std(row.map);
      pj["failed"] = false;
      pj["runs"] = row.runs;
      pj["rank1_mean"] = r1m;
      pj["rank1_std"] = r1s;
      pj["map_mean"] = mm;
      pj["map_std"] = ms;
      std::snprintf(line, sizeof line, "%-10s %8.4f +/- %.4f %8.4f +/- %.4f\n",
                    row.name.c_str(), r1m, r1s, mm, ms);
    }
    table += line;
    report["presets"].push_back(pj);
  }

  std::fputs(table.c_str(), stdout);
  {
    std::ofstream f(out / "ablation.txt", std::ios::binary);
    f << table;
  }
  {
    std::ofstream f(out / "ablation.json", std::ios::binary);
    if (!f) throw IoError("cannot write ablation.json");
    f << report.dump(1) << "\n";
  }
  return any_failed ? 1 : 0;
}

int cmd_plot(const std::vector<std::string>& reports, const std::string& ckpt,
             const std::string& data_dir, int n_samples, const fs::path& out) {
  fs::create_directories(out);
  for (const auto& rp : reports) {
    const ordered_json j = read_json_file(rp);
    if (!j.contains("cmc_curve"))
      throw DataError("report has no cmc_curve: " + rp);
    const std::vector<double> curve = j.at("cmc_curve");
    write_cmc_curve(curve, out / ("cmc_" + fs::path(rp).stem().string() + ".png"));
  }
  if (!ckpt.empty()) {
    if (data_dir.empty())
      throw ConfigError("--checkpoint needs --data for attention plots");
    const Checkpoint c = load_checkpoint(ckpt);
    if (!c.metadata.contains("models") ||
        !c.metadata.at("models").contains("global"))
      throw ConfigError("checkpoint has no global stream");
    std::unique_ptr<ReidModel> global = model_from_checkpoint(c, "global");
    if (!global->config().with_cam)
      throw ConfigError("checkpoint has no attention module");
    const LoadedDataset data = load_dataset(data_dir);
    const int n =
        std::min<int>(n_samples, static_cast<int>(data.query_idx.size()));
    for (int i = 0; i < n; ++i) {
      const LoadedSample& s =
          data.samples[static_cast<size_t>(data.query_idx[i])];
      const Tensor att = global->attention_map(batch_of_one(s.image));
      const std::string tag = std::to_string(i);
      write_attention_heatmap(att, out / ("att_" + tag + ".png"));
      write_attention_overlay(s.image, att, out / ("att_overlay_" + tag + ".png"));
    }
  }
  std::printf("plots written to %s\n", out.string().c_str());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{
      "deskpro: desk-scale cloth-changing person re-identification.\n"
      "Exit codes: 0 ok, 1 failed ablation rows, 2 config, 3 io, 4 data,\n"
      "5 protocol, 6 state, 7 batch composition, 8 numeric, 9 shape."};
  app.require_subcommand(1);

  std::string config_path, data_dir, out_dir, teacher_path, ckpt_path;
  std::string proto_name = "cross_clothes";
  std::vector<std::string> overrides, report_paths;
  std::optional<uint64_t> seed;
  int n_seeds = 1, n_samples = 4;

  auto add_common = [&](CLI::App* sub, bool with_data) {
    sub->add_option("--config", config_path, "JSON config file");
    sub->add_option("--out", out_dir, "output directory")->required();
    sub->add_option("--seed", seed, "seed override");
    sub->add_option("--set", overrides, "dotted config override KEY=VALUE");
    if (with_data)
      sub->add_option("--data", data_dir, "dataset directory")->required();
  };

  CLI::App* gen = app.add_subcommand("generate-data", "render a synthetic dataset");
  add_common(gen, false);
  CLI::App* tt = app.add_subcommand("train-teacher", "pretrain the face teacher");
  add_common(tt, true);
  CLI::App* tr = app.add_subcommand("train", "joint training");
  add_common(tr, true);
  tr->add_option("--teacher", teacher_path, "teacher checkpoint");
  CLI::App* ev = app.add_subcommand("evaluate", "retrieval evaluation");
  ev->add_option("--data", data_dir, "dataset directory")->required();
  ev->add_option("--checkpoint", ckpt_path, "checkpoint to evaluate")->required();
  ev->add_option("--teacher", teacher_path, "teacher checkpoint");
  ev->add_option("--protocol", proto_name, "cross_clothes or same_clothes");
  ev->add_option("--out", out_dir, "output directory")->required();
  CLI::App* ab = app.add_subcommand("ablate", "run all ablation presets");
  add_common(ab, true);
  ab->add_option("--seeds", n_seeds, "number of seeds per preset");
  CLI::App* pl = app.add_subcommand("plot", "render report and attention plots");
  pl->add_option("--report", report_paths, "evaluation report JSON");
  pl->add_option("--checkpoint", ckpt_path, "checkpoint for attention plots");
  pl->add_option("--data", data_dir, "dataset directory");
  pl->add_option("--samples", n_samples, "attention plots to emit");
  pl->add_option("--out", out_dir, "output directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  try {
    if (gen->parsed())
      return cmd_generate_data(merged_config(config_path, overrides, seed),
                               out_dir);
    if (tt->parsed())
      return cmd_train_teacher(merged_config(config_path, overrides, seed),
                               data_dir, out_dir);
    if (tr->parsed())
      return cmd_train(merged_config(config_path, overrides, seed), data_dir,
                       out_dir, teacher_path);
    if (ev->parsed())
      return cmd_evaluate(data_dir, ckpt_path, teacher_path, proto_name,
                          out_dir);
    if (ab->parsed())
      return cmd_ablate(merged_config(config_path, overrides, seed), data_dir,
                        out_dir, n_seeds);
    if (pl->parsed())
      return cmd_plot(report_paths, ckpt_path, data_dir, n_samples, out_dir);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const IoError& e) {
    std::cerr << "io error: " << e.what() << "\n";
    return 3;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return 4;
  } catch (const ProtocolError& e) {
    std::cerr << "protocol error: " << e.what() << "\n";
    return 5;
  } catch (const StateError& e) {
    std::cerr << "state error: " << e.what() << "\n";
    return 6;
  } catch (const BatchCompositionError& e) {
    std::cerr << "batch composition error: " << e.what() << "\n";
    return 7;
  } catch (const NumericError& e) {
    std::cerr << "numeric error: " << e.what() << "\n";
    return 8;
  } catch (const ShapeError& e) {
    std::cerr << "shape error: " << e.what() << "\n";
    return 9;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 70;
  }
  return 0;
}
