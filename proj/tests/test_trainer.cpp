#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>

#include "deskpro/dataset.hpp"
#include "deskpro/errors.hpp"
#include "deskpro/retrieval.hpp"
#include "deskpro/trainer.hpp"

using namespace deskpro;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& tag) {
    path = fs::temp_directory_path() / ("deskpro_trainer_" + tag);
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

// One shared tiny dataset for the whole suite.
const LoadedDataset& tiny_data() {
  static const LoadedDataset d = [] {
    TempDir dir("data");
    GenConfig c;
    c.seed = 5;
    c.num_identities = 8;
    c.outfits_per_identity = 2;
    c.samples_per_outfit = 4;
    generate_dataset(c, dir.path);
    return load_dataset(dir.path);
  }();
  return d;
}

TrainConfig fast_config(uint64_t seed) {
  TrainConfig c;
  c.seed = seed;
  c.optimizer.steps = 25;
  c.model.cf = 8;
  c.model.embedding_dim = 8;
  c.model.face_cf = 8;
  c.model.face_embedding_dim = 8;
  return c;
}

std::vector<uint8_t> slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  REQUIRE(f.good());
  return std::vector<uint8_t>(std::istreambuf_iterator<char>(f), {});
}

}  // namespace

TEST_CASE("train config json and validation") {
  SUBCASE("roundtrip") {
    TrainConfig c = fast_config(9);
    c.loss.alpha = 0.8;
    c.ablation.face_variant = "student_plain";
    TrainConfig r = train_config_from_json(train_config_to_json(c));
    CHECK(r.seed == c.seed);
    CHECK(r.optimizer.steps == c.optimizer.steps);
    CHECK(r.loss.alpha == c.loss.alpha);
    CHECK(r.ablation.face_variant == c.ablation.face_variant);
    CHECK(r.model.cf == c.model.cf);
  }
  SUBCASE("partial json keeps defaults") {
    TrainConfig c = train_config_from_json(nlohmann::json::parse(
        R"({"optimizer": {"lr": 0.5}})"));
    CHECK(c.optimizer.lr == 0.5);
    CHECK(c.optimizer.steps == 2000);
    CHECK(c.loss.lambda_att == 7.0);
    CHECK(c.loss.epsilon == 0.1);
  }
  SUBCASE("invalid combinations") {
    TrainConfig c = fast_config(1);
    c.ablation.use_cam = false;  // att loss without cam
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c = fast_config(1);
    c.ablation.use_global = false;
    c.ablation.use_face_stream = false;
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c = fast_config(1);
    c.ablation.face_variant = "nonsense";
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c = fast_config(1);
    c.optimizer.kind = "sgd9000";
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c = fast_config(1);
    c.model.mask_resize = "bilinear";
    CHECK_THROWS_AS(c.validate(), ConfigError);
  }
  SUBCASE("dotted overrides") {
    nlohmann::ordered_json j = train_config_to_json(fast_config(1));
    apply_override(j, "optimizer.lr=0.0005");
    apply_override(j, "ablation.face_variant=teacher");
    apply_override(j, "ablation.use_cam=true");
    CHECK(j["optimizer"]["lr"] == 0.0005);
    CHECK(j["ablation"]["face_variant"] == "teacher");
    CHECK(j["ablation"]["use_cam"] == true);
    CHECK_THROWS_AS(apply_override(j, "no_equals_sign"), ConfigError);
    CHECK_THROWS_AS(apply_override(j, ".bad=1"), ConfigError);
  }
}

TEST_CASE("batch sampler") {
  const LoadedDataset& d = tiny_data();

  SUBCASE("counting and composition") {
    auto batch = sample_batch(d, 4, 2, 7, 0);
    REQUIRE(batch.size() == 8);
    std::map<int, int> per_id;
    for (int i : batch) ++per_id[d.samples[static_cast<size_t>(i)].identity_id];
    CHECK(per_id.size() == 4);
    for (const auto& [id, n] : per_id) CHECK(n == 2);
  }
  SUBCASE("deterministic per (seed, step)") {
    CHECK(sample_batch(d, 4, 4, 7, 3) == sample_batch(d, 4, 4, 7, 3));
    CHECK(sample_batch(d, 4, 4, 7, 3) != sample_batch(d, 4, 4, 7, 4));
    CHECK(sample_batch(d, 4, 4, 7, 3) != sample_batch(d, 4, 4, 8, 3));
  }
  SUBCASE("face-bearing-only batches carry faces") {
    for (int step = 0; step < 5; ++step)
      for (int i : sample_batch(d, 4, 2, 7, step, true))
        CHECK(d.samples[static_cast<size_t>(i)].face_clean.has_value());
  }
  SUBCASE("unsatisfiable composition") {
    CHECK_THROWS_AS(sample_batch(d, 100, 2, 7, 0), BatchCompositionError);
    CHECK_THROWS_AS(sample_batch(d, 4, 100, 7, 0), BatchCompositionError);
  }
  SUBCASE("epoch coverage") {
    // eligible pools per identity
    std::map<int, int> pool;
    for (int i : d.train_idx)
      ++pool[d.samples[static_cast<size_t>(i)].identity_id];
    const int p = 4, k = 2;
    const int nids = static_cast<int>(pool.size());
    int max_epochs = 0;
    for (const auto& [id, n] : pool)
      max_epochs = std::max(max_epochs, (n + k - 1) / k);
    const int steps = (nids * max_epochs + p - 1) / p;
    std::set<int> seen;
    for (int s = 0; s < steps; ++s)
      for (int i : sample_batch(d, p, k, 99, s)) seen.insert(i);
    for (int i : d.train_idx) {
      if (pool[d.samples[static_cast<size_t>(i)].identity_id] < k) continue;
      CHECK(seen.count(i) == 1);
    }
  }
}

TEST_CASE("teacher pretraining") {
  const LoadedDataset& d = tiny_data();
  TrainConfig cfg = fast_config(3);
  cfg.optimizer.steps = 60;
  TeacherResult r = pretrain_teacher(d, cfg);
  REQUIRE(r.logs.size() == 60);

  SUBCASE("loss decreases") {
    double head = 0;
    for (int i = 0; i < 10; ++i) head += r.logs[static_cast<size_t>(i)].total;
    CHECK(r.logs.back().total < head / 10);
  }
  SUBCASE("determinism") {
    TeacherResult again = pretrain_teacher(d, cfg);
    CHECK(again.teacher->param_hash() == r.teacher->param_hash());
    REQUIRE(again.logs.size() == r.logs.size());
    for (size_t i = 0; i < r.logs.size(); ++i)
      CHECK(again.logs[i].total == r.logs[i].total);
  }
  SUBCASE("held-out nearest-centroid beats chance") {
    std::map<int, std::vector<double>> centroid;
    std::map<int, int> count;
    auto embed_face = [&](const LoadedSample& s) {
      Tensor face({1, d.manifest.face_size, d.manifest.face_size, 3},
                  s.face_clean->raw());
      EmbeddingGroups g = r.teacher->infer(face, false);
      std::vector<double> v;
      for (const auto& f : g.features)
        for (int j = 0; j < f.dim(1); ++j) v.push_back(f.at2(0, j));
      return v;
    };
    for (int i : d.train_idx) {
      const auto& s = d.samples[static_cast<size_t>(i)];
      if (!s.face_clean) continue;
      auto v = embed_face(s);
      auto& c = centroid[s.identity_id];
      c.resize(v.size(), 0.0);
      for (size_t j = 0; j < v.size(); ++j) c[j] += v[j];
      ++count[s.identity_id];
    }
    for (auto& [id, c] : centroid)
      for (auto& v : c) v /= count[id];
    double correct = 0, total = 0;
    for (const auto& pool : {d.query_idx, d.gallery_idx})
      for (int i : pool) {
        const auto& s = d.samples[static_cast<size_t>(i)];
        if (!s.face_clean) continue;
        auto v = embed_face(s);
        double best = 1e300;
        int best_id = -1;
        for (const auto& [id, c] : centroid) {
          double dist = 0;
          for (size_t j = 0; j < v.size(); ++j)
            dist += (v[j] - c[j]) * (v[j] - c[j]);
          if (dist < best) best = dist, best_id = id;
        }
        correct += best_id == s.identity_id;
        total += 1;
      }
    CHECK(correct / total > 1.0 / d.num_identities);
  }
  SUBCASE("faceless dataset is rejected") {
    TempDir dir("nofaces");
    GenConfig gc;
    gc.seed = 4;
    gc.num_identities = 4;
    gc.outfits_per_identity = 2;
    gc.samples_per_outfit = 3;
    gc.faceless_fraction = 1.0;
    generate_dataset(gc, dir.path);
    LoadedDataset nd = load_dataset(dir.path);
    CHECK_THROWS_AS(pretrain_teacher(nd, cfg), DataError);
  }
}

TEST_CASE("joint training") {
  const LoadedDataset& d = tiny_data();

  SUBCASE("model-1 flags disable every face/attention term") {
    TrainConfig cfg = fast_config(11);
    cfg.ablation = {true, false, false, false, "student_plain"};
    JointResult r = train_joint(d, nullptr, cfg);
    CHECK(r.global != nullptr);
    CHECK(r.student == nullptr);
    for (const auto& l : r.logs) {
      CHECK(l.l_att == 0.0);
      CHECK(l.l_fkp == 0.0);
      CHECK(l.l_ce_s == 0.0);
      CHECK(l.l_ce_g > 0.0);
    }
    CHECK(!r.probes.att_cloth_start.has_value());
    CHECK(!r.probes.kl_start.has_value());
  }

  SUBCASE("logged total recombines per the weighted sum") {
    TrainConfig cfg = fast_config(12);
    cfg.optimizer.steps = 10;
    TeacherResult tr = pretrain_teacher(d, cfg);
    JointResult r = train_joint(d, tr.teacher.get(), cfg);
    for (const auto& l : r.logs) {
      const double recon = cfg.loss.lambda_att * l.l_att + l.l_trip +
                           cfg.loss.alpha * l.l_fkp +
                           (1 - cfg.loss.alpha) * l.l_ce_s + l.l_ce_g;
      CHECK(std::abs(recon - l.total) < 1e-9);
    }
    CHECK(r.probes.att_cloth_start.has_value());
    CHECK(r.probes.att_cloth_end.has_value());
    CHECK(r.probes.kl_start.has_value());
    CHECK(r.probes.kl_end.has_value());
  }

  SUBCASE("frozen teacher is untouched") {
    TrainConfig cfg = fast_config(13);
    cfg.optimizer.steps = 8;
    TeacherResult tr = pretrain_teacher(d, cfg);
    const uint64_t before = tr.teacher->param_hash();
    train_joint(d, tr.teacher.get(), cfg);
    CHECK(tr.teacher->param_hash() == before);
  }

  SUBCASE("distilled variants demand a teacher") {
    TrainConfig cfg = fast_config(14);
    CHECK_THROWS_AS(train_joint(d, nullptr, cfg), ConfigError);
    cfg.ablation.face_variant = "teacher";
    CHECK_THROWS_AS(train_joint(d, nullptr, cfg), ConfigError);
    cfg.ablation.face_variant = "student_plain";
    CHECK_NOTHROW(train_joint(d, nullptr, cfg));
  }

  SUBCASE("incompatible teacher rejected") {
    TrainConfig cfg = fast_config(15);
    cfg.optimizer.steps = 2;
    TrainConfig other = cfg;
    other.model.face_cf = 12;
    TeacherResult tr = pretrain_teacher(d, other);
    // same dims but different num_identities
    TempDir dir("mismatch");
    GenConfig gc;
    gc.seed = 21;
    gc.num_identities = 4;
    gc.outfits_per_identity = 2;
    gc.samples_per_outfit = 3;
    generate_dataset(gc, dir.path);
    LoadedDataset small = load_dataset(dir.path);
    CHECK_THROWS_AS(train_joint(small, tr.teacher.get(), cfg), ConfigError);
  }

  SUBCASE("student updates are independent of the global stream") {
    // with every sample face-bearing, the batches coincide and the student
    // must come out identical whether or not a global model trains alongside
    TempDir dir("allfaces");
    GenConfig gc;
    gc.seed = 8;
    gc.num_identities = 6;
    gc.outfits_per_identity = 2;
    gc.samples_per_outfit = 4;
    gc.faceless_fraction = 0.0;
    generate_dataset(gc, dir.path);
    LoadedDataset all = load_dataset(dir.path);

    TrainConfig cfg = fast_config(21);
    cfg.optimizer.steps = 12;
    TeacherResult tr = pretrain_teacher(all, cfg);
    TrainConfig solo = cfg;
    solo.ablation = {false, false, false, true, "student_distilled"};
    JointResult a = train_joint(all, tr.teacher.get(), solo);
    JointResult b = train_joint(all, tr.teacher.get(), cfg);
    REQUIRE(a.student != nullptr);
    REQUIRE(b.student != nullptr);
    CHECK(a.student->param_hash() == b.student->param_hash());
  }

  SUBCASE("determinism of checkpoints and logs") {
    TrainConfig cfg = fast_config(16);
    cfg.optimizer.steps = 8;
    TeacherResult tr = pretrain_teacher(d, cfg);
    JointResult a = train_joint(d, tr.teacher.get(), cfg);
    JointResult b = train_joint(d, tr.teacher.get(), cfg);
    CHECK(a.global->param_hash() == b.global->param_hash());
    CHECK(a.student->param_hash() == b.student->param_hash());

    TempDir dir("det");
    save_checkpoint(joint_checkpoint(a, cfg, d.manifest.dataset_seed),
                    dir.path / "a.ckpt");
    save_checkpoint(joint_checkpoint(b, cfg, d.manifest.dataset_seed),
                    dir.path / "b.ckpt");
    CHECK(slurp(dir.path / "a.ckpt") == slurp(dir.path / "b.ckpt"));

    write_metrics_log(a.logs, dir.path / "a.csv");
    write_metrics_log(b.logs, dir.path / "b.csv");
    CHECK(slurp(dir.path / "a.csv") == slurp(dir.path / "b.csv"));
  }
}

TEST_CASE("checkpoint files") {
  const LoadedDataset& d = tiny_data();
  TrainConfig cfg = fast_config(17);
  cfg.optimizer.steps = 4;
  TeacherResult tr = pretrain_teacher(d, cfg);
  TempDir dir("ckpt");

  SUBCASE("save/load/save is byte-stable and restores the model") {
    Checkpoint ck = teacher_checkpoint(*tr.teacher, cfg, d.manifest.dataset_seed);
    save_checkpoint(ck, dir.path / "t1.ckpt");
    Checkpoint back = load_checkpoint(dir.path / "t1.ckpt");
    save_checkpoint(back, dir.path / "t2.ckpt");
    CHECK(slurp(dir.path / "t1.ckpt") == slurp(dir.path / "t2.ckpt"));
    CHECK(back.metadata.at("kind") == "teacher");
    CHECK(back.metadata.at("dataset_seed").get<uint64_t>() ==
          d.manifest.dataset_seed);

    std::unique_ptr<ReidModel> m = model_from_checkpoint(back, "teacher");
    CHECK(m->param_hash() == tr.teacher->param_hash());
  }
  SUBCASE("missing model or corrupt file") {
    Checkpoint ck = teacher_checkpoint(*tr.teacher, cfg, 1);
    CHECK_THROWS_AS(model_from_checkpoint(ck, "global"), DataError);
    std::ofstream f(dir.path / "junk.ckpt", std::ios::binary);
    f << "definitely not a checkpoint";
    f.close();
    CHECK_THROWS_AS(load_checkpoint(dir.path / "junk.ckpt"), DataError);
    CHECK_THROWS_AS(load_checkpoint(dir.path / "absent.ckpt"), IoError);
  }
}

TEST_CASE("metrics log format") {
  TempDir dir("log");
  std::vector<StepLog> logs(3);
  for (int i = 0; i < 3; ++i) {
    logs[static_cast<size_t>(i)].step = i;
    logs[static_cast<size_t>(i)].total = 1.5 * i;
  }
  write_metrics_log(logs, dir.path / "m.csv");
  std::ifstream f(dir.path / "m.csv");
  std::string header;
  std::getline(f, header);
  CHECK(header == "step,l_att,l_trip,l_fkp,l_ce_s,l_ce_g,total");
  int lines = 0;
  std::string line;
  while (std::getline(f, line)) ++lines;
  CHECK(lines == 3);
}
