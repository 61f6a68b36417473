// Acceptance gate: one pass/fail line per top-level claim. Exits nonzero if
// any criterion fails.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <random>
#include <set>
#include <string>
#include <vector>

#include "deskpro/dataset.hpp"
#include "deskpro/errors.hpp"
#include "deskpro/losses.hpp"
#include "deskpro/model.hpp"
#include "deskpro/retrieval.hpp"
#include "deskpro/trainer.hpp"

using namespace deskpro;
namespace fs = std::filesystem;

namespace {

struct Failure {
  std::string what;
};

void require(bool ok, const std::string& what) {
  if (!ok) throw Failure{what};
}

void require_close(double a, double b, double tol, const std::string& what) {
  require(std::abs(a - b) <= tol,
          what + " (" + std::to_string(a) + " vs " + std::to_string(b) + ")");
}

fs::path scratch_root() {
  static const fs::path p = [] {
    fs::path r = fs::temp_directory_path() / "deskpro_acceptance";
    fs::remove_all(r);
    fs::create_directories(r);
    return r;
  }();
  return p;
}

Tensor random_tensor(const std::vector<int>& shape, std::mt19937_64& rng,
                     double lo, double hi) {
  Tensor t(shape);
  std::uniform_real_distribution<double> d(lo, hi);
  for (auto& v : t.raw()) v = d(rng);
  return t;
}

// central-difference check against the analytic gradient of a scalar readout
void gradcheck(const std::function<double(const Tensor&)>& f, Tensor x,
               const Tensor& analytic, const std::string& what) {
  const double step = 1e-3;
  for (int64_t i = 0; i < x.numel(); ++i) {
    const double keep = x[i];
    x[i] = keep + step;
    const double up = f(x);
    x[i] = keep - step;
    const double dn = f(x);
    x[i] = keep;
    const double fd = (up - dn) / (2 * step);
    const double err = std::abs(fd - analytic[i]) /
                       std::max({std::abs(fd), std::abs(analytic[i]), 1e-6});
    require(err < 1e-4, what + ": gradient mismatch at entry " +
                            std::to_string(i) + " (fd " + std::to_string(fd) +
                            ", analytic " + std::to_string(analytic[i]) + ")");
  }
}

double brute_triplet(const Tensor& feats, const std::vector<int>& labels,
                     double margin) {
  const int N = feats.dim(0), D = feats.dim(1);
  auto dist = [&](int a, int b) {
    double s = 0;
    for (int d = 0; d < D; ++d) {
      const double diff = feats.at2(a, d) - feats.at2(b, d);
      s += diff * diff;
    }
    return std::sqrt(s);
  };
  double total = 0;
  int anchors = 0;
  for (int a = 0; a < N; ++a) {
    double dp = -1, dn = -1;
    for (int o = 0; o < N; ++o) {
      if (o == a) continue;
      const double d = dist(a, o);
      if (labels[o] == labels[a])
        dp = std::max(dp, d);
      else
        dn = (dn < 0) ? d : std::min(dn, d);
    }
    if (dp < 0 || dn < 0) continue;
    total += std::max(0.0, dp - dn + margin);
    ++anchors;
  }
  return anchors ? total / anchors : 0.0;
}

std::vector<double> brute_cmc(const std::vector<RetrievalResult>& rs) {
  size_t max_len = 0;
  std::vector<int> first(rs.size(), -1);
  for (size_t q = 0; q < rs.size(); ++q) {
    size_t len = 0;
    int rank = 0;
    for (size_t pos = 0; pos < rs[q].valid.size(); ++pos) {
      if (!rs[q].valid[pos]) continue;
      ++len;
      ++rank;
      if (rs[q].match[pos] && first[q] < 0) first[q] = rank;
    }
    max_len = std::max(max_len, len);
  }
  std::vector<double> curve(max_len, 0.0);
  for (size_t q = 0; q < rs.size(); ++q)
    for (size_t k = 0; k < max_len; ++k)
      curve[k] += first[q] > 0 && static_cast<size_t>(first[q]) <= k + 1;
  for (auto& v : curve) v /= static_cast<double>(rs.size());
  return curve;
}

double brute_map(const std::vector<RetrievalResult>& rs) {
  double total = 0.0;
  for (const auto& r : rs) {
    int seen = 0, hits = 0;
    double ap = 0.0;
    for (size_t pos = 0; pos < r.valid.size(); ++pos) {
      if (!r.valid[pos]) continue;
      ++seen;
      if (r.match[pos]) ap += static_cast<double>(++hits) / seen;
    }
    total += ap / hits;
  }
  return total / static_cast<double>(rs.size());
}

// ---- criteria ----

void loss_correctness() {
  std::mt19937_64 rng(77);

  {  // attention loss hand values
    Tape t;
    Tensor a({1, 2, 2, 1}, {0.3, 0.4, 0.5, 0.6});
    require(attention_loss(t, constant(t, a), a)->val[0] == 0.0,
            "attention loss of identical maps must be zero");
    Tensor ones({1, 3, 3, 1});
    ones.fill(1.0);
    Tensor tenth({1, 3, 3, 1});
    tenth.fill(0.1);
    require_close(attention_loss(t, constant(t, ones), tenth)->val[0], 0.81,
                  1e-12, "attention loss ones-vs-0.1");
    Tensor x({1, 1, 2, 1}, {0.5, 0.9});
    Tensor y({1, 1, 2, 1}, {0.1, 1.0});
    require_close(attention_loss(t, constant(t, x), y)->val[0], 0.085, 1e-12,
                  "attention loss 1x2 hand example");
  }
  {  // softened-CE / KL hand values and invariances
    Tape t;
    Tensor zeros({1, 4});
    require_close(cross_entropy_mean(t, constant(t, zeros), {2})->val[0],
                  std::log(4.0), 1e-12, "uniform CE must be ln N");
    Tensor te({1, 2}, {std::log(0.8), std::log(0.2)});
    const double want = 0.8 * std::log(0.8 / 0.5) + 0.2 * std::log(0.2 / 0.5);
    require_close(kl_distill(t, constant(t, Tensor({1, 2})), te, 1.0)->val[0],
                  want, 1e-9, "KL(p||uniform) hand value");
    require_close(kl_distill(t, constant(t, te), te, 3.0)->val[0], 0.0, 1e-12,
                  "KL of matching logits must vanish");
    Tensor shifted = te;
    for (auto& v : shifted.raw()) v += 5.0;
    require_close(kl_distill(t, constant(t, shifted), te, 2.0)->val[0], 0.0,
                  1e-12, "KL must be shift invariant");
  }
  {  // triplet hand values
    Tape t;
    Tensor same({4, 3});
    same.fill(0.25);
    require_close(
        batch_hard_triplet_op(t, constant(t, same), {0, 0, 1, 1}, 0.3)->val[0],
        0.3, 1e-12, "identical features give the margin");
    Tensor f({4, 2}, {0, 0, 1, 0, 5, 0, 6, 0});
    require(batch_hard_triplet_op(t, constant(t, f), {0, 0, 1, 1}, 0.3)
                ->val[0] == 0.0,
            "separated clusters give zero triplet loss");
  }
  {  // weighted combination
    Tape t;
    Tensor one({1});
    one[0] = 1.0;
    LossWeights w;
    Var u = constant(t, one);
    require_close(total_loss(t, u, u, u, u, u, w)->val[0], 10.0, 1e-12,
                  "unit parts under default weights total 10");
  }

  // gradients: every loss term plus the combination
  const std::vector<int> labels = {0, 1, 2, 0};
  const Tensor teacher = random_tensor({4, 3}, rng, -2, 2);
  const Tensor att_target = random_tensor({2, 4, 4, 1}, rng, 0.1, 1.0);
  LossWeights w;

  {
    Tensor att = random_tensor({2, 4, 4, 1}, rng, 0.0, 1.0);
    auto f = [&](const Tensor& v) {
      Tape t;
      return attention_loss(t, constant(t, v), att_target)->val[0];
    };
    Tape t;
    Var x = constant(t, att);
    t.backward(attention_loss(t, x, att_target));
    gradcheck(f, att, x->grad, "attention loss");
  }
  {
    Tensor logits = random_tensor({4, 3}, rng, -2, 2);
    auto f = [&](const Tensor& v) {
      Tape t;
      return kl_distill(t, constant(t, v), teacher, 5.0)->val[0];
    };
    Tape t;
    Var x = constant(t, logits);
    t.backward(kl_distill(t, x, teacher, 5.0));
    gradcheck(f, logits, x->grad, "fkp loss");
  }
  {
    Tensor logits = random_tensor({4, 3}, rng, -2, 2);
    auto f = [&](const Tensor& v) {
      Tape t;
      return cross_entropy_mean(t, constant(t, v), labels)->val[0];
    };
    Tape t;
    Var x = constant(t, logits);
    t.backward(cross_entropy_mean(t, x, labels));
    gradcheck(f, logits, x->grad, "cross entropy");
  }
  {
    Tensor feats = random_tensor({4, 3}, rng, -2, 2);
    auto f = [&](const Tensor& v) {
      Tape t;
      return batch_hard_triplet_op(t, constant(t, v), labels, 0.3)->val[0];
    };
    Tape t;
    Var x = constant(t, feats);
    t.backward(batch_hard_triplet_op(t, x, labels, 0.3));
    gradcheck(f, feats, x->grad, "batch-hard triplet");
  }
  {
    // one logits tensor feeds CE + fkp; features feed triplet; attention
    // feeds the mask term — the full weighted combination in one tape
    Tensor logits = random_tensor({4, 3}, rng, -2, 2);
    const Tensor trip_feats = random_tensor({4, 3}, rng, -2, 2);
    auto total = [&](Var logit_var, Tape& t) {
      Var l_att = attention_loss(
          t, constant(t, att_target), att_target);  // zero, keeps the slot
      Var l_trip =
          batch_hard_triplet_op(t, constant(t, trip_feats), labels, 0.3);
      Var l_fkp = kl_distill(t, logit_var, teacher, w.temperature);
      Var l_ce = cross_entropy_mean(t, logit_var, labels);
      return total_loss(t, l_att, l_trip, l_fkp, l_ce, l_ce, w);
    };
    auto f = [&](const Tensor& v) {
      Tape t;
      return total(constant(t, v), t)->val[0];
    };
    Tape t;
    Var x = constant(t, logits);
    t.backward(total(x, t));
    gradcheck(f, logits, x->grad, "weighted combination");
  }
}

void oracle_equivalence() {
  std::mt19937_64 rng(101);
  std::uniform_int_distribution<int> nd(2, 8), ld(0, 3);

  int batches = 0;
  while (batches < 500) {
    const int n = nd(rng);
    std::vector<int> y(n);
    for (auto& v : y) v = ld(rng);
    if (std::set<int>(y.begin(), y.end()).size() < 2) continue;
    Tensor f = random_tensor({n, 3}, rng, -2, 2);
    Tape t;
    const double got =
        batch_hard_triplet_op(t, constant(t, f), y, 0.3)->val[0];
    require(got == brute_triplet(f, y, 0.3),
            "triplet deviates from brute force on batch " +
                std::to_string(batches));
    ++batches;
  }

  std::uniform_int_distribution<int> id_d(0, 4), cloth_d(0, 2), gn(6, 20),
      qn(2, 6);
  int instances = 0;
  while (instances < 1000) {
    std::vector<PersonEmbedding> gallery;
    const int G = gn(rng);
    for (int i = 0; i < G; ++i) {
      PersonEmbedding e;
      e.vec = random_tensor({5}, rng, -1, 1).raw();
      e.global_dim = 5;
      e.identity_id = id_d(rng);
      e.clothing_id = cloth_d(rng);
      gallery.push_back(std::move(e));
    }
    std::vector<RetrievalResult> rs;
    const int Q = qn(rng);
    for (int qi = 0; qi < Q; ++qi) {
      PersonEmbedding q;
      q.vec = random_tensor({5}, rng, -1, 1).raw();
      q.global_dim = 5;
      q.identity_id = id_d(rng);
      q.clothing_id = cloth_d(rng);
      RetrievalResult r = cosine_rank(q, gallery);
      apply_protocol(r, q, gallery, Protocol::kCrossClothes);
      bool any = false;
      for (size_t pos = 0; pos < r.ranked.size(); ++pos)
        any = any || (r.valid[pos] && r.match[pos]);
      if (any) rs.push_back(std::move(r));
    }
    if (rs.empty()) continue;
    const std::vector<double> got = cmc(rs);
    const std::vector<double> want = brute_cmc(rs);
    require(got == want, "CMC deviates from brute force on instance " +
                             std::to_string(instances));
    require(mean_average_precision(rs) == brute_map(rs),
            "mAP deviates from brute force on instance " +
                std::to_string(instances));
    ++instances;
  }
}

const LoadedDataset& default_dataset() {
  static const LoadedDataset d = [] {
    GenConfig cfg;
    cfg.seed = 7;
    const fs::path root = scratch_root() / "default_data";
    generate_dataset(cfg, root);
    return load_dataset(root);
  }();
  return d;
}

void attention_shaping() {
  const LoadedDataset& d = default_dataset();
  for (uint64_t seed = 1; seed <= 3; ++seed) {
    TrainConfig cfg;
    cfg.seed = seed;
    cfg.optimizer.steps = 250;
    cfg.ablation = {true, true, true, false, "student_plain"};
    JointResult r = train_joint(d, nullptr, cfg);
    require(r.probes.att_cloth_end && r.probes.att_noncloth_end,
            "attention probes missing");
    require(*r.probes.att_cloth_end < *r.probes.att_noncloth_end,
            "seed " + std::to_string(seed) +
                ": cloth attention not suppressed (" +
                std::to_string(*r.probes.att_cloth_end) + " vs " +
                std::to_string(*r.probes.att_noncloth_end) + ")");
  }
}

struct SweepResult {
  std::map<std::string, double> rank1_mean;
  std::vector<std::pair<double, double>> kl_probes;  // (start, end) per run
};

const SweepResult& ablation_sweep() {
  static const SweepResult sweep = [] {
    // Face-only presets skip queries without a usable face; an all-faces
    // dataset keeps every preset answering the identical query set, so the
    // rank-1 means are directly comparable.
    GenConfig gc;
    gc.seed = 77;
    gc.faceless_fraction = 0.0;
    const fs::path root = scratch_root() / "sweep_data";
    generate_dataset(gc, root);
    const LoadedDataset d = load_dataset(root);
    struct Preset {
      std::string name;
      AblationFlags flags;
      bool eval_teacher_only = false;
    };
    const std::vector<Preset> presets = {
        {"model1", {true, false, false, false, "student_plain"}},
        {"model3", {true, true, true, false, "student_plain"}},
        {"model4", {false, false, false, true, "student_plain"}},
        {"model5", {false, false, false, true, "student_distilled"}},
        {"model6", {false, false, false, true, "teacher"}, true},
        {"deskpro", {true, true, true, true, "student_distilled"}},
    };
    SweepResult out;
    std::map<std::string, double> sums;
    for (uint64_t seed = 1; seed <= 3; ++seed) {
      TrainConfig cfg;
      cfg.seed = seed;
      cfg.optimizer.steps = 300;
      TeacherResult teacher = pretrain_teacher(d, cfg);
      for (const Preset& p : presets) {
        TrainConfig pc = cfg;
        pc.ablation = p.flags;
        EmbedOptions opts;
        opts.l2_normalize_streams = pc.model.l2_normalize_streams;
        EvalReport rep;
        if (p.eval_teacher_only) {
          opts.face_use_clean = true;
          rep = evaluate(d, nullptr, teacher.teacher.get(), opts,
                         Protocol::kCrossClothes, p.name);
        } else {
          const bool needs_teacher =
              p.flags.use_face_stream &&
              p.flags.face_variant != "student_plain";
          JointResult r = train_joint(
              d, needs_teacher ? teacher.teacher.get() : nullptr, pc);
          if (r.probes.kl_start && r.probes.kl_end)
            out.kl_probes.push_back({*r.probes.kl_start, *r.probes.kl_end});
          const ReidModel* face = r.student.get();
          opts.face_use_clean = p.flags.face_variant == "teacher";
          if (p.flags.use_face_stream && p.flags.face_variant == "teacher")
            face = teacher.teacher.get();
          rep = evaluate(d, r.global.get(), face, opts,
                         Protocol::kCrossClothes, p.name);
        }
        sums[p.name] += rep.rank1;
      }
    }
    for (auto& [name, s] : sums) out.rank1_mean[name] = s / 3.0;
    return out;
  }();
  return sweep;
}

void ablation_ordering() {
  const SweepResult& s = ablation_sweep();
  auto r1 = [&](const std::string& n) { return s.rank1_mean.at(n); };
  std::string table;
  for (const auto& [name, v] : s.rank1_mean)
    table += name + "=" + std::to_string(v) + " ";
  require(r1("model1") <= r1("model3"),
          "attention supervision must not hurt: " + table);
  require(r1("model4") <= r1("model5"),
          "distillation must not hurt the student: " + table);
  require(r1("model5") <= r1("model6"),
          "the student cannot beat its teacher: " + table);
  require(std::max(r1("model3"), r1("model5")) <= r1("deskpro"),
          "the combination must match its best part: " + table);
  require(r1("deskpro") - r1("model1") > 0.0,
          "the full system must strictly beat the plain baseline: " + table);
  std::printf("    mean rank-1: %s\n", table.c_str());
}

void distillation_efficacy() {
  const SweepResult& s = ablation_sweep();
  // model5 + deskpro across 3 seeds -> 6 distilled runs
  require(s.kl_probes.size() == 6, "expected 6 distilled runs, saw " +
                                       std::to_string(s.kl_probes.size()));
  for (const auto& [start, end] : s.kl_probes)
    require(end < start, "probe KL did not decrease (" +
                             std::to_string(start) + " -> " +
                             std::to_string(end) + ")");
}

void determinism() {
  const fs::path root = scratch_root() / "determinism";
  GenConfig gc;
  gc.seed = 13;
  gc.num_identities = 6;
  gc.outfits_per_identity = 2;
  gc.samples_per_outfit = 4;
  generate_dataset(gc, root / "a");
  generate_dataset(gc, root / "b");
  auto slurp = [](const fs::path& p) {
    std::ifstream f(p, std::ios::binary);
    return std::string(std::istreambuf_iterator<char>(f), {});
  };
  for (const auto& entry : fs::recursive_directory_iterator(root / "a")) {
    if (!entry.is_regular_file()) continue;
    const fs::path rel = fs::relative(entry.path(), root / "a");
    require(slurp(entry.path()) == slurp(root / "b" / rel),
            "dataset file differs between runs: " + rel.string());
  }

  LoadedDataset d = load_dataset(root / "a");
  TrainConfig cfg;
  cfg.seed = 3;
  cfg.optimizer.steps = 25;
  cfg.model.cf = 8;
  cfg.model.embedding_dim = 8;
  cfg.model.face_cf = 8;
  cfg.model.face_embedding_dim = 8;
  for (int run = 0; run < 2; ++run) {
    const fs::path out = root / ("train_" + std::to_string(run));
    fs::create_directories(out);
    TeacherResult teacher = pretrain_teacher(d, cfg);
    JointResult joint = train_joint(d, teacher.teacher.get(), cfg);
    save_checkpoint(teacher_checkpoint(*teacher.teacher, cfg, gc.seed),
                    out / "teacher.ckpt");
    save_checkpoint(joint_checkpoint(joint, cfg, gc.seed), out / "joint.ckpt");
    write_metrics_log(joint.logs, out / "metrics.csv");
  }
  for (const char* f : {"teacher.ckpt", "joint.ckpt", "metrics.csv"})
    require(slurp(root / "train_0" / f) == slurp(root / "train_1" / f),
            std::string("training artifact differs between runs: ") + f);
}

void fallback_consistency() {
  const fs::path root = scratch_root() / "fallback";
  GenConfig gc;
  gc.seed = 19;
  gc.num_identities = 6;
  gc.outfits_per_identity = 2;
  gc.samples_per_outfit = 4;
  gc.faceless_fraction = 0.3;
  generate_dataset(gc, root);
  LoadedDataset d = load_dataset(root);

  TrainConfig cfg;
  ReidModel global(global_model_config(d, cfg), 5);
  ReidModel face(face_model_config(d, cfg), 6);
  EmbedOptions opts;

  std::vector<PersonEmbedding> gallery, prefix;
  for (int i : d.gallery_idx) {
    gallery.push_back(
        embed(d.samples[static_cast<size_t>(i)], &global, &face, opts));
    PersonEmbedding p = gallery.back();
    p.vec.resize(static_cast<size_t>(p.global_dim));
    p.has_face = false;
    prefix.push_back(std::move(p));
  }
  int checked = 0;
  for (int i : d.query_idx) {
    const auto& s = d.samples[static_cast<size_t>(i)];
    if (s.face_clean) continue;
    RetrievalResult a = cosine_rank(embed(s, &global, &face, opts), gallery);
    RetrievalResult b =
        cosine_rank(embed(s, &global, nullptr, opts), prefix);
    require(a.ranked == b.ranked && a.scores == b.scores,
            "faceless query ranking deviates from the global-only re-embed");
    ++checked;
  }
  require(checked > 0, "no faceless queries in the probe dataset");
}

}  // namespace

int main() {
  struct Criterion {
    const char* name;
    void (*fn)();
  };
  const std::vector<Criterion> criteria = {
      {"loss correctness", loss_correctness},
      {"oracle equivalence", oracle_equivalence},
      {"attention shaping", attention_shaping},
      {"ablation ordering", ablation_ordering},
      {"distillation efficacy", distillation_efficacy},
      {"determinism", determinism},
      {"fallback consistency", fallback_consistency},
  };
  int failures = 0;
  for (const auto& c : criteria) {
    const auto t0 = std::chrono::steady_clock::now();
    std::string err;
    try {
      c.fn();
    } catch (const Failure& f) {
      err = f.what;
    } catch (const std::exception& e) {
      err = std::string("unexpected error: ") + e.what();
    }
    const double secs =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0)
            .count();
    if (err.empty()) {
      std::printf("PASS  %-24s (%.1fs)\n", c.name, secs);
    } else {
      std::printf("FAIL  %-24s (%.1fs)  %s\n", c.name, secs, err.c_str());
      ++failures;
    }
    std::fflush(stdout);
  }
  fs::remove_all(scratch_root());
  return failures == 0 ? 0 : 1;
}
