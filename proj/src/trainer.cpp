#include "deskpro/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <random>

#include "deskpro/errors.hpp"

namespace deskpro {

namespace {

constexpr uint64_t kGlobalKey = 0x910b;
constexpr uint64_t kStudentKey = 0x57d;
constexpr uint64_t kTeacherKey = 0x7ea;
constexpr uint64_t kIdPermKey = 0x1d5;
constexpr uint64_t kSamplePermKey = 0x5a3;

bool face_bearing(const LoadedSample& s) { return s.face_clean.has_value(); }

}  // namespace

void TrainConfig::validate() const {
  if (optimizer.kind != "adam")
    throw ConfigError("unknown optimizer kind: " + optimizer.kind);
  if (optimizer.lr <= 0) throw ConfigError("learning rate must be positive");
  if (optimizer.steps < 0) throw ConfigError("steps must be >= 0");
  if (batch.p < 2 || batch.k < 2)
    throw ConfigError("batch composition needs P >= 2 and K >= 2");
  if (loss.lambda_att < 0) throw ConfigError("lambda_att must be >= 0");
  if (loss.alpha < 0 || loss.alpha > 1)
    throw ConfigError("alpha must lie in [0,1]");
  if (loss.temperature <= 0) throw ConfigError("temperature must be positive");
  if (loss.triplet_margin < 0) throw ConfigError("triplet_margin must be >= 0");
  if (loss.epsilon <= 0 || loss.epsilon >= 1)
    throw ConfigError("epsilon must lie in (0,1)");
  if (ablation.face_variant != "student_plain" &&
      ablation.face_variant != "student_distilled" &&
      ablation.face_variant != "teacher")
    throw ConfigError("unknown face_variant: " + ablation.face_variant);
  if (ablation.use_att_loss && !ablation.use_cam)
    throw ConfigError("use_att_loss requires use_cam");
  if (!ablation.use_global && !ablation.use_face_stream)
    throw ConfigError("at least one stream must be enabled");
  if (model.mask_resize != "area" && model.mask_resize != "nearest")
    throw ConfigError("mask_resize must be area or nearest");
}

nlohmann::ordered_json train_config_to_json(const TrainConfig& c) {
  nlohmann::ordered_json j;
  j["optimizer"] = {{"kind", c.optimizer.kind},
                    {"lr", c.optimizer.lr},
                    {"steps", c.optimizer.steps}};
  j["batch"] = {{"p", c.batch.p}, {"k", c.batch.k}};
  j["loss"] = {{"lambda_att", c.loss.lambda_att},
               {"alpha", c.loss.alpha},
               {"temperature", c.loss.temperature},
               {"triplet_margin", c.loss.triplet_margin},
               {"epsilon", c.loss.epsilon}};
  j["ablation"] = {{"use_global", c.ablation.use_global},
                   {"use_cam", c.ablation.use_cam},
                   {"use_att_loss", c.ablation.use_att_loss},
                   {"use_face_stream", c.ablation.use_face_stream},
                   {"face_variant", c.ablation.face_variant}};
  j["model"] = {{"cf", c.model.cf},
                {"embedding_dim", c.model.embedding_dim},
                {"face_cf", c.model.face_cf},
                {"face_embedding_dim", c.model.face_embedding_dim},
                {"l2_normalize_streams", c.model.l2_normalize_streams},
                {"mask_resize", c.model.mask_resize}};
  j["seed"] = c.seed;
  return j;
}

TrainConfig train_config_from_json(const nlohmann::json& j) {
  TrainConfig c;
  try {
    if (j.contains("optimizer")) {
      const auto& o = j.at("optimizer");
      if (o.contains("kind")) c.optimizer.kind = o.at("kind");
      if (o.contains("lr")) c.optimizer.lr = o.at("lr");
      if (o.contains("steps")) c.optimizer.steps = o.at("steps");
    }
    if (j.contains("batch")) {
      const auto& b = j.at("batch");
      if (b.contains("p")) c.batch.p = b.at("p");
      if (b.contains("k")) c.batch.k = b.at("k");
    }
    if (j.contains("loss")) {
      const auto& l = j.at("loss");
      if (l.contains("lambda_att")) c.loss.lambda_att = l.at("lambda_att");
      if (l.contains("alpha")) c.loss.alpha = l.at("alpha");
      if (l.contains("temperature")) c.loss.temperature = l.at("temperature");
      if (l.contains("triplet_margin"))
        c.loss.triplet_margin = l.at("triplet_margin");
      if (l.contains("epsilon")) c.loss.epsilon = l.at("epsilon");
    }
    if (j.contains("ablation")) {
      const auto& a = j.at("ablation");
      if (a.contains("use_global")) c.ablation.use_global = a.at("use_global");
      if (a.contains("use_cam")) c.ablation.use_cam = a.at("use_cam");
      if (a.contains("use_att_loss"))
        c.ablation.use_att_loss = a.at("use_att_loss");
      if (a.contains("use_face_stream"))
        c.ablation.use_face_stream = a.at("use_face_stream");
      if (a.contains("face_variant"))
        c.ablation.face_variant = a.at("face_variant");
    }
    if (j.contains("model")) {
      const auto& m = j.at("model");
      if (m.contains("cf")) c.model.cf = m.at("cf");
      if (m.contains("embedding_dim")) c.model.embedding_dim = m.at("embedding_dim");
      if (m.contains("face_cf")) c.model.face_cf = m.at("face_cf");
      if (m.contains("face_embedding_dim"))
        c.model.face_embedding_dim = m.at("face_embedding_dim");
      if (m.contains("l2_normalize_streams"))
        c.model.l2_normalize_streams = m.at("l2_normalize_streams");
      if (m.contains("mask_resize")) c.model.mask_resize = m.at("mask_resize");
    }
    if (j.contains("seed")) c.seed = j.at("seed");
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("bad train config: ") + e.what());
  }
  c.validate();
  return c;
}

TrainConfig load_train_config(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot open config: " + path.string());
  nlohmann::json j;
  try {
    f >> j;
  } catch (const std::exception& e) {
    throw ConfigError(std::string("config parse error: ") + e.what());
  }
  return train_config_from_json(j);
}

void apply_override(nlohmann::ordered_json& j, const std::string& key_value) {
  const auto eq = key_value.find('=');
  if (eq == std::string::npos)
    throw ConfigError("override must be KEY=VALUE: " + key_value);
  const std::string key = key_value.substr(0, eq);
  const std::string value = key_value.substr(eq + 1);
  nlohmann::ordered_json* node = &j;
  size_t pos = 0;
  while (true) {
    const auto dot = key.find('.', pos);
    const std::string part = key.substr(pos, dot - pos);
    if (part.empty()) throw ConfigError("bad override key: " + key);
    if (dot == std::string::npos) {
      auto parsed = nlohmann::ordered_json::parse(value, nullptr, false);
      (*node)[part] = parsed.is_discarded() ? nlohmann::ordered_json(value)
                                            : parsed;
      return;
    }
    node = &(*node)[part];
    pos = dot + 1;
  }
}

std::vector<int> sample_batch(const LoadedDataset& data, int p, int k,
                              uint64_t seed, int step,
                              bool face_bearing_only) {
  if (p < 1 || k < 1) throw ConfigError("batch P and K must be positive");
  std::map<int, std::vector<int>> by_id;
  for (int idx : data.train_idx) {
    const auto& s = data.samples[static_cast<size_t>(idx)];
    if (face_bearing_only && !face_bearing(s)) continue;
    by_id[s.identity_id].push_back(idx);
  }
  std::vector<int> ids;
  for (const auto& [id, list] : by_id)
    if (static_cast<int>(list.size()) >= k) ids.push_back(id);
  if (static_cast<int>(ids.size()) < std::max(p, 2))
    throw BatchCompositionError(
        "not enough identities with >= K train samples (have " +
        std::to_string(ids.size()) + ", need " + std::to_string(p) + ")");

  const int nids = static_cast<int>(ids.size());
  std::vector<int> batch;
  batch.reserve(static_cast<size_t>(p) * k);
  for (int t = 0; t < p; ++t) {
    const int64_t q = static_cast<int64_t>(p) * step + t;
    const int64_t epoch = q / nids;
    const int slot = static_cast<int>(q % nids);
    std::vector<int> perm = ids;
    std::mt19937_64 rng(mix_seed(mix_seed(seed, kIdPermKey),
                                 static_cast<uint64_t>(epoch)));
    std::shuffle(perm.begin(), perm.end(), rng);
    const int id = perm[static_cast<size_t>(slot)];

    const auto& pool = by_id.at(id);
    const int n = static_cast<int>(pool.size());
    // one occurrence per identity epoch -> draws consumed so far = K * epoch
    for (int d = 0; d < k; ++d) {
      const int64_t draw = static_cast<int64_t>(k) * epoch + d;
      const int64_t sep = draw / n;
      std::vector<int> sperm = pool;
      std::mt19937_64 srng(mix_seed(
          mix_seed(mix_seed(seed, kSamplePermKey), static_cast<uint64_t>(id)),
          static_cast<uint64_t>(sep)));
      std::shuffle(sperm.begin(), sperm.end(), srng);
      batch.push_back(sperm[static_cast<size_t>(draw % n)]);
    }
  }
  return batch;
}

void write_metrics_log(const std::vector<StepLog>& logs,
                       const std::filesystem::path& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot write metrics log: " + path.string());
  f << "step,l_att,l_trip,l_fkp,l_ce_s,l_ce_g,total\n";
  char buf[256];
  for (const auto& l : logs) {
    std::snprintf(buf, sizeof buf,
                  "%d,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g\n", l.step, l.l_att,
                  l.l_trip, l.l_fkp, l.l_ce_s, l.l_ce_g, l.total);
    f << buf;
  }
}

ModelConfig global_model_config(const LoadedDataset& data,
                                const TrainConfig& cfg) {
  ModelConfig m;
  m.height = data.manifest.image_height;
  m.width = data.manifest.image_width;
  m.cf = cfg.model.cf;
  m.embedding_dim = cfg.model.embedding_dim;
  m.num_identities = data.num_identities;
  m.with_cam = cfg.ablation.use_cam;
  return m;
}

ModelConfig face_model_config(const LoadedDataset& data,
                              const TrainConfig& cfg) {
  ModelConfig m;
  m.height = data.manifest.face_size;
  m.width = data.manifest.face_size;
  m.cf = cfg.model.face_cf;
  m.embedding_dim = cfg.model.face_embedding_dim;
  m.num_identities = data.num_identities;
  m.with_cam = false;
  return m;
}

std::unique_ptr<ReidModel> fresh_student(const LoadedDataset& data,
                                         const TrainConfig& cfg) {
  return std::make_unique<ReidModel>(face_model_config(data, cfg),
                                     mix_seed(cfg.seed, kStudentKey));
}

namespace {

// ---- Adam ----

class Adam {
 public:
  explicit Adam(double lr) : lr_(lr) {}

  void add_params(std::vector<std::pair<std::string, Tensor*>> params) {
    for (auto& [name, t] : params) {
      Slot s;
      s.param = t;
      s.m.assign(t->raw().size(), 0.0);
      s.v.assign(t->raw().size(), 0.0);
      names_.push_back(name);
      slots_.push_back(std::move(s));
    }
  }

  size_t size() const { return slots_.size(); }
  const std::string& name(size_t i) const { return names_[i]; }

  // grads[i] may be null (treated as zero).
  void step(const std::vector<const Tensor*>& grads) {
    ++t_;
    const double b1 = 0.9, b2 = 0.999, eps = 1e-8;
    const double c1 = 1.0 - std::pow(b1, t_), c2 = 1.0 - std::pow(b2, t_);
    for (size_t i = 0; i < slots_.size(); ++i) {
      auto& s = slots_[i];
      const size_t n = s.param->raw().size();
      for (size_t j = 0; j < n; ++j) {
        const double g = grads[i] ? grads[i]->raw()[j] : 0.0;
        s.m[j] = b1 * s.m[j] + (1 - b1) * g;
        s.v[j] = b2 * s.v[j] + (1 - b2) * g * g;
        s.param->raw()[j] -= lr_ * (s.m[j] / c1) / (std::sqrt(s.v[j] / c2) + eps);
      }
    }
  }

 private:
  struct Slot {
    Tensor* param;
    std::vector<double> m, v;
  };
  double lr_;
  int t_ = 0;
  std::vector<Slot> slots_;
  std::vector<std::string> names_;
};

Tensor stack_images(const LoadedDataset& data, const std::vector<int>& idxs) {
  const int H = data.manifest.image_height, W = data.manifest.image_width;
  Tensor out({static_cast<int>(idxs.size()), H, W, 3});
  for (size_t n = 0; n < idxs.size(); ++n) {
    const auto& img = data.samples[static_cast<size_t>(idxs[n])].image;
    std::copy(img.raw().begin(), img.raw().end(),
              out.raw().begin() + static_cast<int64_t>(n) * img.numel());
  }
  return out;
}

Tensor stack_faces(const LoadedDataset& data, const std::vector<int>& idxs,
                   bool degraded) {
  const int f = data.manifest.face_size;
  Tensor out({static_cast<int>(idxs.size()), f, f, 3});
  for (size_t n = 0; n < idxs.size(); ++n) {
    const auto& s = data.samples[static_cast<size_t>(idxs[n])];
    const Tensor& face = degraded ? *s.face_degraded : *s.face_clean;
    std::copy(face.raw().begin(), face.raw().end(),
              out.raw().begin() + static_cast<int64_t>(n) * face.numel());
  }
  return out;
}

std::vector<int> labels_of(const LoadedDataset& data,
                           const std::vector<int>& idxs) {
  std::vector<int> y;
  y.reserve(idxs.size());
  for (int i : idxs)
    y.push_back(data.samples[static_cast<size_t>(i)].identity_id);
  return y;
}

bool has_two_identities(const std::vector<int>& labels) {
  for (size_t i = 1; i < labels.size(); ++i)
    if (labels[i] != labels[0]) return true;
  return false;
}

// Cached per-sample attention targets at feature resolution.
class AttTargetCache {
 public:
  AttTargetCache(const LoadedDataset& data, const TrainConfig& cfg, int hf,
                 int wf)
      : data_(data), cfg_(cfg), hf_(hf), wf_(wf) {}

  const Tensor& get(int idx) {
    auto it = cache_.find(idx);
    if (it != cache_.end()) return it->second;
    const auto& s = data_.samples[static_cast<size_t>(idx)];
    ClothMask m = cloth_irrelevant_mask(
        s.mask, data_.manifest.image_height, data_.manifest.image_width,
        cloth_related_codes(), known_codes(), cfg_.loss.epsilon, hf_, wf_,
        cfg_.model.mask_resize == "area" ? MaskResize::kArea
                                         : MaskResize::kNearest);
    return cache_.emplace(idx, std::move(m.resized)).first->second;
  }

  Tensor batch_targets(const std::vector<int>& idxs) {
    Tensor out({static_cast<int>(idxs.size()), hf_, wf_, 1});
    for (size_t n = 0; n < idxs.size(); ++n) {
      const Tensor& m = get(idxs[n]);
      std::copy(m.raw().begin(), m.raw().end(),
                out.raw().begin() + static_cast<int64_t>(n) * m.numel());
    }
    return out;
  }

 private:
  const LoadedDataset& data_;
  const TrainConfig& cfg_;
  int hf_, wf_;
  std::map<int, Tensor> cache_;
};

std::vector<int> probe_face_indices(const LoadedDataset& data, size_t cap) {
  std::vector<int> idxs;
  for (int i : data.query_idx)
    if (face_bearing(data.samples[static_cast<size_t>(i)])) idxs.push_back(i);
  for (int i : data.gallery_idx)
    if (face_bearing(data.samples[static_cast<size_t>(i)])) idxs.push_back(i);
  if (idxs.size() > cap) idxs.resize(cap);
  return idxs;
}

// Mean attention over cloth vs non-cloth probe pixels, classified by
// area-resizing the binary cloth indicator to feature resolution.
std::pair<double, double> attention_probe(const LoadedDataset& data,
                                          const ReidModel& global,
                                          const std::vector<int>& probe) {
  const int hf = global.config().feat_h(), wf = global.config().feat_w();
  Tensor att = global.attention_map(stack_images(data, probe));
  double cloth_acc = 0, noncloth_acc = 0;
  int64_t cloth_n = 0, noncloth_n = 0;
  const auto cloth = cloth_related_codes();
  for (size_t n = 0; n < probe.size(); ++n) {
    const auto& s = data.samples[static_cast<size_t>(probe[n])];
    Tensor ind({data.manifest.image_height, data.manifest.image_width});
    for (int64_t i = 0; i < ind.numel(); ++i)
      ind[i] = cloth.count(s.mask[static_cast<size_t>(i)]) ? 1.0 : 0.0;
    // resize the indicator with the same area rule used for the targets
    Tensor low({hf, wf});
    {
      const int H = ind.dim(0), W = ind.dim(1);
      const double sy = static_cast<double>(H) / hf;
      const double sx = static_cast<double>(W) / wf;
      for (int i = 0; i < hf; ++i)
        for (int j = 0; j < wf; ++j) {
          double acc = 0, area = 0;
          const double y0 = i * sy, y1 = (i + 1) * sy;
          const double x0 = j * sx, x1 = (j + 1) * sx;
          for (int y = static_cast<int>(y0); y < H && y < y1; ++y) {
            const double wy = std::min<double>(y + 1, y1) - std::max<double>(y, y0);
            for (int x = static_cast<int>(x0); x < W && x < x1; ++x) {
              const double wx = std::min<double>(x + 1, x1) - std::max<double>(x, x0);
              acc += ind[static_cast<int64_t>(y) * W + x] * wy * wx;
              area += wy * wx;
            }
          }
          low[static_cast<int64_t>(i) * wf + j] = acc / area;
        }
    }
    for (int i = 0; i < hf; ++i)
      for (int j = 0; j < wf; ++j) {
        const double a = att.at4(static_cast<int>(n), i, j, 0);
        if (low[static_cast<int64_t>(i) * wf + j] > 0.5) {
          cloth_acc += a;
          ++cloth_n;
        } else {
          noncloth_acc += a;
          ++noncloth_n;
        }
      }
  }
  return {cloth_n ? cloth_acc / cloth_n : 0.0,
          noncloth_n ? noncloth_acc / noncloth_n : 0.0};
}

}  // namespace

double probe_mean_kl(const LoadedDataset& data, const ReidModel& teacher,
                     const ReidModel& student, double tau) {
  const auto probe = probe_face_indices(data, 32);
  if (probe.empty()) throw DataError("no face-bearing probe samples");
  EmbeddingGroups tg = teacher.infer(stack_faces(data, probe, false), false);
  EmbeddingGroups sg = student.infer(stack_faces(data, probe, true), false);
  double acc = 0.0;
  const int N = static_cast<int>(probe.size());
  for (size_t g = 0; g < tg.logits.size(); ++g) {
    const int K = tg.logits[g].dim(1);
    for (int n = 0; n < N; ++n) {
      std::vector<double> zt(static_cast<size_t>(K)), zs(static_cast<size_t>(K));
      for (int k = 0; k < K; ++k) {
        zt[static_cast<size_t>(k)] = tg.logits[g].at2(n, k);
        zs[static_cast<size_t>(k)] = sg.logits[g].at2(n, k);
      }
      auto p = softmax_with_temperature(zt, tau);
      auto q = softmax_with_temperature(zs, tau);
      for (int k = 0; k < K; ++k)
        acc += p[static_cast<size_t>(k)] *
               (std::log(p[static_cast<size_t>(k)]) -
                std::log(q[static_cast<size_t>(k)]));
    }
  }
  return acc / N;
}

TeacherResult pretrain_teacher(const LoadedDataset& data,
                               const TrainConfig& cfg) {
  cfg.validate();
  bool any_face = false;
  for (int i : data.train_idx)
    if (face_bearing(data.samples[static_cast<size_t>(i)])) any_face = true;
  if (!any_face) throw DataError("no face-bearing training samples");

  TeacherResult r;
  r.teacher = std::make_unique<ReidModel>(face_model_config(data, cfg),
                                          mix_seed(cfg.seed, kTeacherKey));
  Adam opt(cfg.optimizer.lr);
  opt.add_params(r.teacher->params());

  for (int step = 0; step < cfg.optimizer.steps; ++step) {
    auto batch = sample_batch(data, cfg.batch.p, cfg.batch.k, cfg.seed, step,
                              /*face_bearing_only=*/true);
    auto labels = labels_of(data, batch);
    Tape t;
    auto fwd = r.teacher->forward(t, stack_faces(data, batch, false), false);
    Var ce = cross_entropy_sum(t, fwd.logits, labels);
    Var trip = batch_hard_triplet_sum(t, fwd.features, labels,
                                      cfg.loss.triplet_margin);
    Var total = add(t, ce, trip);
    t.backward(total);

    std::vector<const Tensor*> grads;
    for (size_t i = 0; i < opt.size(); ++i)
      grads.push_back(&fwd.bound.at(opt.name(i))->grad);
    opt.step(grads);

    StepLog log;
    log.step = step;
    log.l_ce_s = ce->val[0];
    log.l_trip = trip->val[0];
    log.total = total->val[0];
    r.logs.push_back(log);
  }
  return r;
}

JointResult train_joint(const LoadedDataset& data, const ReidModel* teacher,
                        const TrainConfig& cfg) {
  cfg.validate();
  const auto& ab = cfg.ablation;
  const bool want_student =
      ab.use_face_stream && ab.face_variant != "teacher";
  const bool distill =
      want_student && ab.face_variant == "student_distilled";
  if (ab.use_face_stream && (distill || ab.face_variant == "teacher") &&
      teacher == nullptr)
    throw ConfigError("this configuration requires a teacher checkpoint");
  if (teacher) {
    const auto fc = face_model_config(data, cfg);
    if (teacher->config().num_identities != fc.num_identities ||
        teacher->config().height != fc.height ||
        teacher->config().width != fc.width)
      throw ConfigError("teacher checkpoint incompatible with dataset/config");
  }

  JointResult r;
  if (ab.use_global)
    r.global = std::make_unique<ReidModel>(global_model_config(data, cfg),
                                           mix_seed(cfg.seed, kGlobalKey));
  if (want_student) r.student = fresh_student(data, cfg);

  // Slot names are prefixed per model: both models use the same parameter
  // names internally, and gradient lookup must not cross streams.
  Adam opt(cfg.optimizer.lr);
  auto prefixed = [](std::vector<std::pair<std::string, Tensor*>> params,
                     const std::string& prefix) {
    for (auto& [name, t] : params) name = prefix + name;
    return params;
  };
  if (r.global) opt.add_params(prefixed(r.global->params(), "global."));
  if (r.student) opt.add_params(prefixed(r.student->params(), "student."));

  const bool face_only = !ab.use_global;
  const int hf = r.global ? r.global->config().feat_h() : 0;
  const int wf = r.global ? r.global->config().feat_w() : 0;
  AttTargetCache targets(data, cfg, hf, wf);

  const auto probe = probe_face_indices(data, 64);
  std::vector<int> att_probe = data.query_idx;
  att_probe.insert(att_probe.end(), data.gallery_idx.begin(),
                   data.gallery_idx.end());
  if (att_probe.size() > 64) att_probe.resize(64);

  if (r.global && ab.use_cam) {
    auto [c, nc] = attention_probe(data, *r.global, att_probe);
    r.probes.att_cloth_start = c;
    (void)nc;
  }
  if (r.student && teacher)
    r.probes.kl_start =
        probe_mean_kl(data, *teacher, *r.student, cfg.loss.temperature);

  for (int step = 0; step < cfg.optimizer.steps; ++step) {
    auto batch =
        sample_batch(data, cfg.batch.p, cfg.batch.k, cfg.seed, step, face_only);
    auto labels = labels_of(data, batch);

    Tape t;
    Var l_att = nullptr, l_ce_g = nullptr, l_ce_s = nullptr, l_fkp = nullptr;
    Var l_trip = nullptr;
    ReidModel::Forward gf, sf;

    if (r.global) {
      gf = r.global->forward(t, stack_images(data, batch), ab.use_cam);
      l_ce_g = cross_entropy_sum(t, gf.logits, labels);
      l_trip = batch_hard_triplet_sum(t, gf.features, labels,
                                      cfg.loss.triplet_margin);
      if (ab.use_att_loss)
        l_att = attention_loss(t, gf.attention, targets.batch_targets(batch));
    }

    if (r.student) {
      std::vector<int> face_idx;
      for (int i : batch)
        if (face_bearing(data.samples[static_cast<size_t>(i)]))
          face_idx.push_back(i);
      if (!face_idx.empty()) {
        auto flabels = labels_of(data, face_idx);
        sf = r.student->forward(t, stack_faces(data, face_idx, true), false);
        l_ce_s = cross_entropy_sum(t, sf.logits, flabels);
        if (distill) {
          EmbeddingGroups tg =
              teacher->infer(stack_faces(data, face_idx, false), false);
          l_fkp = fkp_loss(t, sf.logits, tg.logits, cfg.loss.temperature);
        }
        if (has_two_identities(flabels)) {
          Var trip_s = batch_hard_triplet_sum(t, sf.features, flabels,
                                              cfg.loss.triplet_margin);
          l_trip = l_trip ? add(t, l_trip, trip_s) : trip_s;
        }
      }
    }

    Var total = total_loss(t, l_att, l_trip, l_fkp, l_ce_s, l_ce_g, cfg.loss);
    t.backward(total);

    std::vector<const Tensor*> grads;
    for (size_t i = 0; i < opt.size(); ++i) {
      const std::string& name = opt.name(i);
      const Tensor* g = nullptr;
      if (name.rfind("global.", 0) == 0) {
        auto it = gf.bound.find(name.substr(7));
        if (it != gf.bound.end()) g = &it->second->grad;
      } else {
        auto it = sf.bound.find(name.substr(8));
        if (it != sf.bound.end()) g = &it->second->grad;
      }
      grads.push_back(g);
    }
    opt.step(grads);

    StepLog log;
    log.step = step;
    log.l_att = l_att ? l_att->val[0] : 0.0;
    log.l_trip = l_trip ? l_trip->val[0] : 0.0;
    log.l_fkp = l_fkp ? l_fkp->val[0] : 0.0;
    log.l_ce_s = l_ce_s ? l_ce_s->val[0] : 0.0;
    log.l_ce_g = l_ce_g ? l_ce_g->val[0] : 0.0;
    log.total = total->val[0];
    r.logs.push_back(log);
  }

  if (r.global && ab.use_cam) {
    auto [c, nc] = attention_probe(data, *r.global, att_probe);
    r.probes.att_cloth_end = c;
    r.probes.att_noncloth_end = nc;
  }
  if (r.student && teacher)
    r.probes.kl_end =
        probe_mean_kl(data, *teacher, *r.student, cfg.loss.temperature);
  return r;
}

namespace {

nlohmann::ordered_json model_config_json(const ModelConfig& c) {
  return {{"height", c.height},         {"width", c.width},
          {"channels_in", c.channels_in}, {"cf", c.cf},
          {"embedding_dim", c.embedding_dim},
          {"num_identities", c.num_identities},
          {"with_cam", c.with_cam}};
}

ModelConfig model_config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  c.height = j.at("height");
  c.width = j.at("width");
  c.channels_in = j.at("channels_in");
  c.cf = j.at("cf");
  c.embedding_dim = j.at("embedding_dim");
  c.num_identities = j.at("num_identities");
  c.with_cam = j.at("with_cam");
  return c;
}

void add_model_tensors(Checkpoint& ck, const ReidModel& m,
                       const std::string& prefix) {
  for (auto& [name, t] : m.params()) ck.tensors.emplace(prefix + "." + name, *t);
}

}  // namespace

Checkpoint teacher_checkpoint(const ReidModel& teacher, const TrainConfig& cfg,
                              uint64_t dataset_seed) {
  Checkpoint ck;
  ck.metadata["format_version"] = 1;
  ck.metadata["kind"] = "teacher";
  ck.metadata["step"] = cfg.optimizer.steps;
  ck.metadata["dataset_seed"] = dataset_seed;
  ck.metadata["train_config"] = train_config_to_json(cfg);
  ck.metadata["models"]["teacher"] = model_config_json(teacher.config());
  add_model_tensors(ck, teacher, "teacher");
  return ck;
}

Checkpoint joint_checkpoint(const JointResult& r, const TrainConfig& cfg,
                            uint64_t dataset_seed) {
  Checkpoint ck;
  ck.metadata["format_version"] = 1;
  ck.metadata["kind"] = "joint";
  ck.metadata["step"] = cfg.optimizer.steps;
  ck.metadata["dataset_seed"] = dataset_seed;
  ck.metadata["train_config"] = train_config_to_json(cfg);
  if (r.global) {
    ck.metadata["models"]["global"] = model_config_json(r.global->config());
    add_model_tensors(ck, *r.global, "global");
  }
  if (r.student) {
    ck.metadata["models"]["student"] = model_config_json(r.student->config());
    add_model_tensors(ck, *r.student, "student");
  }
  return ck;
}

std::unique_ptr<ReidModel> model_from_checkpoint(const Checkpoint& ck,
                                                 const std::string& prefix) {
  if (!ck.metadata.contains("models") ||
      !ck.metadata.at("models").contains(prefix))
    throw DataError("checkpoint has no model: " + prefix);
  auto model = std::make_unique<ReidModel>(
      model_config_from_json(ck.metadata.at("models").at(prefix)), 0);
  for (auto& [name, t] : model->params()) {
    auto it = ck.tensors.find(prefix + "." + name);
    if (it == ck.tensors.end())
      throw DataError("checkpoint missing tensor: " + prefix + "." + name);
    if (!it->second.same_shape(*t))
      throw DataError("checkpoint tensor shape mismatch: " + name);
    *t = it->second;
  }
  return model;
}

}  // namespace deskpro
