#include "deskpro/model.hpp"

#include <cmath>
#include <cstring>
#include <random>

#include "deskpro/errors.hpp"

namespace deskpro {

namespace {

void init_normal(Tensor& t, std::mt19937_64& rng, double std) {
  std::normal_distribution<double> dist(0.0, std);
  for (auto& v : t.raw()) v = dist(rng);
}

Tensor conv_weight(int kh, int kw, int cin, int cout, std::mt19937_64& rng) {
  Tensor w({kh, kw, cin, cout});
  init_normal(w, rng, std::sqrt(2.0 / (kh * kw * cin)));
  return w;
}

Tensor linear_weight(int din, int dout, std::mt19937_64& rng) {
  Tensor w({din, dout});
  init_normal(w, rng, std::sqrt(2.0 / din));
  return w;
}

}  // namespace

ReidModel::ReidModel(ModelConfig cfg, uint64_t init_seed) : cfg_(cfg) {
  if (cfg_.height % 4 != 0 || cfg_.width % 4 != 0)
    throw ConfigError("model input dims must be divisible by 4");
  if (cfg_.cf % 2 != 0 || cfg_.embedding_dim % 2 != 0)
    throw ConfigError("cf and embedding_dim must be even");
  if (cfg_.num_identities < 2)
    throw ConfigError("model needs at least 2 identities");

  std::mt19937_64 rng(mix_seed(init_seed, 0x6d6f64656cULL));
  conv1_ = {conv_weight(3, 3, cfg_.channels_in, cfg_.cf, rng),
            Tensor({cfg_.cf})};
  conv2_ = {conv_weight(3, 3, cfg_.cf, cfg_.cf, rng), Tensor({cfg_.cf})};
  conv3_ = {conv_weight(3, 3, cfg_.cf, cfg_.cf, rng), Tensor({cfg_.cf})};

  if (cfg_.with_cam) {
    cam_w_ = conv_weight(1, 1, cfg_.cf, 1, rng);
    cam_b_ = Tensor({1});
    cam_b_[0] = 1.0;  // start pass-through-leaning, sigma(1) ~ 0.73
  }

  const int d = cfg_.embedding_dim, k = cfg_.num_identities;
  auto make_head = [&](void) -> Head {
    return {linear_weight(cfg_.cf, d, rng), Tensor({d}),
            linear_weight(d, k, rng), Tensor({k})};
  };
  global_ = make_head();
  part_top_ = make_head();
  part_bot_ = make_head();
  ch_w_lo_ = linear_weight(cfg_.cf / 2, d / 2, rng);
  ch_b_lo_ = Tensor({d / 2});
  ch_w_hi_ = linear_weight(cfg_.cf / 2, d / 2, rng);
  ch_b_hi_ = Tensor({d / 2});
  ch_w_cls_ = linear_weight(d, k, rng);
  ch_b_cls_ = Tensor({k});
}

std::vector<std::pair<std::string, Tensor*>> ReidModel::params() {
  std::vector<std::pair<std::string, Tensor*>> p = {
      {"backbone.conv1.w", &conv1_.w}, {"backbone.conv1.b", &conv1_.b},
      {"backbone.conv2.w", &conv2_.w}, {"backbone.conv2.b", &conv2_.b},
      {"backbone.conv3.w", &conv3_.w}, {"backbone.conv3.b", &conv3_.b},
  };
  if (cfg_.with_cam) {
    p.emplace_back("cam.w", &cam_w_);
    p.emplace_back("cam.b", &cam_b_);
  }
  auto add_head = [&](const std::string& name, Head& h) {
    p.emplace_back(name + ".w_feat", &h.w_feat);
    p.emplace_back(name + ".b_feat", &h.b_feat);
    p.emplace_back(name + ".w_cls", &h.w_cls);
    p.emplace_back(name + ".b_cls", &h.b_cls);
  };
  add_head("mbn.global", global_);
  add_head("mbn.part_top", part_top_);
  add_head("mbn.part_bot", part_bot_);
  p.emplace_back("mbn.channel.w_lo", &ch_w_lo_);
  p.emplace_back("mbn.channel.b_lo", &ch_b_lo_);
  p.emplace_back("mbn.channel.w_hi", &ch_w_hi_);
  p.emplace_back("mbn.channel.b_hi", &ch_b_hi_);
  p.emplace_back("mbn.channel.w_cls", &ch_w_cls_);
  p.emplace_back("mbn.channel.b_cls", &ch_b_cls_);
  return p;
}

std::vector<std::pair<std::string, const Tensor*>> ReidModel::params() const {
  auto mut = const_cast<ReidModel*>(this)->params();
  std::vector<std::pair<std::string, const Tensor*>> p;
  p.reserve(mut.size());
  for (auto& [n, t] : mut) p.emplace_back(n, t);
  return p;
}

Var ReidModel::backbone_forward(Tape& t, Var images, const Forward& f) const {
  Var h = relu(t, conv2d(t, images, f.bound.at("backbone.conv1.w"),
                         f.bound.at("backbone.conv1.b"), 2, 1));
  h = relu(t, conv2d(t, h, f.bound.at("backbone.conv2.w"),
                     f.bound.at("backbone.conv2.b"), 1, 1));
  h = relu(t, conv2d(t, h, f.bound.at("backbone.conv3.w"),
                     f.bound.at("backbone.conv3.b"), 2, 1));
  return h;
}

Var ReidModel::cam_forward(Tape& t, Var fmap, const Forward& f) const {
  if (!cfg_.with_cam) throw StateError("model built without CAM");
  return sigmoid(t, conv2d(t, fmap, f.bound.at("cam.w"), f.bound.at("cam.b"),
                           1, 0));
}

Var ReidModel::apply_attention(Tape& t, Var fmap, Var attention) {
  return hadamard_broadcast(t, fmap, attention);
}

ReidModel::Forward ReidModel::forward(Tape& t, const Tensor& images,
                                      bool use_attention) const {
  if (images.ndims() != 4 || images.dim(1) != cfg_.height ||
      images.dim(2) != cfg_.width || images.dim(3) != cfg_.channels_in)
    throw ShapeError("input image batch does not match model config");
  if (use_attention && !cfg_.with_cam)
    throw StateError("attention requested on a model without CAM");

  Forward f;
  for (auto& [name, tensor] : const_cast<ReidModel*>(this)->params())
    f.bound[name] = constant(t, *tensor);

  Var x = constant(t, images);
  f.fmap = backbone_forward(t, x, f);
  Var head_in = f.fmap;
  if (use_attention) {
    f.attention = cam_forward(t, f.fmap, f);
    f.fatt = apply_attention(t, f.fmap, f.attention);
    head_in = f.fatt;
  } else {
    f.fatt = f.fmap;
  }

  const int h = cfg_.feat_h();
  Var gap = avg_pool_rows(t, head_in, 0, h);
  Var top = avg_pool_rows(t, head_in, 0, h / 2);
  Var bot = avg_pool_rows(t, head_in, h / 2, h);

  auto run_head = [&](Var pooled, const std::string& name) {
    Var feat = linear(t, pooled, f.bound.at(name + ".w_feat"),
                      f.bound.at(name + ".b_feat"));
    Var logit = linear(t, feat, f.bound.at(name + ".w_cls"),
                       f.bound.at(name + ".b_cls"));
    f.features.push_back(feat);
    f.logits.push_back(logit);
  };
  run_head(gap, "mbn.global");
  run_head(top, "mbn.part_top");
  run_head(bot, "mbn.part_bot");

  Var lo = slice_cols(t, gap, 0, cfg_.cf / 2);
  Var hi = slice_cols(t, gap, cfg_.cf / 2, cfg_.cf);
  Var ch_feat = concat_cols(
      t, {linear(t, lo, f.bound.at("mbn.channel.w_lo"),
                 f.bound.at("mbn.channel.b_lo")),
          linear(t, hi, f.bound.at("mbn.channel.w_hi"),
                 f.bound.at("mbn.channel.b_hi"))});
  Var ch_logit = linear(t, ch_feat, f.bound.at("mbn.channel.w_cls"),
                        f.bound.at("mbn.channel.b_cls"));
  f.features.push_back(ch_feat);
  f.logits.push_back(ch_logit);
  return f;
}

EmbeddingGroups ReidModel::infer(const Tensor& images,
                                 bool use_attention) const {
  Tape t;
  Forward f = forward(t, images, use_attention);
  EmbeddingGroups g;
  for (Var v : f.logits) g.logits.push_back(v->val);
  for (Var v : f.features) g.features.push_back(v->val);
  return g;
}

Tensor ReidModel::attention_map(const Tensor& images) const {
  Tape t;
  Forward f = forward(t, images, true);
  return f.attention->val;
}

uint64_t ReidModel::param_hash() const {
  uint64_t h = 0x243f6a8885a308d3ULL;
  for (auto& [name, tensor] : params()) {
    for (char c : name) h = mix_seed(h, static_cast<uint64_t>(c));
    for (double v : tensor->raw()) {
      uint64_t bits;
      static_assert(sizeof(bits) == sizeof(v));
      std::memcpy(&bits, &v, sizeof(bits));
      h = mix_seed(h, bits);
    }
  }
  return h;
}

}  // namespace deskpro
