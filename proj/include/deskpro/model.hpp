#pragma once

#include <cstdint>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "deskpro/autodiff.hpp"
#include "deskpro/tensor.hpp"

namespace deskpro {

struct ModelConfig {
  int height = 64;
  int width = 32;
  int channels_in = 3;
  int cf = 32;             // mid-map channels
  int embedding_dim = 64;  // per-branch feature size
  int num_identities = 0;
  bool with_cam = false;

  int feat_h() const { return height / 4; }
  int feat_w() const { return width / 4; }
};

// Grouped model outputs: logit vectors (I-group) and feature vectors (R-group),
// one per branch, batched as [N, dim] tensors.
struct EmbeddingGroups {
  std::vector<Tensor> logits;
  std::vector<Tensor> features;
};

// Backbone stand-in + optional attention module + multi-branch head.
// Branch order: global, upper part, lower part, channel-split.
class ReidModel {
 public:
  ReidModel(ModelConfig cfg, uint64_t init_seed);

  const ModelConfig& config() const { return cfg_; }

  // Named views over every trainable tensor (stable order).
  std::vector<std::pair<std::string, Tensor*>> params();
  std::vector<std::pair<std::string, const Tensor*>> params() const;

  struct Forward {
    Var fmap = nullptr;      // backbone output F
    Var attention = nullptr; // sigmoid map, null when CAM disabled
    Var fatt = nullptr;      // attended map fed to the head
    std::vector<Var> features;
    std::vector<Var> logits;
    std::unordered_map<std::string, Var> bound;  // param name -> leaf var
  };

  // Builds the full forward graph for a batch of images [N,H,W,3].
  // use_attention requires with_cam at construction.
  Forward forward(Tape& t, const Tensor& images, bool use_attention) const;

  // Stage-wise pieces (same graph builders, exposed for tests).
  Var backbone_forward(Tape& t, Var images, const Forward& f) const;
  Var cam_forward(Tape& t, Var fmap, const Forward& f) const;
  static Var apply_attention(Tape& t, Var fmap, Var attention);

  // Convenience inference path without gradient bookkeeping kept around.
  EmbeddingGroups infer(const Tensor& images, bool use_attention) const;
  // Attention map values only (for probes and heatmaps).
  Tensor attention_map(const Tensor& images) const;

  uint64_t param_hash() const;

 private:
  ModelConfig cfg_;

  struct Conv {
    Tensor w, b;
  };
  struct Head {
    Tensor w_feat, b_feat, w_cls, b_cls;
  };
  Conv conv1_, conv2_, conv3_;
  Tensor cam_w_, cam_b_;
  Head global_, part_top_, part_bot_;
  // channel branch: separate projections for the two channel halves
  Tensor ch_w_lo_, ch_b_lo_, ch_w_hi_, ch_b_hi_, ch_w_cls_, ch_b_cls_;
};

}  // namespace deskpro
