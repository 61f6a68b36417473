#pragma once

#include <set>
#include <vector>

#include "deskpro/autodiff.hpp"
#include "deskpro/tensor.hpp"

namespace deskpro {

enum class MaskResize { kArea, kNearest };

// Target grid for the attention supervision: epsilon on cloth-related cells,
// 1 elsewhere, plus the copy resampled to the feature-map resolution.
struct ClothMask {
  Tensor raw;      // [H,W], entries exactly epsilon or 1
  Tensor resized;  // [hf,wf], entries in [epsilon,1]
  double epsilon = 0.1;
};

ClothMask cloth_irrelevant_mask(const std::vector<int>& parsing_mask, int H,
                                int W, const std::set<int>& cloth_categories,
                                const std::set<int>& known_categories,
                                double epsilon, int hf, int wf,
                                MaskResize mode = MaskResize::kArea);

// Mean squared error between the attention map and the resized target.
// `attention` is [N,hf,wf,1]; `targets` is [N,hf,wf,1].
Var attention_loss(Tape& t, Var attention, const Tensor& targets);

// Eq-level wrappers over the autodiff ops for whole groups.

// Sum over group members of batchwise-mean cross-entropy.
Var cross_entropy_sum(Tape& t, const std::vector<Var>& logit_group,
                      const std::vector<int>& labels,
                      const std::vector<uint8_t>& mask = {});

// Sum over group members of tau^2 * KL(teacher || student).
Var fkp_loss(Tape& t, const std::vector<Var>& student_logits,
             const std::vector<Tensor>& teacher_logits, double tau,
             const std::vector<uint8_t>& mask = {});

// Sum over group members of batch-hard triplet.
Var batch_hard_triplet_sum(Tape& t, const std::vector<Var>& feature_group,
                           const std::vector<int>& labels, double margin);

struct LossWeights {
  double lambda_att = 7.0;
  double alpha = 0.7;
  double temperature = 5.0;
  double triplet_margin = 0.3;
  double epsilon = 0.1;
};

// L = lambda*L_att + L_trip + (alpha*L_fkp + (1-alpha)*L_ce_s) + L_ce_g.
// Null parts are treated as zero.
Var total_loss(Tape& t, Var l_att, Var l_trip, Var l_fkp, Var l_ce_s,
               Var l_ce_g, const LossWeights& w);

}  // namespace deskpro
