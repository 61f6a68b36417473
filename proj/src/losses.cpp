#include "deskpro/losses.hpp"

#include <cmath>

#include "deskpro/errors.hpp"

namespace deskpro {

namespace {

Tensor resize_area(const Tensor& grid, int hf, int wf) {
  const int H = grid.dim(0), W = grid.dim(1);
  Tensor out({hf, wf});
  // Average over the exact source footprint of each target cell.
  const double sy = static_cast<double>(H) / hf;
  const double sx = static_cast<double>(W) / wf;
  for (int i = 0; i < hf; ++i) {
    for (int j = 0; j < wf; ++j) {
      const double y0 = i * sy, y1 = (i + 1) * sy;
      const double x0 = j * sx, x1 = (j + 1) * sx;
      double acc = 0.0, area = 0.0;
      for (int y = static_cast<int>(y0); y < H && y < y1; ++y) {
        const double wy =
            std::min<double>(y + 1, y1) - std::max<double>(y, y0);
        for (int x = static_cast<int>(x0); x < W && x < x1; ++x) {
          const double wx =
              std::min<double>(x + 1, x1) - std::max<double>(x, x0);
          acc += grid[static_cast<int64_t>(y) * W + x] * wy * wx;
          area += wy * wx;
        }
      }
      out[static_cast<int64_t>(i) * wf + j] = acc / area;
    }
  }
  return out;
}

Tensor resize_nearest(const Tensor& grid, int hf, int wf) {
  const int H = grid.dim(0), W = grid.dim(1);
  Tensor out({hf, wf});
  for (int i = 0; i < hf; ++i)
    for (int j = 0; j < wf; ++j) {
      const int y = std::min(H - 1, static_cast<int>((i + 0.5) * H / hf));
      const int x = std::min(W - 1, static_cast<int>((j + 0.5) * W / wf));
      out[static_cast<int64_t>(i) * wf + j] =
          grid[static_cast<int64_t>(y) * W + x];
    }
  return out;
}

}  // namespace

ClothMask cloth_irrelevant_mask(const std::vector<int>& parsing_mask, int H,
                                int W, const std::set<int>& cloth_categories,
                                const std::set<int>& known_categories,
                                double epsilon, int hf, int wf,
                                MaskResize mode) {
  if (epsilon <= 0.0 || epsilon >= 1.0)
    throw ConfigError("mask epsilon must lie in (0,1)");
  if (static_cast<int>(parsing_mask.size()) != H * W)
    throw ShapeError("parsing mask size mismatch");
  ClothMask m;
  m.epsilon = epsilon;
  m.raw = Tensor({H, W});
  for (int i = 0; i < H * W; ++i) {
    const int code = parsing_mask[static_cast<size_t>(i)];
    if (!known_categories.count(code))
      throw DataError("unknown parsing category code " + std::to_string(code));
    m.raw[i] = cloth_categories.count(code) ? epsilon : 1.0;
  }
  m.resized = mode == MaskResize::kArea ? resize_area(m.raw, hf, wf)
                                        : resize_nearest(m.raw, hf, wf);
  return m;
}

Var attention_loss(Tape& t, Var attention, const Tensor& targets) {
  return mse_to_target(t, attention, targets);
}

Var cross_entropy_sum(Tape& t, const std::vector<Var>& logit_group,
                      const std::vector<int>& labels,
                      const std::vector<uint8_t>& mask) {
  Var acc = zero_scalar(t);
  for (Var l : logit_group)
    acc = add(t, acc, cross_entropy_mean(t, l, labels, mask));
  return acc;
}

Var fkp_loss(Tape& t, const std::vector<Var>& student_logits,
             const std::vector<Tensor>& teacher_logits, double tau,
             const std::vector<uint8_t>& mask) {
  if (student_logits.size() != teacher_logits.size())
    throw ShapeError("teacher/student group cardinality mismatch");
  Var acc = zero_scalar(t);
  for (size_t i = 0; i < student_logits.size(); ++i)
    acc = add(t, acc, kl_distill(t, student_logits[i], teacher_logits[i], tau,
                                 mask));
  return acc;
}

Var batch_hard_triplet_sum(Tape& t, const std::vector<Var>& feature_group,
                           const std::vector<int>& labels, double margin) {
  Var acc = zero_scalar(t);
  for (Var f : feature_group)
    acc = add(t, acc, batch_hard_triplet_op(t, f, labels, margin));
  return acc;
}

Var total_loss(Tape& t, Var l_att, Var l_trip, Var l_fkp, Var l_ce_s,
               Var l_ce_g, const LossWeights& w) {
  auto check = [](Var v, const char* name) {
    if (v && !std::isfinite(v->val[0]))
      throw NumericError(std::string("non-finite loss term: ") + name);
  };
  check(l_att, "L_att");
  check(l_trip, "L_trip");
  check(l_fkp, "L_fkp");
  check(l_ce_s, "L_ce_s");
  check(l_ce_g, "L_ce_g");
  Var acc = zero_scalar(t);
  if (l_att) acc = add(t, acc, scale(t, l_att, w.lambda_att));
  if (l_trip) acc = add(t, acc, l_trip);
  if (l_fkp) acc = add(t, acc, scale(t, l_fkp, w.alpha));
  if (l_ce_s) acc = add(t, acc, scale(t, l_ce_s, 1.0 - w.alpha));
  if (l_ce_g) acc = add(t, acc, l_ce_g);
  return acc;
}

}  // namespace deskpro
