#pragma once

#include <functional>
#include <memory>
#include <vector>

#include "deskpro/tensor.hpp"

namespace deskpro {

// Reverse-mode tape. Nodes are created in topological order; backward walks
// the tape in reverse. All values are double precision.
class Tape {
 public:
  struct Node {
    Tensor val;
    Tensor grad;
    std::function<void()> back;  // accumulates into parent grads
  };

  using Var = Node*;

  Var make(Tensor val) {
    nodes_.push_back(std::make_unique<Node>());
    Node* n = nodes_.back().get();
    n->grad = Tensor(val.shape());
    n->val = std::move(val);
    return n;
  }

  // Seeds root->grad with 1 (root must be scalar) and runs the tape backward.
  void backward(Var root);

  size_t size() const { return nodes_.size(); }

 private:
  std::vector<std::unique_ptr<Node>> nodes_;
};

using Var = Tape::Var;

// Leaves
Var constant(Tape& t, Tensor v);

// Layers
Var conv2d(Tape& t, Var x, Var w, Var b, int stride, int pad);
Var relu(Tape& t, Var x);
Var sigmoid(Tape& t, Var x);
// y[n,i,j,c] = x[n,i,j,c] * m[n,i,j,0]
Var hadamard_broadcast(Tape& t, Var x, Var m);
// mean over rows [r0,r1) and all cols -> [N,C]
Var avg_pool_rows(Tape& t, Var x, int r0, int r1);
Var slice_cols(Tape& t, Var x, int c0, int c1);
Var linear(Tape& t, Var x, Var w, Var b);
Var concat_cols(Tape& t, const std::vector<Var>& parts);
Var l2_normalize_rows(Tape& t, Var x);

// Scalar arithmetic
Var zero_scalar(Tape& t);
Var add(Tape& t, Var a, Var b);
Var scale(Tape& t, Var a, double s);

// Losses (all return scalars)
// mean over all entries of (x - target)^2
Var mse_to_target(Tape& t, Var x, const Tensor& target);
// sum over nothing; per-sample CE of logits vs label, averaged over samples
// with mask[n] != 0 (all samples when mask empty). Zero active -> 0.
Var cross_entropy_mean(Tape& t, Var logits, const std::vector<int>& labels,
                       const std::vector<uint8_t>& mask = {});
// tau^2 * mean over active samples of KL(S(teacher/tau) || S(student/tau)).
// Teacher side is a constant (no gradient).
Var kl_distill(Tape& t, Var student_logits, const Tensor& teacher_logits,
               double tau, const std::vector<uint8_t>& mask = {});
// Batch-hard triplet: mean over anchors of
// max(0, d(a, hardest_pos) - d(a, hardest_neg) + margin), Euclidean d.
Var batch_hard_triplet_op(Tape& t, Var feats, const std::vector<int>& labels,
                          double margin);

// Plain-value softmax with temperature (max-subtracted).
std::vector<double> softmax_with_temperature(const std::vector<double>& z,
                                             double tau);

}  // namespace deskpro
