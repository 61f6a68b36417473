#include "deskpro/autodiff.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <limits>

namespace deskpro {

using RowMat =
    Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using MapConstMat = Eigen::Map<const RowMat>;

void Tape::backward(Var root) {
  if (root->val.numel() != 1) throw ShapeError("backward root must be scalar");
  root->grad[0] = 1.0;
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
    if ((*it)->back) (*it)->back();
  }
}

Var constant(Tape& t, Tensor v) { return t.make(std::move(v)); }

Var conv2d(Tape& t, Var x, Var w, Var b, int stride, int pad) {
  const auto& xs = x->val.shape();
  const auto& ws = w->val.shape();
  if (xs.size() != 4 || ws.size() != 4)
    throw ShapeError("conv2d expects NHWC input and KKIO weights");
  const int N = xs[0], H = xs[1], W = xs[2], Cin = xs[3];
  const int KH = ws[0], KW = ws[1], WCin = ws[2], Cout = ws[3];
  if (WCin != Cin) throw ShapeError("conv2d channel mismatch");
  if (b->val.numel() != Cout) throw ShapeError("conv2d bias size mismatch");
  const int OH = (H + 2 * pad - KH) / stride + 1;
  const int OW = (W + 2 * pad - KW) / stride + 1;
  const int K = KH * KW * Cin;
  const int R = N * OH * OW;

  auto col = std::make_shared<RowMat>(R, K);
  col->setZero();
  for (int n = 0; n < N; ++n) {
    for (int oi = 0; oi < OH; ++oi) {
      for (int oj = 0; oj < OW; ++oj) {
        const int r = (n * OH + oi) * OW + oj;
        double* row = col->data() + static_cast<size_t>(r) * K;
        for (int kh = 0; kh < KH; ++kh) {
          const int ii = oi * stride - pad + kh;
          if (ii < 0 || ii >= H) continue;
          for (int kw = 0; kw < KW; ++kw) {
            const int jj = oj * stride - pad + kw;
            if (jj < 0 || jj >= W) continue;
            const double* src = &x->val.at4(n, ii, jj, 0);
            double* dst = row + (kh * KW + kw) * Cin;
            std::copy(src, src + Cin, dst);
          }
        }
      }
    }
  }

  Tensor out({N, OH, OW, Cout});
  MapMat y(out.data(), R, Cout);
  MapConstMat wm(w->val.data(), K, Cout);
  y.noalias() = (*col) * wm;
  Eigen::Map<const Eigen::RowVectorXd> bv(b->val.data(), Cout);
  y.rowwise() += bv;

  Var o = t.make(std::move(out));
  o->back = [o, x, w, b, col, N, H, W, Cin, KH, KW, Cout, OH, OW, stride, pad,
             K, R]() {
    MapConstMat gy(o->grad.data(), R, Cout);
    MapMat gw(w->grad.data(), K, Cout);
    gw.noalias() += col->transpose() * gy;
    Eigen::Map<Eigen::RowVectorXd> gb(b->grad.data(), Cout);
    gb += gy.colwise().sum();

    MapConstMat wm(w->val.data(), K, Cout);
    RowMat gcol = gy * wm.transpose();
    for (int n = 0; n < N; ++n) {
      for (int oi = 0; oi < OH; ++oi) {
        for (int oj = 0; oj < OW; ++oj) {
          const int r = (n * OH + oi) * OW + oj;
          const double* row = gcol.data() + static_cast<size_t>(r) * K;
          for (int kh = 0; kh < KH; ++kh) {
            const int ii = oi * stride - pad + kh;
            if (ii < 0 || ii >= H) continue;
            for (int kw = 0; kw < KW; ++kw) {
              const int jj = oj * stride - pad + kw;
              if (jj < 0 || jj >= W) continue;
              const double* src = row + (kh * KW + kw) * Cin;
              double* dst = &x->grad.at4(n, ii, jj, 0);
              for (int c = 0; c < Cin; ++c) dst[c] += src[c];
            }
          }
        }
      }
    }
  };
  return o;
}

Var relu(Tape& t, Var x) {
  Tensor out = x->val;
  for (auto& v : out.raw()) v = v > 0.0 ? v : 0.0;
  Var o = t.make(std::move(out));
  o->back = [o, x]() {
    const int64_t n = x->val.numel();
    for (int64_t i = 0; i < n; ++i)
      if (x->val[i] > 0.0) x->grad[i] += o->grad[i];
  };
  return o;
}

Var sigmoid(Tape& t, Var x) {
  Tensor out = x->val;
  for (auto& v : out.raw()) v = 1.0 / (1.0 + std::exp(-v));
  Var o = t.make(std::move(out));
  o->back = [o, x]() {
    const int64_t n = x->val.numel();
    for (int64_t i = 0; i < n; ++i) {
      const double y = o->val[i];
      x->grad[i] += o->grad[i] * y * (1.0 - y);
    }
  };
  return o;
}

Var hadamard_broadcast(Tape& t, Var x, Var m) {
  const auto& xs = x->val.shape();
  const auto& ms = m->val.shape();
  if (ms.size() != 4 || ms[3] != 1 || xs[0] != ms[0] || xs[1] != ms[1] ||
      xs[2] != ms[2])
    throw ShapeError("hadamard_broadcast spatial dim mismatch");
  const int N = xs[0], H = xs[1], W = xs[2], C = xs[3];
  Tensor out(xs);
  for (int n = 0; n < N; ++n)
    for (int i = 0; i < H; ++i)
      for (int j = 0; j < W; ++j) {
        const double s = m->val.at4(n, i, j, 0);
        for (int c = 0; c < C; ++c)
          out.at4(n, i, j, c) = x->val.at4(n, i, j, c) * s;
      }
  Var o = t.make(std::move(out));
  o->back = [o, x, m, N, H, W, C]() {
    for (int n = 0; n < N; ++n)
      for (int i = 0; i < H; ++i)
        for (int j = 0; j < W; ++j) {
          const double s = m->val.at4(n, i, j, 0);
          double acc = 0.0;
          for (int c = 0; c < C; ++c) {
            x->grad.at4(n, i, j, c) += o->grad.at4(n, i, j, c) * s;
            acc += o->grad.at4(n, i, j, c) * x->val.at4(n, i, j, c);
          }
          m->grad.at4(n, i, j, 0) += acc;
        }
  };
  return o;
}

Var avg_pool_rows(Tape& t, Var x, int r0, int r1) {
  const auto& xs = x->val.shape();
  if (xs.size() != 4) throw ShapeError("avg_pool_rows expects NHWC");
  const int N = xs[0], H = xs[1], W = xs[2], C = xs[3];
  if (r0 < 0 || r1 > H || r0 >= r1) throw ShapeError("bad pooling row range");
  const double inv = 1.0 / ((r1 - r0) * W);
  Tensor out({N, C});
  for (int n = 0; n < N; ++n)
    for (int i = r0; i < r1; ++i)
      for (int j = 0; j < W; ++j)
        for (int c = 0; c < C; ++c)
          out.at2(n, c) += x->val.at4(n, i, j, c) * inv;
  Var o = t.make(std::move(out));
  o->back = [o, x, N, W, C, r0, r1, inv]() {
    for (int n = 0; n < N; ++n)
      for (int i = r0; i < r1; ++i)
        for (int j = 0; j < W; ++j)
          for (int c = 0; c < C; ++c)
            x->grad.at4(n, i, j, c) += o->grad.at2(n, c) * inv;
  };
  return o;
}

Var slice_cols(Tape& t, Var x, int c0, int c1) {
  const auto& xs = x->val.shape();
  if (xs.size() != 2 || c0 < 0 || c1 > xs[1] || c0 >= c1)
    throw ShapeError("bad column slice");
  const int N = xs[0], D = c1 - c0;
  Tensor out({N, D});
  for (int n = 0; n < N; ++n)
    for (int d = 0; d < D; ++d) out.at2(n, d) = x->val.at2(n, c0 + d);
  Var o = t.make(std::move(out));
  o->back = [o, x, N, D, c0]() {
    for (int n = 0; n < N; ++n)
      for (int d = 0; d < D; ++d) x->grad.at2(n, c0 + d) += o->grad.at2(n, d);
  };
  return o;
}

Var linear(Tape& t, Var x, Var w, Var b) {
  const auto& xs = x->val.shape();
  const auto& ws = w->val.shape();
  if (xs.size() != 2 || ws.size() != 2 || xs[1] != ws[0])
    throw ShapeError("linear shape mismatch");
  const int N = xs[0], Din = xs[1], Dout = ws[1];
  if (b->val.numel() != Dout) throw ShapeError("linear bias mismatch");
  Tensor out({N, Dout});
  MapMat y(out.data(), N, Dout);
  MapConstMat xm(x->val.data(), N, Din);
  MapConstMat wm(w->val.data(), Din, Dout);
  y.noalias() = xm * wm;
  Eigen::Map<const Eigen::RowVectorXd> bv(b->val.data(), Dout);
  y.rowwise() += bv;
  Var o = t.make(std::move(out));
  o->back = [o, x, w, b, N, Din, Dout]() {
    MapConstMat gy(o->grad.data(), N, Dout);
    MapConstMat xm(x->val.data(), N, Din);
    MapConstMat wm(w->val.data(), Din, Dout);
    MapMat gx(x->grad.data(), N, Din);
    MapMat gw(w->grad.data(), Din, Dout);
    gx.noalias() += gy * wm.transpose();
    gw.noalias() += xm.transpose() * gy;
    Eigen::Map<Eigen::RowVectorXd> gb(b->grad.data(), Dout);
    gb += gy.colwise().sum();
  };
  return o;
}

Var concat_cols(Tape& t, const std::vector<Var>& parts) {
  if (parts.empty()) throw ShapeError("concat of nothing");
  const int N = parts[0]->val.dim(0);
  int D = 0;
  for (Var p : parts) {
    if (p->val.ndims() != 2 || p->val.dim(0) != N)
      throw ShapeError("concat row mismatch");
    D += p->val.dim(1);
  }
  Tensor out({N, D});
  int off = 0;
  for (Var p : parts) {
    const int d = p->val.dim(1);
    for (int n = 0; n < N; ++n)
      for (int j = 0; j < d; ++j) out.at2(n, off + j) = p->val.at2(n, j);
    off += d;
  }
  Var o = t.make(std::move(out));
  auto ps = parts;
  o->back = [o, ps, N]() {
    int off = 0;
    for (Var p : ps) {
      const int d = p->val.dim(1);
      for (int n = 0; n < N; ++n)
        for (int j = 0; j < d; ++j) p->grad.at2(n, j) += o->grad.at2(n, off + j);
      off += d;
    }
  };
  return o;
}

Var l2_normalize_rows(Tape& t, Var x) {
  const int N = x->val.dim(0), D = x->val.dim(1);
  Tensor out({N, D});
  std::vector<double> norms(static_cast<size_t>(N));
  for (int n = 0; n < N; ++n) {
    double s = 0.0;
    for (int d = 0; d < D; ++d) s += x->val.at2(n, d) * x->val.at2(n, d);
    const double nm = std::sqrt(s);
    if (nm < 1e-12) throw NumericError("l2_normalize of zero vector");
    norms[static_cast<size_t>(n)] = nm;
    for (int d = 0; d < D; ++d) out.at2(n, d) = x->val.at2(n, d) / nm;
  }
  Var o = t.make(std::move(out));
  o->back = [o, x, N, D, norms]() {
    for (int n = 0; n < N; ++n) {
      double dot = 0.0;
      for (int d = 0; d < D; ++d) dot += o->grad.at2(n, d) * o->val.at2(n, d);
      const double inv = 1.0 / norms[static_cast<size_t>(n)];
      for (int d = 0; d < D; ++d)
        x->grad.at2(n, d) += (o->grad.at2(n, d) - o->val.at2(n, d) * dot) * inv;
    }
  };
  return o;
}

Var zero_scalar(Tape& t) { return t.make(Tensor({1})); }

Var add(Tape& t, Var a, Var b) {
  if (!a->val.same_shape(b->val)) throw ShapeError("add shape mismatch");
  Tensor out = a->val;
  for (int64_t i = 0; i < out.numel(); ++i) out[i] += b->val[i];
  Var o = t.make(std::move(out));
  o->back = [o, a, b]() {
    for (int64_t i = 0; i < o->val.numel(); ++i) {
      a->grad[i] += o->grad[i];
      b->grad[i] += o->grad[i];
    }
  };
  return o;
}

Var scale(Tape& t, Var a, double s) {
  Tensor out = a->val;
  for (auto& v : out.raw()) v *= s;
  Var o = t.make(std::move(out));
  o->back = [o, a, s]() {
    for (int64_t i = 0; i < o->val.numel(); ++i) a->grad[i] += o->grad[i] * s;
  };
  return o;
}

Var mse_to_target(Tape& t, Var x, const Tensor& target) {
  if (!x->val.same_shape(target)) throw ShapeError("mse target shape mismatch");
  const int64_t n = x->val.numel();
  if (n == 0) throw ShapeError("mse of empty tensor");
  double acc = 0.0;
  for (int64_t i = 0; i < n; ++i) {
    const double d = x->val[i] - target[i];
    acc += d * d;
  }
  Tensor out({1});
  out[0] = acc / static_cast<double>(n);
  Var o = t.make(std::move(out));
  Tensor tgt = target;
  o->back = [o, x, tgt, n]() {
    const double g = o->grad[0] * 2.0 / static_cast<double>(n);
    for (int64_t i = 0; i < n; ++i) x->grad[i] += g * (x->val[i] - tgt[i]);
  };
  return o;
}

namespace {
std::vector<uint8_t> full_mask(int n, const std::vector<uint8_t>& mask) {
  if (mask.empty()) return std::vector<uint8_t>(static_cast<size_t>(n), 1);
  if (static_cast<int>(mask.size()) != n)
    throw ShapeError("sample mask length mismatch");
  return mask;
}
}  // namespace

Var cross_entropy_mean(Tape& t, Var logits, const std::vector<int>& labels,
                       const std::vector<uint8_t>& mask) {
  const int N = logits->val.dim(0), K = logits->val.dim(1);
  if (static_cast<int>(labels.size()) != N)
    throw ShapeError("labels length mismatch");
  auto m = full_mask(N, mask);
  int count = 0;
  double acc = 0.0;
  std::vector<double> probs(static_cast<size_t>(N) * K, 0.0);
  for (int n = 0; n < N; ++n) {
    if (!m[static_cast<size_t>(n)]) continue;
    const int y = labels[static_cast<size_t>(n)];
    if (y < 0 || y >= K) throw DataError("identity label out of range");
    double mx = -std::numeric_limits<double>::infinity();
    for (int k = 0; k < K; ++k) mx = std::max(mx, logits->val.at2(n, k));
    double z = 0.0;
    for (int k = 0; k < K; ++k) z += std::exp(logits->val.at2(n, k) - mx);
    for (int k = 0; k < K; ++k)
      probs[static_cast<size_t>(n) * K + k] =
          std::exp(logits->val.at2(n, k) - mx) / z;
    acc += std::log(z) + mx - logits->val.at2(n, y);
    ++count;
  }
  Tensor out({1});
  out[0] = count > 0 ? acc / count : 0.0;
  Var o = t.make(std::move(out));
  o->back = [o, logits, labels, m, probs, N, K, count]() {
    if (count == 0) return;
    const double g = o->grad[0] / count;
    for (int n = 0; n < N; ++n) {
      if (!m[static_cast<size_t>(n)]) continue;
      for (int k = 0; k < K; ++k) {
        double p = probs[static_cast<size_t>(n) * K + k];
        if (k == labels[static_cast<size_t>(n)]) p -= 1.0;
        logits->grad.at2(n, k) += g * p;
      }
    }
  };
  return o;
}

std::vector<double> softmax_with_temperature(const std::vector<double>& z,
                                             double tau) {
  if (tau <= 0.0) throw ConfigError("softmax temperature must be positive");
  std::vector<double> p(z.size());
  double mx = -std::numeric_limits<double>::infinity();
  for (double v : z) mx = std::max(mx, v / tau);
  double s = 0.0;
  for (size_t i = 0; i < z.size(); ++i) {
    p[i] = std::exp(z[i] / tau - mx);
    s += p[i];
  }
  for (auto& v : p) v /= s;
  return p;
}

Var kl_distill(Tape& t, Var student_logits, const Tensor& teacher_logits,
               double tau, const std::vector<uint8_t>& mask) {
  if (tau <= 0.0) throw ConfigError("distillation temperature must be positive");
  if (!student_logits->val.same_shape(teacher_logits))
    throw ShapeError("teacher/student logit shape mismatch");
  const int N = student_logits->val.dim(0), K = student_logits->val.dim(1);
  auto m = full_mask(N, mask);
  int count = 0;
  double acc = 0.0;
  std::vector<double> pt(static_cast<size_t>(N) * K), qs(pt.size());
  for (int n = 0; n < N; ++n) {
    if (!m[static_cast<size_t>(n)]) continue;
    std::vector<double> zt(static_cast<size_t>(K)), zs(static_cast<size_t>(K));
    for (int k = 0; k < K; ++k) {
      zt[static_cast<size_t>(k)] = teacher_logits.at2(n, k);
      zs[static_cast<size_t>(k)] = student_logits->val.at2(n, k);
    }
    auto p = softmax_with_temperature(zt, tau);
    auto q = softmax_with_temperature(zs, tau);
    for (int k = 0; k < K; ++k) {
      pt[static_cast<size_t>(n) * K + k] = p[static_cast<size_t>(k)];
      qs[static_cast<size_t>(n) * K + k] = q[static_cast<size_t>(k)];
      acc += p[static_cast<size_t>(k)] *
             (std::log(p[static_cast<size_t>(k)]) -
              std::log(q[static_cast<size_t>(k)]));
    }
    ++count;
  }
  Tensor out({1});
  out[0] = count > 0 ? tau * tau * acc / count : 0.0;
  Var o = t.make(std::move(out));
  o->back = [o, student_logits, m, pt, qs, tau, N, K, count]() {
    if (count == 0) return;
    const double g = o->grad[0] * tau / count;  // tau^2 * (1/tau)
    for (int n = 0; n < N; ++n) {
      if (!m[static_cast<size_t>(n)]) continue;
      for (int k = 0; k < K; ++k) {
        const size_t i = static_cast<size_t>(n) * K + k;
        student_logits->grad.at2(n, k) += g * (qs[i] - pt[i]);
      }
    }
  };
  return o;
}

Var batch_hard_triplet_op(Tape& t, Var feats, const std::vector<int>& labels,
                          double margin) {
  const int N = feats->val.dim(0), D = feats->val.dim(1);
  if (static_cast<int>(labels.size()) != N)
    throw ShapeError("labels length mismatch");
  bool two_ids = false;
  for (int i = 1; i < N; ++i)
    if (labels[static_cast<size_t>(i)] != labels[0]) two_ids = true;
  if (!two_ids)
    throw BatchCompositionError("batch-hard triplet needs >= 2 identities");

  std::vector<double> dist(static_cast<size_t>(N) * N, 0.0);
  for (int a = 0; a < N; ++a)
    for (int b = a + 1; b < N; ++b) {
      double s = 0.0;
      for (int d = 0; d < D; ++d) {
        const double diff = feats->val.at2(a, d) - feats->val.at2(b, d);
        s += diff * diff;
      }
      const double dd = std::sqrt(s);
      dist[static_cast<size_t>(a) * N + b] = dd;
      dist[static_cast<size_t>(b) * N + a] = dd;
    }

  struct AnchorSel {
    int a, p, n;
    bool active;  // hinge > 0
  };
  std::vector<AnchorSel> sels;
  double acc = 0.0;
  for (int a = 0; a < N; ++a) {
    int hp = -1, hn = -1;
    double dp = -1.0, dn = std::numeric_limits<double>::infinity();
    for (int b = 0; b < N; ++b) {
      if (b == a) continue;
      const double dd = dist[static_cast<size_t>(a) * N + b];
      if (labels[static_cast<size_t>(b)] == labels[static_cast<size_t>(a)]) {
        if (dd > dp) {
          dp = dd;
          hp = b;
        }
      } else if (dd < dn) {
        dn = dd;
        hn = b;
      }
    }
    if (hp < 0 || hn < 0) continue;  // singleton identity anchor
    const double hinge = dp - dn + margin;
    if (hinge > 0.0) acc += hinge;
    sels.push_back({a, hp, hn, hinge > 0.0});
  }
  const int A = static_cast<int>(sels.size());
  Tensor out({1});
  out[0] = A > 0 ? acc / A : 0.0;
  Var o = t.make(std::move(out));
  o->back = [o, feats, sels, dist, N, D, A]() {
    if (A == 0) return;
    const double g = o->grad[0] / A;
    for (const auto& s : sels) {
      if (!s.active) continue;
      const double dp = dist[static_cast<size_t>(s.a) * N + s.p];
      const double dn = dist[static_cast<size_t>(s.a) * N + s.n];
      if (dp > 1e-12) {
        for (int d = 0; d < D; ++d) {
          const double u = (feats->val.at2(s.a, d) - feats->val.at2(s.p, d)) / dp;
          feats->grad.at2(s.a, d) += g * u;
          feats->grad.at2(s.p, d) -= g * u;
        }
      }
      if (dn > 1e-12) {
        for (int d = 0; d < D; ++d) {
          const double u = (feats->val.at2(s.a, d) - feats->val.at2(s.n, d)) / dn;
          feats->grad.at2(s.a, d) -= g * u;
          feats->grad.at2(s.n, d) += g * u;
        }
      }
    }
  };
  return o;
}

}  // namespace deskpro
