#include "pcnn/autodiff.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <numbers>

#include "pcnn/error.hpp"

namespace pcnn::nk {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using ConstMapMat = Eigen::Map<const RowMat>;

[[noreturn]] void dimension_error(const std::string& op, const Shape& a,
                                  const Shape& b) {
  throw Error(ErrorKind::Dimension, op + ": incompatible shapes " +
                                        shape_string(a) + " and " +
                                        shape_string(b));
}

void require_rank(const std::string& op, const Tensor& t, std::size_t rank) {
  if (t.rank() != rank) {
    throw Error(ErrorKind::Dimension, op + ": expected rank " +
                                          std::to_string(rank) + ", got " +
                                          shape_string(t.shape()));
  }
}

Tape& tape_of(Var v) {
  if (v.tape == nullptr) throw Error(ErrorKind::Usage, "variable has no tape");
  return *v.tape;
}

void same_tape(Var a, Var b) {
  if (a.tape != b.tape) {
    throw Error(ErrorKind::Usage, "variables belong to different tapes");
  }
}

constexpr double kInvSqrt2 = 0.70710678118654752440;
constexpr double kInvSqrt2Pi = 0.39894228040143267794;

}  // namespace

// ---------------------------------------------------------------------------
// Tape

const Tensor& Var::value() const { return tape_of(*this).value(*this); }

Var Tape::leaf(Tensor value, bool requires_grad) {
  nodes_.push_back(Node{std::move(value), Tensor{}, nullptr, requires_grad});
  return Var{this, nodes_.size() - 1};
}

Var Tape::record(Tensor value, std::initializer_list<Var> inputs,
                 BackwardFn fn) {
  bool needs = false;
  for (Var in : inputs) {
    if (in.tape != this) {
      throw Error(ErrorKind::Usage, "op input recorded on a different tape");
    }
    needs = needs || nodes_[in.id].needs_grad;
  }
  nodes_.push_back(
      Node{std::move(value), Tensor{}, needs ? std::move(fn) : nullptr, needs});
  return Var{this, nodes_.size() - 1};
}

const Tensor& Tape::value(Var v) const {
  if (v.tape != this || v.id >= nodes_.size()) {
    throw Error(ErrorKind::Usage, "variable is not on this tape");
  }
  return nodes_[v.id].value;
}

Tensor Tape::grad(Var v) const {
  const Node& node = nodes_.at(v.id);
  if (node.grad.size() == node.value.size() && node.grad.size() > 0) {
    return node.grad;
  }
  return Tensor(node.value.shape(), 0.0);
}

Tensor& Tape::grad_buffer(std::size_t id) {
  Node& node = nodes_[id];
  if (node.grad.shape() != node.value.shape()) {
    node.grad = Tensor(node.value.shape(), 0.0);
  }
  return node.grad;
}

void Tape::backward(Var loss) {
  if (loss.tape != this || loss.id >= nodes_.size()) {
    throw Error(ErrorKind::Usage, "loss was not produced on this tape");
  }
  if (nodes_[loss.id].value.size() != 1) {
    throw Error(ErrorKind::Usage,
                "backward needs a scalar loss, got " +
                    shape_string(nodes_[loss.id].value.shape()));
  }
  for (Node& node : nodes_) node.grad = Tensor{};
  grad_buffer(loss.id).fill(1.0);
  visits_ = 0;
  for (std::size_t id = loss.id + 1; id-- > 0;) {
    ++visits_;
    Node& node = nodes_[id];
    if (node.backward && node.grad.size() > 0) node.backward(*this, id);
  }
}

// ---------------------------------------------------------------------------
// Elementwise and shape ops

Var linear(Var x, Var weight, Var bias) {
  Tape& tape = tape_of(x);
  same_tape(x, weight);
  same_tape(x, bias);
  const Tensor& xv = x.value();
  const Tensor& wv = weight.value();
  const Tensor& bv = bias.value();
  if (wv.rank() != 2 || xv.rank() < 1 || xv.shape().back() != wv.dim(0)) {
    dimension_error("linear", xv.shape(), wv.shape());
  }
  const std::size_t in = wv.dim(0);
  const std::size_t out = wv.dim(1);
  if (bv.size() != out) dimension_error("linear bias", wv.shape(), bv.shape());
  const std::size_t rows = xv.size() / in;

  Shape yshape = xv.shape();
  yshape.back() = out;
  Tensor y(yshape);
  {
    ConstMapMat X(xv.ptr(), rows, in);
    ConstMapMat W(wv.ptr(), in, out);
    MapMat Y(y.ptr(), rows, out);
    Y.noalias() = X * W;
    Eigen::Map<const Eigen::RowVectorXd> b(bv.ptr(), out);
    Y.rowwise() += b;
  }
  const std::size_t xi = x.id, wi = weight.id, bi = bias.id;
  return tape.record(std::move(y), {x, weight, bias},
                     [xi, wi, bi, rows, in, out](Tape& t, std::size_t self) {
                       ConstMapMat G(t.upstream(self).ptr(), rows, out);
                       if (t.needs_grad(xi)) {
                         ConstMapMat W(t.value(wi).ptr(), in, out);
                         MapMat GX(t.grad_buffer(xi).ptr(), rows, in);
                         GX.noalias() += G * W.transpose();
                       }
                       if (t.needs_grad(wi)) {
                         ConstMapMat X(t.value(xi).ptr(), rows, in);
                         MapMat GW(t.grad_buffer(wi).ptr(), in, out);
                         GW.noalias() += X.transpose() * G;
                       }
                       if (t.needs_grad(bi)) {
                         Eigen::Map<Eigen::RowVectorXd> gb(
                             t.grad_buffer(bi).ptr(), out);
                         gb += G.colwise().sum();
                       }
                     });
}

Var add(Var a, Var b) {
  Tape& tape = tape_of(a);
  same_tape(a, b);
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  if (av.shape() != bv.shape()) dimension_error("add", av.shape(), bv.shape());
  Tensor y = av;
  for (std::size_t i = 0; i < y.size(); ++i) y[i] += bv[i];
  const std::size_t ai = a.id, bi = b.id;
  return tape.record(std::move(y), {a, b}, [ai, bi](Tape& t, std::size_t self) {
    const Tensor& g = t.upstream(self);
    for (std::size_t in : {ai, bi}) {
      if (!t.needs_grad(in)) continue;
      Tensor& gi = t.grad_buffer(in);
      for (std::size_t i = 0; i < g.size(); ++i) gi[i] += g[i];
    }
  });
}

Var add_broadcast(Var x, Var p) {
  Tape& tape = tape_of(x);
  same_tape(x, p);
  const Tensor& xv = x.value();
  const Tensor& pv = p.value();
  if (xv.rank() != 3 || pv.rank() != 2 || xv.dim(1) != pv.dim(0) ||
      xv.dim(2) != pv.dim(1)) {
    dimension_error("add_broadcast", xv.shape(), pv.shape());
  }
  const std::size_t batch = xv.dim(0);
  const std::size_t block = pv.size();
  Tensor y = xv;
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t i = 0; i < block; ++i) y[b * block + i] += pv[i];
  }
  const std::size_t xi = x.id, pi = p.id;
  return tape.record(std::move(y), {x, p},
                     [xi, pi, batch, block](Tape& t, std::size_t self) {
                       const Tensor& g = t.upstream(self);
                       if (t.needs_grad(xi)) {
                         Tensor& gx = t.grad_buffer(xi);
                         for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
                       }
                       if (t.needs_grad(pi)) {
                         Tensor& gp = t.grad_buffer(pi);
                         for (std::size_t b = 0; b < batch; ++b) {
                           for (std::size_t i = 0; i < block; ++i) {
                             gp[i] += g[b * block + i];
                           }
                         }
                       }
                     });
}

Var reshape(Var x, Shape shape) {
  Tape& tape = tape_of(x);
  Tensor y = x.value().reshaped(std::move(shape));
  const std::size_t xi = x.id;
  return tape.record(std::move(y), {x}, [xi](Tape& t, std::size_t self) {
    const Tensor& g = t.upstream(self);
    Tensor& gx = t.grad_buffer(xi);
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
  });
}

double gelu_value(double x) { return 0.5 * x * (1.0 + std::erf(x * kInvSqrt2)); }

double sigmoid_value(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

double bce_value(double logit, double label) {
  return std::max(logit, 0.0) - logit * label +
         std::log1p(std::exp(-std::abs(logit)));
}

Var gelu(Var x) {
  Tape& tape = tape_of(x);
  Tensor y = x.value();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = gelu_value(y[i]);
  const std::size_t xi = x.id;
  return tape.record(std::move(y), {x}, [xi](Tape& t, std::size_t self) {
    const Tensor& g = t.upstream(self);
    const Tensor& xv = t.value(xi);
    Tensor& gx = t.grad_buffer(xi);
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double v = xv[i];
      const double cdf = 0.5 * (1.0 + std::erf(v * kInvSqrt2));
      const double pdf = kInvSqrt2Pi * std::exp(-0.5 * v * v);
      gx[i] += g[i] * (cdf + v * pdf);
    }
  });
}

Var sigmoid(Var x) {
  Tape& tape = tape_of(x);
  Tensor y = x.value();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = sigmoid_value(y[i]);
  const std::size_t xi = x.id;
  return tape.record(std::move(y), {x}, [xi](Tape& t, std::size_t self) {
    const Tensor& g = t.upstream(self);
    const Tensor& s = t.value(self);
    Tensor& gx = t.grad_buffer(xi);
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * s[i] * (1.0 - s[i]);
  });
}

Var batchnorm(Var x, Var gamma, Var beta, BatchNormStats& stats, Mode mode) {
  Tape& tape = tape_of(x);
  same_tape(x, gamma);
  same_tape(x, beta);
  const Tensor& xv = x.value();
  require_rank("batchnorm", xv, 2);
  const std::size_t batch = xv.dim(0);
  const std::size_t features = xv.dim(1);
  if (gamma.value().size() != features || beta.value().size() != features) {
    dimension_error("batchnorm affine", xv.shape(), gamma.value().shape());
  }
  if (stats.running_mean.size() != features ||
      stats.running_var.size() != features) {
    dimension_error("batchnorm running stats", xv.shape(),
                    stats.running_mean.shape());
  }
  const Tensor& gv = gamma.value();
  const Tensor& bv = beta.value();

  Tensor xhat(xv.shape());
  Tensor inv_std(Shape{features});
  if (mode == Mode::Train) {
    if (batch < 2) {
      throw Error(ErrorKind::DegenerateBatch,
                  "batchnorm in train mode needs at least 2 rows, got " +
                      std::to_string(batch));
    }
    for (std::size_t f = 0; f < features; ++f) {
      double mean = 0.0;
      for (std::size_t b = 0; b < batch; ++b) mean += xv[b * features + f];
      mean /= static_cast<double>(batch);
      double var = 0.0;
      for (std::size_t b = 0; b < batch; ++b) {
        const double d = xv[b * features + f] - mean;
        var += d * d;
      }
      var /= static_cast<double>(batch);
      inv_std[f] = 1.0 / std::sqrt(var + kBatchNormEps);
      for (std::size_t b = 0; b < batch; ++b) {
        xhat[b * features + f] = (xv[b * features + f] - mean) * inv_std[f];
      }
      const double unbiased = var * static_cast<double>(batch) /
                              static_cast<double>(batch - 1);
      stats.running_mean[f] = (1.0 - kBatchNormMomentum) * stats.running_mean[f] +
                              kBatchNormMomentum * mean;
      stats.running_var[f] = (1.0 - kBatchNormMomentum) * stats.running_var[f] +
                             kBatchNormMomentum * unbiased;
    }
  } else {
    for (std::size_t f = 0; f < features; ++f) {
      inv_std[f] = 1.0 / std::sqrt(stats.running_var[f] + kBatchNormEps);
      for (std::size_t b = 0; b < batch; ++b) {
        xhat[b * features + f] =
            (xv[b * features + f] - stats.running_mean[f]) * inv_std[f];
      }
    }
  }
  Tensor y(xv.shape());
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t f = 0; f < features; ++f) {
      y[b * features + f] = xhat[b * features + f] * gv[f] + bv[f];
    }
  }
  const std::size_t xi = x.id, gi = gamma.id, bi = beta.id;
  const bool train = mode == Mode::Train;
  return tape.record(
      std::move(y), {x, gamma, beta},
      [xi, gi, bi, batch, features, train, xhat = std::move(xhat),
       inv_std = std::move(inv_std)](Tape& t, std::size_t self) {
        const Tensor& g = t.upstream(self);
        const Tensor& gam = t.value(gi);
        if (t.needs_grad(gi)) {
          Tensor& gg = t.grad_buffer(gi);
          for (std::size_t b = 0; b < batch; ++b) {
            for (std::size_t f = 0; f < features; ++f) {
              gg[f] += g[b * features + f] * xhat[b * features + f];
            }
          }
        }
        if (t.needs_grad(bi)) {
          Tensor& gb = t.grad_buffer(bi);
          for (std::size_t b = 0; b < batch; ++b) {
            for (std::size_t f = 0; f < features; ++f) gb[f] += g[b * features + f];
          }
        }
        if (!t.needs_grad(xi)) return;
        Tensor& gx = t.grad_buffer(xi);
        const double n = static_cast<double>(batch);
        for (std::size_t f = 0; f < features; ++f) {
          if (!train) {
            for (std::size_t b = 0; b < batch; ++b) {
              gx[b * features + f] += g[b * features + f] * gam[f] * inv_std[f];
            }
            continue;
          }
          double sum_d = 0.0, sum_dx = 0.0;
          for (std::size_t b = 0; b < batch; ++b) {
            const double d = g[b * features + f] * gam[f];
            sum_d += d;
            sum_dx += d * xhat[b * features + f];
          }
          for (std::size_t b = 0; b < batch; ++b) {
            const double d = g[b * features + f] * gam[f];
            gx[b * features + f] +=
                inv_std[f] / n * (n * d - sum_d - xhat[b * features + f] * sum_dx);
          }
        }
      });
}

// ---------------------------------------------------------------------------
// Attention

Var attention(Var q, Var k, Var v, std::size_t heads, Tensor* weights) {
  Tape& tape = tape_of(q);
  same_tape(q, k);
  same_tape(q, v);
  const Tensor& qv = q.value();
  const Tensor& kv = k.value();
  const Tensor& vv = v.value();
  require_rank("attention q", qv, 3);
  require_rank("attention k", kv, 3);
  require_rank("attention v", vv, 3);
  if (kv.shape() != vv.shape()) dimension_error("attention k/v", kv.shape(), vv.shape());
  if (qv.dim(0) != kv.dim(0) || qv.dim(2) != kv.dim(2)) {
    dimension_error("attention q/k", qv.shape(), kv.shape());
  }
  const std::size_t batch = qv.dim(0), sq = qv.dim(1), sk = kv.dim(1),
                    dmodel = qv.dim(2);
  if (heads == 0 || dmodel % heads != 0) {
    throw Error(ErrorKind::Configuration,
                "attention: depth " + std::to_string(dmodel) +
                    " is not divisible by " + std::to_string(heads) + " heads");
  }
  const std::size_t dh = dmodel / heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

  Tensor probs(Shape{batch, heads, sq, sk});
  Tensor out(Shape{batch, sq, dmodel}, 0.0);
  std::vector<double> row(sk);
  for (std::size_t b = 0; b < batch; ++b) {
    const double* qb = qv.ptr() + b * sq * dmodel;
    const double* kb = kv.ptr() + b * sk * dmodel;
    const double* vb = vv.ptr() + b * sk * dmodel;
    double* ob = out.ptr() + b * sq * dmodel;
    for (std::size_t h = 0; h < heads; ++h) {
      const std::size_t off = h * dh;
      for (std::size_t i = 0; i < sq; ++i) {
        double mx = -INFINITY;
        for (std::size_t j = 0; j < sk; ++j) {
          double s = 0.0;
          for (std::size_t d = 0; d < dh; ++d) {
            s += qb[i * dmodel + off + d] * kb[j * dmodel + off + d];
          }
          row[j] = s * scale;
          mx = std::max(mx, row[j]);
        }
        double z = 0.0;
        for (std::size_t j = 0; j < sk; ++j) {
          row[j] = std::exp(row[j] - mx);
          z += row[j];
        }
        double* p = probs.ptr() + ((b * heads + h) * sq + i) * sk;
        for (std::size_t j = 0; j < sk; ++j) p[j] = row[j] / z;
        for (std::size_t j = 0; j < sk; ++j) {
          for (std::size_t d = 0; d < dh; ++d) {
            ob[i * dmodel + off + d] += p[j] * vb[j * dmodel + off + d];
          }
        }
      }
    }
  }
  if (weights) *weights = probs;

  const std::size_t qi = q.id, ki = k.id, vi = v.id;
  return tape.record(
      std::move(out), {q, k, v},
      [qi, ki, vi, batch, heads, sq, sk, dmodel, dh, scale,
       probs = std::move(probs)](Tape& t, std::size_t self) {
        const Tensor& g = t.upstream(self);
        const Tensor& qv = t.value(qi);
        const Tensor& kv = t.value(ki);
        const Tensor& vv = t.value(vi);
        const bool need_q = t.needs_grad(qi), need_k = t.needs_grad(ki),
                   need_v = t.needs_grad(vi);
        double* gq = need_q ? t.grad_buffer(qi).ptr() : nullptr;
        double* gk = need_k ? t.grad_buffer(ki).ptr() : nullptr;
        double* gv = need_v ? t.grad_buffer(vi).ptr() : nullptr;
        std::vector<double> dp(sk), ds(sk);
        for (std::size_t b = 0; b < batch; ++b) {
          const std::size_t qoff = b * sq * dmodel, koff = b * sk * dmodel;
          for (std::size_t h = 0; h < heads; ++h) {
            const std::size_t off = h * dh;
            for (std::size_t i = 0; i < sq; ++i) {
              const double* p = probs.ptr() + ((b * heads + h) * sq + i) * sk;
              const double* go = g.ptr() + qoff + i * dmodel + off;
              double dot = 0.0;
              for (std::size_t j = 0; j < sk; ++j) {
                double s = 0.0;
                const double* vj = vv.ptr() + koff + j * dmodel + off;
                for (std::size_t d = 0; d < dh; ++d) s += go[d] * vj[d];
                dp[j] = s;
                dot += s * p[j];
                if (gv) {
                  double* gvj = gv + koff + j * dmodel + off;
                  for (std::size_t d = 0; d < dh; ++d) gvj[d] += p[j] * go[d];
                }
              }
              for (std::size_t j = 0; j < sk; ++j) ds[j] = p[j] * (dp[j] - dot) * scale;
              const double* qrow = qv.ptr() + qoff + i * dmodel + off;
              for (std::size_t j = 0; j < sk; ++j) {
                const double* kj = kv.ptr() + koff + j * dmodel + off;
                if (gq) {
                  double* gqi = gq + qoff + i * dmodel + off;
                  for (std::size_t d = 0; d < dh; ++d) gqi[d] += ds[j] * kj[d];
                }
                if (gk) {
                  double* gkj = gk + koff + j * dmodel + off;
                  for (std::size_t d = 0; d < dh; ++d) gkj[d] += ds[j] * qrow[d];
                }
              }
            }
          }
        }
      });
}

Var take_token(Var x, std::size_t index) {
  Tape& tape = tape_of(x);
  const Tensor& xv = x.value();
  require_rank("take_token", xv, 3);
  const std::size_t batch = xv.dim(0), seq = xv.dim(1), depth = xv.dim(2);
  if (index >= seq) {
    throw Error(ErrorKind::Dimension, "take_token: index " + std::to_string(index) +
                                          " outside " + shape_string(xv.shape()));
  }
  Tensor y(Shape{batch, depth});
  for (std::size_t b = 0; b < batch; ++b) {
    std::copy_n(xv.ptr() + (b * seq + index) * depth, depth, y.ptr() + b * depth);
  }
  const std::size_t xi = x.id;
  return tape.record(std::move(y), {x},
                     [xi, batch, seq, depth, index](Tape& t, std::size_t self) {
                       const Tensor& g = t.upstream(self);
                       Tensor& gx = t.grad_buffer(xi);
                       for (std::size_t b = 0; b < batch; ++b) {
                         for (std::size_t d = 0; d < depth; ++d) {
                           gx[(b * seq + index) * depth + d] += g[b * depth + d];
                         }
                       }
                     });
}

Var with_token(Var x, std::size_t index, Var token) {
  Tape& tape = tape_of(x);
  same_tape(x, token);
  const Tensor& xv = x.value();
  const Tensor& tv = token.value();
  require_rank("with_token", xv, 3);
  const std::size_t batch = xv.dim(0), seq = xv.dim(1), depth = xv.dim(2);
  if (tv.rank() != 2 || tv.dim(0) != batch || tv.dim(1) != depth || index >= seq) {
    dimension_error("with_token", xv.shape(), tv.shape());
  }
  Tensor y = xv;
  for (std::size_t b = 0; b < batch; ++b) {
    std::copy_n(tv.ptr() + b * depth, depth, y.ptr() + (b * seq + index) * depth);
  }
  const std::size_t xi = x.id, ti = token.id;
  return tape.record(
      std::move(y), {x, token},
      [xi, ti, batch, seq, depth, index](Tape& t, std::size_t self) {
        const Tensor& g = t.upstream(self);
        if (t.needs_grad(xi)) {
          Tensor& gx = t.grad_buffer(xi);
          for (std::size_t b = 0; b < batch; ++b) {
            for (std::size_t s = 0; s < seq; ++s) {
              if (s == index) continue;
              for (std::size_t d = 0; d < depth; ++d) {
                gx[(b * seq + s) * depth + d] += g[(b * seq + s) * depth + d];
              }
            }
          }
        }
        if (t.needs_grad(ti)) {
          Tensor& gt = t.grad_buffer(ti);
          for (std::size_t b = 0; b < batch; ++b) {
            for (std::size_t d = 0; d < depth; ++d) {
              gt[b * depth + d] += g[(b * seq + index) * depth + d];
            }
          }
        }
      });
}

Var prepend_token(Var cls, Var x) {
  Tape& tape = tape_of(x);
  same_tape(cls, x);
  const Tensor& cv = cls.value();
  const Tensor& xv = x.value();
  require_rank("prepend_token", xv, 3);
  const std::size_t batch = xv.dim(0), tokens = xv.dim(1), depth = xv.dim(2);
  if (cv.size() != depth) dimension_error("prepend_token", cv.shape(), xv.shape());
  const std::size_t seq = tokens + 1;
  Tensor y(Shape{batch, seq, depth});
  for (std::size_t b = 0; b < batch; ++b) {
    std::copy_n(cv.ptr(), depth, y.ptr() + b * seq * depth);
    std::copy_n(xv.ptr() + b * tokens * depth, tokens * depth,
                y.ptr() + (b * seq + 1) * depth);
  }
  const std::size_t ci = cls.id, xi = x.id;
  return tape.record(
      std::move(y), {cls, x},
      [ci, xi, batch, tokens, seq, depth](Tape& t, std::size_t self) {
        const Tensor& g = t.upstream(self);
        if (t.needs_grad(ci)) {
          Tensor& gc = t.grad_buffer(ci);
          for (std::size_t b = 0; b < batch; ++b) {
            for (std::size_t d = 0; d < depth; ++d) gc[d] += g[b * seq * depth + d];
          }
        }
        if (t.needs_grad(xi)) {
          Tensor& gx = t.grad_buffer(xi);
          for (std::size_t b = 0; b < batch; ++b) {
            for (std::size_t i = 0; i < tokens * depth; ++i) {
              gx[b * tokens * depth + i] += g[(b * seq + 1) * depth + i];
            }
          }
        }
      });
}

Var mean_tokens(Var x) {
  Tape& tape = tape_of(x);
  const Tensor& xv = x.value();
  require_rank("mean_tokens", xv, 3);
  const std::size_t batch = xv.dim(0), seq = xv.dim(1), depth = xv.dim(2);
  Tensor y(Shape{batch, depth}, 0.0);
  const double inv = 1.0 / static_cast<double>(seq);
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t s = 0; s < seq; ++s) {
      for (std::size_t d = 0; d < depth; ++d) {
        y[b * depth + d] += xv[(b * seq + s) * depth + d];
      }
    }
    for (std::size_t d = 0; d < depth; ++d) y[b * depth + d] *= inv;
  }
  const std::size_t xi = x.id;
  return tape.record(std::move(y), {x},
                     [xi, batch, seq, depth, inv](Tape& t, std::size_t self) {
                       const Tensor& g = t.upstream(self);
                       Tensor& gx = t.grad_buffer(xi);
                       for (std::size_t b = 0; b < batch; ++b) {
                         for (std::size_t s = 0; s < seq; ++s) {
                           for (std::size_t d = 0; d < depth; ++d) {
                             gx[(b * seq + s) * depth + d] += g[b * depth + d] * inv;
                           }
                         }
                       }
                     });
}

Var concat_features(Var a, Var b) {
  Tape& tape = tape_of(a);
  same_tape(a, b);
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  if (av.rank() != 2 || bv.rank() != 2 || av.dim(0) != bv.dim(0)) {
    dimension_error("concat_features", av.shape(), bv.shape());
  }
  const std::size_t batch = av.dim(0), fa = av.dim(1), fb = bv.dim(1);
  Tensor y(Shape{batch, fa + fb});
  for (std::size_t r = 0; r < batch; ++r) {
    std::copy_n(av.ptr() + r * fa, fa, y.ptr() + r * (fa + fb));
    std::copy_n(bv.ptr() + r * fb, fb, y.ptr() + r * (fa + fb) + fa);
  }
  const std::size_t ai = a.id, bi = b.id;
  return tape.record(std::move(y), {a, b},
                     [ai, bi, batch, fa, fb](Tape& t, std::size_t self) {
                       const Tensor& g = t.upstream(self);
                       if (t.needs_grad(ai)) {
                         Tensor& ga = t.grad_buffer(ai);
                         for (std::size_t r = 0; r < batch; ++r) {
                           for (std::size_t f = 0; f < fa; ++f) {
                             ga[r * fa + f] += g[r * (fa + fb) + f];
                           }
                         }
                       }
                       if (t.needs_grad(bi)) {
                         Tensor& gb = t.grad_buffer(bi);
                         for (std::size_t r = 0; r < batch; ++r) {
                           for (std::size_t f = 0; f < fb; ++f) {
                             gb[r * fb + f] += g[r * (fa + fb) + fa + f];
                           }
                         }
                       }
                     });
}

Var sum(Var x) {
  Tape& tape = tape_of(x);
  double s = 0.0;
  for (double v : x.value().data()) s += v;
  const std::size_t xi = x.id;
  return tape.record(Tensor::scalar(s), {x}, [xi](Tape& t, std::size_t self) {
    const double g = t.upstream(self)[0];
    Tensor& gx = t.grad_buffer(xi);
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g;
  });
}

Var bce_with_logits(Var logits, const std::vector<double>& labels) {
  Tape& tape = tape_of(logits);
  const Tensor& ov = logits.value();
  if (ov.size() != labels.size() || labels.empty()) {
    throw Error(ErrorKind::Dimension,
                "bce_with_logits: " + std::to_string(ov.size()) + " logits vs " +
                    std::to_string(labels.size()) + " labels");
  }
  for (double y : labels) {
    if (y != 0.0 && y != 1.0) {
      throw Error(ErrorKind::Usage, "bce_with_logits: labels must be 0 or 1");
    }
  }
  double total = 0.0;
  for (std::size_t i = 0; i < ov.size(); ++i) total += bce_value(ov[i], labels[i]);
  const double n = static_cast<double>(ov.size());
  const std::size_t oi = logits.id;
  return tape.record(Tensor::scalar(total / n), {logits},
                     [oi, labels, n](Tape& t, std::size_t self) {
                       const double g = t.upstream(self)[0];
                       const Tensor& ov = t.value(oi);
                       Tensor& go = t.grad_buffer(oi);
                       for (std::size_t i = 0; i < ov.size(); ++i) {
                         go[i] += g * (sigmoid_value(ov[i]) - labels[i]) / n;
                       }
                     });
}

// ---------------------------------------------------------------------------
// Attention blocks

Var mhsa(Var x, const AttentionWeights& w, std::size_t heads, Tensor* weights) {
  require_rank("mhsa", x.value(), 3);
  const std::size_t depth = x.value().dim(2);
  if (heads == 0 || depth % heads != 0) {
    throw Error(ErrorKind::Configuration,
                "mhsa: depth " + std::to_string(depth) +
                    " is not divisible by " + std::to_string(heads) + " heads");
  }
  Var q = linear(x, w.wq, w.bq);
  Var k = linear(x, w.wk, w.bk);
  Var v = linear(x, w.wv, w.bv);
  Var a = attention(q, k, v, heads, weights);
  return linear(a, w.wo, w.bo);
}

namespace {

Var fuse_cls(Var self, Var other, const AttentionWeights& w, std::size_t heads) {
  const std::size_t batch = self.value().dim(0);
  const std::size_t depth = self.value().dim(2);
  Var cls = take_token(self, 0);
  Var q = reshape(linear(cls, w.wq, w.bq), Shape{batch, 1, depth});
  Var k = linear(other, w.wk, w.bk);
  Var v = linear(other, w.wv, w.bv);
  Var a = attention(q, k, v, heads);
  Var o = linear(reshape(a, Shape{batch, depth}), w.wo, w.bo);
  return with_token(self, 0, add(cls, o));
}

}  // namespace

std::pair<Var, Var> cross_attention(Var y1, Var y2, const AttentionWeights& w,
                                    std::size_t heads) {
  const Tensor& a = y1.value();
  const Tensor& b = y2.value();
  if (a.shape() != b.shape() || a.rank() != 3) {
    dimension_error("cross_attention", a.shape(), b.shape());
  }
  if (heads == 0 || a.dim(2) % heads != 0) {
    throw Error(ErrorKind::Configuration,
                "cross_attention: depth " + std::to_string(a.dim(2)) +
                    " is not divisible by " + std::to_string(heads) + " heads");
  }
  Var z1 = fuse_cls(y1, y2, w, heads);
  Var z2 = fuse_cls(y2, y1, w, heads);
  return {z1, z2};
}

}  // namespace pcnn::nk
