#pragma once

#include <Eigen/Core>

#include <cmath>
#include <functional>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "stdg/tensor.hpp"

namespace stdg {

using EMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using EMap = Eigen::Map<EMat>;
using ECMap = Eigen::Map<const EMat>;

inline ECMap emap(const Tensor& t, std::size_t r, std::size_t c) {
  return ECMap(t.data.data(), static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c));
}
inline EMap emap(Tensor& t, std::size_t r, std::size_t c) {
  return EMap(t.data.data(), static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c));
}

/// Handle to a node on a ComputationTape.
struct Val {
  int id = -1;
  bool valid() const { return id >= 0; }
};

/// Reverse-mode tape. Forward calls record one node per primitive with its
/// local derivative rule; backward() replays the record once, in reverse
/// creation order (which is a reverse topological order, since every input
/// precedes its consumers).
class Tape {
 public:
  explicit Tape(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}

  bool grad_enabled() const { return grad_enabled_; }

  Val input(Tensor v, bool requires_grad) {
    return push(std::move(v), requires_grad && grad_enabled_, {});
  }
  Val constant(Tensor v) { return input(std::move(v), false); }

  const Tensor& value(Val v) const { return nodes_[check(v)].value; }
  std::size_t size() const { return nodes_.size(); }

  /// Gradient of node v filled by the latest backward(); zeros if untouched.
  Tensor grad_of(Val v) const {
    const Node& n = nodes_[check(v)];
    if (n.grad.numel() == 0) return Tensor::zeros(n.value.shape);
    return n.grad;
  }

  void clear() { nodes_.clear(); }

  // ---- primitives ----

  Val add(Val a, Val b) {
    const Tensor& ta = value(a);
    const Tensor& tb = value(b);
    require(ta.shape == tb.shape, "add: shape mismatch " + shape_str(ta.shape) +
                                      " vs " + shape_str(tb.shape));
    Tensor out = ta;
    for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] += tb.data[i];
    return push(std::move(out), needs(a) || needs(b), [a, b](Tape& t, const Tensor& g) {
      t.accum(a, g);
      t.accum(b, g);
    });
  }

  Val sub(Val a, Val b) {
    const Tensor& ta = value(a);
    const Tensor& tb = value(b);
    require(ta.shape == tb.shape, "sub: shape mismatch " + shape_str(ta.shape) +
                                      " vs " + shape_str(tb.shape));
    Tensor out = ta;
    for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] -= tb.data[i];
    return push(std::move(out), needs(a) || needs(b), [a, b](Tape& t, const Tensor& g) {
      t.accum(a, g);
      if (t.needs(b)) {
        Tensor ng = g;
        for (auto& x : ng.data) x = -x;
        t.accum(b, ng);
      }
    });
  }

  Val mul(Val a, Val b) {
    const Tensor& ta = value(a);
    const Tensor& tb = value(b);
    require(ta.shape == tb.shape, "mul: shape mismatch " + shape_str(ta.shape) +
                                      " vs " + shape_str(tb.shape));
    Tensor out = ta;
    for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] *= tb.data[i];
    return push(std::move(out), needs(a) || needs(b), [a, b](Tape& t, const Tensor& g) {
      if (t.needs(a)) {
        Tensor ga = g;
        const Tensor& vb = t.value(b);
        for (std::size_t i = 0; i < ga.data.size(); ++i) ga.data[i] *= vb.data[i];
        t.accum(a, ga);
      }
      if (t.needs(b)) {
        Tensor gb = g;
        const Tensor& va = t.value(a);
        for (std::size_t i = 0; i < gb.data.size(); ++i) gb.data[i] *= va.data[i];
        t.accum(b, gb);
      }
    });
  }

  Val scalar_mul(Val a, double c) {
    Tensor out = value(a);
    for (auto& x : out.data) x *= c;
    return push(std::move(out), needs(a), [a, c](Tape& t, const Tensor& g) {
      Tensor ga = g;
      for (auto& x : ga.data) x *= c;
      t.accum(a, ga);
    });
  }

  Val scalar_add(Val a, double c) {
    Tensor out = value(a);
    for (auto& x : out.data) x += c;
    return push(std::move(out), needs(a),
                [a](Tape& t, const Tensor& g) { t.accum(a, g); });
  }

  /// Matrix product of rank-2 tensors.
  Val matmul(Val a, Val b) {
    const Tensor& ta = value(a);
    const Tensor& tb = value(b);
    require(ta.rank() == 2 && tb.rank() == 2,
            "matmul: rank-2 operands required, got " + shape_str(ta.shape) + " and " +
                shape_str(tb.shape));
    require(ta.cols() == tb.rows(), "matmul: inner dimensions differ, " +
                                        shape_str(ta.shape) + " vs " + shape_str(tb.shape));
    Tensor out = Tensor::zeros({ta.rows(), tb.cols()});
    emap(out, ta.rows(), tb.cols()).noalias() =
        emap(ta, ta.rows(), ta.cols()) * emap(tb, tb.rows(), tb.cols());
    return push(std::move(out), needs(a) || needs(b), [a, b](Tape& t, const Tensor& g) {
      const Tensor& va = t.value(a);
      const Tensor& vb = t.value(b);
      if (t.needs(a)) {
        Tensor ga = Tensor::zeros(va.shape);
        emap(ga, va.rows(), va.cols()).noalias() =
            emap(g, va.rows(), vb.cols()) * emap(vb, vb.rows(), vb.cols()).transpose();
        t.accum(a, ga);
      }
      if (t.needs(b)) {
        Tensor gb = Tensor::zeros(vb.shape);
        emap(gb, vb.rows(), vb.cols()).noalias() =
            emap(va, va.rows(), va.cols()).transpose() * emap(g, va.rows(), vb.cols());
        t.accum(b, gb);
      }
    });
  }

  Val transpose(Val a) {
    const Tensor& ta = value(a);
    require(ta.rank() == 2, "transpose: rank-2 operand required, got " + shape_str(ta.shape));
    Tensor out = Tensor::zeros({ta.cols(), ta.rows()});
    for (std::size_t i = 0; i < ta.rows(); ++i)
      for (std::size_t j = 0; j < ta.cols(); ++j) out.at(j, i) = ta.at(i, j);
    return push(std::move(out), needs(a), [a](Tape& t, const Tensor& g) {
      const Tensor& va = t.value(a);
      Tensor ga = Tensor::zeros(va.shape);
      for (std::size_t i = 0; i < va.rows(); ++i)
        for (std::size_t j = 0; j < va.cols(); ++j) ga.at(i, j) = g.at(j, i);
      t.accum(a, ga);
    });
  }

  /// Per-time-step product A * Z(t); A rank-2 (m x n), Z rank-3 (T x n x d).
  Val time_matmul(Val a, Val z) {
    const Tensor& ta = value(a);
    const Tensor& tz = value(z);
    require(ta.rank() == 2 && tz.rank() == 3,
            "time_matmul: need rank-2 x rank-3, got " + shape_str(ta.shape) + " and " +
                shape_str(tz.shape));
    require(ta.cols() == tz.shape[1], "time_matmul: inner dimensions differ, " +
                                          shape_str(ta.shape) + " vs " + shape_str(tz.shape));
    const std::size_t T = tz.shape[0], n = tz.shape[1], d = tz.shape[2], m = ta.rows();
    Tensor out = Tensor::zeros({T, m, d});
    for (std::size_t t = 0; t < T; ++t)
      EMap(&out.data[t * m * d], m, d).noalias() =
          emap(ta, m, n) * ECMap(&tz.data[t * n * d], n, d);
    return push(std::move(out), needs(a) || needs(z), [a, z](Tape& t, const Tensor& g) {
      const Tensor& va = t.value(a);
      const Tensor& vz = t.value(z);
      const std::size_t T = vz.shape[0], n = vz.shape[1], d = vz.shape[2], m = va.rows();
      if (t.needs(a)) {
        Tensor ga = Tensor::zeros(va.shape);
        auto gm = emap(ga, m, n);
        for (std::size_t s = 0; s < T; ++s)
          gm.noalias() += ECMap(&g.data[s * m * d], m, d) *
                          ECMap(&vz.data[s * n * d], n, d).transpose();
        t.accum(a, ga);
      }
      if (t.needs(z)) {
        Tensor gz = Tensor::zeros(vz.shape);
        for (std::size_t s = 0; s < T; ++s)
          EMap(&gz.data[s * n * d], n, d).noalias() =
              emap(va, m, n).transpose() * ECMap(&g.data[s * m * d], m, d);
        t.accum(z, gz);
      }
    });
  }

  /// Per-time-step product Z(t) * W; Z rank-3 (T x n x c), W rank-2 (c x d).
  Val time_matmul_r(Val z, Val w) {
    const Tensor& tz = value(z);
    const Tensor& tw = value(w);
    require(tz.rank() == 3 && tw.rank() == 2,
            "time_matmul_r: need rank-3 x rank-2, got " + shape_str(tz.shape) + " and " +
                shape_str(tw.shape));
    require(tz.shape[2] == tw.rows(), "time_matmul_r: inner dimensions differ, " +
                                          shape_str(tz.shape) + " vs " + shape_str(tw.shape));
    const std::size_t T = tz.shape[0], n = tz.shape[1], c = tz.shape[2], d = tw.cols();
    Tensor out = Tensor::zeros({T, n, d});
    // one flat (T*n, c) x (c, d) product
    EMap(out.data.data(), T * n, d).noalias() =
        ECMap(tz.data.data(), T * n, c) * emap(tw, c, d);
    return push(std::move(out), needs(z) || needs(w), [z, w](Tape& t, const Tensor& g) {
      const Tensor& vz = t.value(z);
      const Tensor& vw = t.value(w);
      const std::size_t T = vz.shape[0], n = vz.shape[1], c = vz.shape[2], d = vw.cols();
      if (t.needs(z)) {
        Tensor gz = Tensor::zeros(vz.shape);
        EMap(gz.data.data(), T * n, c).noalias() =
            ECMap(g.data.data(), T * n, d) * emap(vw, c, d).transpose();
        t.accum(z, gz);
      }
      if (t.needs(w)) {
        Tensor gw = Tensor::zeros(vw.shape);
        emap(gw, c, d).noalias() =
            ECMap(vz.data.data(), T * n, c).transpose() * ECMap(g.data.data(), T * n, d);
        t.accum(w, gw);
      }
    });
  }

  Val tanh(Val a) {
    Tensor out = value(a);
    for (auto& x : out.data) x = std::tanh(x);
    return push_unary_from_out(a, std::move(out),
                               [](double y) { return 1.0 - y * y; });
  }

  Val sigmoid(Val a) {
    Tensor out = value(a);
    for (auto& x : out.data) x = x >= 0.0 ? 1.0 / (1.0 + std::exp(-x))
                                          : std::exp(x) / (1.0 + std::exp(x));
    return push_unary_from_out(a, std::move(out),
                               [](double y) { return y * (1.0 - y); });
  }

  Val relu(Val a) {
    Tensor out = value(a);
    for (auto& x : out.data) x = x > 0.0 ? x : 0.0;
    return push(std::move(out), needs(a), [a](Tape& t, const Tensor& g) {
      const Tensor& va = t.value(a);
      Tensor ga = g;
      for (std::size_t i = 0; i < ga.data.size(); ++i)
        if (va.data[i] <= 0.0) ga.data[i] = 0.0;
      t.accum(a, ga);
    });
  }

  Val softplus(Val a) {
    Tensor out = value(a);
    for (auto& x : out.data) x = x > 30.0 ? x : std::log1p(std::exp(x));
    return push(std::move(out), needs(a), [a](Tape& t, const Tensor& g) {
      const Tensor& va = t.value(a);
      Tensor ga = g;
      for (std::size_t i = 0; i < ga.data.size(); ++i) {
        const double x = va.data[i];
        const double s = x >= 0.0 ? 1.0 / (1.0 + std::exp(-x))
                                  : std::exp(x) / (1.0 + std::exp(x));
        ga.data[i] *= s;
      }
      t.accum(a, ga);
    });
  }

  Val abs(Val a) {
    Tensor out = value(a);
    for (auto& x : out.data) x = std::fabs(x);
    return push(std::move(out), needs(a), [a](Tape& t, const Tensor& g) {
      const Tensor& va = t.value(a);
      Tensor ga = g;
      for (std::size_t i = 0; i < ga.data.size(); ++i) {
        const double x = va.data[i];
        ga.data[i] *= x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0);
      }
      t.accum(a, ga);
    });
  }

  /// Concatenate along the last axis; all inputs rank-2 or all rank-3 with
  /// matching leading extents.
  Val concat_last(const std::vector<Val>& parts) {
    require(!parts.empty(), "concat_last: no inputs");
    const Tensor& first = value(parts[0]);
    const std::size_t r = first.rank();
    require(r == 2 || r == 3, "concat_last: rank-2 or rank-3 inputs required");
    Shape lead(first.shape.begin(), first.shape.end() - 1);
    std::size_t total = 0;
    std::vector<std::size_t> widths;
    for (Val p : parts) {
      const Tensor& tp = value(p);
      require(tp.rank() == r &&
                  Shape(tp.shape.begin(), tp.shape.end() - 1) == lead,
              "concat_last: leading dimensions differ, " + shape_str(first.shape) +
                  " vs " + shape_str(tp.shape));
      widths.push_back(tp.shape.back());
      total += tp.shape.back();
    }
    Shape out_shape = lead;
    out_shape.push_back(total);
    Tensor out = Tensor::zeros(out_shape);
    const std::size_t nlead = shape_numel(lead);
    bool any = false;
    for (Val p : parts) any = any || needs(p);
    std::size_t off = 0;
    for (std::size_t k = 0; k < parts.size(); ++k) {
      const Tensor& tp = value(parts[k]);
      const std::size_t w = widths[k];
      for (std::size_t i = 0; i < nlead; ++i)
        for (std::size_t j = 0; j < w; ++j)
          out.data[i * total + off + j] = tp.data[i * w + j];
      off += w;
    }
    auto parts_copy = parts;
    auto widths_copy = widths;
    return push(std::move(out), any,
                [parts_copy, widths_copy, nlead, total](Tape& t, const Tensor& g) {
                  std::size_t off = 0;
                  for (std::size_t k = 0; k < parts_copy.size(); ++k) {
                    const std::size_t w = widths_copy[k];
                    if (t.needs(parts_copy[k])) {
                      Tensor gp = Tensor::zeros(t.value(parts_copy[k]).shape);
                      for (std::size_t i = 0; i < nlead; ++i)
                        for (std::size_t j = 0; j < w; ++j)
                          gp.data[i * w + j] = g.data[i * total + off + j];
                      t.accum(parts_copy[k], gp);
                    }
                    off += w;
                  }
                });
  }

  /// Z rank-3 (T x n x d) -> rank-2 (n x d) slice at time step t.
  Val slice_time(Val z, std::size_t step) {
    const Tensor& tz = value(z);
    require(tz.rank() == 3, "slice_time: rank-3 operand required");
    require(step < tz.shape[0], "slice_time: step out of range");
    const std::size_t n = tz.shape[1], d = tz.shape[2];
    Tensor out = Tensor::zeros({n, d});
    std::copy(tz.data.begin() + step * n * d, tz.data.begin() + (step + 1) * n * d,
              out.data.begin());
    return push(std::move(out), needs(z), [z, step, n, d](Tape& t, const Tensor& g) {
      Tensor gz = Tensor::zeros(t.value(z).shape);
      std::copy(g.data.begin(), g.data.end(), gz.data.begin() + step * n * d);
      t.accum(z, gz);
    });
  }

  /// Stack T rank-2 (n x d) tensors into rank-3 (T x n x d).
  Val stack_time(const std::vector<Val>& steps) {
    require(!steps.empty(), "stack_time: no inputs");
    const Tensor& first = value(steps[0]);
    require(first.rank() == 2, "stack_time: rank-2 inputs required");
    const std::size_t n = first.rows(), d = first.cols();
    Tensor out = Tensor::zeros({steps.size(), n, d});
    bool any = false;
    for (std::size_t t = 0; t < steps.size(); ++t) {
      const Tensor& ts = value(steps[t]);
      require(ts.shape == first.shape, "stack_time: step shapes differ");
      std::copy(ts.data.begin(), ts.data.end(), out.data.begin() + t * n * d);
      any = any || needs(steps[t]);
    }
    auto steps_copy = steps;
    return push(std::move(out), any, [steps_copy, n, d](Tape& t, const Tensor& g) {
      for (std::size_t s = 0; s < steps_copy.size(); ++s) {
        if (!t.needs(steps_copy[s])) continue;
        Tensor gs = Tensor::zeros({n, d});
        std::copy(g.data.begin() + s * n * d, g.data.begin() + (s + 1) * n * d,
                  gs.data.begin());
        t.accum(steps_copy[s], gs);
      }
    });
  }

  /// Stack rank-2 tensors with equal column counts along axis 0.
  Val concat_rows(const std::vector<Val>& parts) {
    require(!parts.empty(), "concat_rows: no inputs");
    const std::size_t c = value(parts[0]).cols();
    std::size_t rows = 0;
    bool any = false;
    for (Val p : parts) {
      const Tensor& tp = value(p);
      require(tp.rank() == 2 && tp.cols() == c, "concat_rows: column counts differ");
      rows += tp.rows();
      any = any || needs(p);
    }
    Tensor out = Tensor::zeros({rows, c});
    std::size_t off = 0;
    for (Val p : parts) {
      const Tensor& tp = value(p);
      std::copy(tp.data.begin(), tp.data.end(), out.data.begin() + off);
      off += tp.data.size();
    }
    auto parts_copy = parts;
    return push(std::move(out), any, [parts_copy](Tape& t, const Tensor& g) {
      std::size_t off = 0;
      for (Val p : parts_copy) {
        const Tensor& vp = t.value(p);
        if (t.needs(p)) {
          Tensor gp = Tensor::zeros(vp.shape);
          std::copy(g.data.begin() + off, g.data.begin() + off + vp.data.size(),
                    gp.data.begin());
          t.accum(p, gp);
        }
        off += vp.data.size();
      }
    });
  }

  /// Row gather from a rank-2 tensor; duplicate indices allowed.
  Val gather_rows(Val a, std::vector<std::size_t> idx) {
    const Tensor& ta = value(a);
    require(ta.rank() == 2, "gather_rows: rank-2 operand required");
    const std::size_t c = ta.cols();
    Tensor out = Tensor::zeros({idx.size(), c});
    for (std::size_t i = 0; i < idx.size(); ++i) {
      require(idx[i] < ta.rows(), "gather_rows: index out of range");
      std::copy(ta.data.begin() + idx[i] * c, ta.data.begin() + (idx[i] + 1) * c,
                out.data.begin() + i * c);
    }
    return push(std::move(out), needs(a), [a, idx, c](Tape& t, const Tensor& g) {
      Tensor ga = Tensor::zeros(t.value(a).shape);
      for (std::size_t i = 0; i < idx.size(); ++i)
        for (std::size_t j = 0; j < c; ++j) ga.data[idx[i] * c + j] += g.data[i * c + j];
      t.accum(a, ga);
    });
  }

  /// Sum of all entries -> scalar (shape {1}).
  Val sum_all(Val a) {
    const Tensor& ta = value(a);
    double s = 0.0;
    for (double x : ta.data) s += x;
    return push(Tensor::scalar(s), needs(a), [a](Tape& t, const Tensor& g) {
      Tensor ga = Tensor::full(t.value(a).shape, g.data[0]);
      t.accum(a, ga);
    });
  }

  /// Sum over axis 0 of a rank-2 tensor -> (1 x cols).
  Val sum_rows(Val a) {
    const Tensor& ta = value(a);
    require(ta.rank() == 2, "sum_rows: rank-2 operand required");
    Tensor out = Tensor::zeros({1, ta.cols()});
    for (std::size_t i = 0; i < ta.rows(); ++i)
      for (std::size_t j = 0; j < ta.cols(); ++j) out.data[j] += ta.at(i, j);
    return push(std::move(out), needs(a), [a](Tape& t, const Tensor& g) {
      const Tensor& va = t.value(a);
      Tensor ga = Tensor::zeros(va.shape);
      for (std::size_t i = 0; i < va.rows(); ++i)
        for (std::size_t j = 0; j < va.cols(); ++j) ga.at(i, j) = g.data[j];
      t.accum(a, ga);
    });
  }

  /// Broadcast-add a length-d bias over the last axis of a rank-2/3 tensor.
  Val add_bias(Val a, Val b) {
    const Tensor& ta = value(a);
    const Tensor& tb = value(b);
    const std::size_t d = ta.shape.back();
    require(tb.numel() == d, "add_bias: bias length " + std::to_string(tb.numel()) +
                                 " does not match last axis of " + shape_str(ta.shape));
    Tensor out = ta;
    const std::size_t nlead = out.numel() / d;
    for (std::size_t i = 0; i < nlead; ++i)
      for (std::size_t j = 0; j < d; ++j) out.data[i * d + j] += tb.data[j];
    return push(std::move(out), needs(a) || needs(b), [a, b, d, nlead](Tape& t, const Tensor& g) {
      t.accum(a, g);
      if (t.needs(b)) {
        Tensor gb = Tensor::zeros(t.value(b).shape);
        for (std::size_t i = 0; i < nlead; ++i)
          for (std::size_t j = 0; j < d; ++j) gb.data[j] += g.data[i * d + j];
        t.accum(b, gb);
      }
    });
  }

  /// Causal 1-D convolution over the time axis with k-1 leading zero pads so
  /// the output keeps T steps. x is (T x d_in) or (T x N x d_in); kernel is
  /// (k x d_in x d_out); bias is d_out. Output step t sees input steps <= t.
  Val conv1d_prepad(Val x, Val kernel, Val bias) {
    const Tensor& tx = value(x);
    const Tensor& tk = value(kernel);
    const Tensor& tb = value(bias);
    require(tk.rank() == 3, "conv1d_prepad: kernel must be (k x d_in x d_out), got " +
                                shape_str(tk.shape));
    const std::size_t k = tk.shape[0], din = tk.shape[1], dout = tk.shape[2];
    require(k >= 1, "conv1d_prepad: zero-width kernel");
    require(tx.rank() == 2 || tx.rank() == 3,
            "conv1d_prepad: input must be rank-2 or rank-3, got " + shape_str(tx.shape));
    const bool batched = tx.rank() == 3;
    const std::size_t T = tx.shape[0];
    const std::size_t N = batched ? tx.shape[1] : 1;
    require(tx.shape.back() == din, "conv1d_prepad: input channels " +
                                        shape_str(tx.shape) + " do not match kernel " +
                                        shape_str(tk.shape));
    require(tb.numel() == dout, "conv1d_prepad: bias length mismatch");
    Shape out_shape = batched ? Shape{T, N, dout} : Shape{T, dout};
    Tensor out = Tensor::zeros(out_shape);
    // out(t) = sum_j x(t-k+1+j) * K[j] + b, x(<0) = 0
    for (std::size_t j = 0; j < k; ++j) {
      ECMap kj(&tk.data[j * din * dout], din, dout);
      for (std::size_t t = k - 1 - j; t < T; ++t) {
        const std::size_t s = t - (k - 1) + j;
        EMap(&out.data[t * N * dout], N, dout).noalias() +=
            ECMap(&tx.data[s * N * din], N, din) * kj;
      }
    }
    for (std::size_t i = 0; i < T * N; ++i)
      for (std::size_t j = 0; j < dout; ++j) out.data[i * dout + j] += tb.data[j];
    return push(std::move(out), needs(x) || needs(kernel) || needs(bias),
                [x, kernel, bias, k, din, dout, T, N](Tape& t, const Tensor& g) {
                  const Tensor& vx = t.value(x);
                  const Tensor& vk = t.value(kernel);
                  if (t.needs(x)) {
                    Tensor gx = Tensor::zeros(vx.shape);
                    for (std::size_t j = 0; j < k; ++j) {
                      ECMap kj(&vk.data[j * din * dout], din, dout);
                      for (std::size_t s = k - 1 - j; s < T; ++s) {
                        const std::size_t src = s - (k - 1) + j;
                        EMap(&gx.data[src * N * din], N, din).noalias() +=
                            ECMap(&g.data[s * N * dout], N, dout) * kj.transpose();
                      }
                    }
                    t.accum(x, gx);
                  }
                  if (t.needs(kernel)) {
                    Tensor gk = Tensor::zeros(vk.shape);
                    for (std::size_t j = 0; j < k; ++j) {
                      EMap gkj(&gk.data[j * din * dout], din, dout);
                      for (std::size_t s = k - 1 - j; s < T; ++s) {
                        const std::size_t src = s - (k - 1) + j;
                        gkj.noalias() += ECMap(&vx.data[src * N * din], N, din).transpose() *
                                         ECMap(&g.data[s * N * dout], N, dout);
                      }
                    }
                    t.accum(kernel, gk);
                  }
                  if (t.needs(bias)) {
                    Tensor gb = Tensor::zeros(t.value(bias).shape);
                    for (std::size_t i = 0; i < T * N; ++i)
                      for (std::size_t j = 0; j < dout; ++j) gb.data[j] += g.data[i * dout + j];
                    t.accum(bias, gb);
                  }
                });
  }

  /// Rank-3 (T x N x d) -> rank-2 (N x T*d); per node, time-major flatten.
  Val flatten_time(Val z) {
    const Tensor& tz = value(z);
    require(tz.rank() == 3, "flatten_time: rank-3 operand required");
    const std::size_t T = tz.shape[0], n = tz.shape[1], d = tz.shape[2];
    Tensor out = Tensor::zeros({n, T * d});
    for (std::size_t t = 0; t < T; ++t)
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < d; ++j)
          out.data[i * T * d + t * d + j] = tz.data[(t * n + i) * d + j];
    return push(std::move(out), needs(z), [z, T, n, d](Tape& t, const Tensor& g) {
      Tensor gz = Tensor::zeros({T, n, d});
      for (std::size_t s = 0; s < T; ++s)
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t j = 0; j < d; ++j)
            gz.data[(s * n + i) * d + j] = g.data[i * T * d + s * d + j];
      t.accum(z, gz);
    });
  }

  // ---- backward ----

  /// Reverse sweep from a scalar loss. Fills gradients of every node that
  /// the loss depends on; visits each node exactly once.
  void backward(Val loss) {
    const Node& ln = nodes_[check(loss)];
    require(ln.value.numel() == 1,
            "grad: loss must be a scalar, got " + shape_str(ln.value.shape));
    require(grad_enabled_, "grad: tape was created with gradients disabled");
    for (auto& n : nodes_) n.grad = Tensor();
    nodes_[loss.id].grad = Tensor::scalar(1.0);
    for (int i = loss.id; i >= 0; --i) {
      Node& n = nodes_[i];
      if (!n.backward || n.grad.numel() == 0) continue;
      n.backward(*this, n.grad);
    }
  }

  bool needs(Val v) const { return nodes_[check(v)].requires_grad; }

  void accum(Val v, const Tensor& g) {
    Node& n = nodes_[check(v)];
    if (!n.requires_grad) return;
    if (n.grad.numel() == 0) {
      n.grad = g;
    } else {
      for (std::size_t i = 0; i < g.data.size(); ++i) n.grad.data[i] += g.data[i];
    }
  }

 private:
  using BackFn = std::function<void(Tape&, const Tensor&)>;

  struct Node {
    Tensor value;
    Tensor grad;
    bool requires_grad = false;
    BackFn backward;
  };

  int check(Val v) const {
    require(v.id >= 0 && static_cast<std::size_t>(v.id) < nodes_.size(),
            "invalid tape handle");
    return v.id;
  }

  Val push(Tensor v, bool requires_grad, BackFn fn) {
    Node n;
    n.value = std::move(v);
    n.requires_grad = requires_grad;
    if (requires_grad && grad_enabled_) n.backward = std::move(fn);
    nodes_.push_back(std::move(n));
    return Val{static_cast<int>(nodes_.size()) - 1};
  }

  template <typename DerivFromOut>
  Val push_unary_from_out(Val a, Tensor out, DerivFromOut dd) {
    Val r = push(std::move(out), needs(a), {});
    if (nodes_[r.id].requires_grad) {
      nodes_[r.id].backward = [a, r, dd](Tape& t, const Tensor& g) {
        const Tensor& y = t.value(r);
        Tensor ga = g;
        for (std::size_t i = 0; i < ga.data.size(); ++i) ga.data[i] *= dd(y.data[i]);
        t.accum(a, ga);
      };
    }
    return r;
  }

  std::vector<Node> nodes_;
  bool grad_enabled_;
};

/// Gradients of a scalar loss with respect to a named parameter set.
/// Parameters that did not participate in the tape get zero gradients.
inline std::map<std::string, Tensor> grad(Tape& tape, Val loss,
                                          const std::map<std::string, Val>& params) {
  tape.backward(loss);
  std::map<std::string, Tensor> out;
  for (const auto& [name, v] : params) out.emplace(name, tape.grad_of(v));
  return out;
}

}  // namespace stdg
