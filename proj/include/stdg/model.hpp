#pragma once

#include <map>
#include <string>
#include <utility>
#include <vector>

#include "stdg/autodiff.hpp"
#include "stdg/dualgraph.hpp"
#include "stdg/features.hpp"
#include "stdg/params.hpp"
#include "stdg/rng.hpp"
#include "stdg/tensor.hpp"

namespace stdg {

struct ModelConfig {
  std::size_t d = 20;          // embedding width
  std::size_t cells = 3;       // spatio-temporal learning cells (n)
  std::size_t tcn_kernel = 3;  // temporal convolution width
  std::size_t lambda = 60;     // head hidden units
  int history_steps = 12;      // T

  bool separate_direction_weights = false;  // one W for L and L^T by default

  // ablation toggles
  bool multiscale = true;
  bool use_tcn = true;
  bool use_gcn = true;
  bool node_stream = true;
  bool edge_stream = true;
  bool p_interaction = true;

  void validate() const {
    require(cells >= 1, "cell count must be at least 1");
    require(d >= 1 && lambda >= 1 && history_steps >= 1 && tcn_kernel >= 1,
            "model dimensions must be positive");
    require(node_stream || edge_stream, "at least one stream must be enabled");
  }

  std::size_t dgcn_in_width() const { return multiscale ? 3 * d : 2 * d; }
  bool wants_stream_gru() const { return multiscale && cells >= 3; }
};

/// Tape handles for every named parameter of the current batch.
struct TapeParams {
  std::map<std::string, Val> vals;

  Val operator()(const std::string& name) const {
    auto it = vals.find(name);
    require(it != vals.end(), "parameter not on tape: " + name);
    return it->second;
  }
};

inline TapeParams load_params(Tape& tape, const ParamRegistry& reg, bool train) {
  TapeParams p;
  for (std::size_t i = 0; i < reg.size(); ++i)
    p.vals.emplace(reg.name_at(i), tape.input(reg.value_at(i), train));
  return p;
}

namespace detail {

inline void add_gru(ParamRegistry& reg, Rng& rng, const std::string& prefix, std::size_t in,
                    std::size_t hidden, const char* reset_gate_name) {
  const std::string r = reset_gate_name;
  reg.add(prefix + ".wu", glorot2(rng, in, hidden));
  reg.add(prefix + ".uu", glorot2(rng, hidden, hidden));
  reg.add(prefix + ".bu", Tensor::zeros({hidden}));
  reg.add(prefix + ".w" + r, glorot2(rng, in, hidden));
  reg.add(prefix + ".u" + r, glorot2(rng, hidden, hidden));
  reg.add(prefix + ".b" + r, Tensor::zeros({hidden}));
  reg.add(prefix + ".wh", glorot2(rng, in, hidden));
  reg.add(prefix + ".uh", glorot2(rng, hidden, hidden));
  reg.add(prefix + ".bh", Tensor::zeros({hidden}));
}

inline void add_head(ParamRegistry& reg, Rng& rng, const std::string& prefix, std::size_t in,
                     std::size_t hidden) {
  reg.add(prefix + ".w1", glorot2(rng, in, hidden));
  reg.add(prefix + ".b1", Tensor::zeros({hidden}));
  reg.add(prefix + ".w2", glorot2(rng, hidden, 1));
  reg.add(prefix + ".b2", Tensor::zeros({1}));
}

}  // namespace detail

/// Registers every learnable tensor in a fixed order. feat_width/node_width
/// come from the frozen feature encoder.
inline void register_model_params(ParamRegistry& reg, Rng& rng, const ModelConfig& cfg,
                                  std::size_t feat_width, std::size_t node_feat_width) {
  cfg.validate();
  const std::size_t d = cfg.d;
  reg.add("feat.w_a", glorot2(rng, feat_width, d));
  reg.add("feat.w_b", glorot2(rng, d + node_feat_width, d));
  for (std::size_t l = 1; l <= cfg.cells; ++l) {
    for (const char* stream : {"node", "edge"}) {
      const std::string base = "stdg.cell" + std::to_string(l) + "." + stream;
      reg.add(base + ".gcn", glorot2(rng, d, d));
      if (cfg.separate_direction_weights) reg.add(base + ".gcn2", glorot2(rng, d, d));
      reg.add(base + ".tcn.theta1",
              glorot(rng, {cfg.tcn_kernel, d, d}, cfg.tcn_kernel * d, d));
      reg.add(base + ".tcn.bias1", Tensor::zeros({d}));
      reg.add(base + ".tcn.theta2",
              glorot(rng, {cfg.tcn_kernel, d, d}, cfg.tcn_kernel * d, d));
      reg.add(base + ".tcn.bias2", Tensor::zeros({d}));
    }
  }
  for (std::size_t l = 2; l <= cfg.cells; ++l) {
    const std::size_t in = cfg.dgcn_in_width();
    reg.add("stdg.dgcn" + std::to_string(l) + ".n", glorot2(rng, in, d));
    if (cfg.separate_direction_weights)
      reg.add("stdg.dgcn" + std::to_string(l) + ".n2", glorot2(rng, in, d));
    reg.add("stdg.dgcn" + std::to_string(l) + ".e", glorot2(rng, in, d));
    if (cfg.separate_direction_weights)
      reg.add("stdg.dgcn" + std::to_string(l) + ".e2", glorot2(rng, in, d));
  }
  if (cfg.wants_stream_gru()) {
    detail::add_gru(reg, rng, "stdg.gru.n", d, d, "x");
    detail::add_gru(reg, rng, "stdg.gru.e", d, d, "x");
  }
  const std::size_t td = static_cast<std::size_t>(cfg.history_steps) * d;
  reg.add("stdg.fc.n", glorot2(rng, td, d));
  reg.add("stdg.fc.e", glorot2(rng, td, d));
  detail::add_gru(reg, rng, "mtl.gru.link", d, d, "r");
  detail::add_gru(reg, rng, "mtl.gru.node", d, d, "r");
  detail::add_head(reg, rng, "mtl.head.link", d, cfg.lambda);
  detail::add_head(reg, rng, "mtl.head.node", d, cfg.lambda);
  detail::add_head(reg, rng, "mtl.head.global", d, cfg.lambda);
}

/// Dual directional graph convolution: relu(L Z W + L^T Z W). With a shared
/// direction weight the algebraically equal form relu((L + L^T) Z W) is used.
inline Val gcn_forward(Tape& t, Val z, Val l, Val lt, Val w, Val w2 = {}) {
  if (!w2.valid()) {
    Val lz = t.time_matmul(t.add(l, lt), z);
    return t.relu(t.time_matmul_r(lz, w));
  }
  Val a = t.time_matmul_r(t.time_matmul(l, z), w);
  Val b = t.time_matmul_r(t.time_matmul(lt, z), w2);
  return t.relu(t.add(a, b));
}

/// Gated temporal convolution: tanh branch times sigmoid branch, both causal
/// with pre-padding so the step count is preserved.
inline Val tcn_forward(Tape& t, Val z, Val theta1, Val bias1, Val theta2, Val bias2) {
  Val a = t.tanh(t.conv1d_prepad(z, theta1, bias1));
  Val b = t.sigmoid(t.conv1d_prepad(z, theta2, bias2));
  return t.mul(a, b);
}

/// Constants of one forward pass (dual graph operators on the tape).
struct GraphConsts {
  Val l_n, l_n_t, l_e, l_e_t;  // propagation operators
  Val p, p_t;                  // incidence and transpose
  std::size_t num_nodes = 0, num_links = 0;
};

inline GraphConsts load_graph(Tape& t, const DualGraph& g) {
  GraphConsts c;
  c.l_n = t.constant(g.l_n);
  c.l_n_t = t.constant(g.l_n_t);
  c.l_e = t.constant(g.l_e);
  c.l_e_t = t.constant(g.l_e_t);
  c.p = t.constant(g.p);
  c.p_t = t.constant(g.p_t);
  c.num_nodes = g.p.rows();
  c.num_links = g.p.cols();
  return c;
}

/// Dual graph interaction, node update first, then the edge update consumes
/// the fresh node representation:
///   Z_n' = GCN_n([own_n, P  cross_e])
///   Z_e' = GCN_e([own_e, P^T Z_n'])
/// cross_e is the edge-stream representation routed into the node update;
/// in the plain (non-multiscale) form it equals own_e.
inline std::pair<Val, Val> dgcn_forward(Tape& t, const ModelConfig& cfg,
                                        const GraphConsts& gc, const TapeParams& p,
                                        std::size_t layer, Val own_n, Val own_e,
                                        Val cross_e) {
  const std::string ln = "stdg.dgcn" + std::to_string(layer) + ".n";
  const std::string le = "stdg.dgcn" + std::to_string(layer) + ".e";
  const std::size_t T = static_cast<std::size_t>(cfg.history_steps);

  auto zero3 = [&](std::size_t n, std::size_t width) {
    return t.constant(Tensor::zeros({T, n, width}));
  };

  Val zn_new;
  if (cfg.node_stream) {
    Val mix = cfg.p_interaction && cfg.edge_stream ? t.time_matmul(gc.p, cross_e)
                                                   : zero3(gc.num_nodes, cfg.d);
    Val cat = t.concat_last({own_n, mix});
    zn_new = gcn_forward(t, cat, gc.l_n, gc.l_n_t, p(ln),
                         cfg.separate_direction_weights ? p(ln + "2") : Val{});
  } else {
    zn_new = zero3(gc.num_nodes, cfg.d);
  }

  Val ze_new;
  if (cfg.edge_stream) {
    Val mix = cfg.p_interaction && cfg.node_stream ? t.time_matmul(gc.p_t, zn_new)
                                                   : zero3(gc.num_links, cfg.d);
    Val cat = t.concat_last({own_e, mix});
    ze_new = gcn_forward(t, cat, gc.l_e, gc.l_e_t, p(le),
                         cfg.separate_direction_weights ? p(le + "2") : Val{});
  } else {
    ze_new = zero3(gc.num_links, cfg.d);
  }
  return {zn_new, ze_new};
}

struct GruVals {
  Val wu, uu, bu, wx, ux, bx, wh, uh, bh;
};

inline GruVals gru_vals(const TapeParams& p, const std::string& prefix,
                        const char* reset_gate_name) {
  const std::string r = reset_gate_name;
  return {p(prefix + ".wu"), p(prefix + ".uu"), p(prefix + ".bu"),
          p(prefix + ".w" + r), p(prefix + ".u" + r), p(prefix + ".b" + r),
          p(prefix + ".wh"), p(prefix + ".uh"), p(prefix + ".bh")};
}

/// One GRU step: update gate u, reset gate x, candidate c'; the new state is
/// u (.) c_prev + (1-u) (.) c'.
inline Val gru_cell(Tape& t, const GruVals& g, Val x, Val c_prev) {
  Val u = t.sigmoid(t.add_bias(t.add(t.matmul(x, g.wu), t.matmul(c_prev, g.uu)), g.bu));
  Val xg = t.sigmoid(t.add_bias(t.add(t.matmul(x, g.wx), t.matmul(c_prev, g.ux)), g.bx));
  Val cand = t.tanh(
      t.add_bias(t.add(t.matmul(x, g.wh), t.matmul(t.mul(xg, c_prev), g.uh)), g.bh));
  Val keep = t.mul(u, c_prev);
  Val take = t.mul(t.scalar_add(t.scalar_mul(u, -1.0), 1.0), cand);
  return t.add(keep, take);
}

/// Same step given precomputed input-side pre-activations (batched over time).
inline Val gru_cell_pre(Tape& t, const GruVals& g, Val pre_u, Val pre_x, Val pre_h,
                        Val c_prev) {
  Val u = t.sigmoid(t.add_bias(t.add(pre_u, t.matmul(c_prev, g.uu)), g.bu));
  Val xg = t.sigmoid(t.add_bias(t.add(pre_x, t.matmul(c_prev, g.ux)), g.bx));
  Val cand = t.tanh(t.add_bias(t.add(pre_h, t.matmul(t.mul(xg, c_prev), g.uh)), g.bh));
  Val keep = t.mul(u, c_prev);
  Val take = t.mul(t.scalar_add(t.scalar_mul(u, -1.0), 1.0), cand);
  return t.add(keep, take);
}

struct GruRun {
  Val sequence;  // hidden states over all steps, rank-3
  Val carried;   // final hidden state, rank-2
};

/// Runs a GRU over the time axis of a rank-3 sequence, starting from c_init.
inline GruRun gru_run(Tape& t, const GruVals& g, Val z3, Val c_init) {
  const std::size_t T = t.value(z3).shape[0];
  Val pre_u = t.time_matmul_r(z3, g.wu);
  Val pre_x = t.time_matmul_r(z3, g.wx);
  Val pre_h = t.time_matmul_r(z3, g.wh);
  std::vector<Val> hs;
  hs.reserve(T);
  Val c = c_init;
  for (std::size_t step = 0; step < T; ++step) {
    c = gru_cell_pre(t, g, t.slice_time(pre_u, step), t.slice_time(pre_x, step),
                     t.slice_time(pre_h, step), c);
    hs.push_back(c);
  }
  return {t.stack_time(hs), c};
}

struct NextIntervalReps {
  Val z_n;  // |V| x d
  Val z_e;  // |E| x d
};

struct MultiScaleOut {
  Val r_n, r_e;  // final cell outputs, rank-3
};

/// The stacked spatio-temporal dual graph learning layer.
///   layer 1:      r(1) = T(S(r(0))) per stream, no interaction
///   layer 2:      own = [r(0), r(1)]
///   layer l >= 3: own = [GRU(r(l-2), c(l-3)) sequence, r(l-1)]
/// followed by the dual interaction and the layer's GCN/TCN. Hidden states
/// carried across layers start at zero. Disabled streams contribute zero
/// representations throughout.
inline MultiScaleOut multiscale_forward(Tape& t, const ModelConfig& cfg,
                                        const GraphConsts& gc, const TapeParams& p,
                                        Val feats_n, Val feats_e) {
  cfg.validate();
  const std::size_t T = static_cast<std::size_t>(cfg.history_steps);
  auto zero_n = [&] { return t.constant(Tensor::zeros({T, gc.num_nodes, cfg.d})); };
  auto zero_e = [&] { return t.constant(Tensor::zeros({T, gc.num_links, cfg.d})); };

  auto cell = [&](std::size_t l, const char* stream, Val z) {
    const std::string base = "stdg.cell" + std::to_string(l) + "." + stream;
    Val s = z;
    if (cfg.use_gcn) {
      const bool node = std::string(stream) == "node";
      s = gcn_forward(t, s, node ? gc.l_n : gc.l_e, node ? gc.l_n_t : gc.l_e_t,
                      p(base + ".gcn"),
                      cfg.separate_direction_weights ? p(base + ".gcn2") : Val{});
    }
    if (cfg.use_tcn)
      s = tcn_forward(t, s, p(base + ".tcn.theta1"), p(base + ".tcn.bias1"),
                      p(base + ".tcn.theta2"), p(base + ".tcn.bias2"));
    return s;
  };

  std::vector<Val> rn, re;  // layer outputs, index 0 = augmented features
  rn.push_back(cfg.node_stream ? feats_n : zero_n());
  re.push_back(cfg.edge_stream ? feats_e : zero_e());
  rn.push_back(cfg.node_stream ? cell(1, "node", rn[0]) : zero_n());
  re.push_back(cfg.edge_stream ? cell(1, "edge", re[0]) : zero_e());

  GruVals gn, ge;
  Val cn, ce;  // carried hidden states
  if (cfg.wants_stream_gru()) {
    gn = gru_vals(p, "stdg.gru.n", "x");
    ge = gru_vals(p, "stdg.gru.e", "x");
    if (cfg.node_stream) {
      Val c0 = t.constant(Tensor::zeros({gc.num_nodes, cfg.d}));
      cn = gru_run(t, gn, rn[0], c0).carried;
    }
    if (cfg.edge_stream) {
      Val c0 = t.constant(Tensor::zeros({gc.num_links, cfg.d}));
      ce = gru_run(t, ge, re[0], c0).carried;
    }
  }

  for (std::size_t l = 2; l <= cfg.cells; ++l) {
    Val own_n, own_e;
    if (!cfg.multiscale) {
      own_n = rn[l - 1];
      own_e = re[l - 1];
    } else if (l == 2) {
      own_n = cfg.node_stream ? t.concat_last({rn[0], rn[1]})
                              : t.constant(Tensor::zeros({T, gc.num_nodes, 2 * cfg.d}));
      own_e = cfg.edge_stream ? t.concat_last({re[0], re[1]})
                              : t.constant(Tensor::zeros({T, gc.num_links, 2 * cfg.d}));
    } else {
      if (cfg.node_stream) {
        GruRun run = gru_run(t, gn, rn[l - 2], cn);
        cn = run.carried;
        own_n = t.concat_last({run.sequence, rn[l - 1]});
      } else {
        own_n = t.constant(Tensor::zeros({T, gc.num_nodes, 2 * cfg.d}));
      }
      if (cfg.edge_stream) {
        GruRun run = gru_run(t, ge, re[l - 2], ce);
        ce = run.carried;
        own_e = t.concat_last({run.sequence, re[l - 1]});
      } else {
        own_e = t.constant(Tensor::zeros({T, gc.num_links, 2 * cfg.d}));
      }
    }
    auto [zn, ze] = dgcn_forward(t, cfg, gc, p, l, own_n, own_e, re[l - 1]);
    rn.push_back(cfg.node_stream ? cell(l, "node", zn) : zero_n());
    re.push_back(cfg.edge_stream ? cell(l, "edge", ze) : zero_e());
  }
  return {rn[cfg.cells], re[cfg.cells]};
}

/// Time-flattened linear projection to the next-interval representations.
inline NextIntervalReps project_next_interval(Tape& t, const TapeParams& p,
                                              const MultiScaleOut& ms) {
  return {t.matmul(t.flatten_time(ms.r_n), p("stdg.fc.n")),
          t.matmul(t.flatten_time(ms.r_e), p("stdg.fc.e"))};
}

/// Full spatio-temporal forward pass for one departure slot.
inline NextIntervalReps stdg_forward(Tape& t, const ModelConfig& cfg, const GraphConsts& gc,
                                     const TapeParams& p, const FeatureEncoder& enc,
                                     const RoadNetwork& net, const LinkDynamic& dyn,
                                     const DualGraph& dual, std::int64_t depart_slot) {
  auto [h_e, z_v] = augment_features(t, enc, net, dyn, dual.p, p("feat.w_a"),
                                     p("feat.w_b"), depart_slot);
  MultiScaleOut ms = multiscale_forward(t, cfg, gc, p, z_v, h_e);
  return project_next_interval(t, p, ms);
}

}  // namespace stdg
