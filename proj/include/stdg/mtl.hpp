#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>
#include <utility>
#include <vector>

#include "stdg/model.hpp"
#include "stdg/roadnet.hpp"

namespace stdg {

struct LossWeights {
  double alpha = 0.4;    // whole-path term
  double beta = 0.3;     // link term
  double epsilon = 5.0;  // local denominator stabilizer, seconds

  void validate() const {
    require(alpha >= 0.0 && beta >= 0.0, "loss weights must be nonnegative");
    require(alpha + beta <= 1.0, "alpha + beta must not exceed 1");
    require(epsilon > 0.0, "epsilon must be positive");
  }
  double gamma() const { return 1.0 - alpha - beta; }
};

/// One query/training path resolved to dense indices.
struct PathItem {
  struct Elem {
    bool is_link = true;
    std::size_t index = 0;  // dense link or node index
    double frac = 1.0;
    double truth = 0.0;
    bool has_truth = false;
  };
  std::string trip_id;
  std::int64_t depart_ts = 0;
  std::vector<Elem> elems;
  double total_truth = 0.0;
  bool has_total = false;
};

inline PathItem resolve_path(const TripRecord& trip, const RoadNetwork& net) {
  PathItem item;
  item.trip_id = trip.trip_id;
  item.depart_ts = trip.depart_ts;
  bool all_times = true;
  double total = 0.0;
  for (const TripElement& el : trip.elements) {
    PathItem::Elem e;
    e.is_link = el.kind == ElemKind::link;
    e.index = e.is_link ? net.link_at(el.id) : net.node_at(el.id);
    e.frac = el.frac;
    e.has_truth = el.has_time;
    e.truth = el.time_s;
    all_times = all_times && el.has_time;
    total += el.time_s;
    item.elems.push_back(e);
  }
  item.has_total = all_times && !trip.elements.empty();
  item.total_truth = total;
  return item;
}

/// Per-element representations for one path, in path order: link elements
/// select rows of Z_e, intersections rows of Z_n; partial links are scaled
/// by their traversal fraction.
inline std::vector<Val> select_path_reps(Tape& t, const NextIntervalReps& reps,
                                         const PathItem& path) {
  require(!path.elems.empty(), "select_path_reps: empty path");
  std::vector<Val> out;
  out.reserve(path.elems.size());
  for (const auto& e : path.elems) {
    Val row = t.gather_rows(e.is_link ? reps.z_e : reps.z_n, {e.index});
    if (e.frac != 1.0) row = t.scalar_mul(row, e.frac);
    out.push_back(row);
  }
  return out;
}

/// Sequence recurrence over one alternating path: a single hidden state
/// threads the whole sequence, the cell parameters switch with the element
/// kind (Edge-wise GRU on links, Node-wise GRU on intersections).
inline std::vector<Val> path_gru_forward(Tape& t, const TapeParams& p,
                                         const std::vector<Val>& seq,
                                         const std::vector<bool>& is_link,
                                         std::size_t d) {
  require(!seq.empty(), "path_gru_forward: empty sequence");
  require(seq.size() == is_link.size(), "path_gru_forward: kind list mismatch");
  GruVals link_gru = gru_vals(p, "mtl.gru.link", "r");
  GruVals node_gru = gru_vals(p, "mtl.gru.node", "r");
  Val c = t.constant(Tensor::zeros({1, d}));
  std::vector<Val> out;
  out.reserve(seq.size());
  for (std::size_t i = 0; i < seq.size(); ++i) {
    c = gru_cell(t, is_link[i] ? link_gru : node_gru, seq[i], c);
    out.push_back(c);
  }
  return out;
}

/// Two-layer estimation head with a softplus positivity map on the output,
/// so every emitted travel time is strictly positive.
inline Val head_forward(Tape& t, const TapeParams& p, const std::string& prefix, Val x) {
  Val h = t.relu(t.add_bias(t.matmul(x, p(prefix + ".w1")), p(prefix + ".b1")));
  Val o = t.add_bias(t.matmul(h, p(prefix + ".w2")), p(prefix + ".b2"));
  return t.softplus(o);
}

/// Head outputs for a batch of paths sharing one departure interval.
struct BatchHeads {
  Val t_path;          // (B x 1), one estimate per path
  Val t_link;          // (Rl x 1), link estimates in batch row order
  Val t_node;          // (Rv x 1), intersection estimates
  // bookkeeping: for every path, positions of its elements in the row lists
  std::vector<std::vector<std::size_t>> link_rows_of_path;
  std::vector<std::vector<std::size_t>> node_rows_of_path;
};

/// Runs the shared alternating recurrence for a whole batch. Paths are
/// processed in lockstep over element positions (alternation makes the kind
/// at each position uniform), so each step is one batched GRU cell.
inline BatchHeads mtl_forward(Tape& t, const ModelConfig& cfg, const TapeParams& p,
                              const NextIntervalReps& reps,
                              const std::vector<PathItem>& batch) {
  require(!batch.empty(), "mtl_forward: empty batch");
  const std::size_t B = batch.size();

  // process paths longest-first so the active set is always a prefix
  std::vector<std::size_t> order(B);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return batch[a].elems.size() > batch[b].elems.size();
  });
  std::size_t max_len = 0;
  for (const auto& path : batch) max_len = std::max(max_len, path.elems.size());

  GruVals link_gru = gru_vals(p, "mtl.gru.link", "r");
  GruVals node_gru = gru_vals(p, "mtl.gru.node", "r");

  std::vector<Val> step_states;              // hidden rows per step
  std::vector<std::vector<std::size_t>> step_paths;  // sorted-order path per row
  Val h;  // active hidden matrix
  for (std::size_t i = 0; i < max_len; ++i) {
    std::size_t active = 0;
    while (active < B && batch[order[active]].elems.size() > i) ++active;
    std::vector<std::size_t> idx;
    std::vector<std::size_t> rows_paths;
    idx.reserve(active);
    bool any_frac = false;
    for (std::size_t a = 0; a < active; ++a) {
      const auto& e = batch[order[a]].elems[i];
      idx.push_back(e.index);
      rows_paths.push_back(order[a]);
      any_frac = any_frac || e.frac != 1.0;
    }
    const bool link_step = i % 2 == 0;
    Val q = t.gather_rows(link_step ? reps.z_e : reps.z_n, idx);
    if (any_frac) {
      Tensor scale = Tensor::zeros({active, cfg.d});
      for (std::size_t a = 0; a < active; ++a)
        for (std::size_t c = 0; c < cfg.d; ++c)
          scale.at(a, c) = batch[order[a]].elems[i].frac;
      q = t.mul(q, t.constant(scale));
    }
    Val h_prev;
    if (i == 0) {
      h_prev = t.constant(Tensor::zeros({active, cfg.d}));
    } else if (t.value(h).rows() == active) {
      h_prev = h;
    } else {
      std::vector<std::size_t> prefix(active);
      std::iota(prefix.begin(), prefix.end(), 0);
      h_prev = t.gather_rows(h, prefix);
    }
    h = gru_cell(t, link_step ? link_gru : node_gru, q, h_prev);
    step_states.push_back(h);
    step_paths.push_back(std::move(rows_paths));
  }

  // one row per (path, element), step-major
  std::vector<std::size_t> row_offset(max_len, 0);
  std::size_t total_rows = 0;
  for (std::size_t i = 0; i < max_len; ++i) {
    row_offset[i] = total_rows;
    total_rows += step_paths[i].size();
  }
  Val c_all = t.concat_rows(step_states);

  BatchHeads out;
  out.link_rows_of_path.assign(B, {});
  out.node_rows_of_path.assign(B, {});
  std::vector<std::size_t> link_rows, node_rows;
  std::vector<std::vector<std::size_t>> path_rows(B);
  for (std::size_t i = 0; i < max_len; ++i) {
    for (std::size_t r = 0; r < step_paths[i].size(); ++r) {
      const std::size_t path = step_paths[i][r];
      const std::size_t row = row_offset[i] + r;
      path_rows[path].push_back(row);
      if (i % 2 == 0) {
        out.link_rows_of_path[path].push_back(link_rows.size());
        link_rows.push_back(row);
      } else {
        out.node_rows_of_path[path].push_back(node_rows.size());
        node_rows.push_back(row);
      }
    }
  }

  // sum pooling per path via a constant 0/1 matrix
  Tensor pool = Tensor::zeros({B, total_rows});
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t row : path_rows[b]) pool.at(b, row) = 1.0;
  Val g_p = t.matmul(t.constant(pool), c_all);

  out.t_path = head_forward(t, p, "mtl.head.global", g_p);
  // paths start with a link, so the link row list is never empty
  out.t_link = head_forward(t, p, "mtl.head.link", t.gather_rows(c_all, link_rows));
  if (!node_rows.empty())
    out.t_node = head_forward(t, p, "mtl.head.node", t.gather_rows(c_all, node_rows));
  return out;
}

/// Mean absolute percentage losses (batch means).
struct LossTerms {
  Val combined;
  double path_value = 0.0, link_value = 0.0, node_value = 0.0;
  std::size_t path_excluded = 0;
  bool has_path = false, has_link = false, has_node = false;
};

/// Global MAPE loss: mean |t - truth| / truth over paths with positive truth.
inline Val loss_global(Tape& t, Val preds, const std::vector<double>& truths,
                       std::size_t* excluded = nullptr) {
  const std::size_t n = truths.size();
  require(t.value(preds).rows() == n, "loss_global: prediction count mismatch");
  std::vector<std::size_t> keep;
  for (std::size_t i = 0; i < n; ++i)
    if (truths[i] > 0.0) keep.push_back(i);
  if (excluded) *excluded = n - keep.size();
  if (keep.empty()) return Val{};
  Tensor truth = Tensor::zeros({keep.size(), 1});
  Tensor inv = Tensor::zeros({keep.size(), 1});
  for (std::size_t i = 0; i < keep.size(); ++i) {
    truth.at(i, std::size_t(0)) = truths[keep[i]];
    inv.at(i, std::size_t(0)) = 1.0 / truths[keep[i]];
  }
  Val sel = keep.size() == n ? preds : t.gather_rows(preds, keep);
  Val err = t.mul(t.abs(t.sub(sel, t.constant(truth))), t.constant(inv));
  return t.scalar_mul(t.sum_all(err), 1.0 / static_cast<double>(keep.size()));
}

/// Local MAPE loss with the epsilon-stabilized denominator:
/// mean |t - truth| / (truth + eps).
inline Val loss_local(Tape& t, Val preds, const std::vector<double>& truths, double eps) {
  const std::size_t n = truths.size();
  if (n == 0 || !preds.valid()) return Val{};
  require(t.value(preds).rows() == n, "loss_local: prediction count mismatch");
  Tensor truth = Tensor::zeros({n, 1});
  Tensor inv = Tensor::zeros({n, 1});
  for (std::size_t i = 0; i < n; ++i) {
    truth.at(i, std::size_t(0)) = truths[i];
    inv.at(i, std::size_t(0)) = 1.0 / (truths[i] + eps);
  }
  Val err = t.mul(t.abs(t.sub(preds, t.constant(truth))), t.constant(inv));
  return t.scalar_mul(t.sum_all(err), 1.0 / static_cast<double>(n));
}

/// Weighted combination alpha L_P + beta L_l + (1-alpha-beta) L_v. Missing
/// terms (no supervision in the batch) drop out and the remaining weights
/// renormalize, keeping the loss scale comparable.
inline Val loss_combined(Tape& t, Val l_path, Val l_link, Val l_node,
                         const LossWeights& w) {
  w.validate();
  double total = 0.0;
  std::vector<std::pair<Val, double>> terms;
  if (l_path.valid()) {
    terms.push_back({l_path, w.alpha});
    total += w.alpha;
  }
  if (l_link.valid()) {
    terms.push_back({l_link, w.beta});
    total += w.beta;
  }
  if (l_node.valid()) {
    terms.push_back({l_node, w.gamma()});
    total += w.gamma();
  }
  require(!terms.empty(), "loss_combined: no loss terms present");
  const double scale = total > 0.0 ? 1.0 / total : 0.0;
  Val acc;
  for (auto& [v, wt] : terms) {
    Val scaled = t.scalar_mul(v, wt * scale);
    acc = acc.valid() ? t.add(acc, scaled) : scaled;
  }
  return acc;
}

/// Assembles the three-term objective for one batch.
inline LossTerms batch_loss(Tape& t, const BatchHeads& heads,
                            const std::vector<PathItem>& batch, const LossWeights& w) {
  std::vector<double> path_truths;
  for (const auto& p : batch)
    path_truths.push_back(p.has_total ? p.total_truth : -1.0);  // -1 masks

  std::vector<double> link_truths, node_truths;
  std::vector<std::size_t> link_keep, node_keep;
  for (std::size_t b = 0; b < batch.size(); ++b) {
    std::size_t li = 0, ni = 0;
    for (const auto& e : batch[b].elems) {
      if (e.is_link) {
        if (e.has_truth) {
          link_keep.push_back(heads.link_rows_of_path[b][li]);
          link_truths.push_back(e.truth);
        }
        ++li;
      } else {
        if (e.has_truth) {
          node_keep.push_back(heads.node_rows_of_path[b][ni]);
          node_truths.push_back(e.truth);
        }
        ++ni;
      }
    }
  }

  LossTerms out;
  Val lp = loss_global(t, heads.t_path, path_truths, &out.path_excluded);
  Val ll;
  if (!link_keep.empty() && heads.t_link.valid())
    ll = loss_local(t, t.gather_rows(heads.t_link, link_keep), link_truths, w.epsilon);
  Val lv;
  if (!node_keep.empty() && heads.t_node.valid())
    lv = loss_local(t, t.gather_rows(heads.t_node, node_keep), node_truths, w.epsilon);

  out.has_path = lp.valid();
  out.has_link = ll.valid();
  out.has_node = lv.valid();
  if (out.has_path) out.path_value = t.value(lp).data[0];
  if (out.has_link) out.link_value = t.value(ll).data[0];
  if (out.has_node) out.node_value = t.value(lv).data[0];
  out.combined = loss_combined(t, lp, ll, lv, w);
  return out;
}

}  // namespace stdg
