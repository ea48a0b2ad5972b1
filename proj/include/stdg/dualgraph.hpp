#pragma once

#include <cmath>
#include <fstream>
#include <set>
#include <string>
#include <vector>

#include "stdg/io.hpp"
#include "stdg/roadnet.hpp"
#include "stdg/tensor.hpp"

namespace stdg {

/// Which degree population defines the kernel width sigma of the node-wise
/// edge weights. The traffic interpretation uses total (in+out) degree.
enum class SigmaDegree { total, in, out };

struct DualGraph {
  Tensor w_n;   // |V| x |V| weighted node adjacency
  Tensor w_e;   // |E| x |E| weighted edge adjacency
  Tensor r_n;   // 0/1 spatial adjacency masks
  Tensor r_e;
  Tensor p;     // |V| x |E| incidence
  Tensor p_t;
  double sigma = 0.0;
  bool sigma_fallback = false;  // all degrees equal, uniform weights used
  Tensor l_n, l_n_t;  // normalized propagation operators and transposes
  Tensor l_e, l_e_t;
};

inline double degree_for(const RoadNetwork& net, std::size_t v, SigmaDegree kind) {
  switch (kind) {
    case SigmaDegree::in:
      return static_cast<double>(net.in_degree(v));
    case SigmaDegree::out:
      return static_cast<double>(net.out_degree(v));
    default:
      return static_cast<double>(net.in_degree(v) + net.out_degree(v));
  }
}

/// Population standard deviation of node degrees.
inline double degree_sigma(const RoadNetwork& net, SigmaDegree kind = SigmaDegree::total) {
  const std::size_t n = net.num_nodes();
  require(n >= 1, "degree_sigma: empty network");
  double mean = 0.0;
  for (std::size_t v = 0; v < n; ++v) mean += degree_for(net, v, kind);
  mean /= static_cast<double>(n);
  double var = 0.0;
  for (std::size_t v = 0; v < n; ++v) {
    const double d = degree_for(net, v, kind) - mean;
    var += d * d;
  }
  return std::sqrt(var / static_cast<double>(n));
}

/// Node-wise weights: w(i,j) = exp(-(d+(i)+d-(j)-2)^2 / sigma^2) on adjacent
/// pairs. Equal degrees everywhere (sigma = 0) fall back to uniform weight 1.
inline Tensor build_node_graph(const RoadNetwork& net,
                               SigmaDegree kind = SigmaDegree::total,
                               double* sigma_out = nullptr, bool* fallback = nullptr) {
  const std::size_t n = net.num_nodes();
  require(n >= 2, "build_node_graph: need at least 2 intersections");
  const double sigma = degree_sigma(net, kind);
  if (sigma_out) *sigma_out = sigma;
  if (fallback) *fallback = sigma == 0.0;
  Tensor w = Tensor::zeros({n, n});
  for (const Link& l : net.links) {
    const std::size_t i = net.node_index.at(l.from);
    const std::size_t j = net.node_index.at(l.to);
    if (i == j) continue;
    if (sigma == 0.0) {
      w.at(i, j) = 1.0;
    } else {
      const double x = static_cast<double>(net.out_degree(i) + net.in_degree(j)) - 2.0;
      w.at(i, j) = std::exp(-(x * x) / (sigma * sigma));
    }
  }
  return w;
}

/// 0/1 node adjacency mask (directed).
inline Tensor build_node_mask(const RoadNetwork& net) {
  const std::size_t n = net.num_nodes();
  Tensor r = Tensor::zeros({n, n});
  for (const Link& l : net.links) {
    const std::size_t i = net.node_index.at(l.from);
    const std::size_t j = net.node_index.at(l.to);
    if (i != j) r.at(i, j) = 1.0;
  }
  return r;
}

/// 0/1 edge adjacency mask: link i feeds link j when i's head is j's tail.
inline Tensor build_edge_mask(const RoadNetwork& net) {
  const std::size_t m = net.num_links();
  Tensor r = Tensor::zeros({m, m});
  for (std::size_t i = 0; i < m; ++i) {
    const std::size_t head = net.node_index.at(net.links[i].to);
    for (std::size_t j : net.out_links[head])
      if (j != i) r.at(i, j) = 1.0;
  }
  return r;
}

/// Edge-wise weights: observed transition frequencies, row-normalized over
/// each link's observed successors. A trip contributes at most once per
/// ordered link pair; links with no observed out-transitions keep a zero row.
inline Tensor build_edge_graph(const RoadNetwork& net, const std::vector<TripRecord>& trips) {
  const std::size_t m = net.num_links();
  Tensor z = Tensor::zeros({m, m});
  for (const TripRecord& trip : trips) {
    std::set<std::pair<std::size_t, std::size_t>> seen;
    for (std::size_t i = 0; i + 2 < trip.elements.size(); i += 2) {
      const std::size_t a = net.link_at(trip.elements[i].id);
      const std::size_t b = net.link_at(trip.elements[i + 2].id);
      if (a == b) continue;
      if (seen.insert({a, b}).second) z.at(a, b) += 1.0;
    }
  }
  Tensor w = Tensor::zeros({m, m});
  for (std::size_t i = 0; i < m; ++i) {
    double row = 0.0;
    for (std::size_t j = 0; j < m; ++j) row += z.at(i, j);
    if (row == 0.0) continue;
    for (std::size_t j = 0; j < m; ++j) w.at(i, j) = z.at(i, j) / row;
  }
  return w;
}

/// Incidence matrix P: each link column marks its two endpoint intersections.
inline Tensor build_incidence(const RoadNetwork& net) {
  const std::size_t n = net.num_nodes();
  const std::size_t m = net.num_links();
  Tensor p = Tensor::zeros({n, m});
  for (std::size_t e = 0; e < m; ++e) {
    const std::size_t i = net.node_index.at(net.links[e].from);
    const std::size_t j = net.node_index.at(net.links[e].to);
    require(i != j, "build_incidence: self-loop link " + std::to_string(net.links[e].id));
    p.at(i, e) = 1.0;
    p.at(j, e) = 1.0;
  }
  return p;
}

/// L = D^(-1/2) (W + I) D^(-1/2) with D the row sums of W + I. Entries of D
/// are >= 1, so the normalization is always defined.
inline Tensor normalized_propagation(const Tensor& w) {
  require(w.rank() == 2 && w.rows() == w.cols(),
          "normalized_propagation: square matrix required, got " + shape_str(w.shape));
  const std::size_t n = w.rows();
  std::vector<double> dinv(n);
  for (std::size_t i = 0; i < n; ++i) {
    double s = 1.0;  // identity contribution
    for (std::size_t j = 0; j < n; ++j) {
      require(w.at(i, j) >= 0.0, "normalized_propagation: negative weight");
      s += w.at(i, j);
    }
    dinv[i] = 1.0 / std::sqrt(s);
  }
  Tensor l = Tensor::zeros({n, n});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      const double a = w.at(i, j) + (i == j ? 1.0 : 0.0);
      if (a != 0.0) l.at(i, j) = dinv[i] * a * dinv[j];
    }
  return l;
}

inline Tensor transposed(const Tensor& m) {
  Tensor t = Tensor::zeros({m.cols(), m.rows()});
  for (std::size_t i = 0; i < m.rows(); ++i)
    for (std::size_t j = 0; j < m.cols(); ++j) t.at(j, i) = m.at(i, j);
  return t;
}

inline DualGraph build_dual_graph(const RoadNetwork& net, const std::vector<TripRecord>& trips,
                                  SigmaDegree kind = SigmaDegree::total) {
  DualGraph g;
  g.w_n = build_node_graph(net, kind, &g.sigma, &g.sigma_fallback);
  g.r_n = build_node_mask(net);
  g.w_e = build_edge_graph(net, trips);
  g.r_e = build_edge_mask(net);
  g.p = build_incidence(net);
  g.p_t = transposed(g.p);
  g.l_n = normalized_propagation(g.w_n);
  g.l_n_t = transposed(g.l_n);
  g.l_e = normalized_propagation(g.w_e);
  g.l_e_t = transposed(g.l_e);
  return g;
}

/// (row, col, value) triplet dump of the nonzero entries, row-major order.
inline void write_triplets(const Tensor& m, const std::string& path) {
  std::ofstream out(path);
  require(out.good(), "cannot write " + path);
  out << "row,col,value\n";
  for (std::size_t i = 0; i < m.rows(); ++i)
    for (std::size_t j = 0; j < m.cols(); ++j)
      if (m.at(i, j) != 0.0)
        out << i << ',' << j << ',' << fmt_double(m.at(i, j)) << '\n';
}

}  // namespace stdg
