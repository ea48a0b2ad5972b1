#pragma once

#include <json.hpp>

#include <cmath>
#include <cstddef>

#include "stdg/tensor.hpp"

namespace stdg {

struct TaskMetrics {
  double rmse = 0.0;
  double mae = 0.0;
  double mape = 0.0;
  std::size_t count = 0;
  std::size_t mape_excluded = 0;  // zero-truth samples left out of MAPE
};

/// Streaming accumulator; zero-truth samples stay in RMSE/MAE but are
/// excluded (and counted) for MAPE.
struct MetricsAccum {
  double se = 0.0, ae = 0.0, ape = 0.0;
  std::size_t n = 0, n_ape = 0, excluded = 0;

  void add(double pred, double truth) {
    const double err = pred - truth;
    se += err * err;
    ae += std::fabs(err);
    n += 1;
    if (truth > 0.0) {
      ape += std::fabs(err) / truth;
      n_ape += 1;
    } else {
      excluded += 1;
    }
  }

  void merge(const MetricsAccum& o) {
    se += o.se;
    ae += o.ae;
    ape += o.ape;
    n += o.n;
    n_ape += o.n_ape;
    excluded += o.excluded;
  }

  TaskMetrics finalize() const {
    TaskMetrics m;
    m.count = n;
    m.mape_excluded = excluded;
    if (n > 0) {
      m.rmse = std::sqrt(se / static_cast<double>(n));
      m.mae = ae / static_cast<double>(n);
    }
    if (n_ape > 0) m.mape = ape / static_cast<double>(n_ape);
    return m;
  }
};

struct MetricsReport {
  TaskMetrics path;
  TaskMetrics link;
  TaskMetrics intersection;
  std::size_t trips = 0;
};

inline nlohmann::json task_json(const TaskMetrics& m) {
  return {{"rmse_s", m.rmse},
          {"mae_s", m.mae},
          {"mape", m.mape},
          {"count", m.count},
          {"mape_excluded", m.mape_excluded}};
}

inline nlohmann::json report_json(const MetricsReport& r) {
  return {{"rmse_s", r.path.rmse},
          {"mae_s", r.path.mae},
          {"mape", r.path.mape},
          {"sample_count", r.trips},
          {"tasks",
           {{"path", task_json(r.path)},
            {"link", task_json(r.link)},
            {"intersection", task_json(r.intersection)}}}};
}

}  // namespace stdg
