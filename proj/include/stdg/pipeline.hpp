#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <map>
#include <memory>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include "stdg/adam.hpp"
#include "stdg/checkpoint.hpp"
#include "stdg/dualgraph.hpp"
#include "stdg/features.hpp"
#include "stdg/metrics.hpp"
#include "stdg/model.hpp"
#include "stdg/mtl.hpp"
#include "stdg/roadnet.hpp"

namespace stdg {

struct TrainConfig {
  ModelConfig model;
  SlotGrid grid;
  double lr = 0.001;
  std::size_t batch_size = 32;
  std::size_t epochs = 30;
  std::uint64_t seed = 1;
  LossWeights loss;
  double train_frac = 0.7;
  double val_frac = 0.1;
  double test_frac = 0.2;
  std::size_t patience = 5;
  SigmaDegree sigma_degree = SigmaDegree::total;
  double default_speed = 8.0;

  void validate() const {
    model.validate();
    grid.validate();
    loss.validate();
    require(model.history_steps == grid.history_steps,
            "model and slot-grid history lengths differ");
    require(lr >= 0.0, "learning rate must be nonnegative");
    require(batch_size >= 1 && epochs >= 1, "batch size and epochs must be positive");
    require(train_frac >= 0.0 && val_frac >= 0.0 && test_frac >= 0.0 &&
                std::fabs(train_frac + val_frac + test_frac - 1.0) < 1e-9,
            "split fractions must be nonnegative and sum to 1");
  }

  nlohmann::json to_json() const {
    return {{"d", model.d},
            {"cells", model.cells},
            {"tcn_kernel", model.tcn_kernel},
            {"lambda", model.lambda},
            {"history_steps", model.history_steps},
            {"separate_direction_weights", model.separate_direction_weights},
            {"multiscale", model.multiscale},
            {"use_tcn", model.use_tcn},
            {"use_gcn", model.use_gcn},
            {"node_stream", model.node_stream},
            {"edge_stream", model.edge_stream},
            {"p_interaction", model.p_interaction},
            {"slot_seconds", grid.slot_seconds},
            {"lr", lr},
            {"batch_size", batch_size},
            {"epochs", epochs},
            {"seed", seed},
            {"alpha", loss.alpha},
            {"beta", loss.beta},
            {"epsilon", loss.epsilon},
            {"train_frac", train_frac},
            {"val_frac", val_frac},
            {"test_frac", test_frac},
            {"patience", patience},
            {"sigma_degree", static_cast<int>(sigma_degree)},
            {"default_speed", default_speed}};
  }

  static TrainConfig from_json(const nlohmann::json& j) {
    TrainConfig c;
    c.model.d = j.at("d").get<std::size_t>();
    c.model.cells = j.at("cells").get<std::size_t>();
    c.model.tcn_kernel = j.at("tcn_kernel").get<std::size_t>();
    c.model.lambda = j.at("lambda").get<std::size_t>();
    c.model.history_steps = j.at("history_steps").get<int>();
    c.model.separate_direction_weights = j.at("separate_direction_weights").get<bool>();
    c.model.multiscale = j.at("multiscale").get<bool>();
    c.model.use_tcn = j.at("use_tcn").get<bool>();
    c.model.use_gcn = j.at("use_gcn").get<bool>();
    c.model.node_stream = j.at("node_stream").get<bool>();
    c.model.edge_stream = j.at("edge_stream").get<bool>();
    c.model.p_interaction = j.at("p_interaction").get<bool>();
    c.grid.slot_seconds = j.at("slot_seconds").get<int>();
    c.grid.history_steps = c.model.history_steps;
    c.lr = j.at("lr").get<double>();
    c.batch_size = j.at("batch_size").get<std::size_t>();
    c.epochs = j.at("epochs").get<std::size_t>();
    c.seed = j.at("seed").get<std::uint64_t>();
    c.loss.alpha = j.at("alpha").get<double>();
    c.loss.beta = j.at("beta").get<double>();
    c.loss.epsilon = j.at("epsilon").get<double>();
    c.train_frac = j.at("train_frac").get<double>();
    c.val_frac = j.at("val_frac").get<double>();
    c.test_frac = j.at("test_frac").get<double>();
    c.patience = j.at("patience").get<std::size_t>();
    c.sigma_degree = static_cast<SigmaDegree>(j.at("sigma_degree").get<int>());
    c.default_speed = j.at("default_speed").get<double>();
    return c;
  }
};

struct SplitResult {
  std::vector<TripRecord> train, val, test;
};

/// Disjoint, exhaustive, seed-deterministic split by trip position.
inline SplitResult split_dataset(const std::vector<TripRecord>& trips, double train_frac,
                                 double val_frac, double test_frac, std::uint64_t seed) {
  require(!trips.empty(), "split_dataset: empty trip list");
  require(std::fabs(train_frac + val_frac + test_frac - 1.0) < 1e-9,
          "split fractions must sum to 1");
  std::vector<std::size_t> idx(trips.size());
  std::iota(idx.begin(), idx.end(), 0);
  Rng rng(seed ^ 0x517cc1b727220a95ULL);  // split stream, distinct from init
  rng.shuffle(idx);
  const std::size_t n = trips.size();
  std::size_t n_train = static_cast<std::size_t>(std::llround(train_frac * n));
  std::size_t n_val = static_cast<std::size_t>(std::llround(val_frac * n));
  n_train = std::min(n_train, n);
  n_val = std::min(n_val, n - n_train);
  SplitResult out;
  for (std::size_t i = 0; i < n; ++i) {
    const TripRecord& t = trips[idx[i]];
    if (i < n_train)
      out.train.push_back(t);
    else if (i < n_train + n_val)
      out.val.push_back(t);
    else
      out.test.push_back(t);
  }
  return out;
}

/// Everything frozen at training time that prediction needs.
struct FittedModel {
  TrainConfig cfg;
  FeatureEncoder enc;
  ParamRegistry params;
  DualGraph dual;
  LinkDynamic dyn;
};

struct SlotBatch {
  std::int64_t depart_slot = 0;  // the next interval being estimated
  std::vector<PathItem> paths;
};

inline std::vector<SlotBatch> make_batches(const std::vector<TripRecord>& trips,
                                           const RoadNetwork& net, const SlotGrid& grid,
                                           std::size_t batch_cap) {
  std::map<std::int64_t, std::vector<PathItem>> by_slot;
  for (const TripRecord& t : trips)
    by_slot[grid.abs_slot(t.depart_ts)].push_back(resolve_path(t, net));
  std::vector<SlotBatch> out;
  for (auto& [slot, paths] : by_slot) {
    for (std::size_t i = 0; i < paths.size(); i += batch_cap) {
      SlotBatch b;
      b.depart_slot = slot;
      for (std::size_t j = i; j < std::min(paths.size(), i + batch_cap); ++j)
        b.paths.push_back(paths[j]);
      out.push_back(std::move(b));
    }
  }
  return out;
}

struct BatchEval {
  MetricsAccum path, link, node;
  double combined_loss = 0.0;
  std::size_t paths = 0;
};

/// Forward one batch without gradients and score its predictions.
inline BatchEval eval_batch(const FittedModel& m, const RoadNetwork& net,
                            const SlotBatch& batch) {
  Tape tape(false);
  TapeParams p = load_params(tape, m.params, false);
  GraphConsts gc = load_graph(tape, m.dual);
  NextIntervalReps reps = stdg_forward(tape, m.cfg.model, gc, p, m.enc, net, m.dyn, m.dual,
                                       batch.depart_slot);
  BatchHeads heads = mtl_forward(tape, m.cfg.model, p, reps, batch.paths);
  LossTerms terms = batch_loss(tape, heads, batch.paths, m.cfg.loss);
  BatchEval ev;
  ev.combined_loss = tape.value(terms.combined).data[0];
  ev.paths = batch.paths.size();
  for (std::size_t b = 0; b < batch.paths.size(); ++b) {
    const PathItem& path = batch.paths[b];
    if (path.has_total)
      ev.path.add(tape.value(heads.t_path).at(b, std::size_t(0)), path.total_truth);
    std::size_t li = 0, ni = 0;
    for (const auto& e : path.elems) {
      if (e.is_link) {
        const double pred =
            tape.value(heads.t_link).at(heads.link_rows_of_path[b][li++], std::size_t(0));
        if (e.has_truth) ev.link.add(pred, e.truth);
      } else {
        const double pred =
            tape.value(heads.t_node).at(heads.node_rows_of_path[b][ni++], std::size_t(0));
        if (e.has_truth) ev.node.add(pred, e.truth);
      }
    }
  }
  return ev;
}

inline std::size_t eval_threads() {
  if (const char* env = std::getenv("STDG_THREADS")) {
    const long v = std::strtol(env, nullptr, 10);
    if (v >= 1) return static_cast<std::size_t>(v);
  }
  return 1;
}

/// Evaluates a fitted model on trips with ground truth. Batches may shard
/// across threads (STDG_THREADS); results merge in batch order, so the
/// report does not depend on the thread count.
inline std::pair<MetricsReport, double> evaluate_with_loss(const FittedModel& m,
                                                           const RoadNetwork& net,
                                                           const std::vector<TripRecord>& trips) {
  require(!trips.empty(), "evaluate: no trips");
  std::vector<SlotBatch> batches = make_batches(trips, net, m.cfg.grid, 256);
  std::vector<BatchEval> evals(batches.size());
  const std::size_t threads = std::min(eval_threads(), batches.size());
  if (threads <= 1) {
    for (std::size_t i = 0; i < batches.size(); ++i) evals[i] = eval_batch(m, net, batches[i]);
  } else {
    std::atomic<std::size_t> next{0};
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < threads; ++w)
      pool.emplace_back([&] {
        for (std::size_t i = next.fetch_add(1); i < batches.size(); i = next.fetch_add(1))
          evals[i] = eval_batch(m, net, batches[i]);
      });
    for (auto& th : pool) th.join();
  }
  MetricsAccum path, link, node;
  double loss_sum = 0.0;
  std::size_t paths = 0;
  for (const BatchEval& ev : evals) {
    path.merge(ev.path);
    link.merge(ev.link);
    node.merge(ev.node);
    loss_sum += ev.combined_loss * static_cast<double>(ev.paths);
    paths += ev.paths;
  }
  MetricsReport report;
  report.path = path.finalize();
  report.link = link.finalize();
  report.intersection = node.finalize();
  report.trips = paths;
  return {report, paths > 0 ? loss_sum / static_cast<double>(paths) : 0.0};
}

inline MetricsReport evaluate(const FittedModel& m, const RoadNetwork& net,
                              const std::vector<TripRecord>& trips) {
  return evaluate_with_loss(m, net, trips).first;
}

struct EpochRow {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  double val_loss = 0.0;
  double val_rmse = 0.0;
  double val_mae = 0.0;
  double val_mape = 0.0;
};

struct TrainResult {
  FittedModel model;  // best-validation parameters
  std::vector<EpochRow> history;
  std::size_t best_epoch = 0;
  std::size_t epochs_run = 0;
};

inline void write_history(const std::vector<EpochRow>& history, const std::string& path) {
  std::ofstream out(path);
  require(out.good(), "cannot write " + path);
  out << "epoch,train_loss,val_loss,val_rmse,val_mae,val_mape\n";
  for (const EpochRow& r : history)
    out << r.epoch << ',' << fmt_double(r.train_loss) << ',' << fmt_double(r.val_loss)
        << ',' << fmt_double(r.val_rmse) << ',' << fmt_double(r.val_mae) << ','
        << fmt_double(r.val_mape) << '\n';
}

/// Mini-batch Adam on the combined objective. The dual graph, dynamics and
/// feature statistics are built from the training split only; the returned
/// parameters are the best-validation snapshot.
inline TrainResult train(const TrainConfig& cfg, const RoadNetwork& net,
                         const std::vector<TripRecord>& trips,
                         std::ostream* log = nullptr) {
  cfg.validate();
  require(!trips.empty(), "train: no trips");
  SplitResult split = split_dataset(trips, cfg.train_frac, cfg.val_frac, cfg.test_frac,
                                    cfg.seed);
  require(!split.train.empty(), "train: training split is empty");

  TrainResult result;
  FittedModel& m = result.model;
  m.cfg = cfg;
  m.dyn = aggregate_link_speeds(split.train, net, cfg.grid, cfg.default_speed);
  m.dual = build_dual_graph(net, split.train, cfg.sigma_degree);
  m.enc = make_encoder(net, m.dyn);
  Rng init_rng(cfg.seed);
  register_model_params(m.params, init_rng, cfg.model, m.enc.link_width(),
                        m.enc.node_width());

  AdamConfig adam_cfg;
  adam_cfg.lr = cfg.lr;
  Adam opt(m.params, adam_cfg);

  std::vector<SlotBatch> batches = make_batches(split.train, net, cfg.grid, cfg.batch_size);
  std::vector<std::size_t> order(batches.size());
  std::iota(order.begin(), order.end(), 0);

  ParamRegistry best = m.params;
  double best_val = std::numeric_limits<double>::infinity();
  std::size_t best_epoch = 0, since_best = 0;

  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    Rng epoch_rng(cfg.seed * 0x9e3779b97f4a7c15ULL + epoch);
    epoch_rng.shuffle(order);

    // per-batch losses summed in canonical order, so the logged epoch loss
    // does not depend on the shuffle
    std::vector<double> batch_losses(batches.size(), 0.0);
    std::size_t path_count = 0;
    for (std::size_t oi = 0; oi < order.size(); ++oi) {
      const SlotBatch& batch = batches[order[oi]];
      Tape tape(true);
      TapeParams p = load_params(tape, m.params, true);
      GraphConsts gc = load_graph(tape, m.dual);
      NextIntervalReps reps = stdg_forward(tape, cfg.model, gc, p, m.enc, net, m.dyn,
                                           m.dual, batch.depart_slot);
      BatchHeads heads = mtl_forward(tape, cfg.model, p, reps, batch.paths);
      LossTerms terms = batch_loss(tape, heads, batch.paths, cfg.loss);
      const double loss_val = tape.value(terms.combined).data[0];
      if (!std::isfinite(loss_val)) {
        std::ostringstream os;
        os << "non-finite loss at epoch " << epoch << " batch " << oi << " (slot "
           << batch.depart_slot << "); parameter norms:";
        for (std::size_t i = 0; i < m.params.size(); ++i) {
          double norm = 0.0;
          for (double x : m.params.value_at(i).data) norm += x * x;
          os << ' ' << m.params.name_at(i) << '=' << std::sqrt(norm);
        }
        throw error(os.str());
      }
      batch_losses[order[oi]] = loss_val * static_cast<double>(batch.paths.size());
      path_count += batch.paths.size();

      tape.backward(terms.combined);
      std::vector<Tensor> grads;
      grads.reserve(m.params.size());
      for (std::size_t i = 0; i < m.params.size(); ++i)
        grads.push_back(tape.grad_of(p(m.params.name_at(i))));
      opt.step(m.params, grads);
    }

    double loss_sum = 0.0;
    for (double l : batch_losses) loss_sum += l;
    EpochRow row;
    row.epoch = epoch;
    row.train_loss = path_count > 0 ? loss_sum / static_cast<double>(path_count) : 0.0;
    if (!split.val.empty()) {
      auto [val_report, val_loss] = evaluate_with_loss(m, net, split.val);
      row.val_loss = val_loss;
      row.val_rmse = val_report.path.rmse;
      row.val_mae = val_report.path.mae;
      row.val_mape = val_report.path.mape;
    } else {
      row.val_loss = row.train_loss;
    }
    result.history.push_back(row);
    if (log)
      *log << "epoch " << epoch << " train_loss " << row.train_loss << " val_loss "
           << row.val_loss << " val_mape " << row.val_mape << "\n";

    if (row.val_loss < best_val) {
      best_val = row.val_loss;
      best = m.params;
      best_epoch = epoch;
      since_best = 0;
    } else if (++since_best >= cfg.patience) {
      break;
    }
  }
  result.epochs_run = result.history.size();
  result.best_epoch = best_epoch;
  m.params = std::move(best);
  return result;
}

// ---- checkpoint round trip ----

inline void save_fitted(const FittedModel& m, const std::string& path) {
  nlohmann::json cfg = m.cfg.to_json();
  cfg["encoder"] = {{"classes", m.enc.classes},
                    {"speed_mean", m.enc.speed_mean},
                    {"speed_sd", m.enc.speed_sd}};
  save_checkpoint(path, cfg, m.params);
}

/// Restores config, encoder and parameters; dynamics and the dual graph are
/// rebuilt from the supplied historical trips (normally the training split).
inline FittedModel load_fitted(const std::string& path, const RoadNetwork& net,
                               const std::vector<TripRecord>& history) {
  RawCheckpoint raw = load_checkpoint(path);
  FittedModel m;
  m.cfg = TrainConfig::from_json(raw.config);
  m.enc.classes = raw.config.at("encoder").at("classes").get<std::vector<int>>();
  m.enc.speed_mean = raw.config.at("encoder").at("speed_mean").get<double>();
  m.enc.speed_sd = raw.config.at("encoder").at("speed_sd").get<double>();
  m.params = std::move(raw.params);
  m.dyn = aggregate_link_speeds(history, net, m.cfg.grid, m.cfg.default_speed);
  m.dual = build_dual_graph(net, history, m.cfg.sigma_degree);
  return m;
}

// ---- AVG baseline ----

/// Historical mean-speed estimator: per-link slot-of-day mean speeds and
/// per-intersection mean delays from the training split; the path estimate
/// sums per-element times at the departure interval.
struct AvgBaseline {
  LinkDynamic dyn;
  std::vector<double> node_delay;  // mean observed delay per intersection, 0 if none

  static AvgBaseline fit(const RoadNetwork& net, const std::vector<TripRecord>& train,
                         const SlotGrid& grid, double default_speed = 8.0) {
    AvgBaseline b;
    b.dyn = aggregate_link_speeds(train, net, grid, default_speed);
    std::vector<double> sum(net.num_nodes(), 0.0);
    std::vector<std::size_t> cnt(net.num_nodes(), 0);
    for (const TripRecord& t : train)
      for (const TripElement& e : t.elements)
        if (e.kind == ElemKind::node && e.has_time) {
          sum[net.node_at(e.id)] += e.time_s;
          cnt[net.node_at(e.id)] += 1;
        }
    b.node_delay.resize(net.num_nodes(), 0.0);
    for (std::size_t v = 0; v < net.num_nodes(); ++v)
      if (cnt[v] > 0) b.node_delay[v] = sum[v] / static_cast<double>(cnt[v]);
    return b;
  }

  double link_time(const RoadNetwork& net, std::size_t link, double frac, int sod) const {
    const double speed = dyn.lookup_slot_of_day(link, sod).speed_mps;
    return frac * net.links[link].length_m / speed;
  }
};

inline MetricsReport avg_baseline(const RoadNetwork& net,
                                  const std::vector<TripRecord>& train,
                                  const std::vector<TripRecord>& test, const SlotGrid& grid,
                                  double default_speed = 8.0) {
  AvgBaseline b = AvgBaseline::fit(net, train, grid, default_speed);
  MetricsAccum path, link, node;
  for (const TripRecord& t : test) {
    const int sod = grid.slot_of_day(t.depart_ts);
    double total = 0.0;
    for (const TripElement& e : t.elements) {
      if (e.kind == ElemKind::link) {
        const double pred = b.link_time(net, net.link_at(e.id), e.frac, sod);
        total += pred;
        if (e.has_time) link.add(pred, e.time_s);
      } else {
        const double pred = b.node_delay[net.node_at(e.id)];
        total += pred;
        if (e.has_time) node.add(pred, e.time_s);
      }
    }
    if (t.has_all_times()) path.add(total, t.total_time());
  }
  MetricsReport report;
  report.path = path.finalize();
  report.link = link.finalize();
  report.intersection = node.finalize();
  report.trips = test.size();
  return report;
}

// ---- prediction ----

struct PredictionElem {
  bool is_link = true;
  std::int64_t id = 0;
  double t_s = 0.0;
};

struct PredictionRecord {
  std::string trip_id;
  double t_path_s = 0.0;
  std::vector<PredictionElem> elements;
  std::string error;  // nonempty if resolution failed
};

/// Per-query path, link and intersection estimates. Queries with unknown ids
/// produce an error entry while the run continues.
inline std::vector<PredictionRecord> predict(const FittedModel& m, const RoadNetwork& net,
                                             const std::vector<TripRecord>& queries) {
  std::vector<PredictionRecord> out(queries.size());
  std::map<std::int64_t, std::vector<std::size_t>> by_slot;
  for (std::size_t i = 0; i < queries.size(); ++i) {
    out[i].trip_id = queries[i].trip_id;
    try {
      validate_trip(queries[i], net, false);
      by_slot[m.cfg.grid.abs_slot(queries[i].depart_ts)].push_back(i);
    } catch (const std::exception& e) {
      out[i].error = e.what();
    }
  }
  for (const auto& [slot, indices] : by_slot) {
    Tape tape(false);
    TapeParams p = load_params(tape, m.params, false);
    GraphConsts gc = load_graph(tape, m.dual);
    NextIntervalReps reps =
        stdg_forward(tape, m.cfg.model, gc, p, m.enc, net, m.dyn, m.dual, slot);
    std::vector<PathItem> paths;
    for (std::size_t i : indices) paths.push_back(resolve_path(queries[i], net));
    BatchHeads heads = mtl_forward(tape, m.cfg.model, p, reps, paths);
    for (std::size_t b = 0; b < indices.size(); ++b) {
      PredictionRecord& rec = out[indices[b]];
      rec.t_path_s = tape.value(heads.t_path).at(b, std::size_t(0));
      std::size_t li = 0, ni = 0;
      for (std::size_t ei = 0; ei < paths[b].elems.size(); ++ei) {
        const auto& e = paths[b].elems[ei];
        PredictionElem pe;
        pe.is_link = e.is_link;
        pe.id = queries[indices[b]].elements[ei].id;
        pe.t_s = e.is_link
                     ? tape.value(heads.t_link).at(heads.link_rows_of_path[b][li++],
                                                   std::size_t(0))
                     : tape.value(heads.t_node).at(heads.node_rows_of_path[b][ni++],
                                                   std::size_t(0));
        rec.elements.push_back(pe);
      }
    }
  }
  return out;
}

inline void write_predictions(const std::vector<PredictionRecord>& preds,
                              const std::string& path) {
  std::ofstream out(path);
  require(out.good(), "cannot write " + path);
  for (const PredictionRecord& r : preds) {
    if (!r.error.empty()) {
      nlohmann::json j = {{"trip_id", r.trip_id}, {"error", r.error}};
      out << j.dump() << '\n';
      continue;
    }
    out << "{\"trip_id\":\"" << r.trip_id << "\",\"t_path_s\":" << fmt_double(r.t_path_s)
        << ",\"per_element\":[";
    for (std::size_t i = 0; i < r.elements.size(); ++i) {
      const auto& e = r.elements[i];
      if (i) out << ',';
      out << "{\"kind\":\"" << (e.is_link ? "link" : "node") << "\",\"id\":" << e.id
          << ",\"t_s\":" << fmt_double(e.t_s) << '}';
    }
    out << "]}\n";
  }
}

}  // namespace stdg
