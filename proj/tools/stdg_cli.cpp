// Command-line front end: synthetic data generation, dual-graph construction,
// training, evaluation, the historical-average baseline, and prediction.

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <string>

#include "stdg/dualgraph.hpp"
#include "stdg/features.hpp"
#include "stdg/io.hpp"
#include "stdg/metrics.hpp"
#include "stdg/pipeline.hpp"
#include "stdg/roadnet.hpp"
#include "stdg/synth.hpp"

namespace fs = std::filesystem;
using namespace stdg;

namespace {

void apply_kv(TrainConfig& cfg, const std::map<std::string, std::string>& kv) {
  for (const auto& [k, v] : kv) {
    if (k == "epochs") cfg.epochs = static_cast<std::size_t>(parse_i64(v, k));
    else if (k == "lr") cfg.lr = parse_f64(v, k);
    else if (k == "batch_size") cfg.batch_size = static_cast<std::size_t>(parse_i64(v, k));
    else if (k == "cells") cfg.model.cells = static_cast<std::size_t>(parse_i64(v, k));
    else if (k == "dim") cfg.model.d = static_cast<std::size_t>(parse_i64(v, k));
    else if (k == "lambda") cfg.model.lambda = static_cast<std::size_t>(parse_i64(v, k));
    else if (k == "kernel") cfg.model.tcn_kernel = static_cast<std::size_t>(parse_i64(v, k));
    else if (k == "history_steps") {
      cfg.model.history_steps = static_cast<int>(parse_i64(v, k));
      cfg.grid.history_steps = cfg.model.history_steps;
    } else if (k == "slot_seconds") cfg.grid.slot_seconds = static_cast<int>(parse_i64(v, k));
    else if (k == "seed") cfg.seed = static_cast<std::uint64_t>(parse_i64(v, k));
    else if (k == "alpha") cfg.loss.alpha = parse_f64(v, k);
    else if (k == "beta") cfg.loss.beta = parse_f64(v, k);
    else if (k == "epsilon") cfg.loss.epsilon = parse_f64(v, k);
    else if (k == "train_frac") cfg.train_frac = parse_f64(v, k);
    else if (k == "val_frac") cfg.val_frac = parse_f64(v, k);
    else if (k == "test_frac") cfg.test_frac = parse_f64(v, k);
    else if (k == "patience") cfg.patience = static_cast<std::size_t>(parse_i64(v, k));
    else if (k == "default_speed") cfg.default_speed = parse_f64(v, k);
    else if (k == "sigma_degree") {
      if (v == "total") cfg.sigma_degree = SigmaDegree::total;
      else if (v == "in") cfg.sigma_degree = SigmaDegree::in;
      else if (v == "out") cfg.sigma_degree = SigmaDegree::out;
      else throw error("sigma_degree must be total, in or out");
    } else if (k == "multiscale") cfg.model.multiscale = parse_i64(v, k) != 0;
    else if (k == "tcn") cfg.model.use_tcn = parse_i64(v, k) != 0;
    else if (k == "gcn") cfg.model.use_gcn = parse_i64(v, k) != 0;
    else if (k == "node_stream") cfg.model.node_stream = parse_i64(v, k) != 0;
    else if (k == "edge_stream") cfg.model.edge_stream = parse_i64(v, k) != 0;
    else if (k == "p_interaction") cfg.model.p_interaction = parse_i64(v, k) != 0;
    else if (k == "separate_direction_weights")
      cfg.model.separate_direction_weights = parse_i64(v, k) != 0;
    else throw error("unknown config key '" + k + "'");
  }
}

struct CommonOpts {
  std::string nodes, links, trips, config, checkpoint, out, queries;
  std::string format = "json";
  std::string split = "test";
  std::uint64_t seed = 0;
  bool seed_set = false;
};

void print_table(std::ostream& os, const MetricsReport& r) {
  os << std::left << std::setw(14) << "task" << std::right << std::setw(12) << "rmse_s"
     << std::setw(12) << "mae_s" << std::setw(12) << "mape" << std::setw(10) << "count"
     << "\n";
  auto row = [&](const char* name, const TaskMetrics& m) {
    os << std::left << std::setw(14) << name << std::right << std::fixed
       << std::setprecision(3) << std::setw(12) << m.rmse << std::setw(12) << m.mae
       << std::setw(12) << std::setprecision(5) << m.mape << std::setw(10) << m.count
       << "\n";
    os.unsetf(std::ios::fixed);
  };
  row("path", r.path);
  row("link", r.link);
  row("intersection", r.intersection);
}

RoadNetwork load_net_or_die(const CommonOpts& o) {
  require(!o.nodes.empty() && !o.links.empty(), "--nodes and --links are required");
  return load_network(o.nodes, o.links);
}

std::vector<TripRecord> load_trips_logged(const std::string& path, const RoadNetwork& net,
                                          bool require_times) {
  IngestStats stats;
  auto trips = load_trips(path, net, require_times, &stats);
  if (stats.skipped > 0) {
    std::cerr << "warning: skipped " << stats.skipped << " trip rows from " << path << "\n";
    for (const auto& e : stats.first_errors) std::cerr << "  " << e << "\n";
  }
  return trips;
}

void emit_metrics(const CommonOpts& o, const MetricsReport& report,
                  const std::string& filename) {
  fs::create_directories(o.out);
  std::ofstream f(fs::path(o.out) / filename);
  f << report_json(report).dump(2) << "\n";
  if (o.format == "table")
    print_table(std::cout, report);
  else
    std::cout << report_json(report).dump(2) << "\n";
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"spatio-temporal dual-graph travel time estimation"};
  app.require_subcommand(1);

  CommonOpts o;
  TrainConfig cfg;
  SynthSpec synth;
  bool dump_dynamics = false;
  bool no_multiscale = false, no_tcn = false, no_gcn = false;
  bool no_node = false, no_edge = false, no_p = false;
  std::size_t flag_epochs = 0, flag_cells = 0, flag_dim = 0, flag_batch = 0;
  double flag_lr = -1.0;

  auto add_common = [&](CLI::App* cmd, bool needs_trips) {
    cmd->add_option("--nodes", o.nodes, "intersections CSV");
    cmd->add_option("--links", o.links, "links CSV");
    auto* t = cmd->add_option("--trips", o.trips, "trips JSON-lines");
    if (needs_trips) t->required();
    cmd->add_option("--config", o.config, "flat key=value config file");
    cmd->add_option("--seed", o.seed, "seed override")->each([&](const std::string&) {
      o.seed_set = true;
    });
    cmd->add_option("--out", o.out, "output directory")->required();
  };

  std::size_t flag_trips = 0;
  int flag_days = 0, flag_rows = 0, flag_cols = 0;
  CLI::App* gen = app.add_subcommand("gen-synth", "generate a synthetic dataset");
  gen->add_option("--spec", o.config, "synthetic spec file (key=value)");
  gen->add_option("--seed", o.seed, "seed override")->each([&](const std::string&) {
    o.seed_set = true;
  });
  gen->add_option("--trips", flag_trips, "trip count");
  gen->add_option("--days", flag_days, "day count");
  gen->add_option("--grid-rows", flag_rows, "grid rows");
  gen->add_option("--grid-cols", flag_cols, "grid cols");
  gen->add_option("--out", o.out, "output directory")->required();

  CLI::App* build = app.add_subcommand("build-graph", "construct and export the dual graph");
  add_common(build, true);
  build->add_flag("--dump-dynamics", dump_dynamics, "also dump resolved per-slot speeds");

  CLI::App* tr = app.add_subcommand("train", "train the estimator");
  add_common(tr, true);
  tr->add_option("--epochs", flag_epochs, "epoch cap");
  tr->add_option("--lr", flag_lr, "learning rate");
  tr->add_option("--cells", flag_cells, "spatio-temporal cell count");
  tr->add_option("--dim", flag_dim, "embedding width");
  tr->add_option("--batch", flag_batch, "batch size");
  tr->add_flag("--no-multiscale", no_multiscale, "disable the multi-scale architecture");
  tr->add_flag("--no-tcn", no_tcn, "disable temporal convolution");
  tr->add_flag("--no-gcn", no_gcn, "disable graph convolution");
  tr->add_flag("--no-node-stream", no_node, "drop the intersection stream");
  tr->add_flag("--no-edge-stream", no_edge, "drop the link stream");
  tr->add_flag("--no-p-matrix", no_p, "disable dual-graph interaction");

  CLI::App* ev = app.add_subcommand("eval", "evaluate a checkpoint");
  add_common(ev, true);
  ev->add_option("--checkpoint", o.checkpoint, "checkpoint file")->required();
  ev->add_option("--format", o.format, "json or table")
      ->check(CLI::IsMember({"json", "table"}));
  ev->add_option("--split", o.split, "which split to score")
      ->check(CLI::IsMember({"train", "val", "test", "all"}));

  CLI::App* base = app.add_subcommand("baseline", "historical-average baseline");
  add_common(base, true);
  base->add_option("--format", o.format, "json or table")
      ->check(CLI::IsMember({"json", "table"}));

  CLI::App* pr = app.add_subcommand("predict", "estimate travel times for queries");
  add_common(pr, true);
  pr->add_option("--checkpoint", o.checkpoint, "checkpoint file")->required();
  pr->add_option("--queries", o.queries, "query paths JSON-lines")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 2;
  }

  try {
    if (gen->parsed()) {
      if (!o.config.empty()) synth = synth_spec_from_kv(read_kv_file(o.config));
      if (o.seed_set) synth.seed = o.seed;
      if (flag_trips) synth.trips = flag_trips;
      if (flag_days) synth.days = flag_days;
      if (flag_rows) synth.grid_rows = flag_rows;
      if (flag_cols) synth.grid_cols = flag_cols;
      SynthOut data = gen_synthetic(synth);
      fs::create_directories(o.out);
      write_synth(data, o.out);
      {
        std::ofstream f(fs::path(o.out) / "spec.txt");
        f << "seed=" << synth.seed << "\ngrid_rows=" << synth.grid_rows
          << "\ngrid_cols=" << synth.grid_cols
          << "\ntwoway_fraction=" << fmt_double(synth.twoway_fraction)
          << "\ntrips=" << synth.trips << "\ndays=" << synth.days
          << "\ndepart_start_hour=" << fmt_double(synth.depart_start_hour)
          << "\ndepart_end_hour=" << fmt_double(synth.depart_end_hour)
          << "\nrush_start_hour=" << fmt_double(synth.rush_start_hour)
          << "\nrush_end_hour=" << fmt_double(synth.rush_end_hour)
          << "\nrush_slowdown=" << fmt_double(synth.rush_slowdown)
          << "\nlevel_sd=" << fmt_double(synth.level_sd)
          << "\nlevel_rho=" << fmt_double(synth.level_rho)
          << "\ntrip_noise_sd=" << fmt_double(synth.trip_noise_sd)
          << "\nsignal_delay_mean=" << fmt_double(synth.signal_delay_mean)
          << "\nminor_delay_mean=" << fmt_double(synth.minor_delay_mean)
          << "\nbase_speed_local=" << fmt_double(synth.base_speed_local)
          << "\nbase_speed_arterial=" << fmt_double(synth.base_speed_arterial)
          << "\nlen_min=" << fmt_double(synth.len_min)
          << "\nlen_max=" << fmt_double(synth.len_max)
          << "\nmin_links=" << synth.min_links << "\nmax_links=" << synth.max_links
          << "\npartial_frac_prob=" << fmt_double(synth.partial_frac_prob)
          << "\nday0_ts=" << synth.day0_ts << "\n";
      }
      std::cout << "wrote " << data.nodes.size() << " intersections, " << data.links.size()
                << " links, " << data.trips.size() << " trips to " << o.out << "\n";
      return 0;
    }

    if (!o.config.empty()) apply_kv(cfg, read_kv_file(o.config));
    if (o.seed_set) cfg.seed = o.seed;
    if (flag_epochs) cfg.epochs = flag_epochs;
    if (flag_lr >= 0.0) cfg.lr = flag_lr;
    if (flag_cells) cfg.model.cells = flag_cells;
    if (flag_dim) cfg.model.d = flag_dim;
    if (flag_batch) cfg.batch_size = flag_batch;
    if (no_multiscale) cfg.model.multiscale = false;
    if (no_tcn) cfg.model.use_tcn = false;
    if (no_gcn) cfg.model.use_gcn = false;
    if (no_node) cfg.model.node_stream = false;
    if (no_edge) cfg.model.edge_stream = false;
    if (no_p) cfg.model.p_interaction = false;

    if (build->parsed()) {
      RoadNetwork net = load_net_or_die(o);
      auto trips = load_trips_logged(o.trips, net, true);
      DualGraph g = build_dual_graph(net, trips, cfg.sigma_degree);
      if (g.sigma_fallback)
        std::cerr << "warning: all node degrees equal, uniform node weights used\n";
      fs::create_directories(o.out);
      write_triplets(g.w_n, (fs::path(o.out) / "w_n.csv").string());
      write_triplets(g.w_e, (fs::path(o.out) / "w_e.csv").string());
      write_triplets(g.p, (fs::path(o.out) / "p.csv").string());
      if (dump_dynamics) {
        LinkDynamic dyn = aggregate_link_speeds(trips, net, cfg.grid, cfg.default_speed);
        std::int64_t lo = 0, hi = 0;
        bool first = true;
        for (const auto& t : trips) {
          const std::int64_t s = cfg.grid.abs_slot(t.depart_ts);
          if (first || s < lo) lo = s;
          if (first || s > hi) hi = s;
          first = false;
        }
        stdg::dump_dynamics(net, dyn, lo, hi + 1,
                            (fs::path(o.out) / "dynamics.csv").string());
      }
      std::cout << "dual graph written to " << o.out << " (sigma=" << g.sigma << ")\n";
      return 0;
    }

    if (tr->parsed()) {
      RoadNetwork net = load_net_or_die(o);
      auto trips = load_trips_logged(o.trips, net, true);
      TrainResult result = train(cfg, net, trips, &std::cout);
      fs::create_directories(o.out);
      save_fitted(result.model, (fs::path(o.out) / "checkpoint.ckpt").string());
      write_history(result.history, (fs::path(o.out) / "history.csv").string());
      std::cout << "best epoch " << result.best_epoch << " of " << result.epochs_run
                << "; checkpoint and history written to " << o.out << "\n";
      return 0;
    }

    if (ev->parsed()) {
      RoadNetwork net = load_net_or_die(o);
      auto trips = load_trips_logged(o.trips, net, true);
      // rebuild the training-split features the checkpoint was fitted on
      RawCheckpoint raw = load_checkpoint(o.checkpoint);
      TrainConfig ck = TrainConfig::from_json(raw.config);
      SplitResult split =
          split_dataset(trips, ck.train_frac, ck.val_frac, ck.test_frac, ck.seed);
      FittedModel m = load_fitted(o.checkpoint, net, split.train);
      const std::vector<TripRecord>* eval_set = &split.test;
      if (o.split == "train") eval_set = &split.train;
      else if (o.split == "val") eval_set = &split.val;
      else if (o.split == "all") eval_set = &trips;
      MetricsReport report = evaluate(m, net, *eval_set);
      emit_metrics(o, report, "metrics.json");
      return 0;
    }

    if (base->parsed()) {
      RoadNetwork net = load_net_or_die(o);
      auto trips = load_trips_logged(o.trips, net, true);
      SplitResult split =
          split_dataset(trips, cfg.train_frac, cfg.val_frac, cfg.test_frac, cfg.seed);
      MetricsReport report =
          avg_baseline(net, split.train, split.test, cfg.grid, cfg.default_speed);
      emit_metrics(o, report, "baseline_metrics.json");
      return 0;
    }

    if (pr->parsed()) {
      RoadNetwork net = load_net_or_die(o);
      auto history = load_trips_logged(o.trips, net, true);
      FittedModel m = load_fitted(o.checkpoint, net, history);
      auto queries = load_trips_logged(o.queries, net, false);
      auto preds = predict(m, net, queries);
      fs::create_directories(o.out);
      write_predictions(preds, (fs::path(o.out) / "predictions.jsonl").string());
      std::size_t failed = 0;
      for (const auto& p : preds)
        if (!p.error.empty()) ++failed;
      std::cout << "wrote " << preds.size() << " prediction records (" << failed
                << " with errors) to " << o.out << "\n";
      return failed == preds.size() && !preds.empty() ? 1 : 0;
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
