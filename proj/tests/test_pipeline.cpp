#include <catch2/catch_amalgamated.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "stdg/pipeline.hpp"
#include "stdg/synth.hpp"

using namespace stdg;

namespace {

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

std::vector<TripRecord> dummy_trips(std::size_t n) {
  std::vector<TripRecord> out;
  for (std::size_t i = 0; i < n; ++i) {
    TripRecord t;
    t.trip_id = "d" + std::to_string(i);
    t.depart_ts = static_cast<std::int64_t>(i) * 60;
    out.push_back(t);
  }
  return out;
}

SynthSpec tiny_spec() {
  SynthSpec s;
  s.seed = 99;
  s.grid_rows = 3;
  s.grid_cols = 3;
  s.trips = 60;
  s.days = 1;
  s.depart_start_hour = 7.0;
  s.depart_end_hour = 8.0;
  s.min_links = 2;
  s.max_links = 4;
  return s;
}

TrainConfig tiny_cfg() {
  TrainConfig cfg;
  cfg.model.d = 6;
  cfg.model.cells = 2;
  cfg.model.tcn_kernel = 2;
  cfg.model.lambda = 8;
  cfg.model.history_steps = 4;
  cfg.grid.history_steps = 4;
  cfg.batch_size = 16;
  cfg.epochs = 2;
  cfg.seed = 5;
  return cfg;
}

}  // namespace

TEST_CASE("split_dataset: sizes, determinism, degenerate fractions") {
  auto trips = dummy_trips(10);
  SplitResult s = split_dataset(trips, 0.7, 0.1, 0.2, 42);
  CHECK(s.train.size() == 7);
  CHECK(s.val.size() == 1);
  CHECK(s.test.size() == 2);

  SplitResult s2 = split_dataset(trips, 0.7, 0.1, 0.2, 42);
  for (std::size_t i = 0; i < 7; ++i) CHECK(s.train[i].trip_id == s2.train[i].trip_id);

  SplitResult all = split_dataset(trips, 1.0, 0.0, 0.0, 1);
  CHECK(all.train.size() == 10);
  CHECK(all.val.empty());
  CHECK(all.test.empty());

  CHECK_THROWS(split_dataset({}, 0.7, 0.1, 0.2, 1));
  CHECK_THROWS(split_dataset(trips, 0.5, 0.1, 0.2, 1));
}

TEST_CASE("metric identities") {
  MetricsAccum acc;
  acc.add(100.0, 110.0);
  acc.add(200.0, 190.0);
  TaskMetrics m = acc.finalize();
  CHECK(m.mae == Catch::Approx(10.0).margin(1e-9));
  CHECK(m.rmse == Catch::Approx(10.0).margin(1e-9));
  CHECK(m.mape == Catch::Approx((10.0 / 110.0 + 10.0 / 190.0) / 2.0).margin(1e-9));
  CHECK(m.mape == Catch::Approx(0.07177).margin(1e-5));

  MetricsAccum perfect;
  perfect.add(50.0, 50.0);
  TaskMetrics p = perfect.finalize();
  CHECK(p.rmse == 0.0);
  CHECK(p.mae == 0.0);
  CHECK(p.mape == 0.0);

  MetricsAccum single;
  single.add(55.0, 50.0);
  TaskMetrics s = single.finalize();
  CHECK(s.rmse == Catch::Approx(5.0));
  CHECK(s.mae == Catch::Approx(5.0));
  CHECK(s.mape == Catch::Approx(0.1));

  MetricsAccum excl;
  excl.add(10.0, 0.0);
  excl.add(10.0, 10.0);
  TaskMetrics e = excl.finalize();
  CHECK(e.mape_excluded == 1);
  CHECK(e.mape == 0.0);
  CHECK(e.count == 2);
}

TEST_CASE("RMSE is never below MAE on random batches") {
  Rng rng(123);
  for (int round = 0; round < 1000; ++round) {
    MetricsAccum acc;
    const std::size_t n = 1 + rng.below(20);
    for (std::size_t i = 0; i < n; ++i)
      acc.add(rng.uniform(1.0, 500.0), rng.uniform(1.0, 500.0));
    TaskMetrics m = acc.finalize();
    REQUIRE(m.rmse >= m.mae - 1e-12);
  }
}

TEST_CASE("synthetic generator is seed-deterministic and valid") {
  namespace fs = std::filesystem;
  SynthSpec spec = tiny_spec();
  SynthOut a = gen_synthetic(spec);
  SynthOut b = gen_synthetic(spec);

  fs::path dir = fs::temp_directory_path() / "stdg_synth_test";
  fs::create_directories(dir / "a");
  fs::create_directories(dir / "b");
  write_synth(a, (dir / "a").string());
  write_synth(b, (dir / "b").string());
  for (const char* f : {"nodes.csv", "links.csv", "trips.jsonl"})
    CHECK(slurp(dir / "a" / f) == slurp(dir / "b" / f));

  // file round trip parses and validates
  RoadNetwork net =
      load_network((dir / "a" / "nodes.csv").string(), (dir / "a" / "links.csv").string());
  IngestStats stats;
  auto trips = load_trips((dir / "a" / "trips.jsonl").string(), net, true, &stats);
  CHECK(stats.skipped == 0);
  CHECK(trips.size() == spec.trips);
  fs::remove_all(dir);
}

TEST_CASE("zero-noise generator collapses to length over base speed") {
  SynthSpec spec = tiny_spec();
  spec.rush_slowdown = 1.0;
  spec.level_sd = 0.0;
  spec.trip_noise_sd = 0.0;
  spec.signal_delay_mean = 0.0;
  spec.minor_delay_mean = 0.0;
  spec.partial_frac_prob = 0.0;
  SynthOut data = gen_synthetic(spec);
  RoadNetwork net = build_network(data.nodes, data.links);
  for (const TripRecord& t : data.trips) {
    double want = 0.0;
    for (const TripElement& e : t.elements) {
      if (e.kind == ElemKind::link) {
        const Link& l = net.links[net.link_at(e.id)];
        want += l.length_m / (l.road_class == 1 ? spec.base_speed_arterial
                                                : spec.base_speed_local);
      } else {
        CHECK(e.time_s == 0.0);
      }
    }
    CHECK(t.total_time() == Catch::Approx(want).epsilon(1e-12));
  }
}

TEST_CASE("avg baseline: per-link times and hand-summed paths") {
  RoadNetwork net = build_network(
      {{1, 0, 0, 0}, {2, 1, 0, 1}, {3, 2, 0, 0}, {4, 3, 0, 0}},
      {{10, 1, 2, 100, 0}, {11, 2, 3, 200, 0}, {12, 3, 4, 150, 0}});
  SlotGrid grid;
  auto trip = [&](const std::string& id, std::vector<TripElement> els) {
    TripRecord t;
    t.trip_id = id;
    t.depart_ts = 0;
    t.elements = std::move(els);
    return t;
  };
  // history: link 10 at 10 m/s, link 11 at 8 m/s, link 12 at 12.5 m/s,
  // node 2 delay 4 s, node 3 delay 2 s
  std::vector<TripRecord> train = {
      trip("h1", {{ElemKind::link, 10, 10.0, true, 1.0},
                  {ElemKind::node, 2, 4.0, true, 1.0},
                  {ElemKind::link, 11, 25.0, true, 1.0},
                  {ElemKind::node, 3, 2.0, true, 1.0},
                  {ElemKind::link, 12, 12.0, true, 1.0}})};

  SECTION("single link at historical speed") {
    std::vector<TripRecord> test = {trip("q", {{ElemKind::link, 10, 11.0, true, 1.0}})};
    MetricsReport r = avg_baseline(net, train, test, grid);
    // 100 m at 10 m/s -> 10 s against an 11 s truth
    CHECK(r.path.mae == Catch::Approx(1.0).margin(1e-12));
    CHECK(r.link.count == 1);
  }

  SECTION("fraction scales the estimate") {
    std::vector<TripRecord> test = {trip("q", {{ElemKind::link, 10, 5.0, true, 0.5}})};
    MetricsReport r = avg_baseline(net, train, test, grid);
    CHECK(r.path.mae == Catch::Approx(0.0).margin(1e-12));  // 50 m / 10 m/s = 5 s
  }

  SECTION("three-link path equals the hand sum") {
    std::vector<TripRecord> test = {
        trip("q", {{ElemKind::link, 10, 10.0, true, 1.0},
                   {ElemKind::node, 2, 4.0, true, 1.0},
                   {ElemKind::link, 11, 25.0, true, 1.0},
                   {ElemKind::node, 3, 2.0, true, 1.0},
                   {ElemKind::link, 12, 12.0, true, 1.0}})};
    MetricsReport r = avg_baseline(net, train, test, grid);
    // prediction: 10 + 4 + 25 + 2 + 12 = 53 exactly matches the truth
    CHECK(r.path.mae == Catch::Approx(0.0).margin(1e-9));
    CHECK(r.intersection.count == 2);
  }
}

TEST_CASE("training: lr=0 freezes parameters and the loss history") {
  SynthOut data = gen_synthetic(tiny_spec());
  RoadNetwork net = build_network(data.nodes, data.links);
  TrainConfig cfg = tiny_cfg();
  cfg.lr = 0.0;
  cfg.epochs = 3;
  cfg.patience = 10;

  ParamRegistry before;
  {
    SplitResult split =
        split_dataset(data.trips, cfg.train_frac, cfg.val_frac, cfg.test_frac, cfg.seed);
    LinkDynamic dyn = aggregate_link_speeds(split.train, net, cfg.grid);
    FeatureEncoder enc = make_encoder(net, dyn);
    Rng rng(cfg.seed);
    register_model_params(before, rng, cfg.model, enc.link_width(), enc.node_width());
  }
  TrainResult r = train(cfg, net, data.trips);
  REQUIRE(r.history.size() == 3);
  CHECK(r.history[0].train_loss == Catch::Approx(r.history[1].train_loss).margin(1e-15));
  CHECK(r.history[1].train_loss == Catch::Approx(r.history[2].train_loss).margin(1e-15));
  for (std::size_t i = 0; i < before.size(); ++i)
    CHECK(before.value_at(i).data == r.model.params.value_at(i).data);
}

TEST_CASE("training is bitwise reproducible for a fixed seed") {
  SynthOut data = gen_synthetic(tiny_spec());
  RoadNetwork net = build_network(data.nodes, data.links);
  TrainConfig cfg = tiny_cfg();
  TrainResult a = train(cfg, net, data.trips);
  TrainResult b = train(cfg, net, data.trips);
  REQUIRE(a.history.size() == b.history.size());
  for (std::size_t i = 0; i < a.history.size(); ++i) {
    CHECK(a.history[i].train_loss == b.history[i].train_loss);
    CHECK(a.history[i].val_loss == b.history[i].val_loss);
    CHECK(a.history[i].val_mape == b.history[i].val_mape);
  }
  for (std::size_t i = 0; i < a.model.params.size(); ++i)
    CHECK(a.model.params.value_at(i).data == b.model.params.value_at(i).data);

  // training actually moves the loss
  CHECK(a.history.back().train_loss < a.history.front().train_loss);
}

TEST_CASE("evaluate is invariant to trip order and to sharding") {
  SynthOut data = gen_synthetic(tiny_spec());
  RoadNetwork net = build_network(data.nodes, data.links);
  TrainConfig cfg = tiny_cfg();
  cfg.epochs = 1;
  TrainResult r = train(cfg, net, data.trips);
  SplitResult split =
      split_dataset(data.trips, cfg.train_frac, cfg.val_frac, cfg.test_frac, cfg.seed);

  MetricsReport m1 = evaluate(r.model, net, split.test);
  auto shuffled = split.test;
  Rng rng(7);
  rng.shuffle(shuffled);
  MetricsReport m2 = evaluate(r.model, net, shuffled);
  CHECK(m1.path.rmse == m2.path.rmse);
  CHECK(m1.path.mae == m2.path.mae);
  CHECK(m1.path.mape == m2.path.mape);
  CHECK(m1.link.mape == m2.link.mape);

  CHECK(m1.path.rmse >= m1.path.mae);

#ifdef _GNU_SOURCE
  setenv("STDG_THREADS", "3", 1);
  MetricsReport m3 = evaluate(r.model, net, split.test);
  unsetenv("STDG_THREADS");
  CHECK(m3.path.rmse == m1.path.rmse);
  CHECK(m3.link.mae == m1.link.mae);
#endif
}

TEST_CASE("checkpoint round trip preserves parameters and config") {
  namespace fs = std::filesystem;
  SynthOut data = gen_synthetic(tiny_spec());
  RoadNetwork net = build_network(data.nodes, data.links);
  TrainConfig cfg = tiny_cfg();
  cfg.epochs = 1;
  TrainResult r = train(cfg, net, data.trips);

  fs::path dir = fs::temp_directory_path() / "stdg_ckpt_test";
  fs::create_directories(dir);
  const std::string path = (dir / "model.ckpt").string();
  save_fitted(r.model, path);

  SplitResult split =
      split_dataset(data.trips, cfg.train_frac, cfg.val_frac, cfg.test_frac, cfg.seed);
  FittedModel loaded = load_fitted(path, net, split.train);
  CHECK(loaded.cfg.model.d == cfg.model.d);
  CHECK(loaded.cfg.seed == cfg.seed);
  CHECK(loaded.enc.classes == r.model.enc.classes);
  REQUIRE(loaded.params.size() == r.model.params.size());
  for (std::size_t i = 0; i < loaded.params.size(); ++i) {
    CHECK(loaded.params.name_at(i) == r.model.params.name_at(i));
    CHECK(loaded.params.value_at(i).data == r.model.params.value_at(i).data);
  }

  // evaluation through the loaded model matches the in-memory one
  MetricsReport m1 = evaluate(r.model, net, split.test);
  MetricsReport m2 = evaluate(loaded, net, split.test);
  CHECK(m1.path.mape == m2.path.mape);

  // corrupt magic is rejected
  std::ofstream bad(dir / "bad.ckpt", std::ios::binary);
  bad << "NOTACKPTxxxxxxxxxxxx";
  bad.close();
  CHECK_THROWS(load_checkpoint((dir / "bad.ckpt").string()));
  fs::remove_all(dir);
}

TEST_CASE("predict: positive finite estimates, deterministic, errors reported") {
  SynthOut data = gen_synthetic(tiny_spec());
  RoadNetwork net = build_network(data.nodes, data.links);
  TrainConfig cfg = tiny_cfg();
  cfg.epochs = 1;
  TrainResult r = train(cfg, net, data.trips);

  std::vector<TripRecord> queries;
  {
    TripRecord q = data.trips[0];
    for (auto& e : q.elements) {
      e.has_time = false;
      e.time_s = 0.0;
    }
    queries.push_back(q);
    TripRecord single;
    single.trip_id = "one-link";
    single.depart_ts = data.trips[0].depart_ts;
    single.elements = {{ElemKind::link, data.links[0].id, 0.0, false, 1.0}};
    queries.push_back(single);
    TripRecord bad;
    bad.trip_id = "bad";
    bad.depart_ts = 0;
    bad.elements = {{ElemKind::link, 999999, 0.0, false, 1.0}};
    queries.push_back(bad);
  }
  auto preds = predict(r.model, net, queries);
  REQUIRE(preds.size() == 3);
  CHECK(preds[0].error.empty());
  CHECK(preds[0].t_path_s > 0.0);
  CHECK(preds[0].elements.size() == queries[0].elements.size());
  for (const auto& e : preds[0].elements) {
    CHECK(std::isfinite(e.t_s));
    CHECK(e.t_s > 0.0);
  }
  CHECK(preds[1].elements.size() == 1);
  CHECK(preds[1].t_path_s > 0.0);
  CHECK_FALSE(preds[2].error.empty());

  auto preds2 = predict(r.model, net, queries);
  CHECK(preds2[0].t_path_s == preds[0].t_path_s);
  CHECK(preds2[1].elements[0].t_s == preds[1].elements[0].t_s);
}

TEST_CASE("zero-noise oracle: avg baseline is exact end to end") {
  SynthSpec spec = tiny_spec();
  spec.trips = 120;
  spec.rush_slowdown = 1.0;
  spec.level_sd = 0.0;
  spec.trip_noise_sd = 0.0;
  spec.signal_delay_mean = 0.0;
  spec.minor_delay_mean = 0.0;
  spec.partial_frac_prob = 0.0;
  SynthOut data = gen_synthetic(spec);
  RoadNetwork net = build_network(data.nodes, data.links);
  SplitResult split = split_dataset(data.trips, 0.7, 0.1, 0.2, 11);
  SlotGrid grid;
  MetricsReport r = avg_baseline(net, split.train, split.test, grid);
  CHECK(r.path.mape < 1e-9);
  CHECK(r.path.count == split.test.size());
}

TEST_CASE("history file format") {
  namespace fs = std::filesystem;
  std::vector<EpochRow> rows = {{1, 0.5, 0.6, 10.0, 8.0, 0.2}, {2, 0.4, 0.5, 9.0, 7.0, 0.15}};
  fs::path dir = fs::temp_directory_path() / "stdg_hist_test";
  fs::create_directories(dir);
  write_history(rows, (dir / "history.csv").string());
  std::string text = slurp(dir / "history.csv");
  CHECK(text.find("epoch,train_loss,val_loss,val_rmse,val_mae,val_mape") == 0);
  CHECK(text.find("\n1,0.5,0.6,10,8,0.2\n") != std::string::npos);
  fs::remove_all(dir);
}
