#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "oracles.hpp"
#include "stdg/dualgraph.hpp"
#include "stdg/features.hpp"
#include "stdg/rng.hpp"

using namespace stdg;

namespace {

RoadNetwork star_net() {
  // three links incident to intersection 2
  return build_network(
      {{1, 0, 0, 0}, {2, 1, 0, 1}, {3, 2, 0, 0}, {4, 1, 1, 0}},
      {{20, 1, 2, 100, 0}, {21, 2, 3, 150, 1}, {22, 2, 4, 120, 0}});
}

TripRecord obs_trip(const std::string& id, std::int64_t ts, std::int64_t link, double t,
                    double frac = 1.0) {
  TripRecord tr;
  tr.trip_id = id;
  tr.depart_ts = ts;
  tr.elements = {{ElemKind::link, link, t, true, frac}};
  return tr;
}

}  // namespace

TEST_CASE("slot grid validation and folding") {
  SlotGrid g;
  g.validate();
  CHECK(g.slots_per_day() == 288);
  CHECK(g.abs_slot(86400 + 300) == 289);
  CHECK(g.fold(289) == 1);
  SlotGrid bad;
  bad.slot_seconds = 7;
  CHECK_THROWS(bad.validate());
  SlotGrid bad_t;
  bad_t.history_steps = 0;
  CHECK_THROWS(bad_t.validate());
}

TEST_CASE("speed aggregation: means and fallback chain") {
  RoadNetwork net = star_net();
  SlotGrid grid;

  SECTION("single traversal of 100 m in 10 s is 10 m/s") {
    LinkDynamic dyn = aggregate_link_speeds({obs_trip("a", 0, 20, 10.0)}, net, grid);
    auto r = dyn.lookup(net.link_at(20), 0);
    CHECK(r.speed_mps == Catch::Approx(10.0));
    CHECK(r.source == SpeedSource::observed);
  }

  SECTION("two traversals at 10 and 20 m/s average to 15") {
    LinkDynamic dyn = aggregate_link_speeds(
        {obs_trip("a", 0, 20, 10.0), obs_trip("b", 10, 20, 5.0)}, net, grid);
    CHECK(dyn.lookup(net.link_at(20), 0).speed_mps == Catch::Approx(15.0));
  }

  SECTION("fraction scales the observed length") {
    LinkDynamic dyn =
        aggregate_link_speeds({obs_trip("a", 0, 20, 10.0, 0.5)}, net, grid);
    CHECK(dyn.lookup(net.link_at(20), 0).speed_mps == Catch::Approx(5.0));
  }

  SECTION("unobserved link falls back to the network mean, then default") {
    LinkDynamic dyn = aggregate_link_speeds({obs_trip("a", 0, 20, 10.0)}, net, grid);
    auto r = dyn.lookup(net.link_at(21), 0);
    CHECK(r.speed_mps == Catch::Approx(10.0));
    CHECK(r.source == SpeedSource::net_mean);

    LinkDynamic empty = aggregate_link_speeds({}, net, grid);
    auto re = empty.lookup(net.link_at(21), 123);
    CHECK(re.speed_mps == Catch::Approx(8.0));
    CHECK(re.source == SpeedSource::fallback_default);
  }

  SECTION("same slot of day on a later day feeds the slot mean") {
    LinkDynamic dyn = aggregate_link_speeds({obs_trip("a", 600, 20, 10.0)}, net, grid);
    auto r = dyn.lookup(net.link_at(20), grid.abs_slot(86400 + 600));
    CHECK(r.source == SpeedSource::slot_mean);
    CHECK(r.speed_mps == Catch::Approx(10.0));
  }

  SECTION("zero-time traversal discarded with count") {
    LinkDynamic dyn = aggregate_link_speeds(
        {obs_trip("a", 0, 20, 0.0), obs_trip("b", 0, 20, 10.0)}, net, grid);
    CHECK(dyn.discarded_zero_time() == 1);
    CHECK(dyn.lookup(net.link_at(20), 0).speed_mps == Catch::Approx(10.0));
  }

  SECTION("trip order does not change the aggregate") {
    std::vector<TripRecord> trips = {obs_trip("a", 0, 20, 10.0), obs_trip("b", 10, 20, 4.0),
                                     obs_trip("c", 700, 21, 15.0)};
    LinkDynamic d1 = aggregate_link_speeds(trips, net, grid);
    std::swap(trips[0], trips[2]);
    LinkDynamic d2 = aggregate_link_speeds(trips, net, grid);
    for (std::size_t e = 0; e < net.num_links(); ++e)
      for (std::int64_t s : {0, 1, 2, 100})
        CHECK(d1.lookup(e, s).speed_mps == Catch::Approx(d2.lookup(e, s).speed_mps));
  }
}

TEST_CASE("encoder: classes, standardization, other bucket") {
  RoadNetwork net = star_net();
  SlotGrid grid;
  LinkDynamic dyn = aggregate_link_speeds({obs_trip("a", 0, 20, 10.0)}, net, grid);
  FeatureEncoder enc = make_encoder(net, dyn);
  CHECK(enc.classes == std::vector<int>{0, 1});
  CHECK(enc.link_width() == 5);  // speed, km, class0, class1, other
  CHECK(enc.class_col(0) == 0);
  CHECK(enc.class_col(1) == 1);
  CHECK(enc.class_col(99) == 2);

  Tensor x = enc.link_features(net, dyn, 0);
  CHECK(x.shape == Shape{3, 5});
  CHECK(x.at(net.link_at(20), std::size_t(1)) == Catch::Approx(0.1));  // 100 m in km
  // one observation: mean = obs, sd floor -> standardized speed 0
  CHECK(x.at(net.link_at(20), std::size_t(0)) == Catch::Approx(0.0));

  Tensor xv = enc.node_features(net);
  CHECK(xv.shape == Shape{4, 2});
  CHECK(xv.at(net.node_at(2), std::size_t(1)) == 1.0);
  CHECK(xv.at(net.node_at(1), std::size_t(0)) == 1.0);
}

TEST_CASE("augmentation: zero weights give zero representations of width d") {
  RoadNetwork net = star_net();
  SlotGrid grid;
  grid.history_steps = 3;
  LinkDynamic dyn = aggregate_link_speeds({obs_trip("a", 0, 20, 10.0)}, net, grid);
  FeatureEncoder enc = make_encoder(net, dyn);
  Tensor p = build_incidence(net);
  const std::size_t d = 20;

  Tape tape;
  Val w_a = tape.constant(Tensor::zeros({enc.link_width(), d}));
  Val w_b = tape.constant(Tensor::zeros({d + enc.node_width(), d}));
  auto [he, zv] = augment_features(tape, enc, net, dyn, p, w_a, w_b, 12);
  CHECK(tape.value(he).shape == Shape{3, 3, d});
  CHECK(tape.value(zv).shape == Shape{3, 4, d});
  for (double x : tape.value(he).data) CHECK(x == 0.0);
  for (double x : tape.value(zv).data) CHECK(x == 0.0);
}

TEST_CASE("augmentation: values stay inside (-1,1) and are deterministic") {
  RoadNetwork net = star_net();
  SlotGrid grid;
  grid.history_steps = 4;
  LinkDynamic dyn = aggregate_link_speeds(
      {obs_trip("a", 0, 20, 10.0), obs_trip("b", 300, 21, 20.0)}, net, grid);
  FeatureEncoder enc = make_encoder(net, dyn);
  Tensor p = build_incidence(net);
  Rng rng(3);
  Tensor wa = Tensor::zeros({enc.link_width(), 6});
  Tensor wb = Tensor::zeros({6 + 2, 6});
  for (auto& x : wa.data) x = rng.uniform(-2, 2);
  for (auto& x : wb.data) x = rng.uniform(-2, 2);

  auto run = [&]() {
    Tape tape;
    auto [he, zv] =
        augment_features(tape, enc, net, dyn, p, tape.constant(wa), tape.constant(wb), 8);
    return std::make_pair(tape.value(he), tape.value(zv));
  };
  auto [he1, zv1] = run();
  auto [he2, zv2] = run();
  CHECK(he1.data == he2.data);
  CHECK(zv1.data == zv2.data);
  for (double x : he1.data) {
    CHECK(x > -1.0);
    CHECK(x < 1.0);
  }
  for (double x : zv1.data) {
    CHECK(x > -1.0);
    CHECK(x < 1.0);
  }
}

TEST_CASE("doubling W_a strictly grows nonzero components") {
  RoadNetwork net = star_net();
  SlotGrid grid;
  grid.history_steps = 1;
  LinkDynamic dyn = aggregate_link_speeds({obs_trip("a", 0, 20, 10.0)}, net, grid);
  FeatureEncoder enc = make_encoder(net, dyn);
  Tensor p = build_incidence(net);
  Rng rng(4);
  Tensor wa = Tensor::zeros({enc.link_width(), 5});
  for (auto& x : wa.data) x = rng.uniform(-1, 1);
  Tensor wa2 = wa;
  for (auto& x : wa2.data) x *= 2.0;
  Tensor wb = Tensor::zeros({5 + 2, 5});

  Tape t1, t2;
  auto [he1, _z1] =
      augment_features(t1, enc, net, dyn, p, t1.constant(wa), t1.constant(wb), 4);
  auto [he2, _z2] =
      augment_features(t2, enc, net, dyn, p, t2.constant(wa2), t2.constant(wb), 4);
  const Tensor& a = t1.value(he1);
  const Tensor& b = t2.value(he2);
  for (std::size_t i = 0; i < a.data.size(); ++i) {
    if (a.data[i] == 0.0)
      CHECK(b.data[i] == 0.0);
    else
      CHECK(std::fabs(b.data[i]) > std::fabs(a.data[i]));
  }
}

TEST_CASE("intersection aggregation matches a direct evaluation on the star") {
  RoadNetwork net = star_net();
  SlotGrid grid;
  grid.history_steps = 1;
  LinkDynamic dyn = aggregate_link_speeds(
      {obs_trip("a", 0, 20, 10.0), obs_trip("b", 0, 21, 12.0), obs_trip("c", 0, 22, 9.0)},
      net, grid);
  FeatureEncoder enc = make_encoder(net, dyn);
  Tensor p = build_incidence(net);
  const std::size_t d = 7;
  Rng rng(8);
  Tensor wa = Tensor::zeros({enc.link_width(), d});
  Tensor wb = Tensor::zeros({d + 2, d});
  for (auto& x : wa.data) x = rng.uniform(-1, 1);
  for (auto& x : wb.data) x = rng.uniform(-1, 1);

  Tape tape;
  auto [he, zv] =
      augment_features(tape, enc, net, dyn, p, tape.constant(wa), tape.constant(wb), 5);

  // direct transcription: z_v = tanh(W_b [sum_{i in F(v)} h_i, p_v]) with the
  // star center v=2 incident to all three links
  const Tensor& h = tape.value(he);
  const std::size_t v = net.node_at(2);
  std::vector<double> sum(d, 0.0);
  for (std::size_t e = 0; e < 3; ++e)
    for (std::size_t c = 0; c < d; ++c) sum[c] += h.at(std::size_t(0), e, c);
  std::vector<double> in(d + 2, 0.0);
  for (std::size_t c = 0; c < d; ++c) in[c] = sum[c];
  in[d + 1] = 1.0;  // signal flag is 1 at the center
  for (std::size_t c = 0; c < d; ++c) {
    double acc = 0.0;
    for (std::size_t k = 0; k < d + 2; ++k) acc += in[k] * wb.at(k, c);
    CHECK(tape.value(zv).at(std::size_t(0), v, c) ==
          Catch::Approx(std::tanh(acc)).margin(1e-12));
  }

  // two incident links with identical h sum to exactly twice one of them
  Tensor hcopy = tape.value(he);
  std::vector<double> two(d, 0.0);
  for (std::size_t c = 0; c < d; ++c)
    two[c] = 2.0 * hcopy.at(std::size_t(0), std::size_t(0), c);
  std::vector<double> sum2(d, 0.0);
  for (std::size_t e : {std::size_t(0), std::size_t(0)})
    for (std::size_t c = 0; c < d; ++c) sum2[c] += hcopy.at(std::size_t(0), e, c);
  CHECK(sum2 == two);
}
