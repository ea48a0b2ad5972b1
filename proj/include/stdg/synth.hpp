#pragma once

#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "stdg/io.hpp"
#include "stdg/rng.hpp"
#include "stdg/roadnet.hpp"

namespace stdg {

/// Seeded synthetic dataset: a grid road network plus trips drawn from a
/// congestion model with a daily rush-hour pattern, a slowly drifting
/// day-specific congestion level, per-traversal noise and signal delays.
/// Identical seeds reproduce the dataset bitwise.
struct SynthSpec {
  std::uint64_t seed = 7;
  int grid_rows = 7;
  int grid_cols = 7;
  double twoway_fraction = 0.45;  // share of undirected edges opened both ways
  std::size_t trips = 5000;
  int days = 2;
  double depart_start_hour = 7.0;
  double depart_end_hour = 12.0;
  double rush_start_hour = 7.5;
  double rush_end_hour = 9.5;
  double rush_slowdown = 1.6;   // congestion multiplier inside the rush window
  double level_sd = 0.18;       // lognormal sd of the drifting congestion level
  double level_rho = 0.995;     // AR(1) coefficient per 5-minute slot
  double trip_noise_sd = 0.03;  // lognormal sd per traversal
  double signal_delay_mean = 10.0;  // seconds at signalized intersections
  double minor_delay_mean = 2.0;    // seconds elsewhere
  double base_speed_local = 8.0;    // m/s, road class 0
  double base_speed_arterial = 13.0;  // m/s, road class 1
  double len_min = 250.0;
  double len_max = 600.0;
  int min_links = 4;
  int max_links = 8;
  double partial_frac_prob = 0.1;
  std::int64_t day0_ts = 1700006400;  // midnight-aligned epoch seconds

  void validate() const {
    require(grid_rows >= 2 && grid_cols >= 2, "grid must be at least 2x2");
    require(days >= 1 && trips >= 1, "need at least one day and one trip");
    require(depart_end_hour > depart_start_hour, "empty departure window");
    require(min_links >= 1 && max_links >= min_links, "bad walk length bounds");
  }
};

struct SynthOut {
  std::vector<Intersection> nodes;
  std::vector<Link> links;
  std::vector<TripRecord> trips;
};

inline SynthOut gen_synthetic(const SynthSpec& spec) {
  spec.validate();
  Rng rng(spec.seed);
  SynthOut out;

  const int R = spec.grid_rows, C = spec.grid_cols;
  auto node_id = [&](int r, int c) { return static_cast<std::int64_t>(r * C + c + 1); };
  for (int r = 0; r < R; ++r)
    for (int c = 0; c < C; ++c) {
      Intersection n;
      n.id = node_id(r, c);
      n.lon = c * 0.005;
      n.lat = r * 0.005;
      n.signal = (r + c) % 2 == 0 ? 1 : 0;
      out.nodes.push_back(n);
    }

  // one-way grid with boustrophedon orientation; a seeded subset of edges
  // is opened in both directions
  std::int64_t next_link = 1000;
  auto add_link = [&](std::int64_t a, std::int64_t b, double len, int cls) {
    out.links.push_back({next_link++, a, b, len, cls});
  };
  for (int r = 0; r < R; ++r)
    for (int c = 0; c + 1 < C; ++c) {
      const double len = rng.uniform(spec.len_min, spec.len_max);
      const int cls = r % 3 == 0 ? 1 : 0;  // arterial rows
      const bool east = r % 2 == 0;
      add_link(node_id(r, east ? c : c + 1), node_id(r, east ? c + 1 : c), len, cls);
      if (rng.uniform() < spec.twoway_fraction)
        add_link(node_id(r, east ? c + 1 : c), node_id(r, east ? c : c + 1), len, cls);
    }
  for (int c = 0; c < C; ++c)
    for (int r = 0; r + 1 < R; ++r) {
      const double len = rng.uniform(spec.len_min, spec.len_max);
      const int cls = c % 3 == 0 ? 1 : 0;
      const bool south = c % 2 == 0;
      add_link(node_id(south ? r : r + 1, c), node_id(south ? r + 1 : r, c), len, cls);
      if (rng.uniform() < spec.twoway_fraction)
        add_link(node_id(south ? r + 1 : r, c), node_id(south ? r : r + 1, c), len, cls);
    }

  RoadNetwork net = build_network(out.nodes, out.links);

  // congestion level: stationary AR(1) in log space per day over 5-min slots
  const int slots_per_day = 288;
  std::vector<std::vector<double>> level(spec.days,
                                         std::vector<double>(slots_per_day, 1.0));
  for (int d = 0; d < spec.days; ++d) {
    double g = spec.level_sd * rng.normal();
    level[d][0] = std::exp(g);
    const double q = spec.level_sd * std::sqrt(1.0 - spec.level_rho * spec.level_rho);
    for (int s = 1; s < slots_per_day; ++s) {
      g = spec.level_rho * g + q * rng.normal();
      level[d][s] = std::exp(g);
    }
  }
  auto congestion = [&](int day, std::int64_t ts) {
    const double hour = static_cast<double>((ts - spec.day0_ts) % 86400) / 3600.0;
    const int sod = static_cast<int>(((ts - spec.day0_ts) % 86400) / 300);
    const double rush =
        hour >= spec.rush_start_hour && hour < spec.rush_end_hour ? spec.rush_slowdown : 1.0;
    return rush * level[day][sod];
  };
  auto base_speed = [&](const Link& l) {
    return l.road_class == 1 ? spec.base_speed_arterial : spec.base_speed_local;
  };
  auto lognoise = [&]() {
    return spec.trip_noise_sd > 0.0 ? std::exp(spec.trip_noise_sd * rng.normal()) : 1.0;
  };

  const int window_slots = static_cast<int>((spec.depart_end_hour - spec.depart_start_hour) * 12);
  const int rush_lo = static_cast<int>(spec.rush_start_hour * 12);
  const int rush_hi = static_cast<int>(spec.rush_end_hour * 12);
  const int window_lo = static_cast<int>(spec.depart_start_hour * 12);

  std::size_t made = 0;
  std::size_t attempts = 0;
  while (made < spec.trips && attempts < spec.trips * 20) {
    ++attempts;
    const int day = static_cast<int>(rng.below(static_cast<std::uint64_t>(spec.days)));
    int sod;
    if (rush_hi > rush_lo && rng.uniform() < 0.5) {
      sod = rush_lo + static_cast<int>(rng.below(static_cast<std::uint64_t>(rush_hi - rush_lo)));
    } else {
      sod = window_lo + static_cast<int>(rng.below(static_cast<std::uint64_t>(window_slots)));
    }
    const std::int64_t depart =
        spec.day0_ts + static_cast<std::int64_t>(day) * 86400 +
        static_cast<std::int64_t>(sod) * 300 +
        static_cast<std::int64_t>(rng.below(300));

    // directed random walk, avoiding immediate U-turns when possible
    const int want_links =
        spec.min_links +
        static_cast<int>(rng.below(static_cast<std::uint64_t>(spec.max_links - spec.min_links + 1)));
    std::size_t v = rng.below(net.num_nodes());
    std::vector<std::size_t> walk;
    std::size_t prev_link = static_cast<std::size_t>(-1);
    for (int i = 0; i < want_links; ++i) {
      const auto& outs = net.out_links[v];
      if (outs.empty()) break;
      std::vector<std::size_t> options;
      for (std::size_t e : outs) {
        if (prev_link != static_cast<std::size_t>(-1)) {
          const Link& pl = net.links[prev_link];
          const Link& nl = net.links[e];
          if (nl.from == pl.to && nl.to == pl.from && outs.size() > 1) continue;
        }
        options.push_back(e);
      }
      if (options.empty()) options.assign(outs.begin(), outs.end());
      const std::size_t e = options[rng.below(options.size())];
      walk.push_back(e);
      prev_link = e;
      v = net.node_index.at(net.links[e].to);
    }
    if (static_cast<int>(walk.size()) < spec.min_links) continue;

    TripRecord trip;
    trip.trip_id = "t" + std::to_string(made + 1);
    trip.depart_ts = depart;
    double frac_first = 1.0, frac_last = 1.0;
    if (rng.uniform() < spec.partial_frac_prob) frac_first = rng.uniform(0.3, 1.0);
    if (rng.uniform() < spec.partial_frac_prob) frac_last = rng.uniform(0.3, 1.0);

    double t = static_cast<double>(depart);
    for (std::size_t i = 0; i < walk.size(); ++i) {
      const Link& l = net.links[walk[i]];
      const double frac = i == 0 ? frac_first : (i + 1 == walk.size() ? frac_last : 1.0);
      const double m = congestion(day, static_cast<std::int64_t>(t));
      const double speed = base_speed(l) / (m * lognoise());
      const double lt = frac * l.length_m / speed;
      trip.elements.push_back({ElemKind::link, l.id, lt, true, frac});
      t += lt;
      if (i + 1 < walk.size()) {
        const std::size_t head = net.node_index.at(l.to);
        const double mean = net.nodes[head].signal ? spec.signal_delay_mean
                                                   : spec.minor_delay_mean;
        const double m2 = congestion(day, static_cast<std::int64_t>(t));
        const double delay = mean <= 0.0 ? 0.0 : mean * m2 * lognoise();
        trip.elements.push_back({ElemKind::node, net.nodes[head].id, delay, true, 1.0});
        t += delay;
      }
    }
    validate_trip(trip, net, true);
    out.trips.push_back(std::move(trip));
    ++made;
  }
  require(made == spec.trips, "random walk generation starved; loosen the spec");
  return out;
}

// ---- file round trip ----

inline void write_synth(const SynthOut& data, const std::string& dir) {
  {
    std::ofstream f(dir + "/nodes.csv");
    require(f.good(), "cannot write " + dir + "/nodes.csv");
    f << "node_id,lon,lat,signal\n";
    for (const auto& n : data.nodes)
      f << n.id << ',' << fmt_double(n.lon) << ',' << fmt_double(n.lat) << ',' << n.signal
        << '\n';
  }
  {
    std::ofstream f(dir + "/links.csv");
    require(f.good(), "cannot write " + dir + "/links.csv");
    f << "link_id,from_node,to_node,length_m,road_class\n";
    for (const auto& l : data.links)
      f << l.id << ',' << l.from << ',' << l.to << ',' << fmt_double(l.length_m) << ','
        << l.road_class << '\n';
  }
  {
    std::ofstream f(dir + "/trips.jsonl");
    require(f.good(), "cannot write " + dir + "/trips.jsonl");
    for (const auto& t : data.trips) {
      f << "{\"trip_id\":\"" << t.trip_id << "\",\"depart_ts\":" << t.depart_ts
        << ",\"elements\":[";
      for (std::size_t i = 0; i < t.elements.size(); ++i) {
        const auto& e = t.elements[i];
        if (i) f << ',';
        f << "{\"kind\":\"" << (e.kind == ElemKind::link ? "link" : "node")
          << "\",\"id\":" << e.id << ",\"t\":" << fmt_double(e.time_s);
        if (e.frac != 1.0) f << ",\"frac\":" << fmt_double(e.frac);
        f << '}';
      }
      f << "]}\n";
    }
  }
}

inline SynthSpec synth_spec_from_kv(const std::map<std::string, std::string>& kv) {
  SynthSpec s;
  for (const auto& [k, v] : kv) {
    if (k == "seed") s.seed = static_cast<std::uint64_t>(parse_i64(v, k));
    else if (k == "grid_rows") s.grid_rows = static_cast<int>(parse_i64(v, k));
    else if (k == "grid_cols") s.grid_cols = static_cast<int>(parse_i64(v, k));
    else if (k == "twoway_fraction") s.twoway_fraction = parse_f64(v, k);
    else if (k == "trips") s.trips = static_cast<std::size_t>(parse_i64(v, k));
    else if (k == "days") s.days = static_cast<int>(parse_i64(v, k));
    else if (k == "depart_start_hour") s.depart_start_hour = parse_f64(v, k);
    else if (k == "depart_end_hour") s.depart_end_hour = parse_f64(v, k);
    else if (k == "rush_start_hour") s.rush_start_hour = parse_f64(v, k);
    else if (k == "rush_end_hour") s.rush_end_hour = parse_f64(v, k);
    else if (k == "rush_slowdown") s.rush_slowdown = parse_f64(v, k);
    else if (k == "level_sd") s.level_sd = parse_f64(v, k);
    else if (k == "level_rho") s.level_rho = parse_f64(v, k);
    else if (k == "trip_noise_sd") s.trip_noise_sd = parse_f64(v, k);
    else if (k == "signal_delay_mean") s.signal_delay_mean = parse_f64(v, k);
    else if (k == "minor_delay_mean") s.minor_delay_mean = parse_f64(v, k);
    else if (k == "base_speed_local") s.base_speed_local = parse_f64(v, k);
    else if (k == "base_speed_arterial") s.base_speed_arterial = parse_f64(v, k);
    else if (k == "len_min") s.len_min = parse_f64(v, k);
    else if (k == "len_max") s.len_max = parse_f64(v, k);
    else if (k == "min_links") s.min_links = static_cast<int>(parse_i64(v, k));
    else if (k == "max_links") s.max_links = static_cast<int>(parse_i64(v, k));
    else if (k == "partial_frac_prob") s.partial_frac_prob = parse_f64(v, k);
    else if (k == "day0_ts") s.day0_ts = parse_i64(v, k);
    else throw error("unknown synthetic spec key '" + k + "'");
  }
  return s;
}

}  // namespace stdg
