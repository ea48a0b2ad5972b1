#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <set>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "stdg/autodiff.hpp"
#include "stdg/io.hpp"
#include "stdg/roadnet.hpp"
#include "stdg/tensor.hpp"

namespace stdg {

/// Fixed time discretization. Slots are absolute (day-aware); slot-of-day
/// folds out the date for historical means.
struct SlotGrid {
  int slot_seconds = 300;
  int history_steps = 12;  // T
  std::int64_t day_start = 0;

  void validate() const {
    require(slot_seconds > 0 && 86400 % slot_seconds == 0,
            "slot length must divide 86400 seconds");
    require(history_steps >= 1, "history window must have at least one step");
  }
  int slots_per_day() const { return 86400 / slot_seconds; }
  std::int64_t abs_slot(std::int64_t ts) const { return (ts - day_start) / slot_seconds; }
  int slot_of_day(std::int64_t ts) const {
    return static_cast<int>(((ts - day_start) % 86400) / slot_seconds);
  }
  int fold(std::int64_t abs) const {
    return static_cast<int>(((abs % slots_per_day()) + slots_per_day()) % slots_per_day());
  }
};

enum class SpeedSource { observed, slot_mean, link_mean, net_mean, fallback_default };

inline const char* speed_source_name(SpeedSource s) {
  switch (s) {
    case SpeedSource::observed: return "observed";
    case SpeedSource::slot_mean: return "slot-mean";
    case SpeedSource::link_mean: return "link-mean";
    case SpeedSource::net_mean: return "net-mean";
    default: return "default";
  }
}

/// Per-link per-slot mean speeds with the fallback chain:
/// observed cell -> same slot-of-day over all days -> link mean ->
/// network mean -> configured default.
class LinkDynamic {
 public:
  LinkDynamic() = default;
  LinkDynamic(std::size_t num_links, const SlotGrid& grid, double default_speed = 8.0)
      : grid_(grid), per_link_(num_links), default_speed_(default_speed) {}

  void add_observation(std::size_t link, std::int64_t ts, double speed_mps) {
    require(speed_mps > 0.0, "speed observation must be positive");
    const std::int64_t abs = grid_.abs_slot(ts);
    bump(cells_[cell_key(link, abs)], speed_mps);
    bump(slot_of_day_[sod_key(link, grid_.fold(abs))], speed_mps);
    bump(per_link_[link], speed_mps);
    bump(net_, speed_mps);
    sumsq_ += speed_mps * speed_mps;
  }

  struct Lookup {
    double speed_mps;
    SpeedSource source;
  };

  Lookup lookup(std::size_t link, std::int64_t abs) const {
    if (auto it = cells_.find(cell_key(link, abs)); it != cells_.end())
      return {it->second.sum / it->second.n, SpeedSource::observed};
    if (auto it = slot_of_day_.find(sod_key(link, grid_.fold(abs)));
        it != slot_of_day_.end())
      return {it->second.sum / it->second.n, SpeedSource::slot_mean};
    if (per_link_[link].n > 0)
      return {per_link_[link].sum / per_link_[link].n, SpeedSource::link_mean};
    if (net_.n > 0) return {net_.sum / net_.n, SpeedSource::net_mean};
    return {default_speed_, SpeedSource::fallback_default};
  }

  /// Historical mean for a slot-of-day, skipping the day-specific cell.
  Lookup lookup_slot_of_day(std::size_t link, int sod) const {
    if (auto it = slot_of_day_.find(sod_key(link, sod)); it != slot_of_day_.end())
      return {it->second.sum / it->second.n, SpeedSource::slot_mean};
    if (per_link_[link].n > 0)
      return {per_link_[link].sum / per_link_[link].n, SpeedSource::link_mean};
    if (net_.n > 0) return {net_.sum / net_.n, SpeedSource::net_mean};
    return {default_speed_, SpeedSource::fallback_default};
  }

  std::size_t observation_count() const { return net_.n; }
  std::size_t discarded_zero_time() const { return discarded_; }
  void count_discard() { ++discarded_; }
  const SlotGrid& grid() const { return grid_; }
  double default_speed() const { return default_speed_; }

  /// Mean/sd of the raw observations, for feature standardization.
  std::pair<double, double> observation_stats() const {
    if (net_.n == 0) return {default_speed_, 1.0};
    const double mean = net_.sum / net_.n;
    const double var = std::max(0.0, sumsq_ / net_.n - mean * mean);
    const double sd = std::sqrt(var);
    return {mean, sd > 1e-12 ? sd : 1.0};
  }

 private:
  struct Stat {
    double sum = 0.0;
    std::size_t n = 0;
  };
  static void bump(Stat& s, double v) {
    s.sum += v;
    s.n += 1;
  }
  static std::uint64_t cell_key(std::size_t link, std::int64_t abs) {
    return (static_cast<std::uint64_t>(link) << 32) ^
           (static_cast<std::uint64_t>(abs) & 0xffffffffULL);
  }
  static std::uint64_t sod_key(std::size_t link, int sod) {
    return (static_cast<std::uint64_t>(link) << 32) ^ static_cast<std::uint64_t>(sod);
  }

  SlotGrid grid_;
  std::unordered_map<std::uint64_t, Stat> cells_;
  std::unordered_map<std::uint64_t, Stat> slot_of_day_;
  std::vector<Stat> per_link_;
  Stat net_;
  double sumsq_ = 0.0;
  double default_speed_ = 8.0;
  std::size_t discarded_ = 0;
};

/// A trip contributes one speed observation per traversed link, assigned to
/// the slot containing the traversal's start time. Zero-time traversals are
/// discarded and counted.
inline LinkDynamic aggregate_link_speeds(const std::vector<TripRecord>& trips,
                                         const RoadNetwork& net, const SlotGrid& grid,
                                         double default_speed = 8.0) {
  grid.validate();
  LinkDynamic dyn(net.num_links(), grid, default_speed);
  for (const TripRecord& trip : trips) {
    double t = static_cast<double>(trip.depart_ts);
    for (const TripElement& el : trip.elements) {
      if (el.kind == ElemKind::link && el.has_time) {
        const Link& l = net.links[net.link_at(el.id)];
        if (el.time_s > 0.0) {
          dyn.add_observation(net.link_at(el.id), static_cast<std::int64_t>(t),
                              el.frac * l.length_m / el.time_s);
        } else {
          dyn.count_discard();
        }
      }
      if (el.has_time) t += el.time_s;
    }
  }
  return dyn;
}

/// Static feature encoding frozen at training time: road-class one-hot with
/// an "other" bucket for unseen classes, speed standardization statistics,
/// and lengths in kilometers.
struct FeatureEncoder {
  std::vector<int> classes;
  double speed_mean = 8.0;
  double speed_sd = 1.0;

  std::size_t link_width() const { return 2 + classes.size() + 1; }
  std::size_t node_width() const { return 2; }

  std::size_t class_col(int road_class) const {
    auto it = std::lower_bound(classes.begin(), classes.end(), road_class);
    if (it != classes.end() && *it == road_class)
      return static_cast<std::size_t>(it - classes.begin());
    return classes.size();  // "other" bucket
  }

  /// Per-slot link features [standardized speed, length_km, class one-hot].
  Tensor link_features(const RoadNetwork& net, const LinkDynamic& dyn,
                       std::int64_t abs_slot) const {
    Tensor x = Tensor::zeros({net.num_links(), link_width()});
    for (std::size_t e = 0; e < net.num_links(); ++e) {
      const double s = dyn.lookup(e, abs_slot).speed_mps;
      x.at(e, std::size_t(0)) = (s - speed_mean) / speed_sd;
      x.at(e, std::size_t(1)) = net.links[e].length_m / 1000.0;
      x.at(e, 2 + class_col(net.links[e].road_class)) = 1.0;
    }
    return x;
  }

  /// Signal flag one-hot per intersection.
  Tensor node_features(const RoadNetwork& net) const {
    Tensor x = Tensor::zeros({net.num_nodes(), node_width()});
    for (std::size_t v = 0; v < net.num_nodes(); ++v)
      x.at(v, static_cast<std::size_t>(net.nodes[v].signal ? 1 : 0)) = 1.0;
    return x;
  }
};

inline FeatureEncoder make_encoder(const RoadNetwork& net, const LinkDynamic& dyn) {
  FeatureEncoder enc;
  std::set<int> cs;
  for (const Link& l : net.links) cs.insert(l.road_class);
  enc.classes.assign(cs.begin(), cs.end());
  auto [mean, sd] = dyn.observation_stats();
  enc.speed_mean = mean;
  enc.speed_sd = sd;
  return enc;
}

/// Feature augmentation over a T-step window ending right before
/// `next_slot`: h_e(t) = tanh(X_e W_a), z_v(t) = tanh([P h_e(t), X_v] W_b).
/// Returns rank-3 (T x |E| x d) and (T x |V| x d) tape values in (-1, 1).
inline std::pair<Val, Val> augment_features(Tape& tape, const FeatureEncoder& enc,
                                            const RoadNetwork& net, const LinkDynamic& dyn,
                                            const Tensor& p, Val w_a, Val w_b,
                                            std::int64_t next_slot) {
  const int T = dyn.grid().history_steps;
  Val pv = tape.constant(p);
  Val xv = tape.constant(enc.node_features(net));
  std::vector<Val> hs, zs;
  hs.reserve(T);
  zs.reserve(T);
  for (int t = 0; t < T; ++t) {
    const std::int64_t slot = next_slot - T + t;
    Val xe = tape.constant(enc.link_features(net, dyn, slot));
    Val h = tape.tanh(tape.matmul(xe, w_a));
    Val agg = tape.matmul(pv, h);
    Val z = tape.tanh(tape.matmul(tape.concat_last({agg, xv}), w_b));
    hs.push_back(h);
    zs.push_back(z);
  }
  return {tape.stack_time(hs), tape.stack_time(zs)};
}

/// Dump of the resolved per-slot speeds over [slot_lo, slot_hi).
inline void dump_dynamics(const RoadNetwork& net, const LinkDynamic& dyn,
                          std::int64_t slot_lo, std::int64_t slot_hi,
                          const std::string& path) {
  std::ofstream out(path);
  require(out.good(), "cannot write " + path);
  out << "link_id,slot,speed_mps,source\n";
  for (std::size_t e = 0; e < net.num_links(); ++e)
    for (std::int64_t s = slot_lo; s < slot_hi; ++s) {
      const auto r = dyn.lookup(e, s);
      out << net.links[e].id << ',' << s << ',' << fmt_double(r.speed_mps) << ','
          << speed_source_name(r.source) << '\n';
    }
}

}  // namespace stdg
