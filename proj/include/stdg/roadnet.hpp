#pragma once

#include <json.hpp>

#include <cstdint>
#include <fstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "stdg/io.hpp"
#include "stdg/tensor.hpp"

namespace stdg {

struct Intersection {
  std::int64_t id = 0;
  double lon = 0.0;
  double lat = 0.0;
  int signal = 0;  // traffic-signal flag, 0/1
};

struct Link {
  std::int64_t id = 0;
  std::int64_t from = 0;
  std::int64_t to = 0;
  double length_m = 0.0;
  int road_class = 0;
};

/// Directed road network. Dense indices (position in the vectors) are used
/// everywhere internally; external ids only appear at the file boundary.
struct RoadNetwork {
  std::vector<Intersection> nodes;
  std::vector<Link> links;
  std::unordered_map<std::int64_t, std::size_t> node_index;
  std::unordered_map<std::int64_t, std::size_t> link_index;
  std::vector<std::vector<std::size_t>> out_links;       // per node
  std::vector<std::vector<std::size_t>> in_links;        // per node
  std::vector<std::vector<std::size_t>> incident_links;  // per node, both directions

  std::size_t num_nodes() const { return nodes.size(); }
  std::size_t num_links() const { return links.size(); }

  std::size_t node_at(std::int64_t id) const {
    auto it = node_index.find(id);
    require(it != node_index.end(), "unknown intersection id " + std::to_string(id));
    return it->second;
  }
  std::size_t link_at(std::int64_t id) const {
    auto it = link_index.find(id);
    require(it != link_index.end(), "unknown link id " + std::to_string(id));
    return it->second;
  }

  std::size_t out_degree(std::size_t v) const { return out_links[v].size(); }
  std::size_t in_degree(std::size_t v) const { return in_links[v].size(); }
};

inline RoadNetwork build_network(std::vector<Intersection> nodes, std::vector<Link> links) {
  RoadNetwork net;
  net.nodes = std::move(nodes);
  net.links = std::move(links);
  for (std::size_t i = 0; i < net.nodes.size(); ++i) {
    auto [it, fresh] = net.node_index.emplace(net.nodes[i].id, i);
    (void)it;
    require(fresh, "duplicate intersection id " + std::to_string(net.nodes[i].id));
  }
  net.out_links.resize(net.nodes.size());
  net.in_links.resize(net.nodes.size());
  net.incident_links.resize(net.nodes.size());
  for (std::size_t e = 0; e < net.links.size(); ++e) {
    const Link& l = net.links[e];
    auto [it, fresh] = net.link_index.emplace(l.id, e);
    (void)it;
    require(fresh, "duplicate link id " + std::to_string(l.id));
    require(l.length_m > 0.0, "link " + std::to_string(l.id) + " has non-positive length");
    auto fi = net.node_index.find(l.from);
    require(fi != net.node_index.end(), "link " + std::to_string(l.id) +
                                            " references missing intersection " +
                                            std::to_string(l.from));
    auto ti = net.node_index.find(l.to);
    require(ti != net.node_index.end(), "link " + std::to_string(l.id) +
                                            " references missing intersection " +
                                            std::to_string(l.to));
    net.out_links[fi->second].push_back(e);
    net.in_links[ti->second].push_back(e);
    net.incident_links[fi->second].push_back(e);
    if (ti->second != fi->second) net.incident_links[ti->second].push_back(e);
  }
  return net;
}

/// Loads the `node_id,lon,lat,signal` and `link_id,from_node,to_node,length_m,road_class`
/// tables; validation failures carry the 1-based data row number.
inline RoadNetwork load_network(const std::string& nodes_csv, const std::string& links_csv) {
  CsvTable nt = read_csv(nodes_csv);
  require(nt.header == std::vector<std::string>{"node_id", "lon", "lat", "signal"},
          nodes_csv + ": expected header node_id,lon,lat,signal");
  std::vector<Intersection> nodes;
  nodes.reserve(nt.rows.size());
  for (std::size_t r = 0; r < nt.rows.size(); ++r) {
    const auto& row = nt.rows[r];
    const std::string where = nodes_csv + " row " + std::to_string(r + 1);
    require(row.size() == 4, where + ": expected 4 fields");
    Intersection n;
    n.id = parse_i64(row[0], where);
    n.lon = parse_f64(row[1], where);
    n.lat = parse_f64(row[2], where);
    std::int64_t sig = parse_i64(row[3], where);
    require(sig == 0 || sig == 1, where + ": signal must be 0 or 1");
    n.signal = static_cast<int>(sig);
    nodes.push_back(n);
  }
  CsvTable lt = read_csv(links_csv);
  require(lt.header == std::vector<std::string>{"link_id", "from_node", "to_node",
                                                "length_m", "road_class"},
          links_csv + ": expected header link_id,from_node,to_node,length_m,road_class");
  std::vector<Link> links;
  links.reserve(lt.rows.size());
  for (std::size_t r = 0; r < lt.rows.size(); ++r) {
    const auto& row = lt.rows[r];
    const std::string where = links_csv + " row " + std::to_string(r + 1);
    require(row.size() == 5, where + ": expected 5 fields");
    Link l;
    l.id = parse_i64(row[0], where);
    l.from = parse_i64(row[1], where);
    l.to = parse_i64(row[2], where);
    l.length_m = parse_f64(row[3], where);
    require(l.length_m > 0.0, where + ": non-positive length");
    l.road_class = static_cast<int>(parse_i64(row[4], where));
    links.push_back(l);
  }
  try {
    return build_network(std::move(nodes), std::move(links));
  } catch (const error& e) {
    throw error(links_csv + ": " + e.what());
  }
}

enum class ElemKind { link, node };

struct TripElement {
  ElemKind kind = ElemKind::link;
  std::int64_t id = 0;
  double time_s = 0.0;
  bool has_time = false;
  double frac = 1.0;
};

/// One observed (or queried) path: alternating links and intersections,
/// starting and ending with a link.
struct TripRecord {
  std::string trip_id;
  std::int64_t depart_ts = 0;
  std::vector<TripElement> elements;

  double total_time() const {
    double s = 0.0;
    for (const auto& e : elements) s += e.time_s;
    return s;
  }
  bool has_all_times() const {
    for (const auto& e : elements)
      if (!e.has_time) return false;
    return true;
  }
  std::size_t num_links() const { return (elements.size() + 1) / 2; }
};

/// Validates alternation, directed adjacency and time signs against the
/// network. `require_times` demands a ground-truth time on link elements
/// (training data); intersection times may be absent (masked supervision).
inline void validate_trip(const TripRecord& trip, const RoadNetwork& net,
                          bool require_times) {
  require(!trip.elements.empty(), "trip " + trip.trip_id + ": empty element list");
  require(trip.elements.size() % 2 == 1,
          "trip " + trip.trip_id + ": path must start and end with a link");
  for (std::size_t i = 0; i < trip.elements.size(); ++i) {
    const TripElement& el = trip.elements[i];
    const bool expect_link = i % 2 == 0;
    require(el.kind == (expect_link ? ElemKind::link : ElemKind::node),
            "trip " + trip.trip_id + ": element " + std::to_string(i) +
                " breaks link/intersection alternation");
    if (el.has_time)
      require(el.time_s >= 0.0, "trip " + trip.trip_id + ": negative time at element " +
                                    std::to_string(i));
    require(el.frac > 0.0 && el.frac <= 1.0,
            "trip " + trip.trip_id + ": traversal fraction out of (0,1]");
    if (el.frac < 1.0)
      require(i == 0 || i + 1 == trip.elements.size(),
              "trip " + trip.trip_id + ": partial fraction only allowed on first/last link");
    if (expect_link && require_times)
      require(el.has_time, "trip " + trip.trip_id + ": missing link time at element " +
                               std::to_string(i));
  }
  for (std::size_t i = 0; i + 1 < trip.elements.size(); i += 2) {
    const std::size_t e = net.link_at(trip.elements[i].id);
    const std::size_t v = net.node_at(trip.elements[i + 1].id);
    require(net.node_index.at(net.links[e].to) == v,
            "trip " + trip.trip_id + ": intersection " +
                std::to_string(trip.elements[i + 1].id) + " does not follow link " +
                std::to_string(trip.elements[i].id));
    const std::size_t e2 = net.link_at(trip.elements[i + 2].id);
    require(net.node_index.at(net.links[e2].from) == v,
            "trip " + trip.trip_id + ": link " + std::to_string(trip.elements[i + 2].id) +
                " does not leave intersection " + std::to_string(trip.elements[i + 1].id));
  }
  if (trip.elements.size() == 1) net.link_at(trip.elements[0].id);
}

inline TripRecord parse_trip_json(const nlohmann::json& j, const RoadNetwork& net,
                                  bool require_times) {
  TripRecord trip;
  require(j.contains("trip_id"), "trip record missing trip_id");
  trip.trip_id = j["trip_id"].is_string() ? j["trip_id"].get<std::string>()
                                          : std::to_string(j["trip_id"].get<std::int64_t>());
  require(j.contains("depart_ts"), "trip " + trip.trip_id + ": missing depart_ts");
  trip.depart_ts = j["depart_ts"].get<std::int64_t>();
  require(j.contains("elements") && j["elements"].is_array(),
          "trip " + trip.trip_id + ": missing elements array");
  for (const auto& je : j["elements"]) {
    TripElement el;
    const std::string kind = je.at("kind").get<std::string>();
    require(kind == "link" || kind == "node",
            "trip " + trip.trip_id + ": bad element kind '" + kind + "'");
    el.kind = kind == "link" ? ElemKind::link : ElemKind::node;
    el.id = je.at("id").get<std::int64_t>();
    if (je.contains("t") && !je["t"].is_null()) {
      el.time_s = je["t"].get<double>();
      el.has_time = true;
    }
    if (je.contains("frac") && !je["frac"].is_null()) el.frac = je["frac"].get<double>();
    trip.elements.push_back(el);
  }
  validate_trip(trip, net, require_times);
  return trip;
}

struct IngestStats {
  std::size_t accepted = 0;
  std::size_t skipped = 0;
  std::vector<std::string> first_errors;  // capped sample of skip reasons
};

/// Reads a JSON-lines trip file. Invalid rows (unknown ids, broken
/// alternation, bad JSON) are skipped and counted rather than fatal.
inline std::vector<TripRecord> load_trips(const std::string& path, const RoadNetwork& net,
                                          bool require_times, IngestStats* stats = nullptr) {
  std::ifstream in(path);
  require(in.good(), "cannot open " + path);
  std::vector<TripRecord> trips;
  std::string line;
  std::size_t lineno = 0;
  IngestStats local;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty() || line == "\r") continue;
    try {
      nlohmann::json j = nlohmann::json::parse(line);
      trips.push_back(parse_trip_json(j, net, require_times));
      ++local.accepted;
    } catch (const std::exception& e) {
      ++local.skipped;
      if (local.first_errors.size() < 5)
        local.first_errors.push_back(path + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  if (stats) *stats = local;
  return trips;
}

}  // namespace stdg
