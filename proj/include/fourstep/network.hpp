#pragma once

// Multimodal network: road/walk links from a preprocessed edge list, a GTFS
// static feed, and the single directed graph built from both with
// generalized-impedance (seconds) weights.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <limits>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <tuple>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "fourstep/error.hpp"
#include "fourstep/io.hpp"
#include "fourstep/zip.hpp"
#include "fourstep/zones.hpp"

namespace fourstep::network {

enum class NodeKind { road, stop, platform, zone_centroid };
enum class Mode { walk, drive, transit, board, alight };

inline std::string to_string(NodeKind k) {
  switch (k) {
    case NodeKind::road: return "road";
    case NodeKind::stop: return "stop";
    case NodeKind::platform: return "platform";
    case NodeKind::zone_centroid: return "zone_centroid";
  }
  return "?";
}

inline NodeKind parse_node_kind(std::string_view s) {
  if (s == "road" || s.empty()) return NodeKind::road;
  if (s == "stop") return NodeKind::stop;
  if (s == "platform") return NodeKind::platform;
  if (s == "zone_centroid") return NodeKind::zone_centroid;
  throw ParseError("unknown node kind '" + std::string(s) + "'");
}

inline std::string to_string(Mode m) {
  switch (m) {
    case Mode::walk: return "walk";
    case Mode::drive: return "drive";
    case Mode::transit: return "transit";
    case Mode::board: return "board";
    case Mode::alight: return "alight";
  }
  return "?";
}

inline Mode parse_mode(std::string_view s) {
  if (s == "walk") return Mode::walk;
  if (s == "drive") return Mode::drive;
  if (s == "transit") return Mode::transit;
  if (s == "board") return Mode::board;
  if (s == "alight") return Mode::alight;
  throw ParseError("unknown edge mode '" + std::string(s) + "'");
}

struct NetworkNode {
  std::string id;
  double lat = 0.0;
  double lon = 0.0;
  NodeKind kind = NodeKind::road;

  bool operator==(const NetworkNode&) const = default;
};

struct NetworkEdge {
  std::size_t from = 0;  // node index
  std::size_t to = 0;
  Mode mode = Mode::walk;
  double impedance = 0.0;  // seconds

  bool operator==(const NetworkEdge&) const = default;
};

inline constexpr double kEarthRadiusMeters = 6371008.8;

// Great-circle distance in meters.
inline double haversine_m(double lat1, double lon1, double lat2, double lon2) {
  constexpr double rad = 3.14159265358979323846 / 180.0;
  const double dlat = (lat2 - lat1) * rad, dlon = (lon2 - lon1) * rad;
  const double a = std::sin(dlat / 2) * std::sin(dlat / 2) +
                   std::cos(lat1 * rad) * std::cos(lat2 * rad) * std::sin(dlon / 2) * std::sin(dlon / 2);
  return 2.0 * kEarthRadiusMeters * std::asin(std::min(1.0, std::sqrt(a)));
}

inline void check_coordinates(const NetworkNode& n) {
  if (!(n.lat >= -90.0 && n.lat <= 90.0 && n.lon >= -180.0 && n.lon <= 180.0))
    throw InvalidArgument("node '" + n.id + "' has coordinates outside WGS84 range");
}

// ---------------------------------------------------------------------------
// Graph

// Immutable after construction. Outgoing edges of a node keep insertion order.
class MultimodalGraph {
 public:
  MultimodalGraph() = default;
  MultimodalGraph(std::vector<NetworkNode> nodes, std::vector<NetworkEdge> edges,
                  std::vector<std::pair<std::string, std::size_t>> zone_anchors, std::size_t skipped_stops = 0)
      : nodes_(std::move(nodes)), edges_(std::move(edges)), anchors_(std::move(zone_anchors)),
        skipped_stops_(skipped_stops) {
    for (std::size_t i = 0; i < nodes_.size(); ++i) {
      check_coordinates(nodes_[i]);
      if (!index_.emplace(nodes_[i].id, i).second) throw InvalidArgument("duplicate node id '" + nodes_[i].id + "'");
    }
    for (const auto& e : edges_) {
      if (e.from >= nodes_.size() || e.to >= nodes_.size()) throw InvalidArgument("edge endpoint out of range");
      if (!(e.impedance >= 0.0) || !std::isfinite(e.impedance))
        throw InvalidArgument("edge " + nodes_[e.from].id + " -> " + nodes_[e.to].id +
                              " has a negative or non-finite impedance");
    }
    for (const auto& [zone, node] : anchors_) {
      if (node >= nodes_.size()) throw InvalidArgument("zone '" + zone + "' anchored to a missing node");
      if (!anchor_index_.emplace(zone, node).second) throw InvalidArgument("zone '" + zone + "' anchored twice");
    }
    offsets_.assign(nodes_.size() + 1, 0);
    for (const auto& e : edges_) ++offsets_[e.from + 1];
    for (std::size_t i = 0; i < nodes_.size(); ++i) offsets_[i + 1] += offsets_[i];
    out_.resize(edges_.size());
    std::vector<std::size_t> cursor(offsets_.begin(), offsets_.end() - 1);
    for (std::size_t k = 0; k < edges_.size(); ++k) out_[cursor[edges_[k].from]++] = k;
  }

  std::size_t node_count() const { return nodes_.size(); }
  std::size_t edge_count() const { return edges_.size(); }
  const std::vector<NetworkNode>& nodes() const { return nodes_; }
  const std::vector<NetworkEdge>& edges() const { return edges_; }
  const NetworkNode& node(std::size_t i) const { return nodes_.at(i); }
  const NetworkEdge& edge(std::size_t k) const { return edges_.at(k); }
  std::size_t skipped_stops() const { return skipped_stops_; }

  // Edge indices leaving `node`.
  std::span<const std::size_t> out_edges(std::size_t node) const {
    return {out_.data() + offsets_[node], offsets_[node + 1] - offsets_[node]};
  }

  std::optional<std::size_t> find_node(const std::string& id) const {
    auto it = index_.find(id);
    if (it == index_.end()) return std::nullopt;
    return it->second;
  }
  std::size_t node_index(const std::string& id) const {
    auto n = find_node(id);
    if (!n) throw NotFound("unknown node '" + id + "'");
    return *n;
  }

  const std::vector<std::pair<std::string, std::size_t>>& zone_anchors() const { return anchors_; }
  std::size_t anchor(const std::string& zone) const {
    auto it = anchor_index_.find(zone);
    if (it == anchor_index_.end()) throw NotFound("zone '" + zone + "' has no anchor node");
    return it->second;
  }
  bool has_anchor(const std::string& zone) const { return anchor_index_.count(zone) != 0; }

 private:
  std::vector<NetworkNode> nodes_;
  std::vector<NetworkEdge> edges_;
  std::vector<std::pair<std::string, std::size_t>> anchors_;
  std::size_t skipped_stops_ = 0;
  std::unordered_map<std::string, std::size_t> index_;
  std::map<std::string, std::size_t> anchor_index_;
  std::vector<std::size_t> offsets_;
  std::vector<std::size_t> out_;
};

// ---------------------------------------------------------------------------
// Road network

struct RoadNetwork {
  std::vector<NetworkNode> nodes;
  std::vector<NetworkEdge> edges;
};

// nodes.csv: id, lat, lon [, kind]
// edges.csv: from, to, mode, length_m, speed_mps, impedance_s
// impedance_s wins when present; otherwise length_m / speed_mps. Walk rows
// become two directed edges, other modes one.
inline RoadNetwork parse_road_network(const io::CsvTable& nodes_csv, const io::CsvTable& edges_csv) {
  RoadNetwork net;
  std::unordered_map<std::string, std::size_t> idx;
  const auto ckind = nodes_csv.find_column("kind");
  for (std::size_t r = 0; r < nodes_csv.size(); ++r) {
    NetworkNode n;
    n.id = std::string(nodes_csv.cell(r, "id"));
    n.lat = nodes_csv.number(r, "lat");
    n.lon = nodes_csv.number(r, "lon");
    if (ckind) n.kind = parse_node_kind(nodes_csv.cell(r, *ckind));
    if (n.id.empty()) throw nodes_csv.error_at(r, "empty node id");
    try {
      check_coordinates(n);
    } catch (const Error& e) {
      throw nodes_csv.error_at(r, e.what());
    }
    if (!idx.emplace(n.id, net.nodes.size()).second) throw nodes_csv.error_at(r, "duplicate node id '" + n.id + "'");
    net.nodes.push_back(std::move(n));
  }

  const auto clen = edges_csv.find_column("length_m"), cspeed = edges_csv.find_column("speed_mps"),
             cimp = edges_csv.find_column("impedance_s");
  for (std::size_t r = 0; r < edges_csv.size(); ++r) {
    const std::string from(edges_csv.cell(r, "from")), to(edges_csv.cell(r, "to"));
    auto fi = idx.find(from), ti = idx.find(to);
    if (fi == idx.end()) throw edges_csv.error_at(r, "dangling edge endpoint '" + from + "'");
    if (ti == idx.end()) throw edges_csv.error_at(r, "dangling edge endpoint '" + to + "'");
    Mode mode;
    try {
      mode = parse_mode(edges_csv.cell(r, "mode"));
    } catch (const Error& e) {
      throw edges_csv.error_at(r, e.what());
    }
    std::optional<double> imp = cimp ? edges_csv.optional_number(r, *cimp) : std::nullopt;
    if (!imp) {
      const double len = clen ? edges_csv.optional_number(r, *clen).value_or(-1.0) : -1.0;
      const double speed = cspeed ? edges_csv.optional_number(r, *cspeed).value_or(0.0) : 0.0;
      if (!(speed > 0.0)) throw edges_csv.error_at(r, "non-positive or missing speed and no impedance");
      if (!(len >= 0.0)) throw edges_csv.error_at(r, "missing or negative length and no impedance");
      imp = len / speed;
    }
    if (!(*imp >= 0.0) || !std::isfinite(*imp)) throw edges_csv.error_at(r, "impedance must be finite and >= 0");
    net.edges.push_back({fi->second, ti->second, mode, *imp});
    if (mode == Mode::walk) net.edges.push_back({ti->second, fi->second, mode, *imp});
  }
  return net;
}

inline RoadNetwork load_road_network(const std::filesystem::path& nodes_path, const std::filesystem::path& edges_path) {
  return parse_road_network(io::read_csv(nodes_path), io::read_csv(edges_path));
}

// Directory holding nodes.csv and edges.csv.
inline RoadNetwork load_road_network(const std::filesystem::path& dir) {
  return load_road_network(dir / "nodes.csv", dir / "edges.csv");
}

// ---------------------------------------------------------------------------
// GTFS

struct Stop {
  std::string id;
  std::string name;
  double lat = 0.0;
  double lon = 0.0;
};

struct Route {
  std::string id;
  std::string short_name;
  int route_type = 3;
};

struct Trip {
  std::string id;
  std::string route_id;
  std::string service_id;
};

struct StopTime {
  std::string trip_id;
  std::string stop_id;
  int arrival = 0;    // seconds after midnight, may exceed 86400
  int departure = 0;
  int sequence = 0;

  bool operator==(const StopTime&) const = default;
};

struct ServiceCalendar {
  std::string service_id;
  std::array<bool, 7> days{};  // monday..sunday
  std::string start_date;
  std::string end_date;
};

struct TransitFeed {
  std::vector<Stop> stops;
  std::vector<Route> routes;
  std::vector<Trip> trips;
  std::vector<StopTime> stop_times;  // grouped by trip (feed trip order), ascending sequence
  std::vector<ServiceCalendar> calendar;

  bool empty() const { return trips.empty(); }
};

// "HH:MM:SS" (hours may exceed 23).
inline std::optional<int> parse_gtfs_time(std::string_view s) {
  s = io::trim(s);
  const auto parts = io::split(s, ':');
  if (parts.size() != 3) return std::nullopt;
  int v[3];
  for (int i = 0; i < 3; ++i) {
    auto n = io::try_parse_int(parts[static_cast<std::size_t>(i)]);
    if (!n || *n < 0 || parts[static_cast<std::size_t>(i)].empty()) return std::nullopt;
    v[i] = static_cast<int>(*n);
  }
  if (v[1] > 59 || v[2] > 59 || parts[1].size() != 2 || parts[2].size() != 2) return std::nullopt;
  return v[0] * 3600 + v[1] * 60 + v[2];
}

// Validates and assembles a feed from already-parsed tables.
inline TransitFeed parse_gtfs(const io::CsvTable& stops_csv, const io::CsvTable& routes_csv,
                              const io::CsvTable& trips_csv, const io::CsvTable& stop_times_csv,
                              const io::CsvTable* calendar_csv) {
  TransitFeed feed;
  std::unordered_map<std::string, std::size_t> stop_idx, route_idx, trip_idx;

  const auto cname = stops_csv.find_column("stop_name");
  for (std::size_t r = 0; r < stops_csv.size(); ++r) {
    Stop s;
    s.id = std::string(stops_csv.cell(r, "stop_id"));
    s.name = cname ? std::string(stops_csv.cell(r, *cname)) : s.id;
    s.lat = stops_csv.number(r, "stop_lat");
    s.lon = stops_csv.number(r, "stop_lon");
    if (!(s.lat >= -90 && s.lat <= 90 && s.lon >= -180 && s.lon <= 180))
      throw stops_csv.error_at(r, "stop coordinates out of range");
    if (!stop_idx.emplace(s.id, feed.stops.size()).second) throw stops_csv.error_at(r, "duplicate stop_id '" + s.id + "'");
    feed.stops.push_back(std::move(s));
  }

  const auto cshort = routes_csv.find_column("route_short_name");
  const auto ctype = routes_csv.find_column("route_type");
  for (std::size_t r = 0; r < routes_csv.size(); ++r) {
    Route rt;
    rt.id = std::string(routes_csv.cell(r, "route_id"));
    rt.short_name = cshort ? std::string(routes_csv.cell(r, *cshort)) : rt.id;
    if (ctype && !routes_csv.cell(r, *ctype).empty()) rt.route_type = static_cast<int>(routes_csv.integer(r, *ctype));
    if (!route_idx.emplace(rt.id, feed.routes.size()).second)
      throw routes_csv.error_at(r, "duplicate route_id '" + rt.id + "'");
    feed.routes.push_back(std::move(rt));
  }

  for (std::size_t r = 0; r < trips_csv.size(); ++r) {
    Trip t;
    t.id = std::string(trips_csv.cell(r, "trip_id"));
    t.route_id = std::string(trips_csv.cell(r, "route_id"));
    t.service_id = std::string(trips_csv.cell(r, "service_id"));
    if (!route_idx.count(t.route_id)) throw trips_csv.error_at(r, "trip references undeclared route_id '" + t.route_id + "'");
    if (!trip_idx.emplace(t.id, feed.trips.size()).second) throw trips_csv.error_at(r, "duplicate trip_id '" + t.id + "'");
    feed.trips.push_back(std::move(t));
  }

  std::vector<std::vector<std::pair<StopTime, std::size_t>>> per_trip(feed.trips.size());
  const auto carr = stop_times_csv.column("arrival_time"), cdep = stop_times_csv.column("departure_time");
  for (std::size_t r = 0; r < stop_times_csv.size(); ++r) {
    StopTime st;
    st.trip_id = std::string(stop_times_csv.cell(r, "trip_id"));
    st.stop_id = std::string(stop_times_csv.cell(r, "stop_id"));
    auto ti = trip_idx.find(st.trip_id);
    if (ti == trip_idx.end())
      throw stop_times_csv.error_at(r, "stop_times references undeclared trip_id '" + st.trip_id + "'");
    if (!stop_idx.count(st.stop_id))
      throw stop_times_csv.error_at(r, "stop_times references undeclared stop_id '" + st.stop_id + "'");
    auto arr_s = stop_times_csv.cell(r, carr), dep_s = stop_times_csv.cell(r, cdep);
    if (arr_s.empty()) arr_s = dep_s;
    if (dep_s.empty()) dep_s = arr_s;
    const auto arr = parse_gtfs_time(arr_s), dep = parse_gtfs_time(dep_s);
    if (!arr) throw stop_times_csv.error_at(r, "malformed arrival_time '" + std::string(arr_s) + "'");
    if (!dep) throw stop_times_csv.error_at(r, "malformed departure_time '" + std::string(dep_s) + "'");
    if (*dep < *arr) throw stop_times_csv.error_at(r, "departure_time precedes arrival_time");
    st.arrival = *arr;
    st.departure = *dep;
    st.sequence = static_cast<int>(stop_times_csv.integer(r, "stop_sequence"));
    per_trip[ti->second].emplace_back(std::move(st), r);
  }
  for (std::size_t t = 0; t < per_trip.size(); ++t) {
    auto& v = per_trip[t];
    std::stable_sort(v.begin(), v.end(), [](const auto& a, const auto& b) { return a.first.sequence < b.first.sequence; });
    for (std::size_t k = 1; k < v.size(); ++k) {
      if (v[k].first.sequence == v[k - 1].first.sequence)
        throw stop_times_csv.error_at(v[k].second, "duplicate stop_sequence in trip '" + feed.trips[t].id + "'");
      if (v[k].first.arrival < v[k - 1].first.departure)
        throw stop_times_csv.error_at(v[k].second, "times decrease along trip '" + feed.trips[t].id + "'");
    }
    for (auto& [st, _] : v) feed.stop_times.push_back(std::move(st));
  }

  if (calendar_csv) {
    static const char* kDays[] = {"monday", "tuesday", "wednesday", "thursday", "friday", "saturday", "sunday"};
    for (std::size_t r = 0; r < calendar_csv->size(); ++r) {
      ServiceCalendar c;
      c.service_id = std::string(calendar_csv->cell(r, "service_id"));
      for (int d = 0; d < 7; ++d)
        if (auto col = calendar_csv->find_column(kDays[d])) c.days[static_cast<std::size_t>(d)] = calendar_csv->cell(r, *col) == "1";
      if (auto col = calendar_csv->find_column("start_date")) c.start_date = std::string(calendar_csv->cell(r, *col));
      if (auto col = calendar_csv->find_column("end_date")) c.end_date = std::string(calendar_csv->cell(r, *col));
      feed.calendar.push_back(std::move(c));
    }
  }
  return feed;
}

// Reads a GTFS static feed from a directory or a .zip archive. stops, routes,
// trips and stop_times are required; calendar is optional.
inline TransitFeed load_gtfs(const std::filesystem::path& path) {
  std::map<std::string, std::string> files;
  if (std::filesystem::is_directory(path)) {
    for (const char* name : {"stops.txt", "routes.txt", "trips.txt", "stop_times.txt", "calendar.txt"})
      if (std::filesystem::exists(path / name)) files.emplace(name, io::read_file(path / name));
  } else if (std::filesystem::exists(path)) {
    const auto data = io::read_file(path);
    if (!zip::looks_like_zip(data)) throw ParseError(path.string() + ": not a directory or zip archive");
    for (auto& [name, content] : zip::read_archive(data)) {
      const auto slash = name.find_last_of('/');
      files.emplace(slash == std::string::npos ? name : name.substr(slash + 1), std::move(content));
    }
  } else {
    throw ParseError("GTFS feed not found: " + path.string());
  }
  auto table = [&](const std::string& name) {
    auto it = files.find(name);
    if (it == files.end()) throw ParseError(path.string() + ": missing required file " + name);
    return io::parse_csv(it->second, (path / name).string());
  };
  const auto stops = table("stops.txt"), routes = table("routes.txt"), trips = table("trips.txt"),
             stop_times = table("stop_times.txt");
  std::optional<io::CsvTable> calendar;
  if (files.count("calendar.txt")) calendar = table("calendar.txt");
  return parse_gtfs(stops, routes, trips, stop_times, calendar ? &*calendar : nullptr);
}

// ---------------------------------------------------------------------------
// Graph construction

struct BuildParams {
  double walk_speed = 1.4;        // m/s
  double board_penalty = 30.0;    // s
  double link_radius = 500.0;     // m
  double single_departure_headway = 3600.0;  // s, used when a route departs a stop only once
  std::vector<std::string> service_ids;      // empty = every service
};

inline std::optional<std::size_t> nearest_node(const std::vector<NetworkNode>& nodes, std::size_t count, double lat,
                                               double lon, double* distance = nullptr) {
  std::optional<std::size_t> best;
  double best_d = std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < count; ++i) {
    if (nodes[i].kind != NodeKind::road) continue;
    const double d = haversine_m(lat, lon, nodes[i].lat, nodes[i].lon);
    if (d < best_d) {
      best_d = d;
      best = i;
    }
  }
  if (distance) *distance = best_d;
  return best;
}

inline std::string stop_node_id(const std::string& stop) { return "stop:" + stop; }
inline std::string platform_node_id(const std::string& stop, const std::string& route) {
  return "platform:" + stop + ":" + route;
}

// Graph layout, in node order: road nodes, one street-side node per linked
// stop, one platform node per (stop, route) served. Edges: road edges; walk
// links stop <-> nearest road node; board (stop -> platform) at penalty plus
// half the route's mean headway at the stop; alight (platform -> stop) at 0;
// transit platform -> platform at the minimum scheduled time per (stop pair,
// route). Zones anchor to their nearest road node.
inline MultimodalGraph build_graph(const RoadNetwork& road, const TransitFeed& feed, const ZoneRegistry& zones,
                                   const BuildParams& params = {}) {
  if (!(params.walk_speed > 0.0)) throw InvalidArgument("walk speed must be positive");
  if (!(params.board_penalty >= 0.0)) throw InvalidArgument("board penalty must be non-negative");
  if (!(params.link_radius >= 0.0)) throw InvalidArgument("link radius must be non-negative");

  std::vector<NetworkNode> nodes = road.nodes;
  std::vector<NetworkEdge> edges = road.edges;
  const std::size_t road_count = road.nodes.size();

  std::set<std::string> services(params.service_ids.begin(), params.service_ids.end());
  std::unordered_map<std::string, std::size_t> route_idx, stop_idx;
  for (std::size_t i = 0; i < feed.routes.size(); ++i) route_idx.emplace(feed.routes[i].id, i);
  for (std::size_t i = 0; i < feed.stops.size(); ++i) stop_idx.emplace(feed.stops[i].id, i);

  // Street-side stop nodes.
  std::vector<std::optional<std::size_t>> stop_node(feed.stops.size());
  std::size_t skipped = 0;
  for (std::size_t s = 0; s < feed.stops.size(); ++s) {
    const auto& stop = feed.stops[s];
    double d = 0.0;
    auto near = nearest_node(nodes, road_count, stop.lat, stop.lon, &d);
    if (!near || d > params.link_radius) {
      ++skipped;
      continue;
    }
    stop_node[s] = nodes.size();
    nodes.push_back({stop_node_id(stop.id), stop.lat, stop.lon, NodeKind::stop});
    const double t = d / params.walk_speed;
    edges.push_back({*near, *stop_node[s], Mode::walk, t});
    edges.push_back({*stop_node[s], *near, Mode::walk, t});
  }

  // Scan active trips: departures per (stop, route), run times per
  // (from stop, to stop, route).
  std::map<std::pair<std::size_t, std::size_t>, std::vector<int>> departures;  // (stop, route)
  std::set<std::pair<std::size_t, std::size_t>> served;
  std::map<std::tuple<std::size_t, std::size_t, std::size_t>, int> run_time;
  std::unordered_map<std::string, const Trip*> trips;
  for (const auto& t : feed.trips) trips.emplace(t.id, &t);
  for (std::size_t k = 0; k < feed.stop_times.size(); ++k) {
    const auto& a = feed.stop_times[k];
    const Trip* trip = trips.at(a.trip_id);
    if (!services.empty() && !services.count(trip->service_id)) continue;
    const std::size_t route = route_idx.at(trip->route_id);
    const std::size_t sa = stop_idx.at(a.stop_id);
    if (!stop_node[sa]) continue;
    served.insert({sa, route});
    if (k + 1 == feed.stop_times.size() || feed.stop_times[k + 1].trip_id != a.trip_id) continue;
    const auto& b = feed.stop_times[k + 1];
    const std::size_t sb = stop_idx.at(b.stop_id);
    if (!stop_node[sb]) continue;
    departures[{sa, route}].push_back(a.departure);
    const int dt = b.arrival - a.departure;
    auto key = std::make_tuple(sa, sb, route);
    auto it = run_time.find(key);
    if (it == run_time.end() || dt < it->second) run_time[key] = dt;
  }

  std::map<std::pair<std::size_t, std::size_t>, std::size_t> platform;
  for (const auto& key : served) {
    const auto& stop = feed.stops[key.first];
    platform[key] = nodes.size();
    nodes.push_back({platform_node_id(stop.id, feed.routes[key.second].id), stop.lat, stop.lon, NodeKind::platform});
  }
  for (const auto& [key, node] : platform) {
    double wait = 0.0;
    auto it = departures.find(key);
    if (it != departures.end()) {
      auto deps = it->second;
      std::sort(deps.begin(), deps.end());
      const double headway = deps.size() >= 2 ? double(deps.back() - deps.front()) / double(deps.size() - 1)
                                              : params.single_departure_headway;
      wait = headway / 2.0;
      edges.push_back({*stop_node[key.first], node, Mode::board, params.board_penalty + wait});
    }
    edges.push_back({node, *stop_node[key.first], Mode::alight, 0.0});
  }
  for (const auto& [key, dt] : run_time) {
    const auto [sa, sb, route] = key;
    edges.push_back({platform.at({sa, route}), platform.at({sb, route}), Mode::transit, static_cast<double>(dt)});
  }

  std::vector<std::pair<std::string, std::size_t>> anchors;
  for (const auto& z : zones.zones()) {
    auto near = nearest_node(nodes, road_count, z.lat, z.lon);
    if (!near) throw InvalidArgument("zone '" + z.id + "' cannot be anchored: road network has no road nodes");
    anchors.emplace_back(z.id, *near);
  }
  return MultimodalGraph(std::move(nodes), std::move(edges), std::move(anchors), skipped);
}

// Replaces the impedance of every edge matching (from, to, mode) listed in
// the overrides file (columns from, to, mode, impedance_s).
inline MultimodalGraph apply_impedance_overrides(const MultimodalGraph& g, const io::CsvTable& overrides) {
  std::map<std::tuple<std::size_t, std::size_t, Mode>, double> table;
  for (std::size_t r = 0; r < overrides.size(); ++r) {
    auto f = g.find_node(std::string(overrides.cell(r, "from")));
    auto t = g.find_node(std::string(overrides.cell(r, "to")));
    if (!f || !t) throw overrides.error_at(r, "override references an unknown node");
    const double v = overrides.number(r, "impedance_s");
    if (!(v >= 0.0) || !std::isfinite(v)) throw overrides.error_at(r, "impedance must be finite and >= 0");
    table[{*f, *t, parse_mode(overrides.cell(r, "mode"))}] = v;
  }
  auto edges = g.edges();
  for (auto& e : edges)
    if (auto it = table.find({e.from, e.to, e.mode}); it != table.end()) e.impedance = it->second;
  return MultimodalGraph(g.nodes(), std::move(edges), g.zone_anchors(), g.skipped_stops());
}

// ---------------------------------------------------------------------------
// Graph bundle

inline constexpr int kGraphFormatVersion = 1;

inline nlohmann::json to_json(const MultimodalGraph& g) {
  nlohmann::json j;
  j["format"] = "fourstep-graph";
  j["format_version"] = kGraphFormatVersion;
  auto& nodes = j["nodes"] = nlohmann::json::array();
  for (const auto& n : g.nodes()) nodes.push_back({n.id, to_string(n.kind), n.lat, n.lon});
  auto& edges = j["edges"] = nlohmann::json::array();
  for (const auto& e : g.edges()) edges.push_back({e.from, e.to, to_string(e.mode), e.impedance});
  auto& anchors = j["zone_anchors"] = nlohmann::json::array();
  for (const auto& [z, n] : g.zone_anchors()) anchors.push_back({z, n});
  j["skipped_stops"] = g.skipped_stops();
  return j;
}

inline MultimodalGraph graph_from_json(const nlohmann::json& j) {
  try {
    if (j.at("format").get<std::string>() != "fourstep-graph") throw ParseError("not a graph bundle");
    const int version = j.at("format_version").get<int>();
    if (version != kGraphFormatVersion)
      throw VersionMismatch("graph format version " + std::to_string(version) + " is not supported");
    std::vector<NetworkNode> nodes;
    for (const auto& n : j.at("nodes"))
      nodes.push_back({n.at(0).get<std::string>(), n.at(2).get<double>(), n.at(3).get<double>(),
                       parse_node_kind(n.at(1).get<std::string>())});
    std::vector<NetworkEdge> edges;
    for (const auto& e : j.at("edges"))
      edges.push_back({e.at(0).get<std::size_t>(), e.at(1).get<std::size_t>(), parse_mode(e.at(2).get<std::string>()),
                       e.at(3).get<double>()});
    std::vector<std::pair<std::string, std::size_t>> anchors;
    for (const auto& a : j.at("zone_anchors")) anchors.emplace_back(a.at(0).get<std::string>(), a.at(1).get<std::size_t>());
    return MultimodalGraph(std::move(nodes), std::move(edges), std::move(anchors),
                           j.value("skipped_stops", std::size_t{0}));
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("graph bundle: ") + e.what());
  }
}

inline void save_graph(const MultimodalGraph& g, const std::filesystem::path& path) {
  io::write_file(path, to_json(g).dump() + "\n");
}

inline MultimodalGraph load_graph(const std::filesystem::path& path) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(io::read_file(path));
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(path.string() + ": " + e.what());
  }
  return graph_from_json(j);
}

}  // namespace fourstep::network
