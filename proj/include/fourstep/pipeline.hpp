#pragma once

// End-to-end scenario run: synthesize persons, predict trips, skim the
// network, distribute with the gravity model, trace routes, split by mode, and
// summarize per zone. Also the naive population-proportion baseline and the
// zone-level evaluation against observed volumes.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <map>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "fourstep/distribution.hpp"
#include "fourstep/error.hpp"
#include "fourstep/io.hpp"
#include "fourstep/modechoice.hpp"
#include "fourstep/network.hpp"
#include "fourstep/routing.hpp"
#include "fourstep/synthpop.hpp"
#include "fourstep/tripgen.hpp"
#include "fourstep/zones.hpp"

namespace fourstep::pipeline {

namespace fs = std::filesystem;

enum class ModeAggregation { expected, argmax };

struct NetworkInputs {
  fs::path graph;  // prebuilt bundle; takes precedence when set
  fs::path roads;  // directory with nodes.csv / edges.csv
  fs::path gtfs;   // directory or zip; empty = road-only graph
  fs::path overrides;
  network::BuildParams params;
};

struct DeterrenceSpec {
  distribution::Deterrence fixed = distribution::Deterrence::exponential(0.002);
  std::optional<double> calibrate_mean_cost;  // calibrate the parameter of `fixed`'s form instead
};

struct ScenarioConfig {
  fs::path zones;
  fs::path marginals;
  fs::path microdata;
  fs::path trip_training;
  fs::path mode_training;
  fs::path attractions;
  std::string attractions_column = "jobs";
  NetworkInputs network;
  tripgen::ModelKind trip_model_kind = tripgen::ModelKind::random_forest;
  tripgen::Hyperparams trip_hyperparams;
  std::vector<std::string> modes = modechoice::default_modes();
  double nb_alpha = 1.0;
  DeterrenceSpec deterrence;
  double intrazonal_floor = distribution::kDefaultIntrazonalFloor;
  synthpop::IpfOptions ipf;
  distribution::FurnessOptions gravity;
  ModeAggregation mode_aggregation = ModeAggregation::expected;
  std::string period = "monthly";
  std::size_t top_k = 3;
  double tau = 0.2;
  std::optional<std::uint64_t> seed;
};

namespace detail {

inline fs::path resolve(const fs::path& base, const nlohmann::json& j, const char* key, bool required) {
  if (!j.contains(key)) {
    if (required) throw ParseError(std::string("scenario: missing required key '") + key + "'");
    return {};
  }
  const fs::path p = j.at(key).get<std::string>();
  return p.is_absolute() ? p : base / p;
}

inline void require_file(const fs::path& p, const char* what) {
  if (!p.empty() && !fs::exists(p)) throw ParseError(std::string("scenario: ") + what + " not found: " + p.string());
}

}  // namespace detail

// Scenario file: JSON object; relative paths resolve against the file's
// directory. See README for the key list.
inline ScenarioConfig load_scenario(const fs::path& path) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(io::read_file(path));
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(path.string() + ": " + e.what());
  }
  const fs::path base = path.has_parent_path() ? path.parent_path() : fs::path(".");
  ScenarioConfig c;
  try {
    using detail::resolve;
    c.zones = resolve(base, j, "zones", true);
    c.marginals = resolve(base, j, "marginals", true);
    c.microdata = resolve(base, j, "microdata", true);
    c.trip_training = resolve(base, j, "trip_training", true);
    c.mode_training = resolve(base, j, "mode_training", true);
    c.attractions = resolve(base, j, "attractions", true);
    c.attractions_column = j.value("attractions_column", c.attractions_column);
    if (j.contains("seed")) c.seed = j.at("seed").get<std::uint64_t>();
    if (!j.contains("network")) throw ParseError("scenario: missing required key 'network'");
    const auto& n = j.at("network");
    c.network.graph = resolve(base, n, "graph", false);
    c.network.roads = resolve(base, n, "roads", c.network.graph.empty());
    c.network.gtfs = resolve(base, n, "gtfs", false);
    c.network.overrides = resolve(base, n, "overrides", false);
    c.network.params.walk_speed = n.value("walk_speed", c.network.params.walk_speed);
    c.network.params.board_penalty = n.value("board_penalty", c.network.params.board_penalty);
    c.network.params.link_radius = n.value("link_radius", c.network.params.link_radius);
    c.network.params.single_departure_headway =
        n.value("single_departure_headway", c.network.params.single_departure_headway);
    if (n.contains("service_ids")) c.network.params.service_ids = n.at("service_ids").get<std::vector<std::string>>();
    if (j.contains("trip_model")) {
      const auto& t = j.at("trip_model");
      if (t.contains("kind")) c.trip_model_kind = tripgen::parse_model_kind(t.at("kind").get<std::string>());
      if (t.contains("hyperparams")) c.trip_hyperparams = tripgen::hyperparams_from_json(t.at("hyperparams"));
    }
    if (j.contains("modes")) c.modes = j.at("modes").get<std::vector<std::string>>();
    c.nb_alpha = j.value("nb_alpha", c.nb_alpha);
    c.intrazonal_floor = j.value("intrazonal_floor", c.intrazonal_floor);
    if (j.contains("deterrence")) {
      const auto& d = j.at("deterrence");
      if (d.is_string()) {
        c.deterrence.fixed = distribution::Deterrence::parse(d.get<std::string>(), c.intrazonal_floor);
      } else {
        const auto form = d.value("form", std::string("exp"));
        c.deterrence.fixed = distribution::Deterrence::parse(form + ":" + io::format_double(d.value("parameter", 0.0)),
                                                             c.intrazonal_floor);
        if (d.contains("calibrate_mean_cost")) c.deterrence.calibrate_mean_cost = d.at("calibrate_mean_cost").get<double>();
      }
    } else {
      c.deterrence.fixed = distribution::Deterrence::exponential(0.002);
    }
    if (j.contains("ipf")) {
      c.ipf.tol = j["ipf"].value("tol", c.ipf.tol);
      c.ipf.max_iter = j["ipf"].value("max_iter", c.ipf.max_iter);
    }
    if (j.contains("gravity")) {
      c.gravity.tol = j["gravity"].value("tol", c.gravity.tol);
      c.gravity.max_iter = j["gravity"].value("max_iter", c.gravity.max_iter);
    }
    const auto agg = j.value("mode_aggregation", std::string("expected"));
    if (agg == "expected") c.mode_aggregation = ModeAggregation::expected;
    else if (agg == "argmax") c.mode_aggregation = ModeAggregation::argmax;
    else throw ParseError("scenario: mode_aggregation must be 'expected' or 'argmax'");
    c.period = j.value("period", c.period);
    c.top_k = j.value("top_k", c.top_k);
    c.tau = j.value("tau", c.tau);
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(path.string() + ": " + e.what());
  }
  for (const auto& [p, what] : std::vector<std::pair<fs::path, const char*>>{
           {c.zones, "zones"}, {c.marginals, "marginals"}, {c.microdata, "microdata"},
           {c.trip_training, "trip_training"}, {c.mode_training, "mode_training"}, {c.attractions, "attractions"},
           {c.network.graph, "network.graph"}, {c.network.roads, "network.roads"}, {c.network.gtfs, "network.gtfs"},
           {c.network.overrides, "network.overrides"}})
    detail::require_file(p, what);
  return c;
}

struct Destination {
  std::string zone_id;
  double share = 0.0;
};

struct ZoneSummary {
  std::string zone_id;
  std::size_t population = 0;
  double total_trips = 0.0;
  std::vector<double> mode_trips;  // in mode-set order
  std::vector<Destination> top_destinations;
};

struct RouteRecord {
  std::string origin;
  std::string destination;
  double trips = 0.0;
  double seconds = 0.0;
  std::string modes;
  std::string nodes;
};

struct PipelineResult {
  ScenarioConfig config;
  ZoneRegistry zones;
  std::vector<synthpop::SyntheticPerson> persons;
  std::vector<double> person_trips;                   // clamped, per period
  std::vector<std::vector<double>> person_posteriors; // per person, mode-set order
  std::vector<int> ipf_iterations;
  distribution::ProductionAttraction pa;               // balanced
  std::vector<double> raw_attractions;
  distribution::CostMatrix skim;
  distribution::Deterrence deterrence = distribution::Deterrence::exponential(0.0);
  distribution::ODMatrix od;
  std::vector<RouteRecord> routes;
  std::vector<double> link_loads;
  std::vector<ZoneSummary> summaries;
  std::optional<tripgen::TripModel> trip_model;
  std::optional<modechoice::NBModel> mode_model;
  network::MultimodalGraph graph;
};

// Builds the vector a model expects: person features matched by name, any
// other declared column padded with 0.
inline std::vector<double> project_features(const synthpop::SyntheticPerson& p,
                                            const std::vector<std::string>& model_features) {
  const auto values = p.features();
  const auto& names = synthpop::person_feature_names();
  std::vector<double> out(model_features.size(), 0.0);
  for (std::size_t i = 0; i < model_features.size(); ++i)
    for (std::size_t k = 0; k < names.size(); ++k)
      if (model_features[i] == names[k]) out[i] = values[k];
  return out;
}

inline std::vector<double> project_profile(std::span<const double> profile, const std::vector<std::string>& model_features) {
  synthpop::SyntheticPerson p;
  p.household_car_share = profile[0] > 0.5;
  p.individual_senior = profile[1] > 0.5;
  p.household_income_high = profile[2] > 0.5;
  p.individual_employed = profile[3] > 0.5;
  p.individual_college = profile[4] > 0.5;
  return project_features(p, model_features);
}

// Origin row of the OD matrix as shares, descending (ties by zone order),
// zero shares dropped, at most k entries.
inline std::vector<Destination> top_destinations(const distribution::ODMatrix& od, const std::vector<std::string>& zones,
                                                 std::size_t origin, std::size_t k, bool keep_zero = false) {
  double row = 0.0;
  for (std::size_t j = 0; j < od.n; ++j) row += od(origin, j);
  std::vector<Destination> d;
  for (std::size_t j = 0; j < od.n; ++j) {
    const double s = row > 0.0 ? od(origin, j) / row : 0.0;
    if (s > 0.0 || keep_zero) d.push_back({zones[j], s});
  }
  std::stable_sort(d.begin(), d.end(), [](const Destination& a, const Destination& b) { return a.share > b.share; });
  if (d.size() > k) d.resize(k);
  return d;
}

template <typename F>
auto step(const char* name, F&& f) -> decltype(f()) {
  try {
    return f();
  } catch (const StepError&) {
    throw;
  } catch (const std::exception& e) {
    throw StepError(name, e.what());
  }
}

inline network::MultimodalGraph build_network(const NetworkInputs& in, const ZoneRegistry& zones) {
  network::MultimodalGraph g;
  if (!in.graph.empty()) {
    g = network::load_graph(in.graph);
  } else {
    const auto road = network::load_road_network(in.roads);
    const auto feed = in.gtfs.empty() ? network::TransitFeed{} : network::load_gtfs(in.gtfs);
    g = network::build_graph(road, feed, zones, in.params);
  }
  if (!in.overrides.empty()) g = network::apply_impedance_overrides(g, io::read_csv(in.overrides));
  for (const auto& z : zones.zones())
    if (!g.has_anchor(z.id)) throw InvalidArgument("zone '" + z.id + "' has no anchor node in the graph");
  return g;
}

inline PipelineResult run_pipeline(const ScenarioConfig& config) {
  if (!config.seed) throw InvalidArgument("scenario: seed is required");
  const std::uint64_t seed = *config.seed;
  PipelineResult res;
  res.config = config;
  res.zones = step("zones", [&] { return load_zones(config.zones); });
  const auto zone_ids = res.zones.ids();
  const std::size_t nz = zone_ids.size();

  // 1. Synthetic population.
  step("synthesize", [&] {
    const auto microdata = synthpop::load_microdata(config.microdata);
    auto marginals = synthpop::load_marginals(config.marginals);
    std::map<std::string, const synthpop::ZoneMarginals*> by_zone;
    for (const auto& m : marginals) {
      if (!res.zones.contains(m.zone_id)) throw InvalidArgument("marginals reference unknown zone '" + m.zone_id + "'");
      by_zone[m.zone_id] = &m;
    }
    std::vector<synthpop::ZoneMarginals> ordered;
    for (const auto& id : zone_ids) {
      auto it = by_zone.find(id);
      if (it == by_zone.end()) throw InvalidArgument("zone '" + id + "' has no marginals");
      ordered.push_back(*it->second);
    }
    for (auto& zp : synthpop::synthesize(ordered, microdata, config.ipf, derive_seed(seed, 1))) {
      res.ipf_iterations.push_back(zp.fit.iterations);
      for (auto& p : zp.persons) res.persons.push_back(std::move(p));
    }
    return 0;
  });

  // 2. Trip generation.
  res.trip_model = step("trip_generation", [&] {
    const auto train = tripgen::load_training_set(config.trip_training);
    return tripgen::fit_model(config.trip_model_kind, train, config.trip_hyperparams, derive_seed(seed, 2));
  });
  res.pa.productions.assign(nz, 0.0);
  for (const auto& p : res.persons) {
    const double t = res.trip_model->predict_clamped(project_features(p, res.trip_model->feature_names()));
    res.person_trips.push_back(t);
    res.pa.productions[res.zones.index_of(p.zone_id)] += t;
  }

  // 3. Network and skims.
  res.graph = step("network", [&] { return build_network(config.network, res.zones); });
  const auto trees = step("skim", [&] { return routing::zone_trees(res.graph, zone_ids); });
  res.skim = routing::skim_from_trees(res.graph, zone_ids, trees, config.intrazonal_floor);

  // 4. Distribution.
  step("distribution", [&] {
    res.raw_attractions = load_zone_values(config.attractions, zone_ids, config.attractions_column);
    res.pa.attractions = res.raw_attractions;
    res.pa = distribution::balance(res.pa);
    res.deterrence = config.deterrence.fixed;
    if (config.deterrence.calibrate_mean_cost)
      res.deterrence = distribution::calibrate_deterrence(res.pa, res.skim, config.deterrence.fixed.form(),
                                                          *config.deterrence.calibrate_mean_cost, {},
                                                          config.intrazonal_floor)
                           .deterrence;
    res.od = distribution::furness_balance(res.pa, res.skim, res.deterrence, config.gravity);
    if (!res.od.converged)
      throw Infeasible("gravity balancing did not converge in " + std::to_string(res.od.iterations) +
                       " iterations (max deviation " + io::format_double(res.od.max_deviation) + ")");
    return 0;
  });

  // 5. Route assignment (all-or-nothing).
  step("assignment", [&] {
    for (std::size_t i = 0; i < nz; ++i)
      for (std::size_t j = 0; j < nz; ++j) {
        if (res.od(i, j) <= 0.0) continue;
        const auto target = res.graph.anchor(zone_ids[j]);
        RouteRecord r{zone_ids[i], zone_ids[j], res.od(i, j), 0.0, "", ""};
        if (i == j) {
          r.seconds = res.skim(i, i);
          r.nodes = res.graph.node(target).id;
        } else {
          const auto path = routing::trace_path(trees[i], target, res.graph);
          r.seconds = path.total;
          std::string modes;
          for (std::size_t k = 0; k < path.modes.size(); ++k) modes += (k ? " " : "") + network::to_string(path.modes[k]);
          r.modes = modes;
          r.nodes = routing::path_node_ids(path, res.graph);
        }
        res.routes.push_back(std::move(r));
      }
    res.link_loads = routing::link_loads(res.graph, zone_ids, trees, res.od);
    return 0;
  });

  // 6. Mode choice.
  res.mode_model = step("mode_choice", [&] {
    const auto data = modechoice::load_mode_training(config.mode_training);
    return modechoice::fit_nb(data.records, config.modes, config.nb_alpha, data.feature_names);
  });
  const std::size_t nm = config.modes.size();
  std::vector<std::vector<double>> mode_trips(nz, std::vector<double>(nm, 0.0));
  for (std::size_t k = 0; k < res.persons.size(); ++k) {
    const auto& p = res.persons[k];
    const auto x = modechoice::to_categories(project_features(p, res.mode_model->feature_names()));
    auto post = modechoice::posterior(*res.mode_model, x);
    const std::size_t z = res.zones.index_of(p.zone_id);
    if (config.mode_aggregation == ModeAggregation::expected) {
      for (std::size_t m = 0; m < nm; ++m) mode_trips[z][m] += res.person_trips[k] * post[m];
    } else {
      mode_trips[z][modechoice::argmax_mode(post)] += res.person_trips[k];
    }
    res.person_posteriors.push_back(std::move(post));
  }

  // Summaries.
  std::vector<std::size_t> population(nz, 0);
  for (const auto& p : res.persons) ++population[res.zones.index_of(p.zone_id)];
  for (std::size_t i = 0; i < nz; ++i) {
    ZoneSummary s;
    s.zone_id = zone_ids[i];
    s.population = population[i];
    s.total_trips = res.pa.productions[i];
    s.mode_trips = mode_trips[i];
    s.top_destinations = top_destinations(res.od, zone_ids, i, config.top_k);
    res.summaries.push_back(std::move(s));
  }
  return res;
}

// ---------------------------------------------------------------------------
// Persistence

inline constexpr int kBundleFormatVersion = 1;

inline std::string summaries_to_csv(const std::vector<ZoneSummary>& summaries, const std::vector<std::string>& modes) {
  std::vector<std::string> header = {"zone_id", "population", "total_trips"};
  for (const auto& m : modes) header.push_back("trips_" + m);
  header.push_back("top_destinations");
  io::CsvWriter w(header);
  for (const auto& s : summaries) {
    std::vector<std::string> row = {s.zone_id, std::to_string(s.population), io::format_double(s.total_trips)};
    for (double v : s.mode_trips) row.push_back(io::format_double(v));
    std::string top;
    for (std::size_t k = 0; k < s.top_destinations.size(); ++k)
      top += (k ? ";" : "") + s.top_destinations[k].zone_id + ":" + io::format_double(s.top_destinations[k].share);
    row.push_back(top);
    w.row(row);
  }
  return w.str();
}

inline nlohmann::json run_report(const PipelineResult& r) {
  const double person_sum = std::accumulate(r.person_trips.begin(), r.person_trips.end(), 0.0);
  const double productions = std::accumulate(r.pa.productions.begin(), r.pa.productions.end(), 0.0);
  double mode_dev = 0.0;
  const auto rows = r.od.row_sums();
  for (std::size_t i = 0; i < r.summaries.size(); ++i) {
    const double s = std::accumulate(r.summaries[i].mode_trips.begin(), r.summaries[i].mode_trips.end(), 0.0);
    mode_dev = std::max(mode_dev, std::abs(s - rows[i]));
  }
  return {{"period", r.config.period},
          {"seed", *r.config.seed},
          {"zones", r.zones.size()},
          {"persons", r.persons.size()},
          {"ipf_iterations", r.ipf_iterations},
          {"trip_model", tripgen::to_string(r.trip_model->kind())},
          {"deterrence", r.deterrence.to_string()},
          {"gravity", {{"converged", r.od.converged}, {"iterations", r.od.iterations},
                       {"max_deviation", r.od.max_deviation}, {"mean_cost", distribution::mean_cost(r.od, r.skim)},
                       {"entropy", distribution::entropy_of(r.od)}}},
          {"network", {{"nodes", r.graph.node_count()}, {"edges", r.graph.edge_count()},
                       {"skipped_stops", r.graph.skipped_stops()}}},
          {"assignment", "all-or-nothing"},
          {"mode_aggregation", r.config.mode_aggregation == ModeAggregation::expected ? "expected" : "argmax"},
          {"conservation", {{"sum_person_trips", person_sum}, {"sum_productions", productions},
                            {"sum_od_trips", r.od.total()}, {"max_mode_row_deviation", mode_dev}}}};
}

// Output layout (all relative to `dir`): persons.csv, productions.csv,
// skim.csv, od_matrix.csv, paths.csv, link_loads.csv, zone_summaries.csv,
// report.json, plus the service bundle (bundle.json, zones.csv,
// trip_model.json, mode_model.json, graph.json).
inline void write_outputs(const PipelineResult& r, const fs::path& dir) {
  fs::create_directories(dir);
  const auto zone_ids = r.zones.ids();

  {
    auto header = synthpop::person_csv_header();
    header.push_back("trips");
    io::CsvWriter w(header);
    std::map<std::string, std::size_t> seq;
    for (std::size_t k = 0; k < r.persons.size(); ++k) {
      const auto& p = r.persons[k];
      std::vector<std::string> row = {p.zone_id, std::to_string(seq[p.zone_id]++), std::to_string(p.record)};
      for (double f : p.features()) row.push_back(f > 0.5 ? "1" : "0");
      row.push_back(io::format_double(r.person_trips[k]));
      w.row(row);
    }
    w.save(dir / "persons.csv");
  }
  {
    io::CsvWriter w({"zone_id", "productions", "jobs", "attractions"});
    for (std::size_t i = 0; i < zone_ids.size(); ++i)
      w.row({zone_ids[i], io::format_double(r.pa.productions[i]), io::format_double(r.raw_attractions[i]),
             io::format_double(r.pa.attractions[i])});
    w.save(dir / "productions.csv");
  }
  io::write_file(dir / "skim.csv", distribution::skim_to_csv(r.skim, zone_ids));
  io::write_file(dir / "od_matrix.csv", distribution::od_to_csv(r.od, zone_ids));
  {
    io::CsvWriter w({"origin_zone", "destination_zone", "trips", "seconds", "modes", "nodes"});
    for (const auto& rt : r.routes)
      w.row({rt.origin, rt.destination, io::format_double(rt.trips), io::format_double(rt.seconds), rt.modes, rt.nodes});
    w.save(dir / "paths.csv");
  }
  {
    io::CsvWriter w({"from", "to", "mode", "impedance_s", "trips", "assignment"});
    for (std::size_t k = 0; k < r.link_loads.size(); ++k) {
      if (r.link_loads[k] <= 0.0) continue;
      const auto& e = r.graph.edge(k);
      w.row({r.graph.node(e.from).id, r.graph.node(e.to).id, network::to_string(e.mode), io::format_double(e.impedance),
             io::format_double(r.link_loads[k]), "all-or-nothing"});
    }
    w.save(dir / "link_loads.csv");
  }
  io::write_file(dir / "zone_summaries.csv", summaries_to_csv(r.summaries, r.config.modes));
  io::write_file(dir / "report.json", run_report(r).dump(2) + "\n");

  io::write_file(dir / "zones.csv", zones_to_csv(r.zones));
  tripgen::save_trip_model(*r.trip_model, dir / "trip_model.json");
  modechoice::save_nb_model(*r.mode_model, dir / "mode_model.json");
  network::save_graph(r.graph, dir / "graph.json");
  const nlohmann::json bundle = {{"format", "fourstep-bundle"},
                                 {"format_version", kBundleFormatVersion},
                                 {"period", r.config.period},
                                 {"zones", "zones.csv"},
                                 {"trip_model", "trip_model.json"},
                                 {"mode_model", "mode_model.json"},
                                 {"graph", "graph.json"},
                                 {"od_matrix", "od_matrix.csv"},
                                 {"skim", "skim.csv"}};
  io::write_file(dir / "bundle.json", bundle.dump(2) + "\n");
}

// ---------------------------------------------------------------------------
// Baseline and evaluation

// Zone x mode values aligned to explicit zone and mode orders.
struct ZoneModeTable {
  std::vector<std::string> zones;
  std::vector<std::string> modes;
  std::vector<std::vector<double>> values;  // [zone][mode]
};

// volume(zone, mode) = population(zone) * share(mode).
inline std::vector<std::vector<double>> baseline_shares(const std::vector<double>& shares,
                                                        const std::vector<double>& populations) {
  const double total = std::accumulate(shares.begin(), shares.end(), 0.0);
  if (std::abs(total - 1.0) > 1e-9) throw InvalidArgument("baseline: mode shares sum to " + io::format_double(total) + ", not 1");
  for (double s : shares)
    if (s < 0.0) throw InvalidArgument("baseline: negative mode share");
  std::vector<std::vector<double>> out;
  for (double p : populations) {
    if (!(p >= 0.0)) throw InvalidArgument("baseline: negative population");
    std::vector<double> row;
    for (double s : shares) row.push_back(p * s);
    out.push_back(std::move(row));
  }
  return out;
}

enum class EvaluationUnits { counts, shares };

struct EvaluationRow {
  std::string zone_id;
  std::string mode;
  double truth = 0.0;
  double model = 0.0;
  double baseline = 0.0;
  bool model_correct = false;
  bool baseline_correct = false;
};

struct EvaluationReport {
  double tau = 0.2;
  EvaluationUnits units = EvaluationUnits::counts;
  std::vector<std::string> modes;
  std::vector<double> model_proportion;
  std::vector<double> baseline_proportion;
  std::vector<double> citywide_shares;
  std::vector<EvaluationRow> rows;
};

// The denominator floor keeps near-zero truths from demanding exactness: one
// trip for counts. For shares a floor of 1 would accept any share at tau >= 1
// and most at 0.2, so shares use one percentage point.
inline double threshold_floor(EvaluationUnits units) { return units == EvaluationUnits::counts ? 1.0 : 0.01; }

inline bool within_threshold(double predicted, double truth, double tau, double floor = 1.0) {
  return std::abs(predicted - truth) / std::max(truth, floor) <= tau;
}

// Compares model volumes against truth per zone and mode, alongside the naive
// baseline: citywide truth mode shares applied uniformly, with each zone's
// volume proportional to its population (scaled so the city total matches).
// In `shares` units every quantity becomes a within-zone share first.
inline EvaluationReport evaluate(const ZoneModeTable& predicted, const ZoneModeTable& truth,
                                 const std::vector<double>& populations, double tau,
                                 EvaluationUnits units = EvaluationUnits::counts) {
  if (!(tau >= 0.0)) throw InvalidArgument("evaluate: tau must be non-negative");
  auto sorted = [](std::vector<std::string> v) {
    std::sort(v.begin(), v.end());
    return v;
  };
  if (sorted(predicted.zones) != sorted(truth.zones)) throw InvalidArgument("evaluate: zone sets differ");
  if (sorted(predicted.modes) != sorted(truth.modes)) throw InvalidArgument("evaluate: mode sets differ");
  if (populations.size() != predicted.zones.size()) throw InvalidArgument("evaluate: population count differs");

  const std::size_t nz = predicted.zones.size(), nm = predicted.modes.size();
  // Align truth to predicted order.
  std::vector<std::vector<double>> t(nz, std::vector<double>(nm, 0.0));
  for (std::size_t i = 0; i < nz; ++i) {
    const auto ti = static_cast<std::size_t>(std::find(truth.zones.begin(), truth.zones.end(), predicted.zones[i]) - truth.zones.begin());
    for (std::size_t m = 0; m < nm; ++m) {
      const auto tm = static_cast<std::size_t>(std::find(truth.modes.begin(), truth.modes.end(), predicted.modes[m]) - truth.modes.begin());
      t[i][m] = truth.values.at(ti).at(tm);
    }
  }
  auto p = predicted.values;

  EvaluationReport rep;
  rep.tau = tau;
  rep.units = units;
  rep.modes = predicted.modes;
  std::vector<double> mode_tot(nm, 0.0);
  double grand = 0.0;
  for (std::size_t i = 0; i < nz; ++i)
    for (std::size_t m = 0; m < nm; ++m) {
      mode_tot[m] += t[i][m];
      grand += t[i][m];
    }
  rep.citywide_shares.assign(nm, nm ? 1.0 / static_cast<double>(nm) : 0.0);
  if (grand > 0.0)
    for (std::size_t m = 0; m < nm; ++m) rep.citywide_shares[m] = mode_tot[m] / grand;
  // Guard tiny rounding so shares sum to exactly 1 for the baseline check.
  const double share_sum = std::accumulate(rep.citywide_shares.begin(), rep.citywide_shares.end(), 0.0);
  for (double& s : rep.citywide_shares) s /= share_sum;

  std::vector<std::vector<double>> base;
  if (units == EvaluationUnits::counts) {
    const double pop_total = std::accumulate(populations.begin(), populations.end(), 0.0);
    std::vector<double> scaled(populations);
    for (double& v : scaled) v = pop_total > 0.0 ? v * grand / pop_total : 0.0;
    base = baseline_shares(rep.citywide_shares, scaled);
  } else {
    base = baseline_shares(rep.citywide_shares, std::vector<double>(nz, 1.0));
    auto normalize = [](std::vector<double>& row) {
      const double s = std::accumulate(row.begin(), row.end(), 0.0);
      if (s > 0.0)
        for (double& v : row) v /= s;
    };
    for (auto& row : p) normalize(row);
    for (auto& row : t) normalize(row);
  }

  rep.model_proportion.assign(nm, 0.0);
  rep.baseline_proportion.assign(nm, 0.0);
  for (std::size_t i = 0; i < nz; ++i)
    for (std::size_t m = 0; m < nm; ++m) {
      EvaluationRow row{predicted.zones[i], predicted.modes[m], t[i][m], p[i][m], base[i][m], false, false};
      row.model_correct = within_threshold(row.model, row.truth, tau, threshold_floor(units));
      row.baseline_correct = within_threshold(row.baseline, row.truth, tau, threshold_floor(units));
      rep.model_proportion[m] += row.model_correct;
      rep.baseline_proportion[m] += row.baseline_correct;
      rep.rows.push_back(std::move(row));
    }
  if (nz > 0)
    for (std::size_t m = 0; m < nm; ++m) {
      rep.model_proportion[m] /= static_cast<double>(nz);
      rep.baseline_proportion[m] /= static_cast<double>(nz);
    }
  return rep;
}

// Reads zone_summaries.csv back into a table plus per-zone populations.
inline std::pair<ZoneModeTable, std::vector<double>> load_predicted(const fs::path& summaries_csv) {
  auto csv = io::read_csv(summaries_csv);
  ZoneModeTable t;
  std::vector<std::size_t> cols;
  for (std::size_t c = 0; c < csv.header().size(); ++c)
    if (csv.header()[c].rfind("trips_", 0) == 0) {
      t.modes.push_back(csv.header()[c].substr(6));
      cols.push_back(c);
    }
  std::vector<double> pop;
  for (std::size_t r = 0; r < csv.size(); ++r) {
    t.zones.emplace_back(csv.cell(r, "zone_id"));
    pop.push_back(csv.number(r, "population"));
    std::vector<double> row;
    for (auto c : cols) row.push_back(csv.number(r, c));
    t.values.push_back(std::move(row));
  }
  return {t, pop};
}

// Long form: zone_id, mode, value.
inline ZoneModeTable load_truth(const fs::path& path) {
  auto csv = io::read_csv(path);
  ZoneModeTable t;
  std::map<std::pair<std::string, std::string>, double> cells;
  for (std::size_t r = 0; r < csv.size(); ++r) {
    const std::string z(csv.cell(r, "zone_id")), m(csv.cell(r, "mode"));
    if (std::find(t.zones.begin(), t.zones.end(), z) == t.zones.end()) t.zones.push_back(z);
    if (std::find(t.modes.begin(), t.modes.end(), m) == t.modes.end()) t.modes.push_back(m);
    const double v = csv.number(r, "value");
    if (!(v >= 0.0)) throw csv.error_at(r, "value must be non-negative");
    cells[{z, m}] += v;
  }
  for (const auto& z : t.zones) {
    std::vector<double> row;
    for (const auto& m : t.modes) row.push_back(cells.count({z, m}) ? cells[{z, m}] : 0.0);
    t.values.push_back(std::move(row));
  }
  return t;
}

inline std::string report_to_csv(const EvaluationReport& rep) {
  io::CsvWriter w({"zone_id", "mode", "truth", "model", "baseline", "model_correct", "baseline_correct"});
  for (const auto& r : rep.rows)
    w.row({r.zone_id, r.mode, io::format_double(r.truth), io::format_double(r.model), io::format_double(r.baseline),
           r.model_correct ? "1" : "0", r.baseline_correct ? "1" : "0"});
  return w.str();
}

inline nlohmann::json report_to_json(const EvaluationReport& rep) {
  nlohmann::json per_mode = nlohmann::json::array();
  for (std::size_t m = 0; m < rep.modes.size(); ++m)
    per_mode.push_back({{"mode", rep.modes[m]},
                        {"model_proportion_correct", rep.model_proportion[m]},
                        {"baseline_proportion_correct", rep.baseline_proportion[m]},
                        {"citywide_share", rep.citywide_shares[m]}});
  return {{"tau", rep.tau},
          {"units", rep.units == EvaluationUnits::counts ? "counts" : "shares"},
          {"criterion", rep.units == EvaluationUnits::counts ? "|predicted - truth| / max(truth, 1) <= tau"
                                                             : "|predicted - truth| / max(truth, 0.01) <= tau"},
          {"modes", per_mode}};
}

}  // namespace fourstep::pipeline
