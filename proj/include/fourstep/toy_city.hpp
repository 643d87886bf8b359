#pragma once

// Deterministic synthetic city: a rows x cols grid of zones over a road grid
// with one bus route, plus every input the pipeline needs. Person attributes,
// trip rates and mode choice come from a known generating process, so the
// observed per-zone volumes (truth.csv) are exact expectations under it.

#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "fourstep/io.hpp"
#include "fourstep/network.hpp"
#include "fourstep/rng.hpp"
#include "fourstep/synthpop.hpp"

namespace fourstep::toy {

namespace fs = std::filesystem;

struct ToyCityParams {
  int rows = 3;
  int cols = 3;
  std::uint64_t seed = 20240601;
  int min_population = 80;
  int max_population = 220;
  int microdata_records = 500;
  int trip_training_rows = 400;
  int mode_training_rows = 3000;
  double trip_noise_sd = 3.0;
};

// Generating process. Features use the canonical person order.
struct TrueProcess {
  double trip_intercept = 8.0;
  std::array<double, 5> trip_coef = {18.0, -6.0, 5.0, 20.0, 4.0};
  std::vector<std::string> modes = {"transit", "drive", "walk"};
  std::vector<double> priors = {0.3, 0.5, 0.2};
  // P(feature = 1 | mode), [feature][mode]
  std::array<std::array<double, 3>, 5> p_one = {{{0.25, 0.9, 0.3},
                                                 {0.3, 0.25, 0.2},
                                                 {0.35, 0.6, 0.4},
                                                 {0.7, 0.65, 0.45},
                                                 {0.5, 0.35, 0.55}}};

  double trips(std::span<const double> x) const {
    double t = trip_intercept;
    for (std::size_t f = 0; f < 5; ++f) t += trip_coef[f] * x[f];
    return t;
  }

  std::vector<double> mode_probabilities(std::span<const double> x) const {
    std::vector<double> p(modes.size());
    double z = 0.0;
    for (std::size_t m = 0; m < modes.size(); ++m) {
      double s = priors[m];
      for (std::size_t f = 0; f < 5; ++f) s *= x[f] > 0.5 ? p_one[f][m] : 1.0 - p_one[f][m];
      z += (p[m] = s);
    }
    for (double& v : p) v /= z;
    return p;
  }
};

struct ToyZone {
  std::string id;
  double lat = 0.0, lon = 0.0;
  std::array<double, 5> p_feature{};
  double jobs = 0.0;
  std::vector<std::array<bool, 5>> persons;  // the zone's actual residents
};

struct ToyCity {
  ToyCityParams params;
  TrueProcess process;
  std::vector<ToyZone> zones;

  // Expected per-mode volume of a zone under the generating process.
  std::vector<double> truth(std::size_t z) const {
    std::vector<double> v(process.modes.size(), 0.0);
    for (const auto& p : zones[z].persons) {
      std::vector<double> x(p.begin(), p.end());
      const double t = process.trips(x);
      const auto pm = process.mode_probabilities(x);
      for (std::size_t m = 0; m < v.size(); ++m) v[m] += t * pm[m];
    }
    return v;
  }
};

namespace detail {

inline double lerp(double a, double b, double u) { return a + (b - a) * u; }

inline std::array<bool, 5> draw_person(Rng& rng, const std::array<double, 5>& p) {
  std::array<bool, 5> x{};
  for (std::size_t f = 0; f < 5; ++f) x[f] = rng.uniform() < p[f];
  return x;
}

inline std::string bits(const std::array<bool, 5>& x) {
  std::string s;
  for (std::size_t f = 0; f < 5; ++f) s += (f ? "," : "") + std::string(x[f] ? "1" : "0");
  return s;
}

inline std::string hms(int s) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "%02d:%02d:%02d", s / 3600, (s / 60) % 60, s % 60);
  return buf;
}

}  // namespace detail

inline ToyCity generate_toy_city(const ToyCityParams& params = {}) {
  if (params.rows < 1 || params.cols < 1) throw InvalidArgument("toy city: grid must be at least 1x1");
  if (params.min_population < 0 || params.max_population < params.min_population)
    throw InvalidArgument("toy city: invalid population range");
  ToyCity city;
  city.params = params;
  Rng rng(derive_seed(params.seed, 100));
  const double cr = (params.rows - 1) / 2.0, cc = (params.cols - 1) / 2.0;
  for (int r = 0; r < params.rows; ++r)
    for (int c = 0; c < params.cols; ++c) {
      ToyZone z;
      z.id = "Z" + std::to_string(r * params.cols + c + 1);
      z.lat = 47.6 + 0.012 * r;
      z.lon = -122.34 + 0.016 * c;
      // Car ownership rises away from the centre; the rest varies freely.
      const double ring = std::hypot(r - cr, c - cc) / std::max(1.0, std::hypot(cr, cc));
      z.p_feature = {detail::lerp(0.15, 0.9, 0.7 * ring + 0.3 * rng.uniform()), detail::lerp(0.08, 0.4, rng.uniform()),
                     detail::lerp(0.2, 0.7, rng.uniform()), detail::lerp(0.3, 0.9, rng.uniform()),
                     detail::lerp(0.2, 0.6, rng.uniform())};
      z.jobs = std::round(150.0 + 1500.0 * std::exp(-2.0 * ring * ring) + 200.0 * rng.uniform());
      const int pop = params.min_population +
                      static_cast<int>(rng.below(static_cast<std::uint64_t>(params.max_population - params.min_population + 1)));
      for (int k = 0; k < pop; ++k) z.persons.push_back(detail::draw_person(rng, z.p_feature));
      city.zones.push_back(std::move(z));
    }
  return city;
}

inline void write_toy_city(const ToyCity& city, const fs::path& dir) {
  const auto& P = city.params;
  const auto& names = synthpop::person_feature_names();
  std::string feature_header;
  for (std::size_t f = 0; f < names.size(); ++f) feature_header += (f ? "," : "") + names[f];

  {
    io::CsvWriter w({"zone_id", "name", "lat", "lon"});
    for (const auto& z : city.zones) w.row({z.id, "Zone " + z.id.substr(1), io::format_double(z.lat), io::format_double(z.lon)});
    w.save(dir / "zones.csv");
  }
  {
    io::CsvWriter w({"zone_id", "dimension", "category", "target_count"});
    for (const auto& z : city.zones)
      for (std::size_t f = 0; f < 5; ++f) {
        int ones = 0;
        for (const auto& p : z.persons) ones += p[f];
        w.row({z.id, names[f], "0", std::to_string(static_cast<int>(z.persons.size()) - ones)});
        w.row({z.id, names[f], "1", std::to_string(ones)});
      }
    w.save(dir / "marginals.csv");
  }
  {
    // Citywide survey sample, plus a light record for any empty cell so the
    // seed table has no structural zeros.
    Rng rng(derive_seed(P.seed, 101));
    std::array<double, 5> city_p{};
    std::size_t total = 0;
    for (const auto& z : city.zones) {
      for (const auto& p : z.persons)
        for (std::size_t f = 0; f < 5; ++f) city_p[f] += p[f];
      total += z.persons.size();
    }
    for (double& v : city_p) v = total ? v / static_cast<double>(total) : 0.5;
    std::string text = "record_id," + feature_header + ",weight\n";
    std::vector<bool> seen(32, false);
    int id = 0;
    for (int k = 0; k < P.microdata_records; ++k) {
      const auto x = detail::draw_person(rng, city_p);
      int cell = 0;
      for (std::size_t f = 0; f < 5; ++f) cell = cell * 2 + x[f];
      seen[static_cast<std::size_t>(cell)] = true;
      text += "R" + std::to_string(++id) + "," + detail::bits(x) + "," + io::format_double(detail::lerp(0.5, 1.5, rng.uniform())) + "\n";
    }
    for (int cell = 0; cell < 32; ++cell)
      if (!seen[static_cast<std::size_t>(cell)]) {
        std::array<bool, 5> x{};
        for (int f = 4, c = cell; f >= 0; --f, c /= 2) x[static_cast<std::size_t>(f)] = c % 2;
        text += "R" + std::to_string(++id) + "," + detail::bits(x) + ",0.1\n";
      }
    io::write_file(dir / "microdata.csv", text);
  }
  {
    Rng rng(derive_seed(P.seed, 102));
    std::string text = feature_header + ",target\n";
    for (int k = 0; k < P.trip_training_rows; ++k) {
      const auto x = detail::draw_person(rng, {0.5, 0.5, 0.5, 0.5, 0.5});
      std::vector<double> xv(x.begin(), x.end());
      const double y = std::max(0.0, city.process.trips(xv) + P.trip_noise_sd * rng.normal());
      text += detail::bits(x) + "," + io::format_double(std::round(y * 100.0) / 100.0) + "\n";
    }
    io::write_file(dir / "trip_training.csv", text);
  }
  {
    Rng rng(derive_seed(P.seed, 103));
    const auto& tp = city.process;
    std::vector<double> cum;
    double s = 0.0;
    for (double p : tp.priors) cum.push_back(s += p);
    std::string text = feature_header + ",mode\n";
    for (int k = 0; k < P.mode_training_rows; ++k) {
      const std::size_t m = draw_weighted(rng, cum);
      std::array<double, 5> p{};
      for (std::size_t f = 0; f < 5; ++f) p[f] = tp.p_one[f][m];
      text += detail::bits(detail::draw_person(rng, p)) + "," + tp.modes[m] + "\n";
    }
    io::write_file(dir / "mode_training.csv", text);
  }
  {
    io::CsvWriter w({"zone_id", "jobs"});
    for (const auto& z : city.zones) w.row({z.id, io::format_double(z.jobs)});
    w.save(dir / "jobs.csv");
  }
  {
    io::CsvWriter w({"zone_id", "mode", "value"});
    for (std::size_t z = 0; z < city.zones.size(); ++z) {
      const auto v = city.truth(z);
      for (std::size_t m = 0; m < v.size(); ++m) w.row({city.zones[z].id, city.process.modes[m], io::format_double(v[m])});
    }
    w.save(dir / "truth.csv");
  }

  // Road grid with one more row and two more columns than a zone-centred
  // lattice would need, so every zone has a node close by.
  const int nr = P.rows + 2, nc = P.cols + 3;
  const double lat0 = 47.6 - 0.006, lat1 = 47.6 + 0.012 * (P.rows - 1) + 0.006;
  const double lon0 = -122.34 - 0.008, lon1 = -122.34 + 0.016 * (P.cols - 1) + 0.008;
  auto node_lat = [&](int r) { return nr > 1 ? detail::lerp(lat0, lat1, double(r) / (nr - 1)) : lat0; };
  auto node_lon = [&](int c) { return nc > 1 ? detail::lerp(lon0, lon1, double(c) / (nc - 1)) : lon0; };
  auto node_id = [](int r, int c) { return "N" + std::to_string(r) + "_" + std::to_string(c); };
  {
    io::CsvWriter nodes({"id", "lat", "lon"});
    io::CsvWriter edges({"from", "to", "mode", "length_m", "speed_mps", "impedance_s"});
    const int mid = nr / 2;
    for (int r = 0; r < nr; ++r)
      for (int c = 0; c < nc; ++c) {
        nodes.row({node_id(r, c), io::format_double(node_lat(r)), io::format_double(node_lon(c))});
        auto link = [&](int r2, int c2) {
          const double len = std::round(network::haversine_m(node_lat(r), node_lon(c), node_lat(r2), node_lon(c2)));
          const auto a = node_id(r, c), b = node_id(r2, c2), l = io::format_double(len);
          // The bus corridor row is closed to cars.
          if (!(r == mid && r2 == mid)) {
            edges.row({a, b, "drive", l, "11", ""});
            edges.row({b, a, "drive", l, "11", ""});
          }
          edges.row({a, b, "walk", l, "1.4", ""});
        };
        if (c + 1 < nc) link(r, c + 1);
        if (r + 1 < nr) link(r + 1, c);
      }
    fs::create_directories(dir / "roads");
    nodes.save(dir / "roads" / "nodes.csv");
    edges.save(dir / "roads" / "edges.csv");

    // One route along the corridor, both directions, every 10 minutes.
    const auto g = dir / "gtfs";
    fs::create_directories(g);
    io::CsvWriter stops({"stop_id", "stop_name", "stop_lat", "stop_lon"});
    for (int c = 0; c < nc; ++c)
      stops.row({"S" + std::to_string(c + 1), "Corridor " + std::to_string(c + 1), io::format_double(node_lat(mid) + 0.0002),
                 io::format_double(node_lon(c))});
    stops.save(g / "stops.txt");
    io::CsvWriter routes({"route_id", "route_short_name", "route_type"});
    routes.row({"R1", "1", "3"});
    routes.save(g / "routes.txt");
    io::CsvWriter trips({"route_id", "service_id", "trip_id", "direction_id"});
    io::CsvWriter times({"trip_id", "arrival_time", "departure_time", "stop_id", "stop_sequence"});
    int n = 0;
    for (int dep = 6 * 3600; dep <= 9 * 3600; dep += 600)
      for (int dirn = 0; dirn < 2; ++dirn) {
        const auto tid = "T" + std::to_string(++n);
        trips.row({"R1", "WK", tid, std::to_string(dirn)});
        for (int k = 0; k < nc; ++k) {
          const int c = dirn == 0 ? k : nc - 1 - k;
          const auto t = detail::hms(dep + 90 * k);
          times.row({tid, t, t, "S" + std::to_string(c + 1), std::to_string(k + 1)});
        }
      }
    trips.save(g / "trips.txt");
    times.save(g / "stop_times.txt");
    io::CsvWriter cal({"service_id", "monday", "tuesday", "wednesday", "thursday", "friday", "saturday", "sunday",
                       "start_date", "end_date"});
    cal.row({"WK", "1", "1", "1", "1", "1", "0", "0", "20240101", "20241231"});
    cal.save(g / "calendar.txt");
  }

  const nlohmann::json scenario = {
      {"seed", P.seed},
      {"period", "monthly"},
      {"zones", "zones.csv"},
      {"marginals", "marginals.csv"},
      {"microdata", "microdata.csv"},
      {"trip_training", "trip_training.csv"},
      {"mode_training", "mode_training.csv"},
      {"attractions", "jobs.csv"},
      {"network", {{"roads", "roads"}, {"gtfs", "gtfs"}, {"walk_speed", 1.4}, {"board_penalty", 30}, {"link_radius", 500}}},
      {"trip_model", {{"kind", "random_forest"}}},
      {"modes", city.process.modes},
      {"nb_alpha", 1.0},
      {"deterrence", "exp:0.002"},
      {"intrazonal_floor", 60},
      {"mode_aggregation", "expected"},
      {"top_k", 3},
      {"tau", 0.2}};
  io::write_file(dir / "scenario.json", scenario.dump(2) + "\n");
}

}  // namespace fourstep::toy
