#pragma once

// Prediction service core: bundle loading and the three request handlers.
// Handlers are pure functions of (AppState, request) returning a status code
// and a JSON body; the HTTP layer only routes.

#include <array>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include <json.hpp>

#include "fourstep/distribution.hpp"
#include "fourstep/error.hpp"
#include "fourstep/io.hpp"
#include "fourstep/modechoice.hpp"
#include "fourstep/network.hpp"
#include "fourstep/pipeline.hpp"
#include "fourstep/routing.hpp"
#include "fourstep/synthpop.hpp"
#include "fourstep/tripgen.hpp"
#include "fourstep/zones.hpp"

namespace fourstep::service {

namespace fs = std::filesystem;
using nlohmann::json;

struct ArtifactVersions {
  std::string trip_model;
  std::string mode_model;
  std::string graph;
  std::string od_matrix;
};

struct AppState {
  bool ready = false;
  std::string period = "monthly";
  ZoneRegistry zones;
  std::optional<tripgen::TripModel> trip_model;
  std::optional<modechoice::NBModel> mode_model;
  network::MultimodalGraph graph;
  distribution::CostMatrix skim;
  distribution::ODMatrix od;
  std::vector<routing::ShortestPathTree> trees;  // one per zone, registry order
  ArtifactVersions versions;
};

inline std::string version_of(const std::string& content) { return io::hex64(io::fnv1a64(content)); }

// Reads bundle.json in `dir` and every artifact it names. Throws ParseError
// naming the missing path, VersionMismatch on format or feature-arity
// disagreement between the trip and mode models.
inline AppState load_bundle(const fs::path& dir) {
  const auto manifest_path = dir / "bundle.json";
  if (!fs::exists(manifest_path)) throw ParseError("bundle manifest not found: " + manifest_path.string());
  json manifest;
  try {
    manifest = json::parse(io::read_file(manifest_path));
  } catch (const json::exception& e) {
    throw ParseError(manifest_path.string() + ": " + e.what());
  }
  auto member = [&](const char* key) {
    if (!manifest.contains(key) || !manifest[key].is_string())
      throw ParseError(manifest_path.string() + ": missing '" + key + "'");
    const fs::path p = dir / manifest[key].get<std::string>();
    if (!fs::exists(p)) throw ParseError("bundle artifact not found: " + p.string());
    return p;
  };
  if (manifest.value("format", "") != "fourstep-bundle") throw ParseError(manifest_path.string() + ": not a bundle manifest");
  const int version = manifest.value("format_version", -1);
  if (version != pipeline::kBundleFormatVersion)
    throw VersionMismatch("bundle format version " + std::to_string(version) + " is not supported");

  AppState s;
  s.period = manifest.value("period", s.period);
  const auto zones_path = member("zones"), trip_path = member("trip_model"), mode_path = member("mode_model"),
             graph_path = member("graph"), od_path = member("od_matrix"), skim_path = member("skim");
  s.zones = load_zones(zones_path);
  const auto ids = s.zones.ids();
  s.trip_model = tripgen::load_trip_model(trip_path);
  s.mode_model = modechoice::load_nb_model(mode_path);
  if (s.trip_model->feature_names() != s.mode_model->feature_names())
    throw VersionMismatch("trip model expects " + std::to_string(s.trip_model->n_features()) +
                          " features but mode model expects " + std::to_string(s.mode_model->n_features()) +
                          " (or they are named differently)");
  s.graph = network::load_graph(graph_path);
  for (const auto& id : ids)
    if (!s.graph.has_anchor(id)) throw VersionMismatch("graph has no anchor for zone '" + id + "'");
  s.od = distribution::load_od(od_path, ids);
  s.skim = distribution::load_skim(skim_path, ids);
  s.trees = routing::zone_trees(s.graph, ids);
  s.versions = {version_of(io::read_file(trip_path)), version_of(io::read_file(mode_path)),
                version_of(io::read_file(graph_path)), version_of(io::read_file(od_path))};
  s.ready = true;
  return s;
}

struct Response {
  int status = 200;
  json body;

  std::string text() const { return body.dump(); }
};

inline json versions_json(const AppState& s) {
  return {{"trip_model", s.versions.trip_model},
          {"mode_model", s.versions.mode_model},
          {"graph", s.versions.graph},
          {"od_matrix", s.versions.od_matrix}};
}

inline Response error_response(int status, const std::string& code, const std::string& message,
                               json fields = json::array()) {
  return {status, {{"error", {{"code", code}, {"message", message}, {"fields", std::move(fields)}}}}};
}

inline Response not_ready() { return error_response(503, "not_ready", "model bundle is not loaded"); }

inline Response handle_health(const AppState& s) {
  if (!s.ready) return {503, {{"status", "loading"}, {"ready", false}}};
  return {200, {{"status", "ok"}, {"ready", true}, {"period", s.period}, {"zones", s.zones.size()},
                {"model_versions", versions_json(s)}}};
}

inline Response handle_zones(const AppState& s) {
  if (!s.ready) return not_ready();
  json zones = json::array();
  for (const auto& z : s.zones.zones()) {
    const auto& anchor = s.graph.node(s.graph.anchor(z.id));
    zones.push_back({{"zone_id", z.id}, {"name", z.name}, {"lat", z.lat}, {"lon", z.lon},
                     {"anchor", {{"node_id", anchor.id}, {"lat", anchor.lat}, {"lon", anchor.lon}}}});
  }
  return {200, {{"zones", zones}}};
}

inline constexpr int kDefaultTopK = 5;

struct PredictRequest {
  std::array<int, 5> profile{};
  std::string origin_zone;
  int top_k = kDefaultTopK;
};

// Field-level validation; every problem is reported, not just the first.
inline std::variant<PredictRequest, json> parse_predict_request(const json& body) {
  json problems = json::array();
  auto bad = [&](const std::string& field, const std::string& msg) { problems.push_back({{"field", field}, {"message", msg}}); };
  PredictRequest req;
  if (!body.is_object()) {
    bad("body", "must be a JSON object");
    return problems;
  }
  if (!body.contains("origin_zone")) bad("origin_zone", "is required");
  else if (!body["origin_zone"].is_string()) bad("origin_zone", "must be a string");
  else req.origin_zone = body["origin_zone"].get<std::string>();

  if (!body.contains("profile")) {
    bad("profile", "is required");
  } else if (!body["profile"].is_array() || body["profile"].size() != 5) {
    bad("profile", "must be an array of 5 binary values in order " + [] {
      std::string s;
      for (const auto& n : synthpop::person_feature_names()) s += (s.empty() ? "" : ",") + n;
      return s;
    }());
  } else {
    for (std::size_t i = 0; i < 5; ++i) {
      const auto& v = body["profile"][i];
      if (v.is_boolean()) req.profile[i] = v.get<bool>();
      else if (v.is_number_integer() && (v.get<long long>() == 0 || v.get<long long>() == 1)) req.profile[i] = v.get<int>();
      else bad("profile[" + std::to_string(i) + "]", "must be 0 or 1");
    }
  }
  if (body.contains("top_k")) {
    const auto& k = body["top_k"];
    if (!k.is_number_integer() || k.get<long long>() < 1) bad("top_k", "must be an integer >= 1");
    else req.top_k = static_cast<int>(std::min<long long>(k.get<long long>(), 1 << 20));
  }
  for (auto it = body.begin(); it != body.end(); ++it)
    if (it.key() != "origin_zone" && it.key() != "profile" && it.key() != "top_k") bad(it.key(), "unknown field");
  if (!problems.empty()) return problems;
  return req;
}

inline Response handle_predict(const AppState& s, const PredictRequest& req) {
  if (!s.ready) return not_ready();
  if (!s.zones.contains(req.origin_zone))
    return error_response(400, "unknown_zone", "unknown origin zone '" + req.origin_zone + "'",
                          json::array({{{"field", "origin_zone"}, {"message", "not in the zone registry"}}}));
  const std::size_t o = s.zones.index_of(req.origin_zone);
  const auto ids = s.zones.ids();
  std::array<double, 5> profile{};
  for (std::size_t i = 0; i < 5; ++i) profile[i] = req.profile[i];

  const double trips = s.trip_model->predict_clamped(pipeline::project_profile(profile, s.trip_model->feature_names()));
  const auto post = modechoice::posterior(
      *s.mode_model, modechoice::to_categories(pipeline::project_profile(profile, s.mode_model->feature_names())));
  json modes = json::array();
  for (std::size_t m = 0; m < post.size(); ++m)
    modes.push_back({{"mode", s.mode_model->modes()[m]}, {"probability", post[m]}});

  json destinations = json::array();
  for (const auto& d : pipeline::top_destinations(s.od, ids, o, static_cast<std::size_t>(req.top_k))) {
    const std::size_t j = s.zones.index_of(d.zone_id);
    const auto path = routing::trace_path(s.trees[o], s.graph.anchor(d.zone_id), s.graph);
    destinations.push_back({{"zone_id", d.zone_id},
                            {"share", d.share},
                            {"trips", trips * d.share},
                            {"travel_seconds", s.skim(o, j)},
                            {"mode_probabilities", modes},
                            {"route", routing::route_feature(path, s.graph)}});
  }
  return {200, {{"origin_zone", req.origin_zone},
                {"period", s.period},
                {"monthly_trips", trips},
                {"mode_probabilities", modes},
                {"destinations", destinations},
                {"model_versions", versions_json(s)}}};
}

inline Response handle_predict(const AppState& s, std::string_view body) {
  if (!s.ready) return not_ready();
  json j;
  try {
    j = json::parse(body);
  } catch (const json::exception&) {
    return error_response(400, "malformed_body", "request body is not valid JSON",
                          json::array({{{"field", "body"}, {"message", "invalid JSON"}}}));
  }
  auto parsed = parse_predict_request(j);
  if (auto* problems = std::get_if<json>(&parsed))
    return error_response(400, "malformed_body", "request body failed validation", std::move(*problems));
  return handle_predict(s, std::get<PredictRequest>(parsed));
}

}  // namespace fourstep::service
