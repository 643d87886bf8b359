// fourstep command-line driver. One subcommand per pipeline step plus the
// full pipeline, evaluation, the HTTP service and the toy-city generator.

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "fourstep/distribution.hpp"
#include "fourstep/http_server.hpp"
#include "fourstep/io.hpp"
#include "fourstep/modechoice.hpp"
#include "fourstep/network.hpp"
#include "fourstep/pipeline.hpp"
#include "fourstep/routing.hpp"
#include "fourstep/service.hpp"
#include "fourstep/synthpop.hpp"
#include "fourstep/toy_city.hpp"
#include "fourstep/tripgen.hpp"
#include "fourstep/zones.hpp"

namespace fs = std::filesystem;
using namespace fourstep;
using nlohmann::json;

namespace {

// zone_id plus one numeric column, in file order.
struct ZoneColumn {
  std::vector<std::string> zones;
  std::vector<double> values;
};

ZoneColumn read_zone_column(const fs::path& path, const std::vector<std::string>& candidates) {
  auto csv = io::read_csv(path);
  std::optional<std::size_t> col;
  for (const auto& c : candidates)
    if ((col = csv.find_column(c))) break;
  if (!col) {
    std::string names;
    for (const auto& c : candidates) names += (names.empty() ? "" : " or ") + c;
    throw ParseError(path.string() + ": needs a column named " + names);
  }
  ZoneColumn out;
  for (std::size_t r = 0; r < csv.size(); ++r) {
    out.zones.emplace_back(csv.cell(r, "zone_id"));
    out.values.push_back(csv.number(r, *col));
  }
  return out;
}

std::vector<double> align(const ZoneColumn& col, const std::vector<std::string>& order, const std::string& what) {
  std::map<std::string, double> m;
  for (std::size_t i = 0; i < col.zones.size(); ++i) m[col.zones[i]] += col.values[i];
  std::vector<double> out;
  for (const auto& z : order) {
    auto it = m.find(z);
    out.push_back(it == m.end() ? 0.0 : it->second);
  }
  for (const auto& [z, _] : m)
    if (std::find(order.begin(), order.end(), z) == order.end()) throw InvalidArgument(what + ": unknown zone '" + z + "'");
  return out;
}

// Feature rows for a model: columns matched by name, target optional.
tripgen::TrainingSet read_feature_rows(const fs::path& path, const std::vector<std::string>& names) {
  auto csv = io::read_csv(path);
  tripgen::TrainingSet t;
  t.feature_names = names;
  std::vector<std::size_t> cols;
  for (const auto& n : names) cols.push_back(csv.column(n));
  const auto ct = csv.find_column("target");
  for (std::size_t r = 0; r < csv.size(); ++r) {
    std::vector<double> x;
    for (auto c : cols) x.push_back(csv.number(r, c));
    t.add(std::move(x), ct ? csv.number(r, *ct) : 0.0);
  }
  return t;
}

void print_json(const json& j) { std::cout << j.dump(2) << "\n"; }

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"fourstep: small-area four-step travel demand engine"};
  app.require_subcommand(1);

  // synthesize -----------------------------------------------------------
  auto* syn = app.add_subcommand("synthesize", "IPF-fit zone marginals and sample synthetic persons");
  std::string syn_marginals, syn_microdata, syn_out;
  double syn_tol = 1e-8;
  int syn_iter = 1000;
  std::uint64_t seed = 0;
  syn->add_option("--marginals", syn_marginals, "zone marginals CSV")->required();
  syn->add_option("--microdata", syn_microdata, "weighted microdata CSV")->required();
  syn->add_option("--out", syn_out, "persons CSV to write")->required();
  syn->add_option("--tol", syn_tol, "IPF tolerance on marginal deviation");
  syn->add_option("--max-iter", syn_iter, "IPF sweep limit");
  syn->add_option("--seed", seed, "sampling seed")->required();
  syn->callback([&] {
    synthpop::IpfOptions opt{syn_tol, syn_iter};
    const auto zones = synthpop::synthesize(synthpop::load_marginals(syn_marginals), synthpop::load_microdata(syn_microdata),
                                            opt, seed);
    std::vector<synthpop::SyntheticPerson> all;
    for (const auto& z : zones) {
      std::cerr << z.zone_id << ": " << z.persons.size() << " persons, " << z.fit.iterations << " ipf sweeps\n";
      all.insert(all.end(), z.persons.begin(), z.persons.end());
    }
    io::write_file(syn_out, synthpop::persons_to_csv(all));
  });

  // tripgen --------------------------------------------------------------
  auto* tg = app.add_subcommand("tripgen", "trip generation models");
  tg->require_subcommand(1);
  auto* tg_fit = tg->add_subcommand("fit", "fit a trip model");
  std::string tg_kind = "random_forest", tg_train, tg_out, tg_model, tg_features, tg_background, tg_method = "permutation";
  std::vector<std::string> tg_hp;
  bool tg_raw = false;
  tg_fit->add_option("--kind", tg_kind, "linear | random_forest | gradient_boost | mlp");
  tg_fit->add_option("--train", tg_train, "training CSV (features + target)")->required();
  tg_fit->add_option("--out", tg_out, "model bundle to write")->required();
  tg_fit->add_option("--seed", seed, "fitting seed");
  tg_fit->add_option("--hp", tg_hp, "hyperparameter key=value (repeatable)");
  tg_fit->callback([&] {
    json hp = json::object();
    for (const auto& kv : tg_hp) {
      const auto eq = kv.find('=');
      if (eq == std::string::npos) throw InvalidArgument("--hp expects key=value, got '" + kv + "'");
      const auto v = io::try_parse_double(kv.substr(eq + 1));
      if (!v) throw InvalidArgument("--hp value is not a number: '" + kv + "'");
      const auto key = kv.substr(0, eq);
      if (std::floor(*v) == *v && key != "learning_rate" && key != "step_size" && key != "ridge")
        hp[key] = static_cast<long long>(*v);
      else
        hp[key] = *v;
    }
    const auto model = tripgen::fit_model(tripgen::parse_model_kind(tg_kind), tripgen::load_training_set(tg_train),
                                          tripgen::hyperparams_from_json(hp), seed);
    tripgen::save_trip_model(model, tg_out);
  });
  auto* tg_pred = tg->add_subcommand("predict", "predict trips for one profile");
  tg_pred->add_option("--model", tg_model)->required();
  tg_pred->add_option("--features", tg_features, "comma-separated feature values, e.g. 1,0,1,0,1")->required();
  tg_pred->add_flag("--raw", tg_raw, "print the unclamped prediction");
  tg_pred->callback([&] {
    const auto m = tripgen::load_trip_model(tg_model);
    const auto x = tripgen::parse_feature_list(tg_features);
    std::cout << io::format_double(tg_raw ? m.predict(x) : m.predict_clamped(x)) << "\n";
  });
  auto* tg_exp = tg->add_subcommand("explain", "exact Shapley attribution for one profile");
  tg_exp->add_option("--model", tg_model)->required();
  tg_exp->add_option("--features", tg_features)->required();
  tg_exp->add_option("--background", tg_background, "background rows CSV")->required();
  tg_exp->callback([&] {
    const auto m = tripgen::load_trip_model(tg_model);
    const auto x = tripgen::parse_feature_list(tg_features);
    const auto a = tripgen::shapley(m, x, read_feature_rows(tg_background, m.feature_names()));
    json phi = json::array();
    for (std::size_t i = 0; i < a.phi.size(); ++i) phi.push_back({{"feature", m.feature_names()[i]}, {"phi", a.phi[i]}});
    print_json({{"prediction", m.predict(x)}, {"base_value", a.base_value}, {"contributions", phi}});
  });
  auto* tg_imp = tg->add_subcommand("importance", "impurity or permutation feature importance");
  tg_imp->add_option("--model", tg_model)->required();
  tg_imp->add_option("--data", tg_background, "evaluation CSV (features + target)")->required();
  tg_imp->add_option("--method", tg_method, "impurity | permutation");
  tg_imp->add_option("--seed", seed);
  tg_imp->callback([&] {
    const auto m = tripgen::load_trip_model(tg_model);
    const auto method = tg_method == "impurity" ? tripgen::ImportanceMethod::impurity
                        : tg_method == "permutation"
                            ? tripgen::ImportanceMethod::permutation
                            : throw InvalidArgument("--method must be impurity or permutation");
    const auto imp = tripgen::feature_importance(m, method, read_feature_rows(tg_background, m.feature_names()), seed);
    json out = json::array();
    for (std::size_t i = 0; i < imp.size(); ++i) out.push_back({{"feature", m.feature_names()[i]}, {"importance", imp[i]}});
    print_json(out);
  });

  // distribute -----------------------------------------------------------
  auto* dist = app.add_subcommand("distribute", "doubly-constrained gravity distribution");
  std::string d_prod, d_attr, d_skim, d_det = "exp:0.002", d_out;
  double d_target = 0.0, d_floor = distribution::kDefaultIntrazonalFloor;
  dist->add_option("--productions", d_prod, "CSV zone_id,productions (zone order follows this file)");
  dist->add_option("--attractions", d_attr, "CSV zone_id,attractions|jobs");
  dist->add_option("--skim", d_skim, "cost skim CSV");
  dist->add_option("--deterrence", d_det, "exp:<beta> or pow:<gamma>");
  dist->add_option("--min-cost", d_floor, "power-law cost floor in seconds");
  dist->add_option("--out", d_out, "OD matrix CSV to write");
  auto* calib = dist->add_subcommand("calibrate", "find the deterrence parameter matching a mean trip cost");
  calib->add_option("--target-mean-cost", d_target, "seconds")->required();
  calib->add_option("--productions", d_prod);
  calib->add_option("--attractions", d_attr);
  calib->add_option("--skim", d_skim);
  calib->add_option("--deterrence", d_det, "form to calibrate (exp or pow; the parameter is ignored)");
  calib->add_option("--min-cost", d_floor);
  calib->add_option("--out", d_out, "optional OD matrix CSV at the calibrated parameter");
  auto load_dist_inputs = [&] {
    if (d_prod.empty() || d_attr.empty() || d_skim.empty())
      throw InvalidArgument("--productions, --attractions and --skim are required");
    const auto prod = read_zone_column(d_prod, {"productions"});
    distribution::ProductionAttraction pa;
    pa.productions = prod.values;
    pa.attractions = align(read_zone_column(d_attr, {"attractions", "jobs"}), prod.zones, "attractions");
    return std::make_tuple(prod.zones, distribution::balance(pa), distribution::load_skim(d_skim, prod.zones));
  };
  dist->callback([&] {
    if (calib->parsed()) return;
    if (d_out.empty()) throw InvalidArgument("--out is required");
    const auto [zones, pa, skim] = load_dist_inputs();
    const auto od = distribution::furness_balance(pa, skim, distribution::Deterrence::parse(d_det, d_floor));
    if (!od.converged) throw Infeasible("balancing did not converge");
    io::write_file(d_out, distribution::od_to_csv(od, zones));
    std::cerr << "iterations " << od.iterations << ", max deviation " << io::format_double(od.max_deviation) << "\n";
  });
  calib->callback([&] {
    const auto [zones, pa, skim] = load_dist_inputs();
    const auto form = distribution::Deterrence::parse(d_det, d_floor).form();
    const auto c = distribution::calibrate_deterrence(pa, skim, form, d_target, {}, d_floor);
    print_json({{"deterrence", c.deterrence.to_string()}, {"parameter", c.deterrence.parameter()},
                {"achieved_mean_cost", c.achieved_mean_cost}, {"evaluations", c.evaluations}});
    if (!d_out.empty())
      io::write_file(d_out, distribution::od_to_csv(distribution::furness_balance(pa, skim, c.deterrence), zones));
  });

  // network --------------------------------------------------------------
  auto* net = app.add_subcommand("network", "multimodal graph construction");
  net->require_subcommand(1);
  auto* nb = net->add_subcommand("build", "road files + GTFS feed -> graph bundle");
  std::string n_gtfs, n_roads, n_zones, n_out, n_overrides;
  network::BuildParams bp;
  nb->add_option("--gtfs", n_gtfs, "GTFS directory or zip (optional)");
  nb->add_option("--roads", n_roads, "directory with nodes.csv and edges.csv")->required();
  nb->add_option("--zones", n_zones, "zones CSV")->required();
  nb->add_option("--out", n_out, "graph bundle to write")->required();
  nb->add_option("--walk-speed", bp.walk_speed, "m/s");
  nb->add_option("--board-penalty", bp.board_penalty, "seconds added to every boarding");
  nb->add_option("--link-radius", bp.link_radius, "max stop-to-road link length in metres");
  nb->add_option("--service", bp.service_ids, "restrict to these GTFS service ids");
  nb->add_option("--overrides", n_overrides, "impedance overrides CSV");
  nb->callback([&] {
    const auto zones = load_zones(n_zones);
    auto g = network::build_graph(network::load_road_network(n_roads),
                                  n_gtfs.empty() ? network::TransitFeed{} : network::load_gtfs(n_gtfs), zones, bp);
    if (!n_overrides.empty()) g = network::apply_impedance_overrides(g, io::read_csv(n_overrides));
    network::save_graph(g, n_out);
    std::cerr << g.node_count() << " nodes, " << g.edge_count() << " edges, " << g.skipped_stops() << " stops skipped\n";
  });

  // route ----------------------------------------------------------------
  auto* rt = app.add_subcommand("route", "shortest paths and skims");
  rt->require_subcommand(1);
  std::string r_graph, r_source, r_zones, r_out, r_from, r_to, r_geojson;
  double r_intra = distribution::kDefaultIntrazonalFloor;
  auto* sssp = rt->add_subcommand("sssp", "single-source shortest path tree");
  sssp->add_option("--graph", r_graph)->required();
  sssp->add_option("--source", r_source, "node id")->required();
  sssp->callback([&] {
    const auto g = network::load_graph(r_graph);
    const auto t = routing::dijkstra(g, r_source);
    io::CsvWriter w({"node", "seconds", "prev"});
    for (std::size_t v = 0; v < g.node_count(); ++v)
      w.row({g.node(v).id, t.reachable(v) ? io::format_double(t.dist[v]) : "UNREACHABLE",
             t.prev[v] == routing::kNoNode ? "" : g.node(t.prev[v]).id});
    std::cout << w.str();
  });
  auto* skim = rt->add_subcommand("skim", "zone-to-zone cost skim");
  skim->add_option("--graph", r_graph)->required();
  skim->add_option("--zones", r_zones)->required();
  skim->add_option("--out", r_out)->required();
  skim->add_option("--intrazonal", r_intra, "diagonal cost in seconds");
  skim->callback([&] {
    const auto g = network::load_graph(r_graph);
    const auto ids = load_zones(r_zones).ids();
    io::write_file(r_out, distribution::skim_to_csv(routing::cost_skim(g, ids, r_intra), ids));
  });
  auto* path = rt->add_subcommand("path", "zone-to-zone route");
  path->add_option("--graph", r_graph)->required();
  path->add_option("--from", r_from, "origin zone")->required();
  path->add_option("--to", r_to, "destination zone")->required();
  path->add_option("--geojson", r_geojson, "write the route as a GeoJSON FeatureCollection");
  path->callback([&] {
    const auto g = network::load_graph(r_graph);
    const auto t = routing::dijkstra(g, g.anchor(r_from));
    const auto p = routing::trace_path(t, g.anchor(r_to), g);
    std::cout << io::format_double(p.total) << " s: " << routing::path_node_ids(p, g) << "\n";
    if (!r_geojson.empty()) {
      auto feature = routing::route_feature(p, g);
      feature["properties"]["origin_zone"] = r_from;
      feature["properties"]["destination_zone"] = r_to;
      io::write_file(r_geojson, json{{"type", "FeatureCollection"}, {"features", {feature}}}.dump(2) + "\n");
    }
  });

  // modes ----------------------------------------------------------------
  auto* md = app.add_subcommand("modes", "Naive Bayes mode choice");
  md->require_subcommand(1);
  std::string m_train, m_out, m_model, m_features;
  double m_alpha = 1.0;
  std::vector<std::string> m_modes = modechoice::default_modes();
  auto* mfit = md->add_subcommand("fit", "fit by smoothed counting");
  mfit->add_option("--train", m_train, "CSV of 0/1 features plus a mode column")->required();
  mfit->add_option("--alpha", m_alpha, "Laplace smoothing");
  mfit->add_option("--out", m_out)->required();
  mfit->add_option("--modes", m_modes, "mode set in declared order")->delimiter(',');
  mfit->callback([&] {
    const auto d = modechoice::load_mode_training(m_train);
    modechoice::save_nb_model(modechoice::fit_nb(d.records, m_modes, m_alpha, d.feature_names), m_out);
  });
  auto* mpost = md->add_subcommand("posterior", "posterior mode probabilities for one profile");
  mpost->add_option("--model", m_model)->required();
  mpost->add_option("--features", m_features)->required();
  mpost->callback([&] {
    const auto m = modechoice::load_nb_model(m_model);
    const auto x = modechoice::to_categories(tripgen::parse_feature_list(m_features));
    const auto p = modechoice::posterior(m, x);
    json out = json::array();
    for (std::size_t k = 0; k < p.size(); ++k) out.push_back({{"mode", m.modes()[k]}, {"probability", p[k]}});
    print_json({{"posterior", out}, {"argmax", m.modes()[modechoice::argmax_mode(p)]}});
  });

  // pipeline -------------------------------------------------------------
  auto* pl = app.add_subcommand("pipeline", "end-to-end scenario run and evaluation");
  pl->require_subcommand(1);
  std::string p_config, p_out, p_pred, p_truth, p_units = "counts", p_report;
  double p_tau = 0.2;
  auto* prun = pl->add_subcommand("run", "run all steps and write artifacts");
  prun->add_option("--config", p_config, "scenario JSON")->required();
  prun->add_option("--out", p_out, "output directory")->required();
  prun->callback([&] {
    const auto res = pipeline::run_pipeline(pipeline::load_scenario(p_config));
    pipeline::write_outputs(res, p_out);
    std::cerr << res.persons.size() << " persons, " << io::format_double(res.od.total()) << " trips distributed\n";
  });
  auto* peval = pl->add_subcommand("evaluate", "zone-level accuracy against observed volumes");
  peval->add_option("--pred", p_pred, "pipeline output directory")->required();
  peval->add_option("--truth", p_truth, "CSV zone_id,mode,value")->required();
  peval->add_option("--tau", p_tau, "relative error threshold");
  peval->add_option("--units", p_units, "counts | shares");
  peval->add_option("--report", p_report, "optional per-zone CSV");
  peval->callback([&] {
    const auto [pred, pop] = pipeline::load_predicted(fs::path(p_pred) / "zone_summaries.csv");
    if (p_units != "counts" && p_units != "shares") throw InvalidArgument("--units must be counts or shares");
    const auto rep = pipeline::evaluate(pred, pipeline::load_truth(p_truth), pop, p_tau,
                                        p_units == "counts" ? pipeline::EvaluationUnits::counts
                                                            : pipeline::EvaluationUnits::shares);
    print_json(pipeline::report_to_json(rep));
    if (!p_report.empty()) io::write_file(p_report, pipeline::report_to_csv(rep));
  });

  // serve ----------------------------------------------------------------
  auto* sv = app.add_subcommand("serve", "JSON prediction API over HTTP");
  std::string s_bundle;
  service::ServerOptions so;
  sv->add_option("--bundle", s_bundle, "pipeline output directory")->required();
  sv->add_option("--port", so.port);
  sv->add_option("--host", so.host);
  sv->add_option("--verbosity", so.verbosity, "0 silent, 1 request log, 2 error detail");
  sv->callback([&] {
    so = service::apply_env(so);
    const auto state = service::load_bundle(s_bundle);
    httplib::Server server;
    service::install_routes(server, state, so.verbosity);
    if (so.verbosity >= 1) std::cerr << "listening on http://" << so.host << ":" << so.port << "\n";
    if (!server.listen(so.host, so.port)) throw Error("cannot listen on " + so.host + ":" + std::to_string(so.port));
  });

  // toy-city -------------------------------------------------------------
  auto* toy = app.add_subcommand("toy-city", "write the synthetic demo city");
  std::string t_out;
  toy::ToyCityParams tp;
  toy->add_option("--out", t_out, "directory")->required();
  toy->add_option("--rows", tp.rows);
  toy->add_option("--cols", tp.cols);
  toy->add_option("--seed", tp.seed);
  toy->callback([&] { toy::write_toy_city(toy::generate_toy_city(tp), t_out); });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  } catch (const StepError& e) {
    std::cerr << "error in step " << e.step() << ": " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
