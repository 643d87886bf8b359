#include <chrono>
#include <memory>
#include <thread>

#include <gtest/gtest.h>

#include "fourstep/http_server.hpp"
#include "test_util.hpp"

using namespace fourstep;
using namespace fourstep::service;
namespace fs = std::filesystem;

namespace {

const auto kToyDir = testutil::source_dir() / "data" / "toy_city";
const auto kGolden = testutil::source_dir() / "tests" / "golden" / "toy_city";
const auto kSchemas = testutil::source_dir() / "schemas";

// Just enough of JSON Schema for the shipped files: type, enum, const,
// required, properties, additionalProperties, items, min/maxItems,
// minimum/maximum and local $ref.
class SchemaCheck {
 public:
  explicit SchemaCheck(const fs::path& file) : root_(json::parse(io::read_file(file))) {}

  std::vector<std::string> errors(const json& v) const {
    std::vector<std::string> out;
    check(root_, v, "$", out);
    return out;
  }

 private:
  static bool type_ok(const std::string& t, const json& v) {
    if (t == "object") return v.is_object();
    if (t == "array") return v.is_array();
    if (t == "string") return v.is_string();
    if (t == "boolean") return v.is_boolean();
    if (t == "integer") return v.is_number_integer();
    if (t == "number") return v.is_number();
    if (t == "null") return v.is_null();
    return false;
  }

  const json& resolve(const json& s) const {
    if (!s.contains("$ref")) return s;
    const auto ref = s["$ref"].get<std::string>();
    return root_.at(json::json_pointer(ref.substr(1)));
  }

  void check(const json& schema_in, const json& v, const std::string& at, std::vector<std::string>& out) const {
    const json& s = resolve(schema_in);
    if (s.contains("type")) {
      bool ok = false;
      if (s["type"].is_array()) {
        for (const auto& t : s["type"]) ok = ok || type_ok(t, v);
      } else {
        ok = type_ok(s["type"], v);
      }
      if (!ok) {
        out.push_back(at + ": wrong type");
        return;
      }
    }
    if (s.contains("const") && s["const"] != v) out.push_back(at + ": const mismatch");
    if (s.contains("enum")) {
      bool found = false;
      for (const auto& e : s["enum"]) found = found || (e == v && e.type() == v.type());
      if (!found) out.push_back(at + ": not in enum");
    }
    if (v.is_number()) {
      if (s.contains("minimum") && v.get<double>() < s["minimum"].get<double>()) out.push_back(at + ": below minimum");
      if (s.contains("maximum") && v.get<double>() > s["maximum"].get<double>()) out.push_back(at + ": above maximum");
    }
    if (v.is_object()) {
      for (const auto& r : s.value("required", json::array()))
        if (!v.contains(r.get<std::string>())) out.push_back(at + ": missing " + r.get<std::string>());
      const auto props = s.value("properties", json::object());
      for (auto it = v.begin(); it != v.end(); ++it) {
        if (props.contains(it.key())) check(props[it.key()], it.value(), at + "." + it.key(), out);
        else if (s.value("additionalProperties", true) == false) out.push_back(at + ": unexpected " + it.key());
      }
    }
    if (v.is_array()) {
      if (s.contains("minItems") && v.size() < s["minItems"].get<std::size_t>()) out.push_back(at + ": too few items");
      if (s.contains("maxItems") && v.size() > s["maxItems"].get<std::size_t>()) out.push_back(at + ": too many items");
      if (s.contains("items"))
        for (std::size_t i = 0; i < v.size(); ++i) check(s["items"], v[i], at + "[" + std::to_string(i) + "]", out);
    }
  }

  json root_;
};

std::string joined(const std::vector<std::string>& v) {
  std::string s;
  for (const auto& e : v) s += e + "\n";
  return s;
}

#define EXPECT_VALID(schema, value)                                              \
  do {                                                                           \
    const auto errs_ = SchemaCheck(kSchemas / (schema)).errors(value);           \
    EXPECT_TRUE(errs_.empty()) << joined(errs_);                                 \
  } while (0)

void copy_dir(const fs::path& from, const fs::path& to) {
  fs::create_directories(to);
  for (const auto& e : fs::directory_iterator(from)) fs::copy_file(e.path(), to / e.path().filename());
}

}  // namespace

class Service : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    bundle_ = std::make_unique<fs::path>(fs::temp_directory_path() / ("fourstep_service_bundle_" + std::to_string(::getpid())));
    fs::remove_all(*bundle_);
    result_ = std::make_unique<pipeline::PipelineResult>(
        pipeline::run_pipeline(pipeline::load_scenario(kToyDir / "scenario.json")));
    pipeline::write_outputs(*result_, *bundle_);
    state_ = std::make_unique<AppState>(load_bundle(*bundle_));
  }
  static void TearDownTestSuite() {
    state_.reset();
    result_.reset();
    std::error_code ec;
    fs::remove_all(*bundle_, ec);
    bundle_.reset();
  }

  static const AppState& state() { return *state_; }

  static std::unique_ptr<fs::path> bundle_;
  static std::unique_ptr<pipeline::PipelineResult> result_;
  static std::unique_ptr<AppState> state_;
};

std::unique_ptr<fs::path> Service::bundle_;
std::unique_ptr<pipeline::PipelineResult> Service::result_;
std::unique_ptr<AppState> Service::state_;

TEST_F(Service, LoadsToyBundleAndReportsHealth) {
  EXPECT_TRUE(state().ready);
  EXPECT_EQ(state().zones.size(), 9u);
  EXPECT_EQ(state().trees.size(), 9u);
  const auto h = handle_health(state());
  EXPECT_EQ(h.status, 200);
  EXPECT_EQ(h.body["status"], "ok");
  EXPECT_EQ(h.body["model_versions"]["graph"], version_of(io::read_file(*bundle_ / "graph.json")));
  EXPECT_VALID("health.schema.json", h.body);

  const AppState empty;
  EXPECT_EQ(handle_health(empty).status, 503);
  EXPECT_VALID("health.schema.json", handle_health(empty).body);
}

TEST_F(Service, MissingGraphNamesThePath) {
  testutil::TempDir dir;
  copy_dir(*bundle_, dir / "b");
  fs::remove(dir / "b" / "graph.json");
  try {
    load_bundle(dir / "b");
    FAIL();
  } catch (const ParseError& e) {
    EXPECT_NE(std::string(e.what()).find((dir / "b" / "graph.json").string()), std::string::npos) << e.what();
  }
  EXPECT_THROW(load_bundle(dir / "nowhere"), ParseError);
}

TEST_F(Service, MismatchedFeatureArityIsAVersionError) {
  testutil::TempDir dir;
  copy_dir(*bundle_, dir / "b");
  auto mode = json::parse(io::read_file(dir / "b" / "mode_model.json"));
  for (const char* key : {"feature_names", "likelihoods", "value_counts"}) mode[key].erase(mode[key].size() - 1);
  io::write_file(dir / "b" / "mode_model.json", mode.dump());
  // The cut model is itself well formed.
  EXPECT_NO_THROW(modechoice::load_nb_model(dir / "b" / "mode_model.json"));
  EXPECT_THROW(load_bundle(dir / "b"), VersionMismatch);

  auto manifest = json::parse(io::read_file(*bundle_ / "bundle.json"));
  manifest["format_version"] = 99;
  copy_dir(*bundle_, dir / "c");
  io::write_file(dir / "c" / "bundle.json", manifest.dump());
  EXPECT_THROW(load_bundle(dir / "c"), VersionMismatch);
}

TEST_F(Service, PredictEqualsDirectLibraryComposition) {
  const auto& r = *result_;
  const auto ids = r.zones.ids();
  Rng rng(5);
  for (int rep = 0; rep < 20; ++rep) {
    std::array<int, 5> profile{};
    for (auto& b : profile) b = int(rng.below(2));
    const std::size_t o = rng.below(ids.size());
    const int k = 1 + int(rng.below(9));
    const auto res = handle_predict(state(), PredictRequest{profile, ids[o], k});
    ASSERT_EQ(res.status, 200) << res.text();

    // Direct composition over the in-memory pipeline result.
    std::vector<double> x = {double(profile[0]), double(profile[1]), double(profile[2]), double(profile[3]),
                             double(profile[4])};
    const double trips = std::max(0.0, r.trip_model->predict(x));
    std::vector<int> cats(profile.begin(), profile.end());
    const auto post = modechoice::posterior(*r.mode_model, cats);
    double row = 0;
    for (std::size_t j = 0; j < ids.size(); ++j) row += r.od(o, j);
    std::vector<std::pair<double, std::size_t>> shares;
    for (std::size_t j = 0; j < ids.size(); ++j)
      if (r.od(o, j) > 0) shares.push_back({r.od(o, j) / row, j});
    std::stable_sort(shares.begin(), shares.end(), [](auto& a, auto& b) { return a.first > b.first; });
    shares.resize(std::min<std::size_t>(shares.size(), std::size_t(k)));
    const auto tree = routing::dijkstra(r.graph, r.graph.anchor(ids[o]));

    const auto& b = res.body;
    EXPECT_EQ(b["monthly_trips"].get<double>(), trips);
    ASSERT_EQ(b["mode_probabilities"].size(), post.size());
    double total = 0;
    for (std::size_t m = 0; m < post.size(); ++m) {
      EXPECT_EQ(b["mode_probabilities"][m]["mode"], r.mode_model->modes()[m]);
      EXPECT_EQ(b["mode_probabilities"][m]["probability"].get<double>(), post[m]);
      total += post[m];
    }
    EXPECT_NEAR(total, 1.0, 1e-9);
    ASSERT_EQ(b["destinations"].size(), shares.size());
    for (std::size_t d = 0; d < shares.size(); ++d) {
      const auto& dest = b["destinations"][d];
      const auto j = shares[d].second;
      EXPECT_EQ(dest["zone_id"], ids[j]);
      EXPECT_EQ(dest["share"].get<double>(), shares[d].first);
      EXPECT_EQ(dest["travel_seconds"].get<double>(), r.skim(o, j));
      EXPECT_EQ(dest["mode_probabilities"], b["mode_probabilities"]);
      const auto path = routing::trace_path(tree, r.graph.anchor(ids[j]), r.graph);
      EXPECT_EQ(dest["route"], routing::route_feature(path, r.graph));
    }
    EXPECT_VALID("predict_response.schema.json", b);
  }
}

TEST_F(Service, GoldenRequestIsByteStable) {
  const auto request = io::read_file(kGolden / "predict_request.json");
  EXPECT_VALID("predict_request.schema.json", json::parse(request));
  const auto first = handle_predict(state(), std::string_view(request));
  ASSERT_EQ(first.status, 200);
  for (int i = 0; i < 5; ++i) EXPECT_EQ(handle_predict(state(), std::string_view(request)).text(), first.text());
  // A freshly loaded bundle answers identically.
  EXPECT_EQ(handle_predict(load_bundle(*bundle_), std::string_view(request)).text(), first.text());
  EXPECT_EQ(first.text() + "\n", io::read_file(kGolden / "predict_response.json"));
}

TEST_F(Service, TopKClampsWithoutPadding) {
  const auto res = handle_predict(state(), PredictRequest{{1, 0, 1, 1, 0}, "Z5", 500});
  ASSERT_EQ(res.status, 200);
  std::size_t positive = 0;
  for (std::size_t j = 0; j < state().zones.size(); ++j) positive += state().od(4, j) > 0;
  EXPECT_EQ(res.body["destinations"].size(), positive);
  EXPECT_LE(positive, 9u);
  double sum = 0;
  for (std::size_t d = 0; d < res.body["destinations"].size(); ++d) {
    const double s = res.body["destinations"][d]["share"];
    sum += s;
    if (d) {
      EXPECT_GE(res.body["destinations"][d - 1]["share"].get<double>(), s);
    }
  }
  EXPECT_NEAR(sum, 1.0, 1e-12);

  const auto one = handle_predict(state(), PredictRequest{{1, 0, 1, 1, 0}, "Z5", 1});
  ASSERT_EQ(one.body["destinations"].size(), 1u);
  EXPECT_EQ(one.body["destinations"][0], res.body["destinations"][0]);
  EXPECT_EQ(handle_predict(state(), std::string_view(R"({"profile":[1,0,1,1,0],"origin_zone":"Z5"})"))
                .body["destinations"]
                .size(),
            std::min<std::size_t>(positive, kDefaultTopK));
}

TEST_F(Service, AllZeroProfileIsWellFormed) {
  const auto res = handle_predict(state(), std::string_view(R"({"profile":[0,0,0,0,0],"origin_zone":"Z1"})"));
  ASSERT_EQ(res.status, 200);
  double total = 0;
  for (const auto& m : res.body["mode_probabilities"]) total += m["probability"].get<double>();
  EXPECT_NEAR(total, 1.0, 1e-9);
  EXPECT_GE(res.body["monthly_trips"].get<double>(), 0.0);
  EXPECT_VALID("predict_response.schema.json", res.body);
  // Booleans are accepted as 0/1.
  EXPECT_EQ(handle_predict(state(), std::string_view(
                                        R"({"profile":[false,false,false,false,false],"origin_zone":"Z1"})"))
                .text(),
            res.text());
}

TEST_F(Service, BadRequestsCarryFieldDiagnostics) {
  auto fields_of = [](const Response& r) {
    std::vector<std::string> f;
    for (const auto& e : r.body["error"]["fields"]) f.push_back(e["field"]);
    return f;
  };
  const auto garbage = handle_predict(state(), std::string_view("{not json"));
  EXPECT_EQ(garbage.status, 400);
  EXPECT_EQ(garbage.body["error"]["code"], "malformed_body");
  EXPECT_VALID("error.schema.json", garbage.body);

  const auto many = handle_predict(state(), std::string_view(R"({"profile":[0,2,0,"x",1],"top_k":0,"extra":1})"));
  EXPECT_EQ(many.status, 400);
  EXPECT_EQ(fields_of(many), (std::vector<std::string>{"origin_zone", "profile[1]", "profile[3]", "top_k", "extra"}));
  EXPECT_VALID("error.schema.json", many.body);

  EXPECT_EQ(fields_of(handle_predict(state(), std::string_view(R"({"profile":[0,1],"origin_zone":7})"))),
            (std::vector<std::string>{"origin_zone", "profile"}));
  EXPECT_EQ(fields_of(handle_predict(state(), std::string_view("[1,2]"))), (std::vector<std::string>{"body"}));

  const auto unknown = handle_predict(state(), std::string_view(R"({"profile":[0,0,0,0,0],"origin_zone":"Z99"})"));
  EXPECT_EQ(unknown.status, 400);
  EXPECT_EQ(unknown.body["error"]["code"], "unknown_zone");
  EXPECT_VALID("error.schema.json", unknown.body);

  // No paths in any of these bodies.
  for (const auto* r : {&garbage, &many, &unknown}) EXPECT_EQ(r->text().find(bundle_->string()), std::string::npos);

  const AppState loading;
  for (const auto& r : {handle_predict(loading, std::string_view("{}")), handle_zones(loading)}) {
    EXPECT_EQ(r.status, 503);
    EXPECT_EQ(r.body["error"]["code"], "not_ready");
    EXPECT_VALID("error.schema.json", r.body);
  }
}

TEST_F(Service, ZonesInRegistryOrderWithExactCoordinates) {
  const auto res = handle_zones(state());
  ASSERT_EQ(res.status, 200);
  EXPECT_VALID("zones.schema.json", res.body);
  const auto registry = load_zones(kToyDir / "zones.csv");
  const auto& zones = res.body["zones"];
  ASSERT_EQ(zones.size(), registry.size());
  // Through text and back, as a client sees it.
  const auto parsed = json::parse(res.text())["zones"];
  for (std::size_t i = 0; i < registry.size(); ++i) {
    EXPECT_EQ(parsed[i]["zone_id"], registry[i].id);
    EXPECT_EQ(parsed[i]["name"], registry[i].name);
    EXPECT_EQ(parsed[i]["lat"].get<double>(), registry[i].lat);
    EXPECT_EQ(parsed[i]["lon"].get<double>(), registry[i].lon);
    const auto& anchor = state().graph.node(state().graph.anchor(registry[i].id));
    EXPECT_EQ(parsed[i]["anchor"]["node_id"], anchor.id);
  }
}

TEST_F(Service, HttpRoutesCorsAndConcurrentClients) {
  httplib::Server server;
  install_routes(server, state(), 0);
  const int port = server.bind_to_any_port("127.0.0.1");
  ASSERT_GT(port, 0);
  std::thread th([&] { server.listen_after_bind(); });
  server.wait_until_ready();

  const auto request = io::read_file(kGolden / "predict_request.json");
  const auto expected = handle_predict(state(), std::string_view(request)).text();
  {
    httplib::Client cli("127.0.0.1", port);
    auto h = cli.Get("/api/health");
    ASSERT_TRUE(h);
    EXPECT_EQ(h->status, 200);
    EXPECT_EQ(h->get_header_value("Access-Control-Allow-Origin"), "*");
    EXPECT_EQ(h->get_header_value("Content-Type"), "application/json");

    auto z = cli.Get("/api/zones");
    ASSERT_TRUE(z);
    EXPECT_EQ(z->body, handle_zones(state()).text());

    auto opt = cli.Options("/api/predict");
    ASSERT_TRUE(opt);
    EXPECT_EQ(opt->status, 204);
    EXPECT_NE(opt->get_header_value("Access-Control-Allow-Methods").find("POST"), std::string::npos);

    auto bad = cli.Post("/api/predict", "{", "application/json");
    ASSERT_TRUE(bad);
    EXPECT_EQ(bad->status, 400);
  }
  std::vector<std::thread> clients;
  std::vector<std::string> bodies(4);
  for (std::size_t c = 0; c < bodies.size(); ++c)
    clients.emplace_back([&, c] {
      httplib::Client cli("127.0.0.1", port);
      for (int i = 0; i < 5; ++i) {
        auto r = cli.Post("/api/predict", request, "application/json");
        if (!r || r->status != 200 || (i && r->body != bodies[c])) {
          bodies[c] = "mismatch";
          return;
        }
        bodies[c] = r->body;
      }
    });
  for (auto& t : clients) t.join();
  for (const auto& b : bodies) EXPECT_EQ(b, expected);

  server.stop();
  th.join();
}

TEST(ServiceEnv, PortAndVerbosityOverrides) {
  ::setenv("FOURSTEP_PORT", "9123", 1);
  ::setenv("FOURSTEP_VERBOSITY", "2", 1);
  const auto o = apply_env({});
  EXPECT_EQ(o.port, 9123);
  EXPECT_EQ(o.verbosity, 2);
  ::setenv("FOURSTEP_PORT", "99999", 1);
  EXPECT_EQ(apply_env({}).port, 8080);
  ::unsetenv("FOURSTEP_PORT");
  ::unsetenv("FOURSTEP_VERBOSITY");
}
