#pragma once

// HTTP front for the service handlers (cpp-httplib). Separate header so the
// core library does not pull in sockets.

#include <cstdlib>
#include <iostream>
#include <memory>
#include <string>

// service.hpp (and Eigen) must come first: httplib pulls in <resolv.h>,
// whose _res macro breaks Eigen headers included after it.
#include "fourstep/service.hpp"

#include <httplib.h>

namespace fourstep::service {

struct ServerOptions {
  std::string host = "127.0.0.1";
  int port = 8080;
  int verbosity = 1;  // 0 silent, 1 request log, 2 internal error detail in 500 bodies
};

// FOURSTEP_PORT and FOURSTEP_VERBOSITY override the given values.
inline ServerOptions apply_env(ServerOptions o) {
  if (const char* p = std::getenv("FOURSTEP_PORT"))
    if (auto v = io::try_parse_int(p); v && *v > 0 && *v < 65536) o.port = static_cast<int>(*v);
  if (const char* v = std::getenv("FOURSTEP_VERBOSITY"))
    if (auto n = io::try_parse_int(v)) o.verbosity = static_cast<int>(*n);
  return o;
}

inline void send(httplib::Response& res, const Response& r) {
  res.status = r.status;
  res.set_content(r.text(), "application/json");
}

// Installs the /api routes on `server`. `state` must outlive it.
inline void install_routes(httplib::Server& server, const AppState& state, int verbosity) {
  server.set_default_headers({{"Access-Control-Allow-Origin", "*"},
                              {"Access-Control-Allow-Methods", "GET, POST, OPTIONS"},
                              {"Access-Control-Allow-Headers", "Content-Type"}});
  server.Options(R"(/api/.*)", [](const httplib::Request&, httplib::Response& res) { res.status = 204; });
  server.Get("/api/health", [&](const httplib::Request&, httplib::Response& res) { send(res, handle_health(state)); });
  server.Get("/api/zones", [&](const httplib::Request&, httplib::Response& res) { send(res, handle_zones(state)); });
  server.Post("/api/predict", [&](const httplib::Request& req, httplib::Response& res) {
    send(res, handle_predict(state, req.body));
  });
  server.set_exception_handler([verbosity](const httplib::Request&, httplib::Response& res, std::exception_ptr ep) {
    std::string detail = "internal error";
    try {
      std::rethrow_exception(ep);
    } catch (const std::exception& e) {
      if (verbosity >= 2) detail = e.what();
    } catch (...) {
    }
    send(res, error_response(500, "internal", detail));
  });
  if (verbosity >= 1)
    server.set_logger([](const httplib::Request& req, const httplib::Response& res) {
      std::cerr << req.method << " " << req.path << " " << res.status << "\n";
    });
}

}  // namespace fourstep::service
