#pragma once

// HTTP binding for InferenceService. Kept separate so that code which only
// needs the request handlers does not pull in the socket library.

#include <string>

// Must precede httplib.h: <resolv.h> defines a `_res` macro that collides
// with parameter names inside Eigen's templates.
#include "musicvae/service.hpp"

#include "httplib.h"

namespace musicvae {

inline void install_routes(httplib::Server& server, const InferenceService& service) {
  // The browser client runs on another origin.
  server.set_default_headers({{"Access-Control-Allow-Origin", "*"},
                              {"Access-Control-Allow-Methods", "GET, POST, OPTIONS"},
                              {"Access-Control-Allow-Headers", "Content-Type"}});
  for (const auto& [method, path] : InferenceService::routes()) {
    const std::string m = method, p = path;
    auto handler = [&service, m, p](const httplib::Request& req, httplib::Response& res) {
      const auto r = service.handle(m, p, req.body);
      res.status = r.status;
      res.set_content(r.body, r.content_type);
    };
    if (m == "GET") server.Get(p, handler);
    else server.Post(p, handler);
  }
  server.Options(R"(/.*)", [](const httplib::Request&, httplib::Response& res) { res.status = 204; });
  server.set_exception_handler([&service](const httplib::Request& req, httplib::Response& res, std::exception_ptr ep) {
    std::string detail = "unknown exception";
    try {
      if (ep) std::rethrow_exception(ep);
    } catch (const std::exception& e) {
      detail = e.what();
    } catch (...) {
    }
    const auto r = service.report_internal(req.method + " " + req.path, detail);
    res.status = 500;
    res.set_content(r.body, r.content_type);
  });
}

}  // namespace musicvae
