#include <atomic>
#include <csignal>
#include <iostream>

#include "musicvae/cli.hpp"
#include "musicvae/service_http.hpp"

namespace {

httplib::Server* g_server = nullptr;

extern "C" void on_signal(int) {
  if (g_server) g_server->stop();
}

int serve(const musicvae::InferenceService& service, const std::string& host, int port, std::ostream& log) {
  httplib::Server server;
  musicvae::install_routes(server, service);
  const int bound = port == 0 ? server.bind_to_any_port(host) : (server.bind_to_port(host, port) ? port : -1);
  if (bound < 0) {
    log << "error: cannot bind " << host << ":" << port << "\n";
    return musicvae::cli::kRuntimeError;
  }
  g_server = &server;
  std::signal(SIGINT, on_signal);
  std::signal(SIGTERM, on_signal);
  log << "serving checkpoint " << service.checkpoint_hash() << " on http://" << host << ":" << bound << std::endl;
  server.listen_after_bind();
  g_server = nullptr;
  return musicvae::cli::kOk;
}

}  // namespace

int main(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return musicvae::cli::run(args, std::cout, std::cerr, serve);
}
