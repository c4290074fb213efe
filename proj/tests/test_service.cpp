#include <gtest/gtest.h>

#include <fstream>
#include <future>
#include <sstream>
#include <thread>

#include "musicvae/service_http.hpp"
#include "musicvae/synthetic.hpp"
#include "support.hpp"

using namespace musicvae;

namespace {

ArchConfig melody_arch() {
  ArchConfig a = testing_support::tiny_arch(DecoderKind::hierarchical, {kMelodyVocab});
  a.steps = 32;
  return a;
}

Container checkpoint(const ArchConfig& arch, bool with_attributes) {
  MusicVae<float> model(arch, 3);
  Container c;
  store_model(c, model);
  if (with_attributes) {
    Rng rng(4);
    std::vector<AttributeVector> vs;
    for (auto k : kAllAttributes) {
      AttributeVector v;
      v.kind = k;
      v.vector = testing_support::random_normal<Eigen::MatrixXd>(arch.latent_dim, 1, rng).col(0);
      vs.push_back(v);
    }
    store_attribute_vectors(c, vs);
  }
  return c;
}

const InferenceService& melody_service() {
  static const InferenceService s(checkpoint(melody_arch(), true));
  return s;
}

json melody_tokens(int seed) {
  const auto x = synthetic::random_melodies(1, 2, static_cast<std::uint64_t>(seed)).at(0);
  return x.streams[0];
}

json call(const InferenceService& s, const std::string& path, const json& body, int expect = 200) {
  const auto r = s.handle("POST", path, body.dump());
  EXPECT_EQ(r.status, expect) << path << ": " << r.body;
  return json::parse(r.body);
}

json schema() {
  std::ifstream in(std::string(MUSICVAE_SCHEMA_DIR) + "/api.schema.json");
  std::stringstream ss;
  ss << in.rdbuf();
  return json::parse(ss.str());
}

void expect_required_fields(const std::string& endpoint, const json& response) {
  const auto s = schema();
  ASSERT_TRUE(s["endpoints"].contains(endpoint)) << endpoint;
  for (const auto& f : s["endpoints"][endpoint]["response"]["required"])
    EXPECT_TRUE(response.contains(f.get<std::string>())) << endpoint << " missing " << f;
}

}  // namespace

TEST(Service, HealthAndConfig) {
  const auto& s = melody_service();
  const auto h = s.handle("GET", "/health", "");
  EXPECT_EQ(h.status, 200);
  const auto hj = json::parse(h.body);
  EXPECT_EQ(hj["status"], "ok");
  EXPECT_EQ(hj["checkpoint"].get<std::string>().size(), 16u);
  expect_required_fields("GET /health", hj);
  const auto c = json::parse(s.handle("GET", "/config", "").body);
  expect_required_fields("GET /config", c);
  EXPECT_EQ(c["latent_dim"], 4);
  EXPECT_EQ(c["streams"], json::array({"melody"}));
  EXPECT_EQ(c["attribute_vectors"].size(), 5u);
  EXPECT_EQ(c["arch"]["decoder"], "hierarchical");
}

TEST(Service, EveryRouteIsInTheSchema) {
  const auto s = schema();
  for (const auto& [m, p] : InferenceService::routes()) EXPECT_TRUE(s["endpoints"].contains(m + " " + p)) << m << " " << p;
  EXPECT_EQ(s["endpoints"].size(), InferenceService::routes().size());
}

TEST(Service, EncodeDecodeRoundTrip) {
  const auto& s = melody_service();
  const auto enc = call(s, "/encode", {{"tokens", melody_tokens(1)}, {"seed", 5}});
  expect_required_fields("POST /encode", enc);
  EXPECT_EQ(enc["mu"].size(), 4u);
  EXPECT_EQ(enc["seed"], 5);
  for (const auto& v : enc["sigma"]) EXPECT_GT(v.get<double>(), 0.0);
  const auto dec = call(s, "/decode", {{"z", enc["mu"]}, {"temperature", 0.0}});
  expect_required_fields("POST /decode", dec);
  EXPECT_EQ(dec["tokens"].size(), 32u);
  EXPECT_EQ(dec["seed"], 0);
  // The decoded tokens agree with the in-process model.
  Vec z(4);
  for (int i = 0; i < 4; ++i) z(i) = enc["mu"][static_cast<std::size_t>(i)].get<double>();
  Rng rng(0);
  const auto direct = s.model().generate(z.cast<float>(), 0.0, rng).at(0);
  EXPECT_EQ(dec["tokens"].get<std::vector<int>>(), direct.streams[0]);
}

TEST(Service, LosslessLatentsRoundTripExactly) {
  const auto& s = melody_service();
  const auto enc = call(s, "/encode", {{"tokens", melody_tokens(2)}, {"lossless", true}});
  ASSERT_TRUE(enc["mu"][0].is_string());
  const auto plain = call(s, "/encode", {{"tokens", melody_tokens(2)}});
  for (std::size_t i = 0; i < 4; ++i)
    EXPECT_EQ(std::strtod(enc["mu"][i].get<std::string>().c_str(), nullptr), plain["mu"][i].get<double>());
  // Strings and numbers decode identically.
  const auto a = call(s, "/decode", {{"z", enc["mu"]}, {"seed", 9}, {"temperature", 1.0}});
  const auto b = call(s, "/decode", {{"z", plain["mu"]}, {"seed", 9}, {"temperature", 1.0}});
  EXPECT_EQ(a, b);
}

TEST(Service, IdenticalRequestsGiveIdenticalBytes) {
  const auto& s = melody_service();
  const std::vector<std::pair<std::string, json>> reqs{
      {"/sample", {{"n", 3}, {"temperature", 1.0}, {"seed", 11}}},
      {"/decode", {{"z", {0.1, -0.2, 0.3, 0.4}}, {"temperature", 1.0}, {"seed", 2}}},
      {"/interpolate", {{"tokensA", melody_tokens(3)}, {"tokensB", melody_tokens(4)}, {"alphas", {0.0, 0.5, 1.0}}, {"seed", 1}}},
      {"/attrs/apply", {{"tokens", melody_tokens(5)}, {"kind", "note_density"}, {"scale", 1.5}, {"seed", 3}}},
  };
  for (const auto& [path, body] : reqs) {
    const auto a = s.handle("POST", path, body.dump());
    const auto b = s.handle("POST", path, body.dump());
    EXPECT_EQ(a.status, 200) << path << a.body;
    EXPECT_EQ(a.body, b.body) << path;
  }
  // A different seed changes sampled output.
  EXPECT_NE(s.handle("POST", "/sample", json{{"n", 3}, {"temperature", 1.0}, {"seed", 12}}.dump()).body,
            s.handle("POST", "/sample", json{{"n", 3}, {"temperature", 1.0}, {"seed", 11}}.dump()).body);
}

TEST(Service, ConcurrentRequestsMatchSerialOnes) {
  const auto& s = melody_service();
  std::vector<std::string> bodies;
  for (int i = 0; i < 8; ++i) bodies.push_back(json{{"n", 2}, {"temperature", 1.0}, {"seed", i}}.dump());
  std::vector<std::string> serial;
  for (const auto& b : bodies) serial.push_back(s.handle("POST", "/sample", b).body);
  std::vector<std::future<std::string>> futs;
  for (const auto& b : bodies) futs.push_back(std::async(std::launch::async, [&s, &b] { return s.handle("POST", "/sample", b).body; }));
  for (std::size_t i = 0; i < bodies.size(); ++i) EXPECT_EQ(futs[i].get(), serial[i]);
}

TEST(Service, InterpolateEndpointsAndShape) {
  const auto& s = melody_service();
  const auto a = melody_tokens(6), b = melody_tokens(7);
  const auto r = call(s, "/interpolate", {{"tokensA", a}, {"tokensB", b}, {"alphas", {0.0, 0.25, 1.0}}, {"temperature", 0.0}});
  expect_required_fields("POST /interpolate", r);
  ASSERT_EQ(r["sequences"].size(), 3u);
  // alpha = 0 decodes A's posterior mean; compare with encode + decode.
  const auto enc = call(s, "/encode", {{"tokens", a}});
  const auto dec = call(s, "/decode", {{"z", enc["mu"]}, {"temperature", 0.0}});
  EXPECT_EQ(r["sequences"][0], dec["tokens"]);
  EXPECT_EQ(call(s, "/interpolate", {{"tokensA", a}, {"tokensB", b}, {"alphas", json::array()}})["sequences"].size(), 0u);
}

TEST(Service, AttributeEndpoints) {
  const auto& s = melody_service();
  const auto m = call(s, "/attrs/measure", {{"tokens", melody_tokens(8)}});
  expect_required_fields("POST /attrs/measure", m);
  const auto x = synthetic::random_melodies(1, 2, 8).at(0);
  EXPECT_DOUBLE_EQ(m["note_density"].get<double>(), measure_tokens(x)[AttributeKind::note_density]);
  const auto ap = call(s, "/attrs/apply", {{"tokens", melody_tokens(8)}, {"kind", "sync8"}, {"scale", 0.0}, {"temperature", 0.0}});
  expect_required_fields("POST /attrs/apply", ap);
  // Scale 0 leaves the latent alone, so before and after agree.
  EXPECT_EQ(ap["measured_before"], ap["measured_after"]);
  const auto z = call(s, "/attrs/apply", {{"z", {0.0, 0.0, 0.0, 0.0}}, {"kind", "c_diatonic"}, {"scale", 1.0}});
  EXPECT_EQ(z["z"].size(), 4u);
}

TEST(Service, ErrorStatuses) {
  const auto& s = melody_service();
  auto status = [&](const std::string& path, const std::string& body) { return s.handle("POST", path, body).status; };
  auto field = [&](const std::string& path, const json& body) { return json::parse(s.handle("POST", path, body.dump()).body).value("field", ""); };
  EXPECT_EQ(status("/encode", "{not json"), 400);
  EXPECT_EQ(status("/encode", "[1,2]"), 400);
  EXPECT_EQ(status("/encode", "{}"), 400);
  EXPECT_EQ(field("/encode", json::object()), "tokens");
  EXPECT_EQ(status("/encode", json{{"tokens", {1, 2, 3}}}.dump()), 422);  // wrong length
  auto bad = melody_tokens(9);
  bad[0] = kMelodyVocab;
  EXPECT_EQ(status("/encode", json{{"tokens", bad}}.dump()), 422);
  EXPECT_EQ(field("/encode", json{{"tokens", bad}}), "tokens");
  EXPECT_EQ(status("/decode", json{{"z", {1.0, 2.0}}}.dump()), 422);
  EXPECT_EQ(status("/decode", json{{"z", {"x", 1, 2, 3}}}.dump()), 400);
  EXPECT_EQ(status("/decode", json{{"z", {1, 2, 3, 4}}, {"seed", -1}}.dump()), 400);
  EXPECT_EQ(status("/decode", json{{"z", {1, 2, 3, 4}}, {"temperature", -1}}.dump()), 422);
  EXPECT_EQ(status("/sample", json{{"n", 1025}}.dump()), 422);
  EXPECT_EQ(status("/sample", json{{"n", -1}}.dump()), 422);
  EXPECT_EQ(status("/sample", json{{"n", 0}}.dump()), 200);
  EXPECT_EQ(status("/attrs/apply", json{{"z", {1, 2, 3, 4}}, {"kind", "loudness"}}.dump()), 422);
  EXPECT_EQ(status("/attrs/apply", json{{"kind", "sync8"}}.dump()), 400);
  EXPECT_EQ(status("/interpolate", json{{"tokensA", melody_tokens(1)}, {"tokensB", melody_tokens(2)}, {"alphas", {1.5}}}.dump()), 422);
  EXPECT_EQ(status("/nowhere", "{}"), 404);
  EXPECT_EQ(s.handle("GET", "/encode", "").status, 405);
  const auto r = s.handle("POST", "/encode", "{");
  EXPECT_TRUE(json::parse(r.body).contains("error"));
}

TEST(Service, InternalErrorsAreOpaque) {
  const auto r = melody_service().report_internal("POST /x", "secret detail");
  EXPECT_EQ(r.status, 500);
  const auto j = json::parse(r.body);
  EXPECT_EQ(j["error"], "internal error");
  EXPECT_EQ(j["id"].get<std::string>().size(), 16u);
  EXPECT_EQ(r.body.find("secret"), std::string::npos);
}

TEST(Service, TrioTokensAndDrumAttributes) {
  const auto trio = testing_support::tiny_arch(DecoderKind::hierarchical, window_vocab(WindowMode::trio16));
  const InferenceService ts(checkpoint(trio, false));
  Rng rng(1);
  const auto x = testing_support::random_tokens(trio, rng);
  const auto enc = call(ts, "/encode", {{"tokens", x.streams}});
  const auto dec = call(ts, "/decode", {{"z", enc["mu"]}});
  ASSERT_EQ(dec["tokens"].size(), 3u);
  EXPECT_EQ(dec["tokens"][2].size(), 8u);
  EXPECT_EQ(call(ts, "/encode", {{"tokens", x.streams[0]}}, 422)["field"], "tokens");
  // No attribute vectors in this checkpoint.
  EXPECT_EQ(ts.handle("POST", "/attrs/apply", json{{"z", enc["mu"]}, {"kind", "sync8"}}.dump()).status, 422);

  auto drums = testing_support::tiny_arch(DecoderKind::flat, {kDrumVocab});
  const InferenceService ds(checkpoint(drums, false));
  const auto d = testing_support::random_tokens(drums, rng);
  EXPECT_EQ(ds.handle("POST", "/attrs/measure", json{{"tokens", d.streams[0]}}.dump()).status, 422);
  EXPECT_EQ(json::parse(ds.handle("GET", "/config", "").body)["streams"], json::array({"drums"}));
}

TEST(Service, ServesOverHttp) {
  const auto& s = melody_service();
  httplib::Server server;
  install_routes(server, s);
  const int port = server.bind_to_any_port("127.0.0.1");
  ASSERT_GT(port, 0);
  std::thread th([&] { server.listen_after_bind(); });
  server.wait_until_ready();
  httplib::Client client("127.0.0.1", port);
  const auto h = client.Get("/health");
  ASSERT_TRUE(h);
  EXPECT_EQ(h->status, 200);
  EXPECT_EQ(h->body, s.handle("GET", "/health", "").body);
  EXPECT_EQ(h->get_header_value("Access-Control-Allow-Origin"), "*");
  const std::string body = json{{"n", 2}, {"temperature", 1.0}, {"seed", 4}}.dump();
  const auto r = client.Post("/sample", body, "application/json");
  ASSERT_TRUE(r);
  EXPECT_EQ(r->status, 200);
  EXPECT_EQ(r->body, s.handle("POST", "/sample", body).body);
  const auto e = client.Post("/decode", "{", "application/json");
  ASSERT_TRUE(e);
  EXPECT_EQ(e->status, 400);
  const auto o = client.Options("/sample");
  ASSERT_TRUE(o);
  EXPECT_EQ(o->status, 204);
  server.stop();
  th.join();
}
