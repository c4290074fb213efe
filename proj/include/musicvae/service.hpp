#pragma once

// JSON inference API over a loaded checkpoint. The service is stateless and
// read-only: clients hold latent vectors, every sampling call takes a seed,
// and identical requests produce byte-identical responses. Routing is
// independent of the transport (see service_http.hpp for the HTTP binding),
// so handlers can be exercised directly.
//
// Token arrays: a flat array for single-stream models, an array of streams
// for trio models. Latent arrays hold numbers, or decimal strings when the
// request sets "lossless": true (strings are accepted on input either way).

#include "json.hpp"

#include <atomic>
#include <cmath>
#include <cstdio>
#include <iostream>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "musicvae/container.hpp"
#include "musicvae/ingest.hpp"
#include "musicvae/latent.hpp"
#include "musicvae/model.hpp"
#include "musicvae/trainer.hpp"

namespace musicvae {

using json = nlohmann::json;

struct ApiResponse {
  int status = 200;
  std::string body;
  std::string content_type = "application/json";
};

/// 400: malformed request (bad JSON, missing or mistyped field).
/// 422: well-formed but inconsistent with the model (dimensions, vocabulary).
class ApiError : public std::runtime_error {
 public:
  ApiError(int status, std::string field, const std::string& msg)
      : std::runtime_error(msg), status_(status), field_(std::move(field)) {}
  int status() const { return status_; }
  const std::string& field() const { return field_; }

 private:
  int status_;
  std::string field_;
};

/// Stream kinds implied by an architecture's vocabularies.
inline std::vector<StreamKind> stream_kinds(const ArchConfig& a) {
  if (a.streams() == 3) return window_kinds(WindowMode::trio16);
  std::vector<StreamKind> out;
  for (int v : a.vocab_sizes) out.push_back(v == kDrumVocab ? StreamKind::drums : StreamKind::melody);
  return out;
}

class InferenceService {
 public:
  static constexpr int kMaxSamples = 1024;
  static constexpr std::size_t kMaxAlphas = 1024;

  /// `checkpoint` must hold a model; attribute vectors are taken from it
  /// when present, or from `attributes` if given.
  explicit InferenceService(const Container& checkpoint, const Container* attributes = nullptr)
      : model_(load_model<float>(checkpoint)),
        hash_(hex64(fnv1a64(checkpoint.serialize().data(), checkpoint.serialize().size()))),
        kinds_(stream_kinds(model_.arch())) {
    attrs_ = load_attribute_vectors(attributes ? *attributes : checkpoint);
    for (const auto& v : attrs_)
      if (v.vector.size() != model_.arch().latent_dim) throw FormatError("attribute vector dimension does not match model");
  }

  const MusicVae<float>& model() const { return model_; }
  const std::string& checkpoint_hash() const { return hash_; }

  /// Every route as (method, path).
  static const std::vector<std::pair<std::string, std::string>>& routes() {
    static const std::vector<std::pair<std::string, std::string>> r{
        {"GET", "/health"},       {"GET", "/config"},          {"POST", "/encode"},       {"POST", "/decode"},
        {"POST", "/interpolate"}, {"POST", "/attrs/apply"},    {"POST", "/attrs/measure"}, {"POST", "/sample"}};
    return r;
  }

  /// Logs an unexpected failure to stderr and returns an opaque 500 whose
  /// id appears in the log line.
  ApiResponse report_internal(const std::string& where, const std::string& detail) const {
    return internal_error(where, detail);
  }

  ApiResponse handle(const std::string& method, const std::string& path, const std::string& body) const {
    try {
      if (method == "GET" && path == "/health") return ok(health());
      if (method == "GET" && path == "/config") return ok(config());
      if (method != "POST") {
        for (const auto& [m, p] : routes())
          if (p == path) return error(405, "", "method not allowed");
        return error(404, "", "no such endpoint " + path);
      }
      const json req = parse(body);
      if (path == "/encode") return ok(encode(req));
      if (path == "/decode") return ok(decode(req));
      if (path == "/interpolate") return ok(interpolate(req));
      if (path == "/attrs/apply") return ok(attrs_apply(req));
      if (path == "/attrs/measure") return ok(attrs_measure(req));
      if (path == "/sample") return ok(sample(req));
      return error(404, "", "no such endpoint " + path);
    } catch (const ApiError& e) {
      return error(e.status(), e.field(), e.what());
    } catch (const std::exception& e) {
      return internal_error(method + " " + path, e.what());
    } catch (...) {
      return internal_error(method + " " + path, "unknown exception");
    }
  }

 private:
  // ---- endpoints --------------------------------------------------------------------

  json health() const { return {{"status", "ok"}, {"checkpoint", hash_}}; }

  json config() const {
    const auto& a = model_.arch();
    KeyValueConfig kv;
    a.write(kv);
    json arch = json::object();
    for (const auto& [k, v] : kv.values()) arch[k.substr(5)] = v;
    json kinds = json::array();
    for (auto k : kinds_) kinds.push_back(to_string(k));
    json attrs = json::array();
    for (const auto& v : attrs_) attrs.push_back(to_string(v.kind));
    return {{"arch", arch},         {"latent_dim", a.latent_dim}, {"steps", a.steps},
            {"segments", a.segments}, {"vocab_sizes", a.vocab_sizes}, {"streams", kinds},
            {"decoder", to_string(a.decoder)}, {"attribute_vectors", attrs}, {"checkpoint", hash_}};
  }

  json encode(const json& req) const {
    const auto x = tokens_field(req, "tokens");
    const auto [mu, sigma] = model_.infer(std::span<const TokenSequence>(&x, 1));
    const bool lossless = flag(req, "lossless");
    return {{"mu", latent_json(mu.col(0).cast<double>(), lossless)},
            {"sigma", latent_json(sigma.col(0).cast<double>(), lossless)},
            {"seed", seed(req)}};
  }

  json decode(const json& req) const {
    const Vec z = latent_field(req, "z");
    const auto out = generate_one(z, temperature(req), seed(req));
    return {{"tokens", tokens_json(out)}, {"seed", seed(req)}};
  }

  json interpolate(const json& req) const {
    const auto a = tokens_field(req, "tokensA");
    const auto b = tokens_field(req, "tokensB");
    if (!req.contains("alphas") || !req["alphas"].is_array()) throw ApiError(400, "alphas", "alphas must be an array of numbers");
    std::vector<double> alphas;
    for (const auto& v : req["alphas"]) {
      if (!v.is_number()) throw ApiError(400, "alphas", "alphas must be an array of numbers");
      const double x = v.get<double>();
      if (!(x >= 0.0 && x <= 1.0)) throw ApiError(422, "alphas", "alphas must lie in [0, 1]");
      alphas.push_back(x);
    }
    if (alphas.size() > kMaxAlphas) throw ApiError(422, "alphas", "at most " + std::to_string(kMaxAlphas) + " alphas");
    const std::vector<TokenSequence> both{a, b};
    const auto mu = model_.infer(both).first;
    const Vec za = mu.col(0).cast<double>(), zb = mu.col(1).cast<double>();
    json seqs = json::array();
    if (!alphas.empty()) {
      MusicVae<float>::Mat z(model_.arch().latent_dim, static_cast<Eigen::Index>(alphas.size()));
      for (std::size_t i = 0; i < alphas.size(); ++i) z.col(static_cast<Eigen::Index>(i)) = interp(za, zb, alphas[i]).cast<float>();
      Rng rng(seed(req));
      for (const auto& x : model_.generate(z, temperature(req), rng)) seqs.push_back(tokens_json(x));
    }
    return {{"sequences", seqs}, {"seed", seed(req)}};
  }

  json attrs_apply(const json& req) const {
    require_melodic();
    Vec z;
    if (req.contains("z")) {
      z = latent_field(req, "z");
    } else if (req.contains("tokens")) {
      const auto x = tokens_field(req, "tokens");
      z = model_.infer(std::span<const TokenSequence>(&x, 1)).first.col(0).cast<double>();
    } else {
      throw ApiError(400, "z", "either z or tokens is required");
    }
    const AttributeKind kind = kind_field(req);
    const AttributeVector* v = nullptr;
    for (const auto& a : attrs_)
      if (a.kind == kind) v = &a;
    if (!v) throw ApiError(422, "kind", "checkpoint has no attribute vector for " + to_string(kind));
    const double scale = number(req, "scale", 1.0);
    if (!std::isfinite(scale)) throw ApiError(400, "scale", "scale must be finite");
    const Vec shifted = apply_attribute(z, *v, scale);
    const auto before = generate_one(z, temperature(req), seed(req));
    const auto after = generate_one(shifted, temperature(req), seed(req));
    const auto parity = parity_field(req);
    return {{"tokens", tokens_json(after)},
            {"z", latent_json(shifted, flag(req, "lossless"))},
            {"measured_before", attributes_json(measure_tokens(before, parity))},
            {"measured_after", attributes_json(measure_tokens(after, parity))},
            {"seed", seed(req)}};
  }

  json attrs_measure(const json& req) const {
    require_melodic();
    const auto x = tokens_field(req, "tokens");
    json out = attributes_json(measure_tokens(x, parity_field(req)));
    out["seed"] = seed(req);
    return out;
  }

  json sample(const json& req) const {
    if (!req.contains("n") || !req["n"].is_number_integer()) throw ApiError(400, "n", "n must be an integer");
    const auto n = req["n"].get<long long>();
    if (n < 0 || n > kMaxSamples) throw ApiError(422, "n", "n must be in [0, " + std::to_string(kMaxSamples) + "]");
    json seqs = json::array();
    for (const auto& x : model_.sample_prior(static_cast<int>(n), temperature(req), seed(req))) seqs.push_back(tokens_json(x));
    return {{"sequences", seqs}, {"seed", seed(req)}};
  }

  // ---- helpers ----------------------------------------------------------------------

  static Vec interp(const Vec& a, const Vec& b, double alpha) {
    // slerp is undefined for a zero endpoint; fall back to a straight line.
    if (a.norm() == 0.0 || b.norm() == 0.0) return (1.0 - alpha) * a + alpha * b;
    return slerp(a, b, alpha);
  }

  TokenSequence generate_one(const Vec& z, double temp, std::uint64_t s) const {
    Rng rng(s);
    return model_.generate(z.cast<float>(), temp, rng).at(0);
  }

  void require_melodic() const {
    if (kinds_.front() == StreamKind::drums) throw ApiError(422, "", "attributes are defined for melodic streams only");
  }

  static json parse(const std::string& body) {
    json j;
    try {
      j = json::parse(body);
    } catch (const json::parse_error& e) {
      throw ApiError(400, "", std::string("malformed JSON: ") + e.what());
    }
    if (!j.is_object()) throw ApiError(400, "", "request body must be a JSON object");
    return j;
  }

  static std::uint64_t seed(const json& req) {
    if (!req.contains("seed")) return 0;
    const auto& s = req["seed"];
    if (!s.is_number_integer() || (s.is_number_integer() && !s.is_number_unsigned() && s.get<long long>() < 0))
      throw ApiError(400, "seed", "seed must be a non-negative integer");
    return s.get<std::uint64_t>();
  }

  static bool flag(const json& req, const char* key) {
    if (!req.contains(key)) return false;
    if (!req[key].is_boolean()) throw ApiError(400, key, std::string(key) + " must be a boolean");
    return req[key].get<bool>();
  }

  static double number(const json& req, const char* key, double fallback) {
    if (!req.contains(key)) return fallback;
    if (!req[key].is_number()) throw ApiError(400, key, std::string(key) + " must be a number");
    return req[key].get<double>();
  }

  static double temperature(const json& req) {
    const double t = number(req, "temperature", 0.5);
    if (!(t >= 0.0 && std::isfinite(t))) throw ApiError(422, "temperature", "temperature must be finite and >= 0");
    return t;
  }

  static SyncParity parity_field(const json& req) {
    if (!req.contains("parity")) return SyncParity::literal;
    if (!req["parity"].is_string()) throw ApiError(400, "parity", "parity must be a string");
    try {
      return parse_sync_parity(req["parity"].get<std::string>());
    } catch (const std::invalid_argument& e) {
      throw ApiError(422, "parity", e.what());
    }
  }

  static AttributeKind kind_field(const json& req) {
    if (!req.contains("kind") || !req["kind"].is_string()) throw ApiError(400, "kind", "kind must be a string");
    try {
      return parse_attribute(req["kind"].get<std::string>());
    } catch (const std::invalid_argument& e) {
      throw ApiError(422, "kind", e.what());
    }
  }

  Vec latent_field(const json& req, const char* key) const {
    if (!req.contains(key) || !req[key].is_array()) throw ApiError(400, key, std::string(key) + " must be an array");
    const auto& arr = req[key];
    Vec z(static_cast<Eigen::Index>(arr.size()));
    for (std::size_t i = 0; i < arr.size(); ++i) {
      const auto& v = arr[i];
      double x;
      if (v.is_number()) {
        x = v.get<double>();
      } else if (v.is_string()) {
        const auto s = v.get<std::string>();
        char* end = nullptr;
        x = std::strtod(s.c_str(), &end);
        if (s.empty() || end != s.c_str() + s.size()) throw ApiError(400, key, std::string(key) + " holds a malformed number");
      } else {
        throw ApiError(400, key, std::string(key) + " must hold numbers");
      }
      if (!std::isfinite(x)) throw ApiError(422, key, std::string(key) + " must be finite");
      z(static_cast<Eigen::Index>(i)) = x;
    }
    if (z.size() != model_.arch().latent_dim)
      throw ApiError(422, key, std::string(key) + " has " + std::to_string(z.size()) + " dimensions, model expects " +
                                   std::to_string(model_.arch().latent_dim));
    return z;
  }

  TokenSequence tokens_field(const json& req, const char* key) const {
    if (!req.contains(key) || !req[key].is_array()) throw ApiError(400, key, std::string(key) + " must be an array");
    const auto& arr = req[key];
    const auto& a = model_.arch();
    std::vector<const json*> streams;
    if (!arr.empty() && arr[0].is_array()) {
      for (const auto& s : arr) streams.push_back(&s);
    } else {
      streams.push_back(&arr);
    }
    if (static_cast<int>(streams.size()) != a.streams())
      throw ApiError(422, key, std::string(key) + " has " + std::to_string(streams.size()) + " streams, model expects " +
                                   std::to_string(a.streams()));
    TokenSequence x;
    for (std::size_t s = 0; s < streams.size(); ++s) {
      const auto& st = *streams[s];
      if (!st.is_array()) throw ApiError(400, key, std::string(key) + " streams must be arrays");
      std::vector<int> t;
      for (const auto& v : st) {
        if (!v.is_number_integer()) throw ApiError(400, key, std::string(key) + " must hold integers");
        const auto tok = v.get<long long>();
        if (tok < 0 || tok >= a.vocab_sizes[s])
          throw ApiError(422, key, "token " + std::to_string(tok) + " outside vocabulary of size " + std::to_string(a.vocab_sizes[s]));
        t.push_back(static_cast<int>(tok));
      }
      if (static_cast<int>(t.size()) != a.steps)
        throw ApiError(422, key, std::string(key) + " has " + std::to_string(t.size()) + " steps, model expects " + std::to_string(a.steps));
      x.streams.push_back(std::move(t));
    }
    return x;
  }

  json tokens_json(const TokenSequence& x) const {
    if (x.streams.size() == 1) return x.streams[0];
    return x.streams;
  }

  static json latent_json(const Vec& v, bool lossless) {
    json out = json::array();
    for (Eigen::Index i = 0; i < v.size(); ++i) {
      if (lossless) {
        char buf[40];
        std::snprintf(buf, sizeof buf, "%.17g", v(i));
        out.push_back(std::string(buf));
      } else {
        out.push_back(v(i));
      }
    }
    return out;
  }

  static json attributes_json(const AttributeValues& a) {
    json out = json::object();
    for (auto k : kAllAttributes) out[to_string(k)] = a[k];
    return out;
  }

  static ApiResponse ok(const json& j) { return {200, j.dump(), "application/json"}; }

  static ApiResponse error(int status, const std::string& field, const std::string& msg) {
    json j{{"error", msg}};
    if (!field.empty()) j["field"] = field;
    return {status, j.dump(), "application/json"};
  }

  ApiResponse internal_error(const std::string& what_request, const std::string& detail) const {
    const auto n = error_counter_.fetch_add(1);
    const std::string id = hex64(fnv1a64(detail.data(), detail.size(), 0xcbf29ce484222325ULL ^ n));
    std::cerr << "internal error " << id << " (" << what_request << "): " << detail << std::endl;
    return {500, json{{"error", "internal error"}, {"id", id}}.dump(), "application/json"};
  }

  MusicVae<float> model_;
  std::string hash_;
  std::vector<StreamKind> kinds_;
  std::vector<AttributeVector> attrs_;
  mutable std::atomic<std::uint64_t> error_counter_{0};
};

}  // namespace musicvae
