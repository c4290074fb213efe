#pragma once

// Recurrent VAE over token sequences: a two-layer bidirectional LSTM
// encoder, and either a flat autoregressive LSTM decoder or a hierarchical
// decoder in which a conductor LSTM emits one embedding per segment and a
// bottom LSTM decodes each segment from that embedding alone.

#include <cmath>
#include <cstdint>
#include <numeric>
#include <optional>
#include <tuple>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "musicvae/autodiff.hpp"
#include "musicvae/codec.hpp"
#include "musicvae/config.hpp"
#include "musicvae/lstm.hpp"
#include "musicvae/params.hpp"
#include "musicvae/rng.hpp"

namespace musicvae {

using nn::Var;

enum class DecoderKind { flat, hierarchical };

inline std::string to_string(DecoderKind k) { return k == DecoderKind::flat ? "flat" : "hierarchical"; }

inline DecoderKind parse_decoder_kind(const std::string& s) {
  if (s == "flat") return DecoderKind::flat;
  if (s == "hierarchical") return DecoderKind::hierarchical;
  throw ConfigError("unknown decoder kind '" + s + "'");
}

struct ArchConfig {
  int latent_dim = 16;
  int encoder_hidden = 64;
  int encoder_layers = 2;
  int conductor_hidden = 64;
  int conductor_layers = 2;
  int conductor_embedding = 64;
  int decoder_hidden = 64;
  int decoder_layers = 2;
  int embedding_dim = 0;  // 0: decoder_hidden / 4
  int steps = 32;         // T
  int segments = 2;       // U
  std::vector<int> vocab_sizes{kMelodyVocab};
  DecoderKind decoder = DecoderKind::hierarchical;

  bool operator==(const ArchConfig&) const = default;

  int streams() const { return static_cast<int>(vocab_sizes.size()); }
  int token_embedding() const { return embedding_dim > 0 ? embedding_dim : std::max(1, decoder_hidden / 4); }
  int segment_length() const { return steps / segments; }
  int total_vocab() const { return std::accumulate(vocab_sizes.begin(), vocab_sizes.end(), 0); }

  void validate() const {
    auto positive = [](int v, const char* name) {
      if (v <= 0) throw ConfigError(std::string("arch: ") + name + " must be positive");
    };
    positive(latent_dim, "latent_dim");
    positive(encoder_hidden, "encoder_hidden");
    positive(encoder_layers, "encoder_layers");
    positive(decoder_hidden, "decoder_hidden");
    positive(decoder_layers, "decoder_layers");
    positive(steps, "steps");
    positive(segments, "segments");
    if (decoder == DecoderKind::hierarchical) {
      positive(conductor_hidden, "conductor_hidden");
      positive(conductor_layers, "conductor_layers");
      positive(conductor_embedding, "conductor_embedding");
    }
    if (steps % segments != 0) throw ConfigError("arch: steps must be divisible by segments");
    if (vocab_sizes.empty()) throw ConfigError("arch: at least one stream required");
    for (int v : vocab_sizes)
      if (v < 2) throw ConfigError("arch: vocabulary sizes must be >= 2");
  }

  void write(KeyValueConfig& kv) const {
    kv.set("arch.latent_dim", latent_dim);
    kv.set("arch.encoder_hidden", encoder_hidden);
    kv.set("arch.encoder_layers", encoder_layers);
    kv.set("arch.conductor_hidden", conductor_hidden);
    kv.set("arch.conductor_layers", conductor_layers);
    kv.set("arch.conductor_embedding", conductor_embedding);
    kv.set("arch.decoder_hidden", decoder_hidden);
    kv.set("arch.decoder_layers", decoder_layers);
    kv.set("arch.embedding_dim", embedding_dim);
    kv.set("arch.steps", steps);
    kv.set("arch.segments", segments);
    std::string vs;
    for (std::size_t i = 0; i < vocab_sizes.size(); ++i) vs += (i ? "," : "") + std::to_string(vocab_sizes[i]);
    kv.set("arch.vocab_sizes", vs);
    kv.set("arch.decoder", to_string(decoder));
  }

  static ArchConfig read(const KeyValueConfig& kv) { return read(kv, ArchConfig{}); }

  static ArchConfig read(const KeyValueConfig& kv, ArchConfig a) {
    auto i = [&](const char* key, int fallback) { return static_cast<int>(kv.get_int(key, fallback)); };
    a.latent_dim = i("arch.latent_dim", a.latent_dim);
    a.encoder_hidden = i("arch.encoder_hidden", a.encoder_hidden);
    a.encoder_layers = i("arch.encoder_layers", a.encoder_layers);
    a.conductor_hidden = i("arch.conductor_hidden", a.conductor_hidden);
    a.conductor_layers = i("arch.conductor_layers", a.conductor_layers);
    a.conductor_embedding = i("arch.conductor_embedding", a.conductor_embedding);
    a.decoder_hidden = i("arch.decoder_hidden", a.decoder_hidden);
    a.decoder_layers = i("arch.decoder_layers", a.decoder_layers);
    a.embedding_dim = i("arch.embedding_dim", a.embedding_dim);
    a.steps = i("arch.steps", a.steps);
    a.segments = i("arch.segments", a.segments);
    a.vocab_sizes = kv.get_int_list("arch.vocab_sizes", a.vocab_sizes);
    a.decoder = parse_decoder_kind(kv.get_string("arch.decoder", to_string(a.decoder)));
    a.validate();
    return a;
  }
};

/// Splits x into U contiguous equal-length pieces; piece u spans
/// [u*T/U, (u+1)*T/U).
template <typename Seq>
std::vector<Seq> segment(const Seq& x, int segments) {
  const auto total = static_cast<int>(x.size());
  if (segments <= 0 || total % segments != 0)
    throw std::invalid_argument("segment: length " + std::to_string(total) + " not divisible by " +
                                std::to_string(segments));
  const int len = total / segments;
  std::vector<Seq> out;
  for (int u = 0; u < segments; ++u) out.emplace_back(x.begin() + u * len, x.begin() + (u + 1) * len);
  return out;
}

/// Draws a token from softmax(logits / temperature). Temperature 0 selects
/// the first maximal entry.
template <typename Col>
int sample_token(const Col& logits, double temperature, Rng& rng) {
  const auto n = logits.size();
  Eigen::Index best = 0;
  for (Eigen::Index i = 1; i < n; ++i)
    if (logits(i) > logits(best)) best = i;
  if (temperature <= 0.0) return static_cast<int>(best);
  const double m = static_cast<double>(logits(best));
  std::vector<double> w(static_cast<std::size_t>(n));
  double total = 0.0;
  for (Eigen::Index i = 0; i < n; ++i) {
    w[static_cast<std::size_t>(i)] = std::exp((static_cast<double>(logits(i)) - m) / temperature);
    total += w[static_cast<std::size_t>(i)];
  }
  double u = rng.uniform() * total;
  for (Eigen::Index i = 0; i < n; ++i) {
    u -= w[static_cast<std::size_t>(i)];
    if (u < 0.0) return static_cast<int>(i);
  }
  return static_cast<int>(best);
}

enum class DecodeMode { teacher_forced, sampled, scheduled };

struct DecodeOptions {
  DecodeMode mode = DecodeMode::teacher_forced;
  double temperature = 1.0;     // for sampled tokens; 0 means argmax
  double teacher_prob = 1.0;    // scheduled: probability of feeding the ground truth
  bool per_sequence_coin = false;
  Rng* rng = nullptr;
};

template <typename T>
class MusicVae {
 public:
  using Mat = nn::Matrix<T>;

  struct Posterior {
    Var mu;
    Var sigma;
  };

  struct Decoded {
    std::vector<Var> logits;             // per stream: V_s x (T*B), column t*B + b
    std::vector<TokenSequence> tokens;   // emitted tokens (argmax when teacher forced)
    std::vector<Var> conductor;          // c_u, each E x B (hierarchical only)
  };

  struct LossResult {
    Var total;
    Var recon_per_example;  // 1 x B
    Var kl_per_example;     // 1 x B
    double total_value = 0.0;
    double recon = 0.0;     // batch means, nats
    double kl = 0.0;
    double penalty = 0.0;   // beta * max(kl - tau, 0), batch mean
    double accuracy = 0.0;
    std::vector<TokenSequence> outputs;
  };

  MusicVae(ArchConfig arch, std::uint64_t seed) : arch_(std::move(arch)) {
    arch_.validate();
    Rng rng(derive_seed(seed, 0x1417));
    build(rng);
  }

  /// Adopts trained parameters; shapes must match the architecture.
  MusicVae(ArchConfig arch, nn::ParamSet<T> params) : arch_(std::move(arch)) {
    arch_.validate();
    Rng rng(0);
    build(rng);
    if (params.size() != params_.size()) throw std::invalid_argument("parameter count does not match architecture");
    for (auto& p : params_) {
      if (!params.contains(p.name)) throw std::invalid_argument("missing parameter " + p.name);
      const auto& src = params[p.name];
      if (src.value.rows() != p.value.rows() || src.value.cols() != p.value.cols())
        throw std::invalid_argument("shape mismatch for parameter " + p.name);
      p.value = src.value;
    }
  }

  const ArchConfig& arch() const { return arch_; }
  nn::ParamSet<T>& params() { return params_; }
  const nn::ParamSet<T>& params() const { return params_; }

  // ---- encoder ------------------------------------------------------------

  Posterior encode(nn::Graph<T>& g, std::span<const TokenSequence> batch) const {
    check_batch(batch);
    const int T_ = arch_.steps;
    const auto B = static_cast<Eigen::Index>(batch.size());
    const int H = arch_.encoder_hidden;

    std::vector<std::vector<Var>> fw_out;
    std::vector<std::vector<Var>> bw_out;
    Var fw_last;
    Var bw_last;
    for (int layer = 0; layer < arch_.encoder_layers; ++layer) {
      std::vector<Var> inputs[2];
      for (int dir = 0; dir < 2; ++dir) {
        const std::string prefix = "encoder.l" + std::to_string(layer + 1) + (dir == 0 ? ".fw" : ".bw");
        const Var b = g.param(params_[prefix + ".b"]);
        Var projected;
        if (layer == 0) {
          // One-hot inputs: Wx * onehot is a column gather; streams use
          // disjoint column ranges and their contributions add.
          const Var wx = g.param(params_[prefix + ".Wx"]);
          int offset = 0;
          for (int s = 0; s < arch_.streams(); ++s) {
            std::vector<int> idx(static_cast<std::size_t>(T_ * B));
            for (int t = 0; t < T_; ++t)
              for (Eigen::Index j = 0; j < B; ++j)
                idx[static_cast<std::size_t>(t * B + j)] =
                    batch[static_cast<std::size_t>(j)].streams[static_cast<std::size_t>(s)][static_cast<std::size_t>(t)] + offset;
            const Var part = g.gather_cols(wx, idx);
            projected = projected.valid() ? g.add(projected, part) : part;
            offset += arch_.vocab_sizes[static_cast<std::size_t>(s)];
          }
          projected = g.add_bias(projected, b);
        } else {
          std::vector<Var> cols;
          cols.reserve(static_cast<std::size_t>(T_));
          for (int t = 0; t < T_; ++t)
            cols.push_back(g.concat_rows({fw_out[static_cast<std::size_t>(layer - 1)][static_cast<std::size_t>(t)],
                                          bw_out[static_cast<std::size_t>(layer - 1)][static_cast<std::size_t>(t)]}));
          projected = g.linear(g.param(params_[prefix + ".Wx"]), g.concat_cols(cols), b);
        }
        for (int t = 0; t < T_; ++t) inputs[dir].push_back(g.slice_cols(projected, t * B, B));
      }
      const Var zero = g.constant(Mat::Zero(H, B));
      std::vector<Var> outs[2];
      for (int dir = 0; dir < 2; ++dir) {
        const std::string prefix = "encoder.l" + std::to_string(layer + 1) + (dir == 0 ? ".fw" : ".bw");
        const Var wh = g.param(params_[prefix + ".Wh"]);
        Var h = zero;
        Var c = zero;
        outs[dir].assign(static_cast<std::size_t>(T_), Var{});
        for (int k = 0; k < T_; ++k) {
          const int t = dir == 0 ? k : T_ - 1 - k;
          const Var pre = g.lstm_preact({inputs[dir][static_cast<std::size_t>(t)]}, wh, h);
          std::tie(h, c) = g.lstm_cell(pre, c);
          outs[dir][static_cast<std::size_t>(t)] = h;
        }
        (dir == 0 ? fw_last : bw_last) = h;
      }
      fw_out.push_back(std::move(outs[0]));
      bw_out.push_back(std::move(outs[1]));
    }
    const Var h_final = g.concat_rows({fw_last, bw_last});
    const Var mu = g.linear(g.param(params_["encoder.mu.W"]), h_final, g.param(params_["encoder.mu.b"]));
    const Var sigma =
        g.softplus(g.linear(g.param(params_["encoder.sigma.W"]), h_final, g.param(params_["encoder.sigma.b"])));
    return {mu, sigma};
  }

  /// z = mu + sigma * epsilon.
  Var reparameterize(nn::Graph<T>& g, Var mu, Var sigma, const Mat& epsilon) const {
    return g.add(mu, g.mul(sigma, g.constant(epsilon)));
  }

  // ---- decoders ---------------------------------------------------------------

  /// Decodes T steps from z. `targets` is required for teacher-forced and
  /// scheduled modes (its size fixes the batch); in sampled mode the batch
  /// size is taken from z.
  Decoded decode(nn::Graph<T>& g, Var z, std::span<const TokenSequence> targets, const DecodeOptions& opt) const {
    if (g.value(z).rows() != arch_.latent_dim) throw nn::ShapeError("decode: latent dimension mismatch");
    if (opt.mode != DecodeMode::sampled) {
      if (targets.empty()) throw std::invalid_argument("decode: targets required for teacher-forced/scheduled decoding");
      check_batch(targets);
      if (static_cast<Eigen::Index>(targets.size()) != g.value(z).cols())
        throw nn::ShapeError("decode: batch size of targets and z differ");
    }
    if (opt.mode != DecodeMode::teacher_forced && opt.rng == nullptr)
      throw std::invalid_argument("decode: sampling requires an rng");
    return arch_.decoder == DecoderKind::flat ? decode_flat(g, z, targets, opt) : decode_hierarchical(g, z, targets, opt);
  }

  /// Conductor embeddings c_1..c_U for latent z (hierarchical only).
  std::vector<Var> conductor(nn::Graph<T>& g, Var z) const {
    if (arch_.decoder != DecoderKind::hierarchical) throw std::logic_error("conductor: model is flat");
    const auto B = g.value(z).cols();
    const int Hc = arch_.conductor_hidden;
    auto state = initial_state(g, "conductor.init", z, arch_.conductor_layers, Hc);
    std::vector<Var> out;
    const Var zeros = g.constant(Mat::Zero(4 * Hc, B));
    for (int u = 0; u < arch_.segments; ++u) {
      Var below;
      for (int l = 0; l < arch_.conductor_layers; ++l) {
        const std::string p = "conductor.l" + std::to_string(l + 1);
        Var term = l == 0 ? g.add_bias(zeros, g.param(params_[p + ".b"]))
                          : g.linear(g.param(params_[p + ".Wx"]), below, g.param(params_[p + ".b"]));
        const Var pre = g.lstm_preact({term}, g.param(params_[p + ".Wh"]), state[l].h);
        auto [h, c] = g.lstm_cell(pre, state[l].c);
        state[l] = {h, c};
        below = h;
      }
      out.push_back(g.linear(g.param(params_["conductor.out.W"]), below, g.param(params_["conductor.out.b"])));
    }
    return out;
  }

  // ---- objective ----------------------------------------------------------------

  /// Per-example objective recon + beta * max(kl - tau, 0), averaged over the
  /// batch. `epsilon` is latent_dim x B (zeros give the posterior mean).
  LossResult loss(nn::Graph<T>& g, std::span<const TokenSequence> batch, const Mat& epsilon, double beta,
                  double tau_nats, const DecodeOptions& opt) const {
    const auto B = static_cast<Eigen::Index>(batch.size());
    if (epsilon.rows() != arch_.latent_dim || epsilon.cols() != B)
      throw nn::ShapeError("loss: epsilon must be latent_dim x batch");
    auto [mu, sigma] = encode(g, batch);
    const Var z = reparameterize(g, mu, sigma, epsilon);
    Decoded dec = decode(g, z, batch, opt);

    Var recon;
    for (int s = 0; s < arch_.streams(); ++s) {
      const auto targets = flat_targets(batch, s);
      const Var ce = g.softmax_cross_entropy(dec.logits[static_cast<std::size_t>(s)], targets);
      // 1 x (T*B) -> 1 x B by summing over time.
      Var per_example;
      for (int t = 0; t < arch_.steps; ++t) {
        const Var part = g.slice_cols(ce, t * B, B);
        per_example = per_example.valid() ? g.add(per_example, part) : part;
      }
      recon = recon.valid() ? g.add(recon, per_example) : per_example;
    }
    const Var kl = g.kl_standard_normal(mu, sigma);
    const Var penalty = g.scale(g.hinge(kl, static_cast<T>(tau_nats)), static_cast<T>(beta));
    const Var total = g.scale(g.sum(g.add(recon, penalty)), T(1) / static_cast<T>(B));

    LossResult r;
    r.total = total;
    r.recon_per_example = recon;
    r.kl_per_example = kl;
    r.total_value = static_cast<double>(g.value(total)(0, 0));
    r.recon = static_cast<double>(g.value(recon).mean());
    r.kl = static_cast<double>(g.value(kl).mean());
    r.penalty = static_cast<double>(g.value(penalty).mean());
    r.accuracy = token_accuracy(dec.tokens, batch);
    r.outputs = std::move(dec.tokens);
    return r;
  }

  static double token_accuracy(std::span<const TokenSequence> out, std::span<const TokenSequence> ref) {
    std::size_t hit = 0;
    std::size_t total = 0;
    for (std::size_t b = 0; b < ref.size(); ++b)
      for (std::size_t s = 0; s < ref[b].streams.size(); ++s)
        for (std::size_t t = 0; t < ref[b].streams[s].size(); ++t) {
          hit += out[b].streams[s][t] == ref[b].streams[s][t] ? 1 : 0;
          ++total;
        }
    return total == 0 ? 0.0 : static_cast<double>(hit) / static_cast<double>(total);
  }

  // ---- inference helpers (no gradients) ---------------------------------------------

  /// Posterior parameters for each sequence; returns (mu, sigma) as latent x B.
  std::pair<Mat, Mat> infer(std::span<const TokenSequence> batch) const {
    nn::Graph<T> g(false);
    auto [mu, sigma] = encode(g, batch);
    return {g.value(mu), g.value(sigma)};
  }

  /// Decodes latent columns in sampled mode.
  std::vector<TokenSequence> generate(const Mat& z, double temperature, Rng& rng) const {
    if (z.cols() == 0) return {};
    nn::Graph<T> g(false);
    DecodeOptions opt;
    opt.mode = DecodeMode::sampled;
    opt.temperature = temperature;
    opt.rng = &rng;
    return decode(g, g.constant(z), {}, opt).tokens;
  }

  /// n sequences from z ~ N(0, I), deterministic given seed.
  std::vector<TokenSequence> sample_prior(int n, double temperature, std::uint64_t seed) const {
    if (n <= 0) return {};
    Rng rng(seed);
    Mat z(arch_.latent_dim, n);
    for (Eigen::Index j = 0; j < n; ++j)
      for (Eigen::Index i = 0; i < z.rows(); ++i) z(i, j) = static_cast<T>(rng.normal());
    return generate(z, temperature, rng);
  }

 private:
  struct LayerState {
    Var h;
    Var c;
  };

  void check_batch(std::span<const TokenSequence> batch) const {
    if (batch.empty()) throw std::invalid_argument("empty batch");
    for (const auto& x : batch) {
      if (static_cast<int>(x.streams.size()) != arch_.streams())
        throw std::invalid_argument("sequence has " + std::to_string(x.streams.size()) + " streams, model expects " +
                                    std::to_string(arch_.streams()));
      for (int s = 0; s < arch_.streams(); ++s) {
        const auto& st = x.streams[static_cast<std::size_t>(s)];
        if (static_cast<int>(st.size()) != arch_.steps)
          throw std::invalid_argument("sequence length " + std::to_string(st.size()) + " != " +
                                      std::to_string(arch_.steps));
        for (int tok : st)
          if (tok < 0 || tok >= arch_.vocab_sizes[static_cast<std::size_t>(s)])
            throw std::out_of_range("token " + std::to_string(tok) + " outside vocabulary");
      }
    }
  }

  std::vector<int> flat_targets(std::span<const TokenSequence> batch, int s) const {
    const auto B = batch.size();
    std::vector<int> out(static_cast<std::size_t>(arch_.steps) * B);
    for (std::size_t t = 0; t < static_cast<std::size_t>(arch_.steps); ++t)
      for (std::size_t b = 0; b < B; ++b) out[t * B + b] = batch[b].streams[static_cast<std::size_t>(s)][t];
    return out;
  }

  /// tanh(W x + b) split into per-layer (h, c) blocks of size H.
  std::vector<LayerState> initial_state(nn::Graph<T>& g, const std::string& prefix, Var x, int layers, int H) const {
    const Var all = g.tanh(g.linear(g.param(params_[prefix + ".W"]), x, g.param(params_[prefix + ".b"])));
    std::vector<LayerState> st;
    for (int l = 0; l < layers; ++l)
      st.push_back({g.slice_rows(all, 2 * l * H, H), g.slice_rows(all, (2 * l + 1) * H, H)});
    return st;
  }

  /// Chooses the next input token for one batch column.
  struct InputPolicy {
    const DecodeOptions& opt;
    std::vector<char> sequence_coin;  // per example, when per_sequence_coin

    bool use_truth(std::size_t b) const {
      switch (opt.mode) {
        case DecodeMode::teacher_forced: return true;
        case DecodeMode::sampled: return false;
        case DecodeMode::scheduled:
          if (opt.teacher_prob >= 1.0) return true;
          if (opt.per_sequence_coin) return sequence_coin[b] != 0;
          return opt.rng->bernoulli(opt.teacher_prob);
      }
      return true;
    }
  };

  InputPolicy make_policy(const DecodeOptions& opt, std::size_t B) const {
    InputPolicy p{opt, {}};
    if (opt.mode == DecodeMode::scheduled && opt.per_sequence_coin && opt.teacher_prob < 1.0) {
      p.sequence_coin.resize(B);
      for (auto& c : p.sequence_coin) c = opt.rng->bernoulli(opt.teacher_prob) ? 1 : 0;
    }
    return p;
  }

  /// Runs one stack of LSTM layers for a single step. `first_terms` are the
  /// layer-1 input contributions (bias included).
  Var step_stack(nn::Graph<T>& g, const std::string& prefix, int layers, std::vector<LayerState>& state,
                 std::span<const Var> first_terms) const {
    Var below;
    for (int l = 0; l < layers; ++l) {
      const std::string p = prefix + ".l" + std::to_string(l + 1);
      const Var wh = g.param(params_[p + ".Wh"]);
      Var pre;
      if (l == 0) {
        pre = g.lstm_preact(first_terms, wh, state[0].h);
      } else {
        const Var in = g.linear(g.param(params_[p + ".Wx"]), below, g.param(params_[p + ".b"]));
        pre = g.lstm_preact({in}, wh, state[static_cast<std::size_t>(l)].h);
      }
      auto [h, c] = g.lstm_cell(pre, state[static_cast<std::size_t>(l)].c);
      state[static_cast<std::size_t>(l)] = {h, c};
      below = h;
    }
    return below;
  }

  std::vector<TokenSequence> empty_outputs(std::size_t B) const {
    std::vector<TokenSequence> out(B);
    for (auto& x : out)
      x.streams.assign(static_cast<std::size_t>(arch_.streams()), std::vector<int>(static_cast<std::size_t>(arch_.steps), 0));
    return out;
  }

  Decoded decode_flat(nn::Graph<T>& g, Var z, std::span<const TokenSequence> targets, const DecodeOptions& opt) const {
    const auto B = static_cast<std::size_t>(g.value(z).cols());
    const auto Bi = static_cast<Eigen::Index>(B);
    const int S = arch_.streams();
    const int H = arch_.decoder_hidden;
    const bool known = opt.mode == DecodeMode::teacher_forced ||
                       (opt.mode == DecodeMode::scheduled && opt.teacher_prob >= 1.0);

    auto state = initial_state(g, "decoder.init", z, arch_.decoder_layers, H);
    const Var wx = g.param(params_["decoder.l1.Wx"]);
    const Var b1 = g.param(params_["decoder.l1.b"]);
    const Var wout = g.param(params_["decoder.out.W"]);
    const Var bout = g.param(params_["decoder.out.b"]);
    std::vector<Var> emb(static_cast<std::size_t>(S));
    for (int s = 0; s < S; ++s) emb[static_cast<std::size_t>(s)] = g.param(params_["decoder.emb" + std::to_string(s)]);

    Decoded out;
    out.tokens = empty_outputs(B);
    InputPolicy policy = make_policy(opt, B);

    // Teacher forcing: all inputs are known, so project them in one product.
    Var all_inputs;
    if (known) {
      std::vector<Var> parts;
      for (int s = 0; s < S; ++s) parts.push_back(g.gather_cols(emb[static_cast<std::size_t>(s)], shifted_inputs(targets, s, 0)));
      all_inputs = g.linear(wx, g.concat_rows(parts), b1);
    }

    std::vector<std::vector<int>> prev(static_cast<std::size_t>(S), std::vector<int>(B, -1));
    std::vector<Var> tops;
    std::vector<std::vector<Var>> step_logits(static_cast<std::size_t>(S));
    for (int t = 0; t < arch_.steps; ++t) {
      Var term;
      if (known) {
        term = g.slice_cols(all_inputs, t * Bi, Bi);
      } else {
        std::vector<Var> parts;
        for (int s = 0; s < S; ++s) parts.push_back(g.gather_cols(emb[static_cast<std::size_t>(s)], prev[static_cast<std::size_t>(s)]));
        term = g.linear(wx, g.concat_rows(parts), b1);
      }
      const Var top = step_stack(g, "decoder", arch_.decoder_layers, state, std::span<const Var>(&term, 1));
      if (known) {
        tops.push_back(top);
        continue;
      }
      const Var logits = g.linear(wout, top, bout);
      int row = 0;
      for (int s = 0; s < S; ++s) {
        const int V = arch_.vocab_sizes[static_cast<std::size_t>(s)];
        const Var ls = S == 1 ? logits : g.slice_rows(logits, row, V);
        row += V;
        step_logits[static_cast<std::size_t>(s)].push_back(ls);
      }
      for (std::size_t b = 0; b < B; ++b) {
        const bool truth = policy.use_truth(b);
        row = 0;
        for (int s = 0; s < S; ++s) {
          const int V = arch_.vocab_sizes[static_cast<std::size_t>(s)];
          const auto& L = g.value(logits);
          const int sampled = sample_token(L.col(static_cast<Eigen::Index>(b)).segment(row, V), opt.temperature, *opt.rng);
          row += V;
          out.tokens[b].streams[static_cast<std::size_t>(s)][static_cast<std::size_t>(t)] = sampled;
          prev[static_cast<std::size_t>(s)][b] =
              truth ? targets[b].streams[static_cast<std::size_t>(s)][static_cast<std::size_t>(t)] : sampled;
        }
      }
    }

    if (known) {
      const Var logits = g.linear(wout, g.concat_cols(tops), bout);
      int row = 0;
      for (int s = 0; s < S; ++s) {
        const int V = arch_.vocab_sizes[static_cast<std::size_t>(s)];
        out.logits.push_back(S == 1 ? logits : g.slice_rows(logits, row, V));
        row += V;
      }
      fill_argmax(g, out);
    } else {
      for (int s = 0; s < S; ++s) out.logits.push_back(g.concat_cols(step_logits[static_cast<std::size_t>(s)]));
    }
    return out;
  }

  Decoded decode_hierarchical(nn::Graph<T>& g, Var z, std::span<const TokenSequence> targets,
                              const DecodeOptions& opt) const {
    const auto B = static_cast<std::size_t>(g.value(z).cols());
    const auto Bi = static_cast<Eigen::Index>(B);
    const int S = arch_.streams();
    const int H = arch_.decoder_hidden;
    const int L = arch_.segment_length();
    const bool known = opt.mode == DecodeMode::teacher_forced ||
                       (opt.mode == DecodeMode::scheduled && opt.teacher_prob >= 1.0);

    Decoded out;
    out.tokens = empty_outputs(B);
    out.conductor = conductor(g, z);
    InputPolicy policy = make_policy(opt, B);

    for (int s = 0; s < S; ++s) {
      const std::string p = "decoder" + std::to_string(s);
      const int V = arch_.vocab_sizes[static_cast<std::size_t>(s)];
      const Var emb = g.param(params_[p + ".emb"]);
      const Var wx = g.param(params_[p + ".l1.Wx"]);
      const Var wc = g.param(params_[p + ".l1.Wc"]);
      const Var b1 = g.param(params_[p + ".l1.b"]);
      const Var wout = g.param(params_[p + ".out.W"]);
      const Var bout = g.param(params_[p + ".out.b"]);

      Var all_inputs;
      if (known) all_inputs = g.matmul(wx, g.gather_cols(emb, shifted_inputs(targets, s, L)));

      std::vector<Var> tops;
      std::vector<Var> step_logits;
      std::vector<int> prev(B, -1);
      for (int u = 0; u < arch_.segments; ++u) {
        const Var c_u = out.conductor[static_cast<std::size_t>(u)];
        // State and first input are reset at every segment boundary.
        auto state = initial_state(g, p + ".init", c_u, arch_.decoder_layers, H);
        const Var cond_term = g.linear(wc, c_u, b1);
        std::fill(prev.begin(), prev.end(), -1);
        for (int k = 0; k < L; ++k) {
          const int t = u * L + k;
          const Var tok_term = known ? g.slice_cols(all_inputs, t * Bi, Bi)
                                     : g.matmul(wx, g.gather_cols(emb, prev));
          const Var terms[2] = {cond_term, tok_term};
          const Var top = step_stack(g, p, arch_.decoder_layers, state, terms);
          if (known) {
            tops.push_back(top);
            continue;
          }
          const Var logits = g.linear(wout, top, bout);
          step_logits.push_back(logits);
          const auto& Lv = g.value(logits);
          for (std::size_t b = 0; b < B; ++b) {
            const int sampled = sample_token(Lv.col(static_cast<Eigen::Index>(b)), opt.temperature, *opt.rng);
            out.tokens[b].streams[static_cast<std::size_t>(s)][static_cast<std::size_t>(t)] = sampled;
            prev[b] = policy.use_truth(b) ? targets[b].streams[static_cast<std::size_t>(s)][static_cast<std::size_t>(t)]
                                          : sampled;
          }
        }
      }
      out.logits.push_back(known ? g.linear(wout, g.concat_cols(tops), bout) : g.concat_cols(step_logits));
      (void)V;
    }
    if (known) fill_argmax(g, out);
    return out;
  }

  /// Input token indices for all steps (column t*B + b): the previous
  /// target, or -1 (start) at t = 0 and at every segment start when
  /// `segment_length` > 0.
  std::vector<int> shifted_inputs(std::span<const TokenSequence> targets, int s, int segment_length) const {
    const auto B = targets.size();
    std::vector<int> idx(static_cast<std::size_t>(arch_.steps) * B, -1);
    for (int t = 1; t < arch_.steps; ++t) {
      if (segment_length > 0 && t % segment_length == 0) continue;
      for (std::size_t b = 0; b < B; ++b)
        idx[static_cast<std::size_t>(t) * B + b] = targets[b].streams[static_cast<std::size_t>(s)][static_cast<std::size_t>(t - 1)];
    }
    return idx;
  }

  void fill_argmax(nn::Graph<T>& g, Decoded& out) const {
    const std::size_t B = out.tokens.size();
    for (std::size_t s = 0; s < out.logits.size(); ++s) {
      const auto& L = g.value(out.logits[s]);
      for (int t = 0; t < arch_.steps; ++t)
        for (std::size_t b = 0; b < B; ++b) {
          Eigen::Index best = 0;
          L.col(static_cast<Eigen::Index>(static_cast<std::size_t>(t) * B + b)).maxCoeff(&best);
          out.tokens[b].streams[s][static_cast<std::size_t>(t)] = static_cast<int>(best);
        }
    }
  }

  void build(Rng& rng) {
    const int S = arch_.streams();
    const int He = arch_.encoder_hidden;
    for (int l = 0; l < arch_.encoder_layers; ++l) {
      for (const char* dir : {".fw", ".bw"}) {
        const std::string p = "encoder.l" + std::to_string(l + 1) + dir;
        if (l == 0)
          nn::add_lstm(params_, p, arch_.total_vocab(), He, rng, static_cast<double>(S));
        else
          nn::add_lstm(params_, p, 2 * He, He, rng);
      }
    }
    params_.add_uniform("encoder.mu.W", arch_.latent_dim, 2 * He, 2.0 * He, rng);
    params_.add_zeros("encoder.mu.b", arch_.latent_dim, 1);
    params_.add_uniform("encoder.sigma.W", arch_.latent_dim, 2 * He, 2.0 * He, rng);
    params_.add_zeros("encoder.sigma.b", arch_.latent_dim, 1);

    const int H = arch_.decoder_hidden;
    const int E = arch_.token_embedding();
    if (arch_.decoder == DecoderKind::flat) {
      params_.add_uniform("decoder.init.W", 2 * arch_.decoder_layers * H, arch_.latent_dim, arch_.latent_dim, rng);
      params_.add_zeros("decoder.init.b", 2 * arch_.decoder_layers * H, 1);
      for (int s = 0; s < S; ++s)
        params_.add_uniform("decoder.emb" + std::to_string(s), E, arch_.vocab_sizes[static_cast<std::size_t>(s)], 1.0, rng);
      nn::add_lstm(params_, "decoder.l1", S * E, H, rng);
      for (int l = 1; l < arch_.decoder_layers; ++l) nn::add_lstm(params_, "decoder.l" + std::to_string(l + 1), H, H, rng);
      params_.add_uniform("decoder.out.W", arch_.total_vocab(), H, H, rng);
      params_.add_zeros("decoder.out.b", arch_.total_vocab(), 1);
      return;
    }

    const int Hc = arch_.conductor_hidden;
    const int Ec = arch_.conductor_embedding;
    params_.add_uniform("conductor.init.W", 2 * arch_.conductor_layers * Hc, arch_.latent_dim, arch_.latent_dim, rng);
    params_.add_zeros("conductor.init.b", 2 * arch_.conductor_layers * Hc, 1);
    // Conductor inputs are zero vectors, so the first layer has no Wx.
    nn::add_lstm(params_, "conductor.l1", 0, Hc, rng);
    for (int l = 1; l < arch_.conductor_layers; ++l) nn::add_lstm(params_, "conductor.l" + std::to_string(l + 1), Hc, Hc, rng);
    params_.add_uniform("conductor.out.W", Ec, Hc, Hc, rng);
    params_.add_zeros("conductor.out.b", Ec, 1);
    for (int s = 0; s < S; ++s) {
      const std::string p = "decoder" + std::to_string(s);
      const int V = arch_.vocab_sizes[static_cast<std::size_t>(s)];
      params_.add_uniform(p + ".init.W", 2 * arch_.decoder_layers * H, Ec, Ec, rng);
      params_.add_zeros(p + ".init.b", 2 * arch_.decoder_layers * H, 1);
      params_.add_uniform(p + ".emb", E, V, 1.0, rng);
      // Layer-1 input is concat(c_u, token embedding); its weight is kept as
      // two blocks so the c_u part is computed once per segment.
      nn::add_lstm(params_, p + ".l1", E, H, rng, static_cast<double>(E + Ec));
      params_.add_uniform(p + ".l1.Wc", 4 * H, Ec, static_cast<double>(E + Ec), rng);
      for (int l = 1; l < arch_.decoder_layers; ++l) nn::add_lstm(params_, p + ".l" + std::to_string(l + 1), H, H, rng);
      params_.add_uniform(p + ".out.W", V, H, H, rng);
      params_.add_zeros(p + ".out.b", V, 1);
    }
  }

  ArchConfig arch_;
  nn::ParamSet<T> params_;
};

/// Nats corresponding to a free-bits budget.
inline double free_bits_to_nats(double bits) { return bits * std::log(2.0); }

/// Closed-form KL(N(mu, sigma^2) || N(0, 1)) summed over dimensions.
template <typename Vec>
double kl_divergence(const Vec& mu, const Vec& sigma) {
  double kl = 0.0;
  for (Eigen::Index i = 0; i < static_cast<Eigen::Index>(mu.size()); ++i) {
    const double m = static_cast<double>(mu(i));
    const double s = static_cast<double>(sigma(i));
    kl += 0.5 * (m * m + s * s - 1.0 - 2.0 * std::log(s));
  }
  return kl;
}

}  // namespace musicvae
