#pragma once

// Training loop: Adam with a floored exponential learning-rate decay, an
// annealed KL weight, free bits, and inverse-sigmoid scheduled sampling.
// Every source of randomness is derived from (seed, step), so a run resumed
// from a checkpoint continues exactly as the uninterrupted run would.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <functional>
#include <limits>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "musicvae/adam.hpp"
#include "musicvae/config.hpp"
#include "musicvae/container.hpp"
#include "musicvae/model.hpp"
#include "musicvae/rng.hpp"

namespace musicvae {

struct TrainingConfig {
  double base_lr = 1e-3;
  double min_lr = 1e-5;
  double lr_decay = 0.9999;
  int batch_size = 32;
  long long total_steps = 1000;
  double beta_max = 0.2;
  double beta_rate = 0.99999;
  double free_bits = 48.0;
  double sampling_rate = 2000.0;  // k of the inverse-sigmoid schedule
  bool teacher_forcing = false;   // pins the ground-truth probability to 1
  bool per_sequence_coin = false;
  double clip_norm = 1.0;         // 0 disables clipping
  std::uint64_t seed = 1;
  long long checkpoint_interval = 0;  // 0: only the final checkpoint
  long long log_interval = 1;

  void validate() const {
    if (!(min_lr > 0.0 && min_lr <= base_lr)) throw ConfigError("train: need 0 < min_lr <= base_lr");
    if (!(lr_decay > 0.0 && lr_decay <= 1.0)) throw ConfigError("train: lr_decay must be in (0, 1]");
    if (beta_max < 0.0) throw ConfigError("train: beta_max must be >= 0");
    if (!(beta_rate > 0.0 && beta_rate <= 1.0)) throw ConfigError("train: beta_rate must be in (0, 1]");
    if (free_bits < 0.0) throw ConfigError("train: free_bits must be >= 0");
    if (!(sampling_rate > 0.0)) throw ConfigError("train: sampling_rate must be > 0");
    if (batch_size <= 0) throw ConfigError("train: batch_size must be positive");
    if (total_steps < 0) throw ConfigError("train: total_steps must be >= 0");
    if (log_interval <= 0) throw ConfigError("train: log_interval must be positive");
  }

  void write(KeyValueConfig& kv) const {
    kv.set("train.base_lr", base_lr);
    kv.set("train.min_lr", min_lr);
    kv.set("train.lr_decay", lr_decay);
    kv.set("train.batch_size", batch_size);
    kv.set("train.total_steps", total_steps);
    kv.set("train.beta_max", beta_max);
    kv.set("train.beta_rate", beta_rate);
    kv.set("train.free_bits", free_bits);
    kv.set("train.sampling_rate", sampling_rate);
    kv.set("train.teacher_forcing", teacher_forcing);
    kv.set("train.per_sequence_coin", per_sequence_coin);
    kv.set("train.clip_norm", clip_norm);
    kv.set("train.seed", static_cast<long long>(seed));
    kv.set("train.checkpoint_interval", checkpoint_interval);
    kv.set("train.log_interval", log_interval);
  }

  static TrainingConfig read(const KeyValueConfig& kv) {
    TrainingConfig c;
    c.base_lr = kv.get_double("train.base_lr", c.base_lr);
    c.min_lr = kv.get_double("train.min_lr", c.min_lr);
    c.lr_decay = kv.get_double("train.lr_decay", c.lr_decay);
    c.batch_size = static_cast<int>(kv.get_int("train.batch_size", c.batch_size));
    c.total_steps = kv.get_int("train.total_steps", c.total_steps);
    c.beta_max = kv.get_double("train.beta_max", c.beta_max);
    c.beta_rate = kv.get_double("train.beta_rate", c.beta_rate);
    c.free_bits = kv.get_double("train.free_bits", c.free_bits);
    c.sampling_rate = kv.get_double("train.sampling_rate", c.sampling_rate);
    c.teacher_forcing = kv.get_bool("train.teacher_forcing", c.teacher_forcing);
    c.per_sequence_coin = kv.get_bool("train.per_sequence_coin", c.per_sequence_coin);
    c.clip_norm = kv.get_double("train.clip_norm", c.clip_norm);
    c.seed = static_cast<std::uint64_t>(kv.get_int("train.seed", static_cast<long long>(c.seed)));
    c.checkpoint_interval = kv.get_int("train.checkpoint_interval", c.checkpoint_interval);
    c.log_interval = kv.get_int("train.log_interval", c.log_interval);
    c.validate();
    return c;
  }

  double lr_at(long long step) const {
    return std::max(min_lr, base_lr * std::pow(lr_decay, static_cast<double>(step)));
  }
  double beta_at(long long step) const {
    return beta_max * (1.0 - std::pow(beta_rate, static_cast<double>(step)));
  }
  double teacher_forcing_prob(long long step) const {
    if (teacher_forcing) return 1.0;
    const double k = sampling_rate;
    const double e = static_cast<double>(step) / k;
    if (e > 700.0) return 0.0;
    return k / (k + std::exp(e));
  }
};

struct StepMetrics {
  long long step = 0;  // number of updates applied after this step
  double lr = 0.0;
  double beta = 0.0;
  double total = 0.0;
  double recon = 0.0;
  double kl = 0.0;
  double accuracy = 0.0;

  /// Tab-separated: step lr beta total recon kl accuracy.
  std::string line() const {
    auto f = KeyValueConfig::format_double;
    return std::to_string(step) + '\t' + f(lr) + '\t' + f(beta) + '\t' + f(total) + '\t' + f(recon) + '\t' + f(kl) +
           '\t' + f(accuracy);
  }
  static constexpr const char* kHeader = "# step\tlr\tbeta\ttotal\trecon\tkl\taccuracy";
};

class TrainingAborted : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Writes architecture and parameters (as "param/<name>") into a container.
template <typename T>
void store_model(Container& c, const MusicVae<T>& model) {
  KeyValueConfig kv;
  model.arch().write(kv);
  c.meta["arch"] = kv.to_text();
  c.meta["format"] = "musicvae-checkpoint";
  for (const auto& p : model.params()) c.put("param/" + p.name, p.value.template cast<double>());
}

template <typename T>
MusicVae<T> load_model(const Container& c) {
  const ArchConfig arch = ArchConfig::read(KeyValueConfig::parse(c.meta_at("arch")));
  nn::ParamSet<T> params;
  for (const auto& [name, value] : c.tensors())
    if (name.rfind("param/", 0) == 0) params.add(name.substr(6), value.template cast<T>());
  return MusicVae<T>(arch, std::move(params));
}

template <typename T>
class Trainer {
 public:
  using Mat = nn::Matrix<T>;

  Trainer(MusicVae<T> model, TrainingConfig cfg)
      : model_(std::move(model)), cfg_(std::move(cfg)), adam_(nn::AdamState<T>::zeros_like(model_.params())) {
    cfg_.validate();
  }

  /// Restores model, optimizer state and step counter.
  static Trainer from_checkpoint(const Container& c, const TrainingConfig* override_cfg = nullptr) {
    TrainingConfig cfg = override_cfg ? *override_cfg : TrainingConfig::read(KeyValueConfig::parse(c.meta_at("train")));
    Trainer t(load_model<T>(c), cfg);
    std::size_t i = 0;
    for (const auto& p : t.model_.params()) {
      t.adam_.m[i] = c.get("adam.m/" + p.name).template cast<T>();
      t.adam_.v[i] = c.get("adam.v/" + p.name).template cast<T>();
      ++i;
    }
    t.adam_.step = std::stoll(c.meta_at("step"));
    return t;
  }

  Container checkpoint() const {
    Container c;
    store_model(c, model_);
    KeyValueConfig kv;
    cfg_.write(kv);
    c.meta["train"] = kv.to_text();
    c.meta["step"] = std::to_string(adam_.step);
    std::size_t i = 0;
    for (const auto& p : model_.params()) {
      c.put("adam.m/" + p.name, adam_.m[i].template cast<double>());
      c.put("adam.v/" + p.name, adam_.v[i].template cast<double>());
      ++i;
    }
    return c;
  }

  long long step() const { return adam_.step; }
  const MusicVae<T>& model() const { return model_; }
  MusicVae<T>& model() { return model_; }
  const TrainingConfig& config() const { return cfg_; }

  /// Dataset indices used for the batch of update `step` (0-based). Each
  /// epoch is a fresh permutation derived from (seed, epoch).
  std::vector<std::size_t> batch_indices(long long step, std::size_t n) const {
    std::vector<std::size_t> out;
    const auto B = static_cast<std::size_t>(cfg_.batch_size);
    for (std::size_t k = 0; k < B; ++k) {
      const auto global = static_cast<std::uint64_t>(step) * B + k;
      const auto epoch = global / n;
      if (epoch != cached_epoch_ || perm_.size() != n) {
        perm_.resize(n);
        std::iota(perm_.begin(), perm_.end(), std::size_t{0});
        Rng rng(derive_seed(cfg_.seed, 0x5e11, epoch));
        rng.shuffle(perm_.begin(), perm_.end());
        cached_epoch_ = epoch;
      }
      out.push_back(perm_[global % n]);
    }
    return out;
  }

  /// One update. Throws TrainingAborted on a non-finite loss or gradient.
  StepMetrics train_step(std::span<const TokenSequence> data) {
    if (data.empty()) throw std::invalid_argument("train: empty dataset");
    const long long s = adam_.step;
    const auto idx = batch_indices(s, data.size());
    std::vector<TokenSequence> batch;
    batch.reserve(idx.size());
    for (auto i : idx) batch.push_back(data[i]);
    const auto B = static_cast<Eigen::Index>(batch.size());

    Rng eps_rng(derive_seed(cfg_.seed, 0xe95, static_cast<std::uint64_t>(s)));
    Mat eps(model_.arch().latent_dim, B);
    for (Eigen::Index j = 0; j < B; ++j)
      for (Eigen::Index i = 0; i < eps.rows(); ++i) eps(i, j) = static_cast<T>(eps_rng.normal());

    Rng coin(derive_seed(cfg_.seed, 0xc01, static_cast<std::uint64_t>(s)));
    DecodeOptions opt;
    const double p = cfg_.teacher_forcing_prob(s);
    opt.mode = p >= 1.0 ? DecodeMode::teacher_forced : DecodeMode::scheduled;
    opt.teacher_prob = p;
    opt.per_sequence_coin = cfg_.per_sequence_coin;
    opt.temperature = 1.0;
    opt.rng = &coin;

    StepMetrics m;
    m.lr = cfg_.lr_at(s);
    m.beta = cfg_.beta_at(s);
    model_.params().zero_grad();
    nn::Graph<T> g;
    const auto r = model_.loss(g, batch, eps, m.beta, free_bits_to_nats(cfg_.free_bits), opt);
    m.total = r.total_value;
    m.recon = r.recon;
    m.kl = r.kl;
    m.accuracy = r.accuracy;
    if (!std::isfinite(m.total)) throw TrainingAborted("non-finite loss at step " + std::to_string(s));
    g.backward(r.total);
    if (cfg_.clip_norm > 0.0) nn::clip_global_norm(model_.params(), cfg_.clip_norm);
    try {
      nn::adam_step(model_.params(), adam_, m.lr);
    } catch (const nn::NonFiniteError& e) {
      throw TrainingAborted(std::string(e.what()) + " at step " + std::to_string(s));
    }
    m.step = adam_.step;
    return m;
  }

  using Observer = std::function<void(const StepMetrics&)>;

  /// Runs until `cfg.total_steps` updates have been applied. Metrics lines
  /// are appended to `log` (if open) every log_interval steps; checkpoints go
  /// to `<checkpoint_prefix>-<step>.ckpt` on schedule and to
  /// `<checkpoint_prefix>.ckpt` at the end. On abort a diagnostic checkpoint
  /// `<checkpoint_prefix>-abort.ckpt` is written before rethrowing.
  void run(std::span<const TokenSequence> data, std::ostream* log, const std::string& checkpoint_prefix = {},
           const Observer& observer = {}) {
    while (adam_.step < cfg_.total_steps) {
      StepMetrics m;
      try {
        m = train_step(data);
      } catch (const TrainingAborted&) {
        if (!checkpoint_prefix.empty()) checkpoint().save(checkpoint_prefix + "-abort.ckpt");
        throw;
      }
      if (log && (m.step % cfg_.log_interval == 0 || m.step == cfg_.total_steps)) {
        *log << m.line() << '\n';
        log->flush();
      }
      if (observer) observer(m);
      if (!checkpoint_prefix.empty() && cfg_.checkpoint_interval > 0 && m.step % cfg_.checkpoint_interval == 0)
        checkpoint().save(checkpoint_prefix + "-" + std::to_string(m.step) + ".ckpt");
    }
    if (!checkpoint_prefix.empty()) checkpoint().save(checkpoint_prefix + ".ckpt");
  }

 private:
  MusicVae<T> model_;
  TrainingConfig cfg_;
  nn::AdamState<T> adam_;
  mutable std::vector<std::size_t> perm_;
  mutable std::uint64_t cached_epoch_ = std::numeric_limits<std::uint64_t>::max();
};

}  // namespace musicvae
