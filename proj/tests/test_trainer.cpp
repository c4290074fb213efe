#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <sstream>

#include "musicvae/synthetic.hpp"
#include "musicvae/trainer.hpp"
#include "support.hpp"

using namespace musicvae;
using testing_support::tiny_arch;

namespace {

TrainingConfig quick_config(long long steps) {
  TrainingConfig c;
  c.batch_size = 4;
  c.total_steps = steps;
  c.seed = 99;
  c.beta_rate = 0.99;  // make the KL term visible within a short run
  c.free_bits = 0.0;
  c.sampling_rate = 20.0;  // and scheduled sampling active
  return c;
}

std::vector<TokenSequence> small_data(const ArchConfig& a, int n, std::uint64_t seed) {
  Rng rng(seed);
  return testing_support::random_batch(a, n, rng);
}

std::string run_log(Trainer<float>& t, const std::vector<TokenSequence>& data) {
  std::ostringstream log;
  t.run(data, &log);
  return log.str();
}

std::filesystem::path scratch_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("musicvae_test_" + name);
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

}  // namespace

TEST(Schedules, LearningRate) {
  const TrainingConfig c;
  EXPECT_DOUBLE_EQ(c.lr_at(0), 1e-3);
  EXPECT_NEAR(c.lr_at(6931), 1e-3 * std::exp(6931 * std::log(0.9999)), 1e-15);
  EXPECT_NEAR(c.lr_at(6931), 5.0e-4, 1e-6);
  EXPECT_DOUBLE_EQ(c.lr_at(10'000'000), 1e-5);
  for (long long s = 0; s < 100000; s += 997) EXPECT_LE(c.lr_at(s + 1), c.lr_at(s));
}

TEST(Schedules, Beta) {
  const TrainingConfig c;
  EXPECT_EQ(c.beta_at(0), 0.0);
  EXPECT_NEAR(c.beta_at(69315), 0.1, 1e-5);
  EXPECT_NEAR(c.beta_at(100'000'000), 0.2, 1e-12);
  for (long long s = 0; s < 2'000'000; s += 9973) {
    EXPECT_LE(c.beta_at(s), c.beta_at(s + 1));
    EXPECT_NEAR(c.beta_at(s), 0.2 * (1.0 - std::exp(s * std::log(0.99999))), 1e-12);
  }
}

TEST(Schedules, TeacherForcingProbability) {
  TrainingConfig c;
  EXPECT_DOUBLE_EQ(c.teacher_forcing_prob(0), 2000.0 / 2001.0);
  double prev = 1.0;
  for (long long s = 0; s < 200000; s += 500) {
    const double p = c.teacher_forcing_prob(s);
    EXPECT_LE(p, prev);
    EXPECT_GE(p, 0.0);
    prev = p;
  }
  EXPECT_LT(c.teacher_forcing_prob(30000), 0.01);
  c.teacher_forcing = true;
  for (long long s : {0LL, 1000LL, 1'000'000LL}) EXPECT_EQ(c.teacher_forcing_prob(s), 1.0);
}

TEST(TrainingConfigFile, RoundTripAndValidation) {
  TrainingConfig c = quick_config(123);
  c.teacher_forcing = true;
  c.clip_norm = 0.5;
  KeyValueConfig kv;
  c.write(kv);
  const auto back = TrainingConfig::read(KeyValueConfig::parse(kv.to_text()));
  EXPECT_EQ(back.total_steps, 123);
  EXPECT_EQ(back.seed, 99u);
  EXPECT_TRUE(back.teacher_forcing);
  EXPECT_EQ(back.beta_rate, 0.99);
  EXPECT_EQ(back.clip_norm, 0.5);
  TrainingConfig bad;
  bad.min_lr = 1.0;
  EXPECT_THROW(bad.validate(), ConfigError);
  bad = TrainingConfig{};
  bad.sampling_rate = 0.0;
  EXPECT_THROW(bad.validate(), ConfigError);
}

TEST(Trainer, EpochBatchesArePermutations) {
  Trainer<float> t(MusicVae<float>(tiny_arch(DecoderKind::flat), 1), quick_config(0));
  std::vector<int> seen(12, 0);
  for (long long s = 0; s < 3; ++s)
    for (auto i : t.batch_indices(s, 12)) ++seen[i];
  for (int c : seen) EXPECT_EQ(c, 1);
}

TEST(Trainer, SameSeedGivesIdenticalLogsAndCheckpoints) {
  for (auto kind : {DecoderKind::flat, DecoderKind::hierarchical}) {
    const auto arch = tiny_arch(kind, {6, 5});
    const auto data = small_data(arch, 10, 4);
    Trainer<float> a(MusicVae<float>(arch, 7), quick_config(30));
    Trainer<float> b(MusicVae<float>(arch, 7), quick_config(30));
    const auto log_a = run_log(a, data);
    EXPECT_EQ(log_a, run_log(b, data));
    EXPECT_EQ(a.checkpoint().serialize(), b.checkpoint().serialize());
    auto other = quick_config(30);
    other.seed = 100;
    Trainer<float> c(MusicVae<float>(arch, 7), other);
    EXPECT_NE(log_a, run_log(c, data));
  }
}

TEST(Trainer, ResumeIsBitExact) {
  for (auto kind : {DecoderKind::flat, DecoderKind::hierarchical}) {
    const auto arch = tiny_arch(kind);
    const auto data = small_data(arch, 9, 5);
    Trainer<float> whole(MusicVae<float>(arch, 3), quick_config(40));
    const auto full_log = run_log(whole, data);

    auto half_cfg = quick_config(17);
    Trainer<float> first(MusicVae<float>(arch, 3), half_cfg);
    std::string log = run_log(first, data);
    const auto bytes = first.checkpoint().serialize();
    const auto full_cfg = quick_config(40);
    auto resumed = Trainer<float>::from_checkpoint(Container::deserialize(bytes), &full_cfg);
    EXPECT_EQ(resumed.step(), 17);
    log += run_log(resumed, data);
    EXPECT_EQ(log, full_log);
    EXPECT_EQ(resumed.checkpoint().serialize(), whole.checkpoint().serialize());
  }
}

TEST(Trainer, CheckpointRoundTripGivesBitIdenticalLoss) {
  const auto arch = tiny_arch(DecoderKind::hierarchical, {6, 4, 3});
  const auto data = small_data(arch, 6, 8);
  Trainer<float> t(MusicVae<float>(arch, 11), quick_config(5));
  run_log(t, data);
  const auto dir = scratch_dir("ckpt");
  const auto path = (dir / "m.ckpt").string();
  t.checkpoint().save(path);
  const auto model = load_model<float>(Container::load(path));
  EXPECT_EQ(model.arch(), arch);

  const nn::Matrix<float> eps = nn::Matrix<float>::Zero(arch.latent_dim, 6);
  nn::Graph<float> g1(false), g2(false);
  const auto r1 = t.model().loss(g1, data, eps, 0.3, 1.0, {});
  const auto r2 = model.loss(g2, data, eps, 0.3, 1.0, {});
  EXPECT_EQ(std::bit_cast<std::uint64_t>(r1.total_value), std::bit_cast<std::uint64_t>(r2.total_value));
  EXPECT_EQ(r1.outputs, r2.outputs);
  std::filesystem::remove_all(dir);
}

TEST(Trainer, ScheduledCheckpointsWritten) {
  const auto arch = tiny_arch(DecoderKind::flat);
  auto cfg = quick_config(6);
  cfg.checkpoint_interval = 2;
  Trainer<float> t(MusicVae<float>(arch, 1), cfg);
  const auto dir = scratch_dir("sched");
  const auto prefix = (dir / "run").string();
  t.run(small_data(arch, 5, 1), nullptr, prefix);
  for (const char* f : {"run-2.ckpt", "run-4.ckpt", "run-6.ckpt", "run.ckpt"}) EXPECT_TRUE(std::filesystem::exists(dir / f)) << f;
  EXPECT_EQ(Trainer<float>::from_checkpoint(Container::load(prefix + "-4.ckpt")).step(), 4);
  std::filesystem::remove_all(dir);
}

TEST(Trainer, NonFiniteLossAbortsWithDiagnosticCheckpoint) {
  const auto arch = tiny_arch(DecoderKind::hierarchical);
  MusicVae<float> model(arch, 2);
  model.params()["encoder.l1.fw.b"].value(0, 0) = std::numeric_limits<float>::quiet_NaN();
  Trainer<float> t(std::move(model), quick_config(10));
  const auto dir = scratch_dir("abort");
  EXPECT_THROW(t.run(small_data(arch, 5, 1), nullptr, (dir / "run").string()), TrainingAborted);
  EXPECT_TRUE(std::filesystem::exists(dir / "run-abort.ckpt"));
  EXPECT_FALSE(std::filesystem::exists(dir / "run.ckpt"));
  EXPECT_EQ(t.step(), 0);
  std::filesystem::remove_all(dir);
}

TEST(Trainer, ZeroBetaLeavesSigmaHeadUntouchedByKl) {
  // With beta = 0 the KL term contributes nothing: the sigma head only
  // receives gradient through z, which vanishes when eps = 0.
  const auto arch = tiny_arch(DecoderKind::flat);
  MusicVae<double> model(arch, 4);
  const auto data = small_data(arch, 3, 2);
  nn::Graph<double> g;
  const auto r = model.loss(g, data, nn::Matrix<double>::Zero(arch.latent_dim, 3), 0.0, 1e300, {});
  g.backward(r.total);
  EXPECT_EQ(model.params()["encoder.sigma.W"].grad.norm(), 0.0);
  EXPECT_EQ(model.params()["encoder.sigma.b"].grad.norm(), 0.0);
}

TEST(Trainer, SmoothedLossDecreasesOnOverfitSet) {
  ArchConfig arch = tiny_arch(DecoderKind::hierarchical, {kMelodyVocab});
  arch.latent_dim = 8;
  arch.encoder_hidden = arch.decoder_hidden = arch.conductor_hidden = 16;
  arch.steps = 32;
  const auto data = synthetic::random_melodies(8, 2, 21);
  TrainingConfig cfg;
  cfg.batch_size = 8;
  cfg.total_steps = 400;
  cfg.teacher_forcing = true;
  cfg.base_lr = 3e-3;
  cfg.seed = 5;
  Trainer<float> t(MusicVae<float>(arch, 5), cfg);
  std::vector<double> losses;
  t.run(data, nullptr, {}, [&](const StepMetrics& m) { losses.push_back(m.total); });
  ASSERT_EQ(losses.size(), 400u);
  std::vector<double> window_means;
  for (std::size_t w = 0; w + 50 <= losses.size(); w += 50)
    window_means.push_back(std::accumulate(losses.begin() + static_cast<long>(w), losses.begin() + static_cast<long>(w + 50), 0.0) / 50.0);
  for (std::size_t i = 1; i < window_means.size(); ++i) EXPECT_LE(window_means[i], window_means[i - 1]) << "window " << i;
  EXPECT_LT(window_means.back(), 0.5 * window_means.front());
}

TEST(Container, RoundTripAndCorruption) {
  Container c;
  c.meta["a"] = "1\n2";
  c.put("x", Eigen::MatrixXd::Random(3, 2));
  c.put("empty", Eigen::MatrixXd(0, 4));
  const auto bytes = c.serialize();
  const auto back = Container::deserialize(bytes);
  EXPECT_EQ(back.meta, c.meta);
  EXPECT_EQ(back.get("x"), c.get("x"));
  EXPECT_EQ(back.get("empty").cols(), 4);
  EXPECT_EQ(back.serialize(), bytes);
  for (std::size_t cut : {std::size_t{3}, std::size_t{12}, bytes.size() / 2, bytes.size() - 1})
    EXPECT_THROW(Container::deserialize(bytes.substr(0, cut)), FormatError) << cut;
  EXPECT_THROW(Container::deserialize(bytes + "x"), FormatError);
  std::string bad_magic = bytes;
  bad_magic[0] = 'X';
  EXPECT_THROW(Container::deserialize(bad_magic), FormatError);
  EXPECT_THROW(c.get("missing"), FormatError);
}
