// Acceptance run: one PASS/FAIL line per top-level criterion, with extra
// context on indented "info" lines. Pass criterion names as arguments to run
// a subset; `--report FILE` also copies everything printed to FILE. The exit status is 0 once every selected criterion has been
// evaluated (FAIL lines included) and nonzero only if the run itself breaks.

#include <chrono>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>

#include <unistd.h>

#include "musicvae/cli.hpp"
#include "musicvae/eval.hpp"
#include "musicvae/gradcheck.hpp"
#include "musicvae/latent.hpp"
#include "musicvae/service.hpp"
#include "musicvae/synthetic.hpp"
#include "musicvae/trainer.hpp"

using namespace musicvae;
namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

namespace {

// ---- pinned tolerances and budgets -------------------------------------------------------

constexpr double kGradTolerance = 1e-4;
constexpr double kGradBudgetSeconds = 60.0;
constexpr int kCodecTrials = 10000;
constexpr int kLocalityTrials = 100;
constexpr double kOverfitTarget = 0.99;
constexpr long kOverfitSteps = 3000;
constexpr double kOverfitBudgetSeconds = 600.0;
constexpr double kDirectionMarginPoints = 5.0;
constexpr double kDirectionBudgetSeconds = 7200.0;
constexpr double kBaselineBand = 0.05;
constexpr std::size_t kBaselinePairs = 1024;
constexpr double kPlantedCosine = 0.9;
constexpr int kDominantRowsNeeded = 3;

struct Outcome {
  bool pass = false;
  std::string summary;
};

std::ostream& info() { return std::cout << "    info: "; }

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fmt(double v, int digits = 4) {
  std::ostringstream s;
  s << std::setprecision(digits) << v;
  return s.str();
}

ArchConfig tiny_arch(DecoderKind kind, std::vector<int> vocab) {
  ArchConfig a;
  a.latent_dim = 4;
  a.encoder_hidden = a.conductor_hidden = a.conductor_embedding = a.decoder_hidden = 8;
  a.steps = 8;
  a.segments = 2;
  a.vocab_sizes = std::move(vocab);
  a.decoder = kind;
  return a;
}

TokenSequence random_tokens(const ArchConfig& a, Rng& rng) {
  TokenSequence x;
  for (int v : a.vocab_sizes) {
    std::vector<int> s(static_cast<std::size_t>(a.steps));
    for (auto& t : s) t = static_cast<int>(rng.below(static_cast<std::uint64_t>(v)));
    x.streams.push_back(std::move(s));
  }
  return x;
}

Eigen::MatrixXd normal_matrix(Eigen::Index r, Eigen::Index c, Rng& rng) {
  Eigen::MatrixXd m(r, c);
  for (Eigen::Index j = 0; j < c; ++j)
    for (Eigen::Index i = 0; i < r; ++i) m(i, j) = rng.normal();
  return m;
}

bool bitwise_equal(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b) {
  return a.rows() == b.rows() && a.cols() == b.cols() &&
         std::memcmp(a.data(), b.data(), sizeof(double) * static_cast<std::size_t>(a.size())) == 0;
}

const char* decoder_name(DecoderKind k) { return k == DecoderKind::flat ? "flat" : "hierarchical"; }

// ---- gradient integrity -------------------------------------------------------------------

Outcome gradient_integrity() {
  const auto t0 = Clock::now();
  double worst = 0.0;
  // Small vocabularies keep every parameter probed inside the time budget;
  // the code paths are the same as with the full token sets.
  for (auto kind : {DecoderKind::flat, DecoderKind::hierarchical})
    for (const auto& vocab : {std::vector<int>{12}, std::vector<int>{12, 10, 16}}) {
      const auto a = tiny_arch(kind, vocab);
      MusicVae<double> m(a, 101);
      Rng rng(102);
      std::vector<TokenSequence> batch{random_tokens(a, rng), random_tokens(a, rng)};
      const Eigen::MatrixXd eps = normal_matrix(a.latent_dim, 2, rng);
      // Nonzero free-bits threshold keeps the hinge in its active region.
      auto loss = [&](nn::Graph<double>& g) { return m.loss(g, batch, eps, 0.7, 0.01, DecodeOptions{}).total; };
      const auto report = nn::grad_check<double>(loss, m.params(), kGradTolerance);
      std::size_t probed = 0;
      for (const auto& p : m.params()) probed += static_cast<std::size_t>(p.value.size());
      info() << decoder_name(kind) << (vocab.size() == 1 ? " single" : " trio") << ": " << probed
             << " parameters probed, max relative error " << fmt(report.max_rel_error, 3) << "\n";
      worst = std::max(worst, report.max_rel_error);
    }
  const double secs = seconds_since(t0);
  return {worst < kGradTolerance && secs < kGradBudgetSeconds,
          "max relative error " + fmt(worst, 3) + " (< " + fmt(kGradTolerance) + "), " + fmt(secs, 3) + " s (< " +
              fmt(kGradBudgetSeconds) + " s)"};
}

// ---- closed forms -------------------------------------------------------------------------

Outcome closed_forms() {
  using Vec = Eigen::VectorXd;
  const int d = 16;
  const double kl0 = kl_divergence(Vec(Vec::Zero(d)), Vec(Vec::Ones(d)));
  Vec e1 = Vec::Zero(d);
  e1(0) = 1.0;
  const double kl1 = kl_divergence(e1, Vec(Vec::Ones(d)));
  const double sp0 = nn::softplus(0.0);
  const double fb48 = free_bits_to_nats(48), fb256 = free_bits_to_nats(256);
  auto round_to = [](double v, int places) { return std::round(v * std::pow(10.0, places)) / std::pow(10.0, places); };
  bool ok = kl0 == 0.0 && std::abs(kl1 - 0.5) < 1e-15 && std::abs(sp0 - std::log(2.0)) < 1e-15;
  // Three-decimal targets computed independently as bits * ln 2.
  ok = ok && round_to(fb48, 3) == 33.271 && round_to(fb256, 3) == 177.446;
  // The quoted values carry one decimal.
  const bool quoted = round_to(fb48, 1) == 33.3 && round_to(fb256, 1) == 177.4;
  info() << "48 bits = " << std::setprecision(10) << fb48 << " nats, 256 bits = " << fb256 << " nats\n";
  info() << "quoted one-decimal values (33.3, 177.4) " << (quoted ? "match" : "do not match") << "\n";
  return {ok && quoted, "KL(0,1)=" + fmt(kl0) + ", KL(e1,1)=" + fmt(kl1) + ", softplus(0)-ln2=" +
                            fmt(sp0 - std::log(2.0)) + ", 48->" + fmt(fb48, 6) + ", 256->" + fmt(fb256, 7)};
}

// ---- codec --------------------------------------------------------------------------------

// Monophonic melodies mixing rests, abutting notes and held notes across
// bar lines.
NoteSequence codec_melody(Rng& rng) {
  const int bars = 1 + static_cast<int>(rng.below(16));
  NoteSequence seq{StreamKind::melody, {}, bars * kStepsPerBar};
  const double rest = 0.5 * rng.uniform();
  int t = 0;
  while (t < seq.length_steps) {
    if (rng.bernoulli(rest)) {
      t += 1 + static_cast<int>(rng.below(6));
      continue;
    }
    const int room = seq.length_steps - t;
    const int dur = 1 + static_cast<int>(rng.below(static_cast<std::uint64_t>(std::min(room, 24))));
    seq.notes.push_back(Note{static_cast<int>(rng.below(128)), t, dur});
    t += dur;
  }
  return seq;
}

NoteSequence codec_drums(Rng& rng) {
  const int bars = 1 + static_cast<int>(rng.below(16));
  NoteSequence seq{StreamKind::drums, {}, bars * kStepsPerBar};
  const double density = 0.02 + 0.4 * rng.uniform();
  for (int t = 0; t < seq.length_steps; ++t)
    for (int c = 0; c < kDrumClasses; ++c)
      if (rng.bernoulli(density)) seq.notes.push_back(Note{DrumClassMap::kCanonicalPitch[static_cast<std::size_t>(c)], t, 1});
  seq.sort();
  return seq;
}

Outcome codec_round_trip() {
  Rng rng(301);
  int melody_fail = 0, drum_fail = 0;
  for (int i = 0; i < kCodecTrials; ++i) {
    const auto m = codec_melody(rng);
    if (decode_melody(encode_melody(m)) != m) ++melody_fail;
    const auto d = codec_drums(rng);
    if (decode_drums(encode_drums(d)) != d) ++drum_fail;
  }
  return {melody_fail == 0 && drum_fail == 0, std::to_string(kCodecTrials) + " melodies, " + std::to_string(melody_fail) +
                                                   " failures; " + std::to_string(kCodecTrials) + " drum sequences, " +
                                                   std::to_string(drum_fail) + " failures"};
}

// ---- hierarchical locality ----------------------------------------------------------------

Outcome hierarchical_locality() {
  long comparisons = 0, violations = 0;
  for (const auto& vocab : {std::vector<int>{kMelodyVocab}, std::vector<int>{kMelodyVocab, kMelodyVocab, kDrumVocab}}) {
    auto a = tiny_arch(DecoderKind::hierarchical, vocab);
    a.steps = 64;
    a.segments = 4;
    MusicVae<double> m(a, 401);
    Rng rng(402);
    const int L = a.segment_length();
    auto logits = [&](const Eigen::MatrixXd& z, const TokenSequence& x) {
      nn::Graph<double> g(false);
      const auto dec = m.decode(g, g.constant(z), std::span<const TokenSequence>(&x, 1), DecodeOptions{});
      std::vector<Eigen::MatrixXd> out;
      for (const auto& l : dec.logits) out.push_back(g.value(l));
      return out;
    };
    auto conductor = [&](const Eigen::MatrixXd& z) {
      nn::Graph<double> g(false);
      std::vector<Eigen::MatrixXd> out;
      for (const Var c : m.conductor(g, g.constant(z))) out.push_back(g.value(c));
      return out;
    };
    for (int trial = 0; trial < kLocalityTrials; ++trial) {
      const TokenSequence x = random_tokens(a, rng);
      const Eigen::MatrixXd z = normal_matrix(a.latent_dim, 1, rng);
      const auto base = logits(z, x);
      const auto cond = conductor(z);
      for (int j = 0; j < a.segments; ++j) {
        TokenSequence moved = x;
        for (std::size_t s = 0; s < moved.streams.size(); ++s)
          for (int k = 0; k < L; ++k)
            moved.streams[s][static_cast<std::size_t>(j * L + k)] =
                static_cast<int>(rng.below(static_cast<std::uint64_t>(a.vocab_sizes[s])));
        const auto after = logits(z, moved);
        const auto cond_after = conductor(z);
        for (std::size_t u = 0; u < cond.size(); ++u, ++comparisons)
          if (!bitwise_equal(cond[u], cond_after[u])) ++violations;
        for (std::size_t s = 0; s < base.size(); ++s)
          for (int u = 0; u < a.segments; ++u, ++comparisons)
            if (u != j && !bitwise_equal(base[s].middleCols(u * L, L), after[s].middleCols(u * L, L))) ++violations;
      }
    }
  }
  return {violations == 0, std::to_string(kLocalityTrials) + " trials x every bar, single and trio: " +
                               std::to_string(comparisons) + " bitwise comparisons, " + std::to_string(violations) +
                               " differences outside the perturbed bar"};
}

// ---- overfit sanity ---------------------------------------------------------------------

Outcome overfit_sanity() {
  ArchConfig a;
  a.latent_dim = 8;
  a.encoder_hidden = a.conductor_hidden = a.conductor_embedding = a.decoder_hidden = 32;
  a.steps = 2 * kStepsPerBar;
  a.segments = 2;
  a.vocab_sizes = {kMelodyVocab};
  const auto data = synthetic::random_melodies(32, 2, 501);
  TrainingConfig c;
  c.batch_size = 32;
  c.total_steps = kOverfitSteps;
  c.teacher_forcing = true;
  c.base_lr = 1e-2;
  c.seed = 502;
  Trainer<float> trainer(MusicVae<float>(a, 503), c);
  const auto t0 = Clock::now();
  long first_hit = -1;
  double best = 0.0;
  trainer.run(data, nullptr, "", [&](const StepMetrics& m) {
    if (m.step % 100 != 0) return;
    const double acc = reconstruction_accuracy(trainer.model(), data, AccuracyMode::teacher_forced).accuracy;
    best = std::max(best, acc);
    if (acc >= kOverfitTarget && first_hit < 0) first_hit = m.step;
  });
  const double secs = seconds_since(t0);
  const double final_acc = reconstruction_accuracy(trainer.model(), data, AccuracyMode::teacher_forced).accuracy;
  info() << "first reached " << kOverfitTarget << " at step " << first_hit << "; final teacher-forced accuracy "
         << fmt(final_acc) << "\n";

  // Round trip through the service at temperature 0 on the trained model.
  Container ckpt;
  store_model(ckpt, trainer.model());
  const InferenceService service(ckpt);
  int exact = 0;
  for (const auto& x : data) {
    const json enc = json::parse(service.handle("POST", "/encode", json{{"tokens", x.streams[0]}, {"lossless", true}}.dump()).body);
    const json dec = json::parse(
        service.handle("POST", "/decode", json{{"z", enc["mu"]}, {"temperature", 0.0}, {"seed", 1}}.dump()).body);
    if (dec["tokens"].get<std::vector<int>>() == x.streams[0]) ++exact;
  }
  info() << "service decode(encode(x)) at temperature 0 reproduces " << exact << "/" << data.size() << " sequences\n";
  return {first_hit > 0 && first_hit <= kOverfitSteps && secs < kOverfitBudgetSeconds,
          "teacher-forced accuracy " + fmt(best) + " (>= " + fmt(kOverfitTarget) + ") by step " +
              std::to_string(first_hit) + " (<= " + std::to_string(kOverfitSteps) + "), " + fmt(secs, 3) + " s"};
}

// ---- flat vs hierarchical -----------------------------------------------------------------

struct DirectionRun {
  double train_tf, train_sampled, test_tf, test_sampled;
};

DirectionRun direction_run(DecoderKind kind, const std::vector<TokenSequence>& train, const std::vector<TokenSequence>& test) {
  ArchConfig a;
  a.latent_dim = 16;
  a.encoder_hidden = a.conductor_hidden = a.conductor_embedding = a.decoder_hidden = 64;
  a.steps = 16 * kStepsPerBar;
  a.segments = 16;
  a.vocab_sizes = {kMelodyVocab};
  a.decoder = kind;
  TrainingConfig c;
  c.batch_size = 8;
  c.total_steps = 10000;
  c.teacher_forcing = true;
  c.free_bits = 256;
  c.seed = 601;
  Trainer<float> trainer(MusicVae<float>(a, 602), c);
  const auto t0 = Clock::now();
  trainer.run(train, nullptr, "", {});
  const auto& m = trainer.model();
  DirectionRun r{reconstruction_accuracy(m, train, AccuracyMode::teacher_forced).accuracy,
                 reconstruction_accuracy(m, train, AccuracyMode::sampled, 1.0, 603).accuracy,
                 reconstruction_accuracy(m, test, AccuracyMode::teacher_forced).accuracy,
                 reconstruction_accuracy(m, test, AccuracyMode::sampled, 1.0, 603).accuracy};
  info() << decoder_name(kind) << ": corpus teacher-forced " << fmt(r.train_tf) << ", sampled " << fmt(r.train_sampled)
         << "; held-out teacher-forced " << fmt(r.test_tf) << ", sampled " << fmt(r.test_sampled) << "; "
         << fmt(seconds_since(t0), 4) << " s\n";
  return r;
}

Outcome flat_vs_hierarchical() {
  const auto t0 = Clock::now();
  const auto train = synthetic::repetition_corpus(500, 16, 7);
  const auto test = synthetic::repetition_corpus(100, 16, 8);
  const auto h = direction_run(DecoderKind::hierarchical, train, test);
  const auto f = direction_run(DecoderKind::flat, train, test);
  const double margin = 100.0 * (h.train_sampled - f.train_sampled);
  const double gap_h = h.train_tf - h.train_sampled, gap_f = f.train_tf - f.train_sampled;
  info() << "held-out sampled margin " << fmt(100.0 * (h.test_sampled - f.test_sampled), 3) << " points, gaps "
         << fmt(h.test_tf - h.test_sampled) << " (hierarchical) vs " << fmt(f.test_tf - f.test_sampled) << " (flat)\n";
  const double secs = seconds_since(t0);
  return {margin >= kDirectionMarginPoints && gap_h < gap_f && secs < kDirectionBudgetSeconds,
          "sampled accuracy hierarchical " + fmt(h.train_sampled) + " vs flat " + fmt(f.train_sampled) + " (+" +
              fmt(margin, 3) + " points, need " + fmt(kDirectionMarginPoints) + "); teacher-forced minus sampled gap " +
              fmt(gap_h) + " vs " + fmt(gap_f) + "; " + fmt(secs, 4) + " s"};
}

// ---- data-space interpolation baseline ----------------------------------------------------

Outcome data_baseline() {
  const auto train = synthetic::repetition_corpus(500, 16, 7);
  const auto eval = synthetic::repetition_corpus(100, 16, 8);
  std::vector<std::vector<int>> lm_corpus;
  for (const auto& x : train) lm_corpus.push_back(x.streams[0]);
  const auto lm = NgramModel::fit(lm_corpus, kMelodyVocab, 5);
  const auto pairs = make_pairs(eval, kBaselinePairs, 701);
  const auto alphas = alpha_grid(11);
  const auto r = data_interpolation_report(pairs, alphas, lm, 702);
  double worst = 0.0, mean_ab = 0.0, worst_scaled = 0.0;
  for (const auto& p : pairs) mean_ab += hamming_normalized(p.first, p.second);
  mean_ab /= static_cast<double>(pairs.size());
  for (std::size_t i = 0; i < alphas.size(); ++i) {
    worst = std::max(worst, std::abs(r.hamming_from_a[i] - alphas[i]));
    worst_scaled = std::max(worst_scaled, std::abs(r.hamming_from_a[i] / mean_ab - alphas[i]));
  }
  const bool ends = r.lm_cost_ratio.front() == 1.0 && r.lm_cost_ratio.back() == 1.0;
  info() << "mean Hamming(A, B) over the pairs " << fmt(mean_ab) << "; the curve tracks alpha * that value\n";
  info() << "curve divided by mean Hamming(A, B): max deviation from y=alpha " << fmt(worst_scaled, 3) << "\n";
  std::ostringstream curve;
  for (std::size_t i = 0; i < alphas.size(); ++i) curve << (i ? " " : "") << fmt(r.hamming_from_a[i], 3);
  info() << "curve " << curve.str() << "\n";
  return {worst <= kBaselineBand && ends, "max |hamming - alpha| " + fmt(worst, 3) + " (<= " + fmt(kBaselineBand) +
                                              ") over " + std::to_string(pairs.size()) + " pairs; LM cost ratio at 0 and 1: " +
                                              fmt(r.lm_cost_ratio.front(), 17) + ", " + fmt(r.lm_cost_ratio.back(), 17)};
}

// ---- attribute machinery ------------------------------------------------------------------

NoteSequence melody(std::vector<Note> notes, int length = 32) { return NoteSequence{StreamKind::melody, std::move(notes), length}; }

Outcome attribute_machinery() {
  // Planted direction: attribute equals latent dimension 0.
  Rng rng(801);
  const int n = 10000, d = 16;
  Eigen::MatrixXd z = normal_matrix(d, n, rng);
  std::vector<double> values(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) values[static_cast<std::size_t>(i)] = z(0, i);
  const auto planted = attribute_vector(z, values, AttributeKind::note_density);
  const double cosine = planted.vector(0) / planted.vector.norm();

  // Worked measurement examples.
  const bool units = measure(AttributeKind::c_diatonic, melody({{60, 0, 2}, {62, 2, 2}, {64, 4, 2}})) == 1.0 &&
                     measure(AttributeKind::c_diatonic, melody({{61, 0, 2}})) == 0.0 &&
                     measure(AttributeKind::note_density, melody({{60, 0, 1}, {62, 5, 1}, {64, 9, 1}, {65, 20, 1}})) == 0.125 &&
                     measure(AttributeKind::average_interval, melody({{60, 0, 1}, {64, 4, 1}, {67, 8, 1}})) == 3.5;

  // Desk-scale model: 2-bar hierarchical model on a corpus whose examples
  // differ in density, syncopation, chromaticism and leap size.
  ArchConfig a;
  a.latent_dim = 16;
  a.encoder_hidden = a.conductor_hidden = a.conductor_embedding = a.decoder_hidden = 64;
  a.steps = 2 * kStepsPerBar;
  a.segments = 2;
  a.vocab_sizes = {kMelodyVocab};
  const auto data = synthetic::styled_corpus(2000, 2, 31);
  TrainingConfig c;
  c.batch_size = 32;
  c.total_steps = 6000;
  c.teacher_forcing = true;
  c.beta_rate = 0.999;  // reach the KL weight ceiling within the short run
  c.free_bits = 48;
  c.seed = 6;
  Trainer<float> trainer(MusicVae<float>(a, 10), c);
  trainer.run(data, nullptr, "", {});
  const auto vectors = compute_attribute_vectors(trainer.model(), data);
  const auto adding = attribute_effect_matrix(trainer.model(), 256, vectors, 0.5, 3, 1.0);
  const auto subtracting = attribute_effect_matrix(trainer.model(), 256, vectors, 0.5, 3, -1.0);
  const int dominant = adding.dominant_rows();
  for (const auto* m : {&adding, &subtracting}) {
    std::istringstream lines(m->to_tsv());
    for (std::string line; std::getline(lines, line);) info() << line << "\n";
  }
  info() << "subtracting matrix: diagonal dominant in " << subtracting.dominant_rows() << " of 5 rows\n";
  return {cosine >= kPlantedCosine && units && dominant >= kDominantRowsNeeded,
          "planted cosine " + fmt(cosine) + " (>= " + fmt(kPlantedCosine) + "); worked examples " +
              (units ? "match" : "differ") + "; targeted attribute dominates " + std::to_string(dominant) +
              " of 5 rows (need " + std::to_string(kDominantRowsNeeded) + ")"};
}

// ---- determinism --------------------------------------------------------------------------

std::map<std::string, std::string> snapshot(const fs::path& root) {
  std::map<std::string, std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(root)) {
    if (!e.is_regular_file()) continue;
    std::ifstream f(e.path(), std::ios::binary);
    std::stringstream ss;
    ss << f.rdbuf();
    out[fs::relative(e.path(), root).string()] = ss.str();
  }
  return out;
}

void run_pipeline(const fs::path& root) {
  fs::remove_all(root);
  const std::string r = root.string();
  const std::vector<std::string> tiny{"--set", "arch.latent_dim=4",        "--set", "arch.encoder_hidden=8",
                                      "--set", "arch.decoder_hidden=8",    "--set", "arch.conductor_hidden=8",
                                      "--set", "arch.conductor_embedding=8", "--batch", "8"};
  std::vector<std::vector<std::string>> commands{
      {"ingest", "--synthetic", "styled", "--n", "64", "--bars", "2", "--seed", "11", "--out", r + "/data"},
      {"train", "--data", r + "/data/melody2.dataset", "--out", r + "/model", "--steps", "60", "--checkpoint-every", "20"},
      {"eval", "--checkpoint", r + "/model/model.ckpt", "--data", r + "/data/melody2.dataset", "--mode", "both",
       "--interpolation", "--pairs", "32", "--out", r + "/eval"},
      {"sample", "--checkpoint", r + "/model/model.ckpt", "--n", "4", "--out", r + "/samples"},
      {"interpolate", "--checkpoint", r + "/model/model.ckpt", "--data", r + "/data/melody2.dataset", "--a", "0", "--b",
       "1", "--steps", "3", "--out", r + "/interp"},
      {"attrs", "compute", "--checkpoint", r + "/model/model.ckpt", "--data", r + "/data/melody2.dataset", "--out",
       r + "/attrs"},
      {"attrs", "matrix", "--checkpoint", r + "/model/model.ckpt", "--attrs", r + "/attrs/attributes.ckpt", "--n", "16",
       "--out", r + "/attrs"},
      {"attrs", "apply", "--checkpoint", r + "/model/model.ckpt", "--attrs", r + "/attrs/attributes.ckpt", "--data",
       r + "/data/melody2.dataset", "--kind", "note_density", "--out", r + "/apply"}};
  commands[1].insert(commands[1].end(), tiny.begin(), tiny.end());
  for (const auto& args : commands) {
    std::ostringstream out, err;
    const int code = cli::run(args, out, err);
    if (code != 0) throw std::runtime_error("pipeline step '" + args[0] + "' exited " + std::to_string(code) + ": " + err.str());
    std::ofstream(root / ("stdout-" + std::to_string(&args - commands.data()) + ".txt")) << out.str();
  }
}

Outcome determinism() {
  // Both runs use the same paths so that echoed configs compare equal too.
  const fs::path work = fs::temp_directory_path() / ("musicvae_acceptance_" + std::to_string(::getpid()));
  const fs::path root = work / "run";
  run_pipeline(root);
  const auto first = snapshot(root);
  run_pipeline(root);
  const auto second = snapshot(root);
  fs::remove_all(work);
  std::size_t differing = 0;
  for (const auto& [name, bytes] : first) {
    const auto it = second.find(name);
    if (it == second.end() || it->second != bytes) {
      ++differing;
      info() << "differs: " << name << "\n";
    }
  }
  std::size_t checkpoints = 0;
  for (const auto& [name, bytes] : first) checkpoints += name.ends_with(".ckpt") ? 1 : 0;
  return {differing == 0 && first.size() == second.size() && !first.empty(),
          std::to_string(first.size()) + " files (" + std::to_string(checkpoints) + " checkpoints) from two runs, " +
              std::to_string(differing) + " differ"};
}

// Mirrors one stream buffer into another.
class TeeBuf : public std::streambuf {
 public:
  TeeBuf(std::streambuf* a, std::streambuf* b) : a_(a), b_(b) {}

 protected:
  int overflow(int c) override {
    if (c == EOF) return 0;
    const auto ch = static_cast<char>(c);
    return a_->sputc(ch) == EOF || b_->sputc(ch) == EOF ? EOF : c;
  }
  int sync() override { return a_->pubsync() | b_->pubsync(); }

 private:
  std::streambuf* a_;
  std::streambuf* b_;
};

struct Criterion {
  const char* name;
  std::function<Outcome()> run;
};

}  // namespace

int main(int argc, char** argv) {
  const std::vector<Criterion> all{{"gradient_integrity", gradient_integrity},
                                   {"closed_forms", closed_forms},
                                   {"codec_round_trip", codec_round_trip},
                                   {"hierarchical_locality", hierarchical_locality},
                                   {"overfit_sanity", overfit_sanity},
                                   {"flat_vs_hierarchical", flat_vs_hierarchical},
                                   {"data_baseline_interpolation", data_baseline},
                                   {"attribute_machinery", attribute_machinery},
                                   {"determinism", determinism}};
  std::vector<std::string> wanted;
  std::string report_path;
  for (int i = 1; i < argc; ++i) {
    const std::string arg = argv[i];
    if (arg == "--report" && i + 1 < argc) report_path = argv[++i];
    else wanted.push_back(arg);
  }
  std::ofstream report;
  std::optional<TeeBuf> tee;
  std::streambuf* const console = std::cout.rdbuf();
  if (!report_path.empty()) {
    report.open(report_path, std::ios::trunc);
    if (!report) {
      std::cerr << "cannot write " << report_path << "\n";
      return 2;
    }
    tee.emplace(console, report.rdbuf());
    std::cout.rdbuf(&*tee);
  }
  for (const auto& w : wanted)
    if (std::none_of(all.begin(), all.end(), [&](const Criterion& c) { return w == c.name; })) {
      std::cerr << "unknown criterion: " << w << "\n";
      return 2;
    }
  int passed = 0, evaluated = 0;
  for (const auto& c : all) {
    if (!wanted.empty() && std::find(wanted.begin(), wanted.end(), c.name) == wanted.end()) continue;
    const auto t0 = Clock::now();
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception& e) {
      std::cerr << c.name << ": aborted: " << e.what() << "\n";
      std::cout.rdbuf(console);
      return 1;
    }
    ++evaluated;
    passed += o.pass ? 1 : 0;
    std::cout << (o.pass ? "PASS " : "FAIL ") << c.name << ": " << o.summary << " [" << fmt(seconds_since(t0), 4) << " s]"
              << std::endl;
  }
  std::cout << passed << " of " << evaluated << " criteria passed" << std::endl;
  std::cout.rdbuf(console);
  return 0;
}
