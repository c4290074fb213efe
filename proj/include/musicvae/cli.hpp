#pragma once

// Command-line entry point: ingest, train, eval, sample, interpolate, attrs,
// serve. run() is callable in-process (tests drive it directly); the tools/
// binary is a thin wrapper.
//
// Settings are layered: built-in defaults, then a key = value config file
// (--config), then flags. Every command resolves and validates all of its
// settings before doing any work, and writes the resolved set to
// <out>/config.resolved when it has an output directory.
//
// Exit codes: 0 success, 1 usage or invalid setting, 2 unreadable or
// inconsistent data (datasets, MIDI, checkpoints), 3 runtime failure.

#include "CLI11.hpp"

#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "musicvae/dataset.hpp"
#include "musicvae/eval.hpp"
#include "musicvae/latent.hpp"
#include "musicvae/service.hpp"
#include "musicvae/synthetic.hpp"
#include "musicvae/trainer.hpp"

namespace musicvae::cli {

enum ExitCode { kOk = 0, kUsage = 1, kDataError = 2, kRuntimeError = 3 };

class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Starts the HTTP service and blocks. Supplied by the binary so that this
/// header does not depend on the socket library.
using ServeFn = std::function<int(const InferenceService&, const std::string& host, int port, std::ostream& log)>;

namespace detail {

namespace fs = std::filesystem;

// Defaults for every recognised key. Keys absent here are rejected, which
// catches typos in config files and --set.
inline KeyValueConfig defaults() {
  KeyValueConfig kv;
  ArchConfig{}.write(kv);
  // Shape keys come from the dataset unless given explicitly.
  for (const char* k : {"arch.steps", "arch.segments", "arch.vocab_sizes"}) kv.set(k, std::string());
  TrainingConfig{}.write(kv);
  kv.set("seed", 0);
  kv.set("eval.temperature", 1.0);
  kv.set("eval.pairs", 1024);
  kv.set("eval.alphas", 11);
  kv.set("eval.lm_order", 5);
  kv.set("eval.interp_temperature", 0.5);
  kv.set("sample.temperature", 0.5);
  kv.set("interpolate.temperature", 0.5);
  kv.set("attrs.parity", std::string("literal"));
  kv.set("attrs.samples", 256);
  kv.set("attrs.temperature", 0.5);
  kv.set("serve.host", std::string("127.0.0.1"));
  kv.set("serve.port", 8080);
  return kv;
}

/// Collects flag values bound to config keys, then layers them.
class Settings {
 public:
  explicit Settings(CLI::App* app) : app_(app) {
    app_->add_option("--config", config_file_, "key = value settings file");
    app_->add_option("--set", sets_, "override any setting, key=value (repeatable)");
  }

  /// A flag that overrides config key `key`.
  CLI::Option* bind(const std::string& flag, const std::string& key, const std::string& help) {
    auto& slot = flags_[key];
    auto* o = app_->add_option(flag, slot.value, help + " [" + key + "]");
    slot.option = o;
    return o;
  }

  KeyValueConfig resolve() const {
    KeyValueConfig kv = defaults();
    auto check = [&](const std::string& key, const std::string& where) {
      if (!kv.contains(key)) throw UsageError("unknown setting '" + key + "' in " + where);
    };
    if (!config_file_.empty()) {
      const auto file = KeyValueConfig::load(config_file_);
      for (const auto& [k, v] : file.values()) check(k, config_file_);
      kv.merge(file);
    }
    for (const auto& [key, slot] : flags_)
      if (slot.option->count() > 0) kv.set(key, slot.value);
    for (const auto& s : sets_) {
      const auto eq = s.find('=');
      if (eq == std::string::npos || eq == 0) throw UsageError("--set expects key=value, got '" + s + "'");
      const auto key = s.substr(0, eq);
      check(key, "--set");
      kv.set(key, s.substr(eq + 1));
    }
    return kv;
  }

 private:
  struct Slot {
    std::string value;
    CLI::Option* option = nullptr;
  };
  CLI::App* app_;
  std::string config_file_;
  std::vector<std::string> sets_;
  std::map<std::string, Slot> flags_;
};

inline void echo_config(const std::string& out_dir, const std::string& command, const KeyValueConfig& kv) {
  fs::create_directories(out_dir);
  std::ofstream f(out_dir + "/config.resolved");
  if (!f) throw DataError("cannot write " + out_dir + "/config.resolved");
  f << "# resolved settings for '" << command << "'\n" << kv.to_text();
}

inline std::uint64_t get_seed(const KeyValueConfig& kv, const std::string& key = "seed") {
  const auto s = kv.get_int(key, 0);
  if (s < 0) throw ConfigError(key + " must be >= 0");
  return static_cast<std::uint64_t>(s);
}

inline double get_temperature(const KeyValueConfig& kv, const std::string& key) {
  const double t = kv.get_double(key, 1.0);
  if (!(t >= 0.0)) throw ConfigError(key + " must be >= 0");
  return t;
}

/// Architecture from settings, with shape keys filled from the dataset.
inline ArchConfig arch_for(const KeyValueConfig& kv, const Dataset& data) {
  KeyValueConfig a = kv;
  if (a.get_string("arch.steps", "").empty()) a.set("arch.steps", data.steps());
  if (a.get_string("arch.segments", "").empty()) a.set("arch.segments", data.bars());
  if (a.get_string("arch.vocab_sizes", "").empty()) {
    std::string vs;
    for (int v : window_vocab(data.mode)) vs += (vs.empty() ? "" : ",") + std::to_string(v);
    a.set("arch.vocab_sizes", vs);
  }
  ArchConfig arch = ArchConfig::read(a);
  arch.validate();
  if (arch.steps != data.steps() || arch.vocab_sizes != window_vocab(data.mode))
    throw DataError("architecture does not match the dataset's " + to_string(data.mode) + " examples");
  return arch;
}

inline Dataset load_nonempty(const std::string& path) {
  auto d = load_dataset(path);
  if (d.examples.empty()) throw DataError(path + ": no examples");
  return d;
}

inline void require_compatible(const ArchConfig& arch, const Dataset& data, const std::string& what) {
  if (arch.steps != data.steps() || arch.vocab_sizes != window_vocab(data.mode))
    throw DataError(what + " does not match the checkpoint's architecture");
}

inline std::vector<StreamKind> kinds_of(const ArchConfig& arch) { return stream_kinds(arch); }

inline WindowMode mode_of(const ArchConfig& arch) {
  for (auto m : all_window_modes())
    if (window_vocab(m) == arch.vocab_sizes && window_bars(m) * kStepsPerBar == arch.steps) return m;
  throw DataError("checkpoint shape matches no window mode");
}

inline void write_midi_file(const std::string& path, const TokenSequence& x, const std::vector<StreamKind>& kinds) {
  const auto bytes = write_midi(tokens_to_song(x, kinds));
  std::ofstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot write " + path);
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

inline std::string format_percent(double v) {
  std::ostringstream s;
  s << std::fixed << std::setprecision(2) << 100.0 * v << "%";
  return s.str();
}

inline MusicVae<float> load_checkpoint(const std::string& path) {
  if (path.empty()) throw UsageError("--checkpoint is required");
  if (!fs::exists(path)) throw DataError("checkpoint not found: " + path);
  return load_model<float>(Container::load(path));
}

}  // namespace detail

/// Runs one command. `args` excludes the program name.
inline int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err, const ServeFn& serve = {}) {
  using namespace detail;
  CLI::App app{"Recurrent VAE for symbolic music: data, training, evaluation and latent tools", "musicvae"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all", "help for every command");

  // ---- ingest ----
  auto* ingest = app.add_subcommand("ingest", "build datasets from a MIDI directory or a synthetic corpus");
  Settings ingest_s(ingest);
  std::string in_dir, out_dir, synthetic_kind, drum_map;
  std::vector<std::string> modes{"melody2"};
  int synth_n = 1000, synth_bars = 2;
  ingest->add_option("--input", in_dir, "directory searched recursively for .mid/.midi files");
  ingest->add_option("--synthetic", synthetic_kind, "random_melodies, repetition or styled instead of MIDI input")
      ->check(CLI::IsMember({"random_melodies", "repetition", "styled"}));
  ingest->add_option("--n", synth_n, "synthetic examples")->check(CLI::PositiveNumber);
  ingest->add_option("--bars", synth_bars, "synthetic bars (2 or 16)")->check(CLI::IsMember({2, 16}));
  ingest->add_option("--modes", modes, "window modes: melody2 melody16 drums2 drums16 trio16")->delimiter(',');
  ingest->add_option("--drum-map", drum_map, "drum class table (defaults to the built-in one)");
  ingest->add_option("--out", out_dir, "output directory")->required();
  ingest_s.bind("--seed", "seed", "synthetic corpus seed");

  // ---- train ----
  auto* train = app.add_subcommand("train", "train a model on a dataset");
  Settings train_s(train);
  std::string data_path, resume;
  train->add_option("--data", data_path, "dataset file")->required();
  train->add_option("--out", out_dir, "output directory")->required();
  train->add_option("--resume", resume, "continue from a checkpoint");
  train_s.bind("--steps", "train.total_steps", "total updates");
  train_s.bind("--batch", "train.batch_size", "batch size");
  train_s.bind("--lr", "train.base_lr", "initial learning rate");
  train_s.bind("--decoder", "arch.decoder", "flat or hierarchical");
  train_s.bind("--latent", "arch.latent_dim", "latent dimension");
  train_s.bind("--free-bits", "train.free_bits", "free bits");
  train_s.bind("--beta", "train.beta_max", "maximum KL weight");
  train_s.bind("--checkpoint-every", "train.checkpoint_interval", "steps between checkpoints (0: final only)");
  train_s.bind("--log-every", "train.log_interval", "steps between metric lines");
  train_s.bind("--seed", "train.seed", "training seed");

  // ---- eval ----
  auto* eval = app.add_subcommand("eval", "reconstruction accuracy and interpolation reports");
  Settings eval_s(eval);
  std::vector<std::string> checkpoints;
  std::string eval_mode = "both", lm_data;
  bool interpolation = false;
  eval->add_option("--checkpoint", checkpoints, "checkpoint (repeat to compare models)")->required();
  eval->add_option("--data", data_path, "evaluation dataset")->required();
  eval->add_option("--mode", eval_mode, "teacher_forced, sampled or both")
      ->check(CLI::IsMember({"teacher_forced", "sampled", "both"}));
  eval->add_flag("--interpolation", interpolation, "also write the interpolation report");
  eval->add_option("--lm-data", lm_data, "dataset for the n-gram judge (default: --data)");
  eval->add_option("--out", out_dir, "directory for reports");
  eval_s.bind("--temperature", "eval.temperature", "sampling temperature for accuracy");
  eval_s.bind("--pairs", "eval.pairs", "interpolation pairs");
  eval_s.bind("--seed", "seed", "evaluation seed");

  // ---- sample ----
  auto* sample = app.add_subcommand("sample", "draw sequences from the prior");
  Settings sample_s(sample);
  std::string checkpoint;
  int n_samples = 0;
  bool midi = true;
  sample->add_option("--checkpoint", checkpoint, "checkpoint")->required();
  sample->add_option("--n", n_samples, "number of samples")->required()->check(CLI::NonNegativeNumber);
  sample->add_option("--out", out_dir, "output directory (tokens and MIDI)");
  sample->add_flag("!--no-midi", midi, "skip MIDI export");
  sample_s.bind("--temperature", "sample.temperature", "softmax temperature");
  sample_s.bind("--seed", "seed", "sampling seed");

  // ---- interpolate ----
  auto* interp = app.add_subcommand("interpolate", "decode a slerp path between two dataset examples");
  Settings interp_s(interp);
  std::size_t index_a = 0, index_b = 1;
  int steps = 7;
  interp->add_option("--checkpoint", checkpoint, "checkpoint")->required();
  interp->add_option("--data", data_path, "dataset holding the endpoints")->required();
  interp->add_option("--a", index_a, "index of endpoint A");
  interp->add_option("--b", index_b, "index of endpoint B");
  interp->add_option("--steps", steps, "interior points")->check(CLI::NonNegativeNumber);
  interp->add_option("--out", out_dir, "output directory (tokens and MIDI)");
  interp->add_flag("!--no-midi", midi, "skip MIDI export");
  interp_s.bind("--temperature", "interpolate.temperature", "softmax temperature");
  interp_s.bind("--seed", "seed", "sampling seed");

  // ---- attrs ----
  auto* attrs = app.add_subcommand("attrs", "attribute vectors");
  attrs->require_subcommand(1);
  auto* compute = attrs->add_subcommand("compute", "attribute vectors from a dataset's latent means");
  Settings compute_s(compute);
  std::string attrs_path;
  compute->add_option("--checkpoint", checkpoint, "checkpoint")->required();
  compute->add_option("--data", data_path, "dataset")->required();
  compute->add_option("--out", out_dir, "output directory")->required();
  compute_s.bind("--parity", "attrs.parity", "syncopation parity: literal or offbeat");

  auto* apply = attrs->add_subcommand("apply", "shift one example along an attribute vector and decode");
  Settings apply_s(apply);
  std::string kind_name;
  std::size_t index = 0;
  std::vector<double> scales;
  apply->add_option("--checkpoint", checkpoint, "checkpoint")->required();
  apply->add_option("--attrs", attrs_path, "attribute vector file")->required();
  apply->add_option("--data", data_path, "dataset")->required();
  apply->add_option("--index", index, "example index");
  apply->add_option("--kind", kind_name, "attribute")->required();
  apply->add_option("--scale", scales, "scales (default -1.5..1.5 in 7 steps)")->delimiter(',');
  apply->add_option("--out", out_dir, "output directory (tokens and MIDI)");
  apply->add_flag("!--no-midi", midi, "skip MIDI export");
  apply_s.bind("--temperature", "attrs.temperature", "softmax temperature");
  apply_s.bind("--parity", "attrs.parity", "syncopation parity");
  apply_s.bind("--seed", "seed", "sampling seed");

  auto* matrix = attrs->add_subcommand("matrix", "percent change of every attribute under every vector");
  Settings matrix_s(matrix);
  matrix->add_option("--checkpoint", checkpoint, "checkpoint")->required();
  matrix->add_option("--attrs", attrs_path, "attribute vector file")->required();
  matrix->add_option("--out", out_dir, "output directory");
  matrix_s.bind("--n", "attrs.samples", "prior samples");
  matrix_s.bind("--temperature", "attrs.temperature", "softmax temperature");
  matrix_s.bind("--parity", "attrs.parity", "syncopation parity");
  matrix_s.bind("--seed", "seed", "sampling seed");

  // ---- serve ----
  auto* srv = app.add_subcommand("serve", "HTTP inference API");
  Settings serve_s(srv);
  srv->add_option("--checkpoint", checkpoint, "checkpoint")->required();
  srv->add_option("--attrs", attrs_path, "attribute vector file");
  serve_s.bind("--host", "serve.host", "bind address");
  serve_s.bind("--port", "serve.port", "port");

  std::vector<std::string> argv(args.rbegin(), args.rend());  // CLI11 consumes from the back
  try {
    app.parse(argv);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n";
    const CLI::App* failed = &app;
    for (auto* s : app.get_subcommands()) {
      failed = s;
      for (auto* t : s->get_subcommands()) failed = t;
    }
    err << failed->help();
    return kUsage;
  }

  try {
    // ---------------------------------------------------------------- ingest
    if (*ingest) {
      const auto kv = ingest_s.resolve();
      const auto seed = get_seed(kv);
      std::vector<WindowMode> wm;
      for (const auto& m : modes) {
        try {
          wm.push_back(parse_window_mode(m));
        } catch (const std::exception& e) {
          throw UsageError(e.what());
        }
      }
      if (in_dir.empty() == synthetic_kind.empty()) throw UsageError("give exactly one of --input or --synthetic");
      if (!in_dir.empty() && !fs::is_directory(in_dir)) throw DataError("input directory not found: " + in_dir);
      const auto map = drum_map.empty() ? DrumClassMap::standard() : DrumClassMap::load(drum_map);
      echo_config(out_dir, "ingest", kv);
      if (!synthetic_kind.empty()) {
        const WindowMode m = synth_bars == 2 ? WindowMode::melody2 : WindowMode::melody16;
        Dataset d;
        d.mode = m;
        if (synthetic_kind == "random_melodies") d.examples = synthetic::random_melodies(synth_n, synth_bars, seed);
        else if (synthetic_kind == "repetition") d.examples = synthetic::repetition_corpus(synth_n, synth_bars, seed);
        else d.examples = synthetic::styled_corpus(synth_n, synth_bars, seed);
        save_dataset(out_dir + "/" + to_string(m) + ".dataset", d);
        out << to_string(m) << "\t" << d.examples.size() << " examples\n";
        return kOk;
      }
      CorpusBuilder builder(wm, map);
      builder.add_directory(in_dir);
      for (const auto& w : builder.warnings()) err << "warning: " << w << "\n";
      for (auto m : wm) {
        save_dataset(out_dir + "/" + to_string(m) + ".dataset", builder.dataset(m));
        out << to_string(m) << "\t" << builder.dataset(m).examples.size() << " examples\n";
      }
      std::ofstream(out_dir + "/ingest_stats.json") << builder.stats().to_json().dump(2) << "\n";
      return kOk;
    }

    // ----------------------------------------------------------------- train
    if (*train) {
      auto kv = train_s.resolve();
      const auto data = load_nonempty(data_path);
      std::optional<Container> resumed;
      if (!resume.empty()) {
        if (!fs::exists(resume)) throw DataError("checkpoint not found: " + resume);
        resumed = Container::load(resume);
        // The checkpoint's architecture wins; settings may extend training.
        kv.merge(KeyValueConfig::parse(resumed->meta_at("arch")));
      }
      const ArchConfig arch = arch_for(kv, data);
      const TrainingConfig cfg = TrainingConfig::read(kv);
      echo_config(out_dir, "train", kv);
      auto trainer = resumed ? Trainer<float>::from_checkpoint(*resumed, &cfg)
                             : Trainer<float>(MusicVae<float>(arch, derive_seed(cfg.seed, 0x1417)), cfg);
      if (trainer.model().arch() != arch) throw DataError("checkpoint architecture does not match the dataset");
      std::ofstream log(out_dir + "/metrics.tsv", resumed ? std::ios::app : std::ios::trunc);
      if (!resumed) log << StepMetrics::kHeader << '\n';
      try {
        trainer.run(data.examples, &log, out_dir + "/model");
      } catch (const TrainingAborted& e) {
        err << "training aborted: " << e.what() << " (diagnostic checkpoint " << out_dir << "/model-abort.ckpt)\n";
        return kRuntimeError;
      }
      out << "trained " << trainer.step() << " steps; checkpoint " << out_dir << "/model.ckpt\n";
      return kOk;
    }

    // ------------------------------------------------------------------ eval
    if (*eval) {
      const auto kv = eval_s.resolve();
      const double temperature = get_temperature(kv, "eval.temperature");
      const double interp_temp = get_temperature(kv, "eval.interp_temperature");
      const auto seed = get_seed(kv);
      const auto pairs_n = kv.get_int("eval.pairs", 1024);
      const auto alphas_n = kv.get_int("eval.alphas", 11);
      const auto order = kv.get_int("eval.lm_order", 5);
      if (pairs_n <= 0 || alphas_n < 2 || order < 1) throw ConfigError("eval: need pairs > 0, alphas >= 2, lm_order >= 1");
      if (interpolation && out_dir.empty()) throw UsageError("--interpolation needs --out");
      const auto data = load_nonempty(data_path);
      std::vector<MusicVae<float>> models;
      for (const auto& c : checkpoints) {
        models.push_back(load_checkpoint(c));
        require_compatible(models.back().arch(), data, data_path);
      }
      if (!out_dir.empty()) echo_config(out_dir, "eval", kv);

      const bool tf = eval_mode != "sampled", sampled = eval_mode != "teacher_forced";
      std::ostringstream table;
      table << "model\tdecoder";
      if (tf) table << "\tteacher_forced";
      if (sampled) table << "\tsampled";
      table << '\n';
      for (std::size_t i = 0; i < models.size(); ++i) {
        table << fs::path(checkpoints[i]).filename().string() << '\t' << to_string(models[i].arch().decoder);
        if (tf) table << '\t' << format_percent(reconstruction_accuracy(models[i], data.examples, AccuracyMode::teacher_forced).accuracy);
        if (sampled)
          table << '\t'
                << format_percent(reconstruction_accuracy(models[i], data.examples, AccuracyMode::sampled, temperature, seed).accuracy);
        table << '\n';
      }
      out << table.str();
      if (!out_dir.empty()) std::ofstream(out_dir + "/accuracy.tsv") << table.str();

      if (interpolation) {
        const auto lm_set = lm_data.empty() ? data : load_nonempty(lm_data);
        std::vector<std::vector<int>> first;
        for (const auto& x : lm_set.examples) first.push_back(x.streams[0]);
        const auto lm = NgramModel::fit(first, window_vocab(lm_set.mode)[0], static_cast<int>(order));
        if (data.examples.size() < 2) throw DataError("interpolation needs at least two examples");
        const auto pairs = make_pairs(data.examples, static_cast<std::size_t>(pairs_n), seed);
        const auto alphas = alpha_grid(static_cast<int>(alphas_n));
        std::vector<InterpolationReport> reports{data_interpolation_report(pairs, alphas, lm, seed)};
        for (const auto& m : models) reports.push_back(latent_interpolation_report(m, pairs, alphas, interp_temp, lm, seed));
        std::ofstream(out_dir + "/interpolation.tsv") << interpolation_tsv(reports);
        std::ofstream(out_dir + "/interpolation.svg") << interpolation_svg(reports);
        out << "interpolation report: " << out_dir << "/interpolation.tsv, " << out_dir << "/interpolation.svg\n";
      }
      return kOk;
    }

    // ---------------------------------------------------------------- sample
    if (*sample) {
      const auto kv = sample_s.resolve();
      const double temperature = get_temperature(kv, "sample.temperature");
      const auto seed = get_seed(kv);
      const auto model = load_checkpoint(checkpoint);
      if (!out_dir.empty()) echo_config(out_dir, "sample", kv);
      const auto xs = model.sample_prior(n_samples, temperature, seed);
      Dataset d;
      d.mode = mode_of(model.arch());
      d.examples = xs;
      if (out_dir.empty()) {
        for (const auto& x : xs) out << format_record(d.mode, x) << '\n';
        return kOk;
      }
      save_dataset(out_dir + "/samples.dataset", d);
      if (midi)
        for (std::size_t i = 0; i < xs.size(); ++i) {
          std::ostringstream name;
          name << out_dir << "/sample-" << std::setw(4) << std::setfill('0') << i << ".mid";
          write_midi_file(name.str(), xs[i], kinds_of(model.arch()));
        }
      out << xs.size() << " samples written to " << out_dir << "\n";
      return kOk;
    }

    // ----------------------------------------------------------- interpolate
    if (*interp) {
      const auto kv = interp_s.resolve();
      const double temperature = get_temperature(kv, "interpolate.temperature");
      const auto seed = get_seed(kv);
      const auto model = load_checkpoint(checkpoint);
      const auto data = load_nonempty(data_path);
      require_compatible(model.arch(), data, data_path);
      if (index_a >= data.examples.size() || index_b >= data.examples.size())
        throw UsageError("endpoint index out of range (dataset has " + std::to_string(data.examples.size()) + " examples)");
      if (!out_dir.empty()) echo_config(out_dir, "interpolate", kv);
      // Interior alphas i / (steps + 1); the endpoints themselves are the
      // input examples.
      std::vector<double> alphas;
      for (int i = 1; i <= steps; ++i) alphas.push_back(static_cast<double>(i) / (steps + 1));
      std::vector<SequencePair> pair;
      pair.emplace_back(data.examples[index_a], data.examples[index_b]);
      Dataset d;
      d.mode = data.mode;
      d.examples.push_back(data.examples[index_a]);
      if (!alphas.empty()) {
        auto decoded = latent_interpolate(model, pair, alphas, temperature, seed);
        for (auto& x : decoded[0]) d.examples.push_back(std::move(x));
      }
      d.examples.push_back(data.examples[index_b]);
      if (out_dir.empty()) {
        for (const auto& x : d.examples) out << format_record(d.mode, x) << '\n';
        return kOk;
      }
      save_dataset(out_dir + "/interpolation.dataset", d);
      if (midi)
        for (std::size_t i = 0; i < d.examples.size(); ++i)
          write_midi_file(out_dir + "/interp-" + std::to_string(i) + ".mid", d.examples[i], kinds_of(model.arch()));
      out << d.examples.size() << " sequences (" << steps << " interpolated plus endpoints) written to " << out_dir << "\n";
      return kOk;
    }

    // ------------------------------------------------------------------ attrs
    if (*compute) {
      const auto kv = compute_s.resolve();
      const auto parity = parse_sync_parity(kv.get_string("attrs.parity", "literal"));
      const auto model = load_checkpoint(checkpoint);
      const auto data = load_nonempty(data_path);
      require_compatible(model.arch(), data, data_path);
      if (kinds_of(model.arch()).front() == StreamKind::drums) throw DataError("attributes are defined for melodic streams only");
      echo_config(out_dir, "attrs compute", kv);
      // An attribute that never varies in the corpus has no direction; it is
      // skipped with a warning rather than failing the others.
      const Eigen::MatrixXd z = encode_means(model, std::span<const TokenSequence>(data.examples));
      std::vector<AttributeValues> measured;
      for (const auto& x : data.examples) measured.push_back(measure_tokens(x, parity));
      std::vector<AttributeVector> vs;
      for (auto k : kAllAttributes) {
        std::vector<double> values;
        for (const auto& m : measured) values.push_back(m[k]);
        try {
          vs.push_back(attribute_vector(z, values, k));
        } catch (const std::invalid_argument& e) {
          err << "warning: " << e.what() << "\n";
        }
      }
      if (vs.empty()) throw DataError("no attribute varies over " + data_path);
      Container c;
      c.meta["format"] = "musicvae-attributes";
      store_attribute_vectors(c, vs);
      c.save(out_dir + "/attributes.ckpt");
      out << "attribute\tbottom_mean\ttop_mean\tnorm\n";
      for (const auto& v : vs) out << to_string(v.kind) << '\t' << v.bottom_mean << '\t' << v.top_mean << '\t' << v.vector.norm() << '\n';
      return kOk;
    }

    if (*apply) {
      const auto kv = apply_s.resolve();
      const double temperature = get_temperature(kv, "attrs.temperature");
      const auto parity = parse_sync_parity(kv.get_string("attrs.parity", "literal"));
      const auto seed = get_seed(kv);
      AttributeKind kind;
      try {
        kind = parse_attribute(kind_name);
      } catch (const std::invalid_argument& e) {
        throw UsageError(e.what());
      }
      if (scales.empty()) scales = scale_sweep();
      const auto model = load_checkpoint(checkpoint);
      if (!fs::exists(attrs_path)) throw DataError("attribute file not found: " + attrs_path);
      const auto vs = load_attribute_vectors(Container::load(attrs_path));
      const AttributeVector* v = nullptr;
      for (const auto& a : vs)
        if (a.kind == kind) v = &a;
      if (!v) throw DataError(attrs_path + " has no vector for " + kind_name);
      if (v->vector.size() != model.arch().latent_dim) throw DataError("attribute vector dimension does not match the model");
      const auto data = load_nonempty(data_path);
      require_compatible(model.arch(), data, data_path);
      if (index >= data.examples.size()) throw UsageError("--index out of range");
      if (!out_dir.empty()) echo_config(out_dir, "attrs apply", kv);
      const auto z = encode_means(model, std::span<const TokenSequence>(&data.examples[index], 1)).col(0).eval();
      Dataset d;
      d.mode = data.mode;
      out << "scale";
      for (auto k : kAllAttributes) out << '\t' << to_string(k);
      out << '\n';
      for (double s : scales) {
        Rng rng(seed);
        const Vec shifted = apply_attribute(z, *v, s);
        auto x = model.generate(shifted.cast<float>(), temperature, rng).at(0);
        const auto m = measure_tokens(x, parity);
        out << s;
        for (auto k : kAllAttributes) out << '\t' << m[k];
        out << '\n';
        d.examples.push_back(std::move(x));
      }
      if (!out_dir.empty()) {
        save_dataset(out_dir + "/attribute_sweep.dataset", d);
        if (midi)
          for (std::size_t i = 0; i < d.examples.size(); ++i)
            write_midi_file(out_dir + "/sweep-" + std::to_string(i) + ".mid", d.examples[i], kinds_of(model.arch()));
      }
      return kOk;
    }

    if (*matrix) {
      const auto kv = matrix_s.resolve();
      const double temperature = get_temperature(kv, "attrs.temperature");
      const auto parity = parse_sync_parity(kv.get_string("attrs.parity", "literal"));
      const auto seed = get_seed(kv);
      const auto n = kv.get_int("attrs.samples", 256);
      if (n < 0) throw ConfigError("attrs.samples must be >= 0");
      const auto model = load_checkpoint(checkpoint);
      if (!fs::exists(attrs_path)) throw DataError("attribute file not found: " + attrs_path);
      const auto vs = load_attribute_vectors(Container::load(attrs_path));
      if (vs.empty()) throw DataError(attrs_path + " holds no attribute vectors");
      if (!out_dir.empty()) echo_config(out_dir, "attrs matrix", kv);
      std::string report;
      for (double sign : {1.0, -1.0}) {
        const auto m = attribute_effect_matrix(model, static_cast<int>(n), vs, temperature, seed, sign, parity);
        report += m.to_tsv();
        report += "# dominant rows: " + std::to_string(m.dominant_rows()) + " of " + std::to_string(m.applied.size()) + "\n";
      }
      out << report;
      if (!out_dir.empty()) std::ofstream(out_dir + "/effect_matrix.tsv") << report;
      return kOk;
    }

    // ------------------------------------------------------------------ serve
    if (*srv) {
      const auto kv = serve_s.resolve();
      const auto host = kv.get_string("serve.host", "127.0.0.1");
      const auto port = kv.get_int("serve.port", 8080);
      if (port < 0 || port > 65535) throw ConfigError("serve.port must be in [0, 65535]");
      if (!fs::exists(checkpoint)) throw DataError("checkpoint not found: " + checkpoint);
      std::optional<Container> extra;
      if (!attrs_path.empty()) {
        if (!fs::exists(attrs_path)) throw DataError("attribute file not found: " + attrs_path);
        extra = Container::load(attrs_path);
      }
      const InferenceService service(Container::load(checkpoint), extra ? &*extra : nullptr);
      if (!serve) throw std::runtime_error("this build has no HTTP transport");
      return serve(service, host, static_cast<int>(port), err);
    }
  } catch (const UsageError& e) {
    err << "error: " << e.what() << "\n";
    return kUsage;
  } catch (const ConfigError& e) {
    err << "error: " << e.what() << "\n";
    return kUsage;
  } catch (const DataError& e) {
    err << "data error: " << e.what() << "\n";
    return kDataError;
  } catch (const FormatError& e) {
    err << "data error: " << e.what() << "\n";
    return kDataError;
  } catch (const MidiParseError& e) {
    err << "data error: " << e.what() << "\n";
    return kDataError;
  } catch (const CodecError& e) {
    err << "data error: " << e.what() << "\n";
    return kDataError;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kRuntimeError;
  }
  return kUsage;
}

}  // namespace musicvae::cli
