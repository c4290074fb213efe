#pragma once

// Dataset files: one example per line,
//
//   <mode> <bars> <stream-count> | <tokens> | <tokens> ...
//
// Tokens are space-separated integers; a run of n equal tokens v may be
// written "v*n". Blank lines and lines starting with '#' are ignored.
//
//   melody2 2 1 | 60 129*3 128 129*27

#include "json.hpp"

#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "musicvae/codec.hpp"
#include "musicvae/ingest.hpp"
#include "musicvae/midi.hpp"

namespace musicvae {

class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Dataset {
  WindowMode mode = WindowMode::melody2;
  std::vector<TokenSequence> examples;

  int bars() const { return window_bars(mode); }
  int steps() const { return bars() * kStepsPerBar; }
};

inline std::string format_tokens(const std::vector<int>& tokens) {
  std::string out;
  for (std::size_t i = 0; i < tokens.size();) {
    std::size_t j = i;
    while (j < tokens.size() && tokens[j] == tokens[i]) ++j;
    if (!out.empty()) out.push_back(' ');
    out += std::to_string(tokens[i]);
    if (j - i > 1) out += "*" + std::to_string(j - i);
    i = j;
  }
  return out;
}

inline std::vector<int> parse_tokens(const std::string& text) {
  std::vector<int> out;
  std::istringstream in(text);
  std::string item;
  while (in >> item) {
    const auto star = item.find('*');
    try {
      std::size_t used = 0;
      const int v = std::stoi(item.substr(0, star), &used);
      if (used != (star == std::string::npos ? item.size() : star)) throw std::invalid_argument(item);
      long long n = 1;
      if (star != std::string::npos) {
        n = std::stoll(item.substr(star + 1), &used);
        if (used != item.size() - star - 1 || n < 1 || n > 1'000'000) throw std::invalid_argument(item);
      }
      out.insert(out.end(), static_cast<std::size_t>(n), v);
    } catch (const std::exception&) {
      throw DataError("bad token item '" + item + "'");
    }
  }
  return out;
}

inline std::string format_record(WindowMode mode, const TokenSequence& x) {
  std::string line = to_string(mode) + " " + std::to_string(window_bars(mode)) + " " + std::to_string(x.streams.size());
  for (const auto& s : x.streams) line += " | " + format_tokens(s);
  return line;
}

inline void write_dataset(std::ostream& out, const Dataset& d) {
  out << "# musicvae dataset v1: <mode> <bars> <streams> | tokens ... (v*n = n copies of v)\n";
  for (const auto& x : d.examples) out << format_record(d.mode, x) << '\n';
}

inline void save_dataset(const std::string& path, const Dataset& d) {
  std::ofstream f(path);
  if (!f) throw DataError("cannot write " + path);
  write_dataset(f, d);
}

/// Reads and validates a dataset; all records must share one mode.
inline Dataset read_dataset(std::istream& in, const std::string& name = "dataset") {
  Dataset d;
  bool have_mode = false;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    auto where = [&] { return name + ":" + std::to_string(lineno) + ": "; };
    const auto first = line.find_first_not_of(" \t\r");
    if (first == std::string::npos || line[first] == '#') continue;
    std::vector<std::string> fields;
    std::size_t start = 0;
    while (true) {
      const auto bar = line.find('|', start);
      fields.push_back(line.substr(start, bar == std::string::npos ? std::string::npos : bar - start));
      if (bar == std::string::npos) break;
      start = bar + 1;
    }
    std::istringstream head(fields[0]);
    std::string mode_name;
    int bars = 0, nstreams = 0;
    if (!(head >> mode_name >> bars >> nstreams)) throw DataError(where() + "malformed record header");
    WindowMode mode;
    try {
      mode = parse_window_mode(mode_name);
    } catch (const std::invalid_argument& e) {
      throw DataError(where() + e.what());
    }
    if (have_mode && mode != d.mode) throw DataError(where() + "mixed modes in one dataset");
    d.mode = mode;
    have_mode = true;
    const auto vocab = window_vocab(mode);
    if (bars != window_bars(mode)) throw DataError(where() + "bar count does not match mode");
    if (nstreams != static_cast<int>(vocab.size()) || static_cast<int>(fields.size()) != nstreams + 1)
      throw DataError(where() + "stream count does not match mode");
    TokenSequence x;
    for (int s = 0; s < nstreams; ++s) {
      std::vector<int> tokens;
      try {
        tokens = parse_tokens(fields[static_cast<std::size_t>(s + 1)]);
      } catch (const DataError& e) {
        throw DataError(where() + e.what());
      }
      if (static_cast<int>(tokens.size()) != bars * kStepsPerBar)
        throw DataError(where() + "stream " + std::to_string(s) + " has " + std::to_string(tokens.size()) +
                        " tokens, expected " + std::to_string(bars * kStepsPerBar));
      for (int t : tokens)
        if (t < 0 || t >= vocab[static_cast<std::size_t>(s)])
          throw DataError(where() + "token " + std::to_string(t) + " outside vocabulary");
      x.streams.push_back(std::move(tokens));
    }
    d.examples.push_back(std::move(x));
  }
  return d;
}

inline Dataset load_dataset(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw DataError("cannot open dataset " + path);
  return read_dataset(f, path);
}

// ---- directory ingestion ---------------------------------------------------------

struct IngestStats {
  std::size_t files_seen = 0;
  std::size_t files_used = 0;
  std::map<std::string, std::size_t> rejections;  // reason -> count
  std::size_t dangling_note_files = 0;
  std::map<std::string, std::size_t> windows;     // mode -> windows before dedup
  std::map<std::string, std::size_t> examples;    // mode -> unique examples

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["files_seen"] = files_seen;
    j["files_used"] = files_used;
    j["rejections"] = rejections;
    j["dangling_note_files"] = dangling_note_files;
    j["windows"] = windows;
    j["examples"] = examples;
    return j;
  }
};

/// Processes songs in order, producing one deduplicated dataset per mode.
class CorpusBuilder {
 public:
  CorpusBuilder(std::vector<WindowMode> modes, DrumClassMap map = DrumClassMap::standard())
      : modes_(std::move(modes)), map_(std::move(map)) {
    for (auto m : modes_) datasets_[m].mode = m;
  }

  void add_song(const MidiSong& song) {
    ++stats_.files_seen;
    if (song.dangling_notes) ++stats_.dangling_note_files;
    const auto q = quantize(song);
    if (q.rejected) {
      ++stats_.rejections["non-4/4"];
      return;
    }
    if (q.streams.empty()) {
      ++stats_.rejections["no eligible streams"];
      return;
    }
    std::map<WindowMode, std::vector<TokenSequence>> found;
    try {
      for (auto m : modes_) found[m] = extract_windows(q.streams, m, map_);
    } catch (const CodecError& e) {
      ++stats_.rejections["codec error"];
      return;
    }
    ++stats_.files_used;
    for (auto& [m, windows] : found) {
      stats_.windows[to_string(m)] += windows.size();
      for (auto& w : windows)
        if (dedup_[m].insert(w)) datasets_[m].examples.push_back(std::move(w));
      stats_.examples[to_string(m)] = datasets_[m].examples.size();
    }
  }

  void add_file(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    std::ostringstream ss;
    ss << f.rdbuf();
    try {
      add_song(parse_midi(ss.str()));
    } catch (const MidiParseError& e) {
      ++stats_.files_seen;
      ++stats_.rejections["parse error"];
      warnings_.push_back(path + ": " + e.what());
    }
  }

  /// Every .mid/.midi file under `dir`, in sorted path order.
  void add_directory(const std::string& dir) {
    std::vector<std::string> paths;
    for (const auto& e : std::filesystem::recursive_directory_iterator(dir)) {
      if (!e.is_regular_file()) continue;
      auto ext = e.path().extension().string();
      std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
      if (ext == ".mid" || ext == ".midi") paths.push_back(e.path().string());
    }
    std::sort(paths.begin(), paths.end());
    for (const auto& p : paths) add_file(p);
  }

  const Dataset& dataset(WindowMode m) const { return datasets_.at(m); }
  const IngestStats& stats() const { return stats_; }
  const std::vector<std::string>& warnings() const { return warnings_; }

 private:
  std::vector<WindowMode> modes_;
  DrumClassMap map_;
  std::map<WindowMode, Dataset> datasets_;
  std::map<WindowMode, Deduplicator> dedup_;
  IngestStats stats_;
  std::vector<std::string> warnings_;
};

}  // namespace musicvae
