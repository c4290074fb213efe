#pragma once

// MIDI song -> quantized streams -> fixed-length token windows.

#include <algorithm>
#include <map>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <vector>

#include "musicvae/codec.hpp"
#include "musicvae/midi.hpp"
#include "musicvae/notes.hpp"

namespace musicvae {

inline constexpr int kDrumChannel = 9;  // channel 10, 1-based

/// Nearest 16th-note step for a tick; exact midpoints go to the earlier step.
inline long long tick_to_step(long long tick, int ticks_per_quarter) {
  const long long num = 4 * tick;
  const long long den = ticks_per_quarter;
  long long q = num / den;
  long long r = num % den;
  if (r < 0) {
    r += den;
    --q;
  }
  return 2 * r > den ? q + 1 : q;
}

struct QuantizedStream {
  NoteSequence seq;
  int channel = 0;
  int program = 0;
};

struct QuantizeResult {
  bool rejected = false;
  std::string reason;
  std::vector<QuantizedStream> streams;
};

inline std::optional<StreamKind> eligibility(int channel, int program) {
  if (channel == kDrumChannel) return StreamKind::drums;
  if (program >= 0 && program <= 31) return StreamKind::melody;
  if (program >= 32 && program <= 39) return StreamKind::bass;
  return std::nullopt;
}

/// Skyline reduction to monophony. Notes are visited in onset order; at a
/// shared onset the highest pitch wins; a higher note starting inside a
/// sounding note truncates it, a lower one is dropped.
inline std::vector<Note> skyline(std::vector<Note> notes) {
  std::sort(notes.begin(), notes.end(), [](const Note& a, const Note& b) {
    return a.onset != b.onset ? a.onset < b.onset : a.pitch > b.pitch;
  });
  std::vector<Note> out;
  for (const Note& n : notes) {
    if (!out.empty()) {
      Note& cur = out.back();
      if (n.onset == cur.onset) continue;
      if (n.onset < cur.end()) {
        if (n.pitch <= cur.pitch) continue;
        cur.duration = n.onset - cur.onset;
      }
    }
    out.push_back(n);
  }
  return out;
}

/// Quantizes every eligible (channel, program) stream of a song onto the
/// 16th-note grid. All streams share one length, rounded up to whole bars.
inline QuantizeResult quantize(const MidiSong& song) {
  QuantizeResult res;
  for (const auto& ts : song.time_signatures)
    if (ts.numerator != 4 || ts.denominator != 4) {
      res.rejected = true;
      res.reason = "non-4/4 time signature " + std::to_string(ts.numerator) + "/" + std::to_string(ts.denominator);
      return res;
    }
  if (song.notes.empty()) return res;

  std::map<std::pair<int, int>, std::vector<Note>> groups;  // (channel, program)
  long long last_step = 0;
  for (const MidiNote& n : song.notes) {
    const int program = n.channel == kDrumChannel ? 0 : song.program_at(n.channel, n.on_tick);
    if (!eligibility(n.channel, program)) continue;
    const long long on = tick_to_step(n.on_tick, song.ticks_per_quarter);
    long long off = tick_to_step(n.off_tick, song.ticks_per_quarter);
    if (n.channel == kDrumChannel || off <= on) off = on + 1;
    last_step = std::max(last_step, off);
    groups[{n.channel, program}].push_back(Note{n.pitch, static_cast<int>(on), static_cast<int>(off - on)});
  }
  const int length = static_cast<int>((last_step + kStepsPerBar - 1) / kStepsPerBar * kStepsPerBar);
  for (auto& [key, notes] : groups) {
    const StreamKind kind = *eligibility(key.first, key.second);
    NoteSequence seq{kind, {}, length};
    if (kind == StreamKind::drums) {
      std::set<std::pair<int, int>> seen;
      for (const Note& n : notes)
        if (seen.insert({n.onset, n.pitch}).second) seq.notes.push_back(Note{n.pitch, n.onset, 1});
    } else {
      seq.notes = skyline(std::move(notes));
    }
    seq.sort();
    res.streams.push_back({std::move(seq), key.first, key.second});
  }
  return res;
}

// ---- windows -------------------------------------------------------------------

enum class WindowMode { melody2, melody16, drums2, drums16, trio16 };

inline const std::vector<WindowMode>& all_window_modes() {
  static const std::vector<WindowMode> modes{WindowMode::melody2, WindowMode::melody16, WindowMode::drums2,
                                             WindowMode::drums16, WindowMode::trio16};
  return modes;
}

inline std::string to_string(WindowMode m) {
  switch (m) {
    case WindowMode::melody2: return "melody2";
    case WindowMode::melody16: return "melody16";
    case WindowMode::drums2: return "drums2";
    case WindowMode::drums16: return "drums16";
    case WindowMode::trio16: return "trio16";
  }
  return "?";
}

inline WindowMode parse_window_mode(const std::string& s) {
  for (auto m : all_window_modes())
    if (to_string(m) == s) return m;
  throw std::invalid_argument("unknown mode '" + s + "' (expected melody2, melody16, drums2, drums16 or trio16)");
}

inline int window_bars(WindowMode m) {
  return (m == WindowMode::melody2 || m == WindowMode::drums2) ? 2 : 16;
}

/// Stream kinds of an example in this mode, in stream order.
inline std::vector<StreamKind> window_kinds(WindowMode m) {
  switch (m) {
    case WindowMode::melody2:
    case WindowMode::melody16: return {StreamKind::melody};
    case WindowMode::drums2:
    case WindowMode::drums16: return {StreamKind::drums};
    case WindowMode::trio16: return {StreamKind::melody, StreamKind::bass, StreamKind::drums};
  }
  return {};
}

inline std::vector<int> window_vocab(WindowMode m) {
  std::vector<int> v;
  for (auto k : window_kinds(m)) v.push_back(vocab_size(k));
  return v;
}

/// Longest run of steps with no sounding note (for drums: no onset).
inline int longest_rest(const NoteSequence& seq) {
  std::vector<char> busy(static_cast<std::size_t>(seq.length_steps), 0);
  for (const Note& n : seq.notes)
    for (int t = std::max(0, n.onset); t < std::min(n.end(), seq.length_steps); ++t) busy[static_cast<std::size_t>(t)] = 1;
  int best = 0, run = 0;
  for (char b : busy) {
    run = b ? 0 : run + 1;
    best = std::max(best, run);
  }
  return best;
}

inline bool rest_ok(const NoteSequence& window) { return longest_rest(window) <= kStepsPerBar; }

/// All windows of the mode's length at a stride of one bar that pass the
/// rest filter, encoded as tokens. Trio mode enumerates every (melody,
/// bass, drums) stream combination. Not deduplicated.
inline std::vector<TokenSequence> extract_windows(const std::vector<QuantizedStream>& streams, WindowMode mode,
                                                  const DrumClassMap& drum_map = DrumClassMap::standard()) {
  const int steps = window_bars(mode) * kStepsPerBar;
  const auto kinds = window_kinds(mode);
  std::vector<std::vector<const NoteSequence*>> candidates(kinds.size());
  for (std::size_t k = 0; k < kinds.size(); ++k)
    for (const auto& s : streams)
      if (s.seq.kind == kinds[k]) candidates[k].push_back(&s.seq);

  std::vector<TokenSequence> out;
  std::vector<std::size_t> pick(kinds.size(), 0);
  for (const auto& c : candidates)
    if (c.empty()) return out;
  while (true) {
    const int length = candidates[0][pick[0]]->length_steps;
    for (int begin = 0; begin + steps <= length; begin += kStepsPerBar) {
      TokenSequence x;
      bool ok = true;
      for (std::size_t k = 0; k < kinds.size() && ok; ++k) {
        const NoteSequence w = candidates[k][pick[k]]->window(begin, steps);
        if (!rest_ok(w)) ok = false;
        else x.streams.push_back(encode_stream(w, drum_map));
      }
      if (ok) out.push_back(std::move(x));
    }
    std::size_t k = 0;
    while (k < pick.size() && ++pick[k] == candidates[k].size()) pick[k++] = 0;
    if (k == pick.size()) break;
  }
  return out;
}

/// Accumulates examples across songs, keeping the first occurrence of each
/// distinct token content.
class Deduplicator {
 public:
  bool insert(const TokenSequence& x) {
    std::string key;
    for (const auto& s : x.streams) {
      key.append(reinterpret_cast<const char*>(s.data()), s.size() * sizeof(int));
      key.push_back('|');
    }
    return seen_.insert(std::move(key)).second;
  }
  std::size_t size() const { return seen_.size(); }

 private:
  std::unordered_set<std::string> seen_;
};

// ---- token -> MIDI export ---------------------------------------------------------

/// Renders decoded streams as a song at 120 BPM in 4/4: melody on channel 1
/// (program 0), bass on channel 2 (program 33), drums on channel 10.
inline MidiSong tokens_to_song(const TokenSequence& x, const std::vector<StreamKind>& kinds, int ticks_per_quarter = 480) {
  MidiSong song;
  song.ticks_per_quarter = ticks_per_quarter;
  song.tempo_events.push_back({0, 500000});
  song.time_signatures.push_back({0, 4, 4});
  const int step_ticks = ticks_per_quarter / 4;
  int melodic_channel = 0;
  for (std::size_t s = 0; s < x.streams.size() && s < kinds.size(); ++s) {
    const StreamKind kind = kinds[s];
    int channel = kDrumChannel;
    if (kind != StreamKind::drums) {
      channel = melodic_channel++;
      song.program_changes.push_back({channel, 0, kind == StreamKind::bass ? 33 : 0});
    }
    for (const Note& n : decode_stream(x.streams[s], kind).notes)
      song.notes.push_back(MidiNote{channel, n.pitch, 90, static_cast<long long>(n.onset) * step_ticks,
                                    static_cast<long long>(n.end()) * step_ticks, 0});
  }
  return song;
}

}  // namespace musicvae
