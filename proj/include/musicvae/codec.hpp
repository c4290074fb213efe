#pragma once

// Conversion between quantized note streams and categorical token streams.
//
// Melody/bass tokens (130): 0-127 note-on at that pitch, 128 note-off,
// 129 no event (rest or sustain of the current note).
// Drum tokens (512): 9-bit mask over canonical drum classes.

#include <array>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "musicvae/notes.hpp"

namespace musicvae {

inline constexpr int kMelodyVocab = 130;
inline constexpr int kNoteOff = 128;
inline constexpr int kNoEvent = 129;
inline constexpr int kDrumClasses = 9;
inline constexpr int kDrumVocab = 1 << kDrumClasses;

class CodecError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Aligned token streams for one example (1 stream, or 3 for trio:
/// melody, bass, drums).
struct TokenSequence {
  std::vector<std::vector<int>> streams;

  int steps() const { return streams.empty() ? 0 : static_cast<int>(streams.front().size()); }
  std::size_t stream_count() const { return streams.size(); }
  bool operator==(const TokenSequence&) const = default;
};

// ---- melody / bass -------------------------------------------------------

inline std::vector<int> encode_melody(const NoteSequence& seq) {
  if (!is_monophonic(seq)) throw CodecError("encode_melody: polyphonic input");
  std::vector<int> tokens(static_cast<std::size_t>(seq.length_steps), kNoEvent);
  std::vector<Note> notes = seq.notes;
  std::sort(notes.begin(), notes.end());
  for (const Note& n : notes) {
    if (n.pitch < 0 || n.pitch > 127) throw CodecError("encode_melody: pitch out of range");
    if (n.onset < 0 || n.duration < 1 || n.end() > seq.length_steps)
      throw CodecError("encode_melody: note outside sequence");
    tokens[static_cast<std::size_t>(n.onset)] = n.pitch;
  }
  for (const Note& n : notes) {
    const int e = n.end();
    if (e < seq.length_steps && tokens[static_cast<std::size_t>(e)] == kNoEvent)
      tokens[static_cast<std::size_t>(e)] = kNoteOff;
  }
  return tokens;
}

/// Inverse of encode_melody on its image. A note-off with no sounding note
/// is ignored.
inline NoteSequence decode_melody(const std::vector<int>& tokens, StreamKind kind = StreamKind::melody) {
  NoteSequence seq{kind, {}, static_cast<int>(tokens.size())};
  int active = -1;
  int onset = 0;
  auto close = [&](int t) {
    if (active >= 0) seq.notes.push_back(Note{active, onset, t - onset});
    active = -1;
  };
  for (int t = 0; t < static_cast<int>(tokens.size()); ++t) {
    const int tok = tokens[static_cast<std::size_t>(t)];
    if (tok < 0 || tok >= kMelodyVocab) throw CodecError("decode_melody: token out of range");
    if (tok < kNoteOff) {
      close(t);
      active = tok;
      onset = t;
    } else if (tok == kNoteOff) {
      close(t);
    }
  }
  close(static_cast<int>(tokens.size()));
  return seq;
}

// ---- drums -----------------------------------------------------------------

/// GM percussion key -> canonical class (kick, snare, closed hi-hat, open
/// hi-hat, low tom, mid tom, high tom, crash, ride).
class DrumClassMap {
 public:
  static constexpr std::array<const char*, kDrumClasses> kClassNames{
      "kick", "snare", "closed_hihat", "open_hihat", "low_tom", "mid_tom", "high_tom", "crash", "ride"};
  /// Pitch written back out for each class.
  static constexpr std::array<int, kDrumClasses> kCanonicalPitch{36, 38, 42, 46, 45, 48, 50, 49, 51};

  /// Built-in table covering GM keys 27-87. data/drum_classes.txt carries the
  /// same table.
  static DrumClassMap standard() {
    static const std::array<std::vector<int>, kDrumClasses> groups{{
        {35, 36},
        {27, 28, 31, 32, 33, 34, 37, 38, 39, 40, 56, 65, 66, 75, 85},
        {42, 44, 54, 68, 69, 70, 71, 73, 78, 80},
        {46, 67, 72, 74, 79, 81},
        {29, 41, 43, 45, 61, 64, 84},
        {47, 48, 60, 63, 77, 86, 87},
        {30, 50, 62, 76, 83},
        {49, 52, 55, 57, 58},
        {51, 53, 59, 82},
    }};
    DrumClassMap m;
    for (int c = 0; c < kDrumClasses; ++c)
      for (int key : groups[static_cast<std::size_t>(c)]) m.table_[key] = c;
    return m;
  }

  /// Reads "key class" pairs, one per line; '#' starts a comment.
  static DrumClassMap load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open drum class map " + path);
    DrumClassMap m;
    std::string line;
    while (std::getline(in, line)) {
      if (auto h = line.find('#'); h != std::string::npos) line.erase(h);
      std::istringstream ls(line);
      int key = 0;
      int cls = 0;
      if (!(ls >> key)) continue;
      if (!(ls >> cls) || cls < 0 || cls >= kDrumClasses || m.table_.count(key) != 0)
        throw std::runtime_error("bad drum class map line: " + line);
      m.table_[key] = cls;
    }
    return m;
  }

  bool contains(int key) const { return table_.count(key) != 0; }
  int class_of(int key) const {
    auto it = table_.find(key);
    if (it == table_.end()) throw CodecError("drum key " + std::to_string(key) + " is not in the class map");
    return it->second;
  }
  const std::map<int, int>& table() const { return table_; }
  bool operator==(const DrumClassMap&) const = default;

 private:
  std::map<int, int> table_;
};

inline std::vector<int> encode_drums(const NoteSequence& seq, const DrumClassMap& map = DrumClassMap::standard()) {
  std::vector<int> tokens(static_cast<std::size_t>(seq.length_steps), 0);
  std::vector<int> unknown;
  for (const Note& n : seq.notes) {
    if (!map.contains(n.pitch)) {
      unknown.push_back(n.pitch);
      continue;
    }
    if (n.onset < 0 || n.onset >= seq.length_steps) throw CodecError("encode_drums: onset outside sequence");
    tokens[static_cast<std::size_t>(n.onset)] |= 1 << map.class_of(n.pitch);
  }
  if (!unknown.empty()) {
    std::string msg = "encode_drums: keys not in class map:";
    for (int k : unknown) msg += " " + std::to_string(k);
    throw CodecError(msg);
  }
  return tokens;
}

/// One duration-1 note per set bit, at the class's canonical pitch.
inline NoteSequence decode_drums(const std::vector<int>& tokens) {
  NoteSequence seq{StreamKind::drums, {}, static_cast<int>(tokens.size())};
  for (int t = 0; t < static_cast<int>(tokens.size()); ++t) {
    const int tok = tokens[static_cast<std::size_t>(t)];
    if (tok < 0 || tok >= kDrumVocab) throw CodecError("decode_drums: token out of range");
    for (int c = 0; c < kDrumClasses; ++c)
      if ((tok >> c) & 1) seq.notes.push_back(Note{DrumClassMap::kCanonicalPitch[static_cast<std::size_t>(c)], t, 1});
  }
  seq.sort();
  return seq;
}

inline int vocab_size(StreamKind k) { return k == StreamKind::drums ? kDrumVocab : kMelodyVocab; }

inline std::vector<int> encode_stream(const NoteSequence& seq, const DrumClassMap& map = DrumClassMap::standard()) {
  return seq.kind == StreamKind::drums ? encode_drums(seq, map) : encode_melody(seq);
}

inline NoteSequence decode_stream(const std::vector<int>& tokens, StreamKind kind) {
  return kind == StreamKind::drums ? decode_drums(tokens) : decode_melody(tokens, kind);
}

}  // namespace musicvae
