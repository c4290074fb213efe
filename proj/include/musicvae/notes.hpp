#pragma once

#include <algorithm>
#include <compare>
#include <stdexcept>
#include <string>
#include <vector>

namespace musicvae {

inline constexpr int kStepsPerBar = 16;

enum class StreamKind { melody, bass, drums };

inline std::string to_string(StreamKind k) {
  switch (k) {
    case StreamKind::melody: return "melody";
    case StreamKind::bass: return "bass";
    case StreamKind::drums: return "drums";
  }
  return "unknown";
}

/// A note on the 16th-note grid.
struct Note {
  int pitch = 0;
  int onset = 0;     // step index
  int duration = 1;  // steps, >= 1

  int end() const { return onset + duration; }
  bool operator==(const Note&) const = default;
  // Time order: onset, then pitch, then duration.
  auto operator<=>(const Note& o) const {
    if (auto c = onset <=> o.onset; c != 0) return c;
    if (auto c = pitch <=> o.pitch; c != 0) return c;
    return duration <=> o.duration;
  }
};

/// Quantized notes for one stream. Notes are kept sorted by (onset, pitch).
struct NoteSequence {
  StreamKind kind = StreamKind::melody;
  std::vector<Note> notes;
  int length_steps = 0;

  bool operator==(const NoteSequence&) const = default;

  void sort() { std::sort(notes.begin(), notes.end()); }

  /// Notes overlapping [begin, begin + length) shifted to start at 0 and
  /// clipped to the window.
  NoteSequence window(int begin, int length) const {
    NoteSequence out{kind, {}, length};
    const int stop = begin + length;
    for (const Note& n : notes) {
      if (n.end() <= begin || n.onset >= stop) continue;
      if (n.onset < begin) continue;  // notes sustained from before the window are dropped
      Note c = n;
      c.onset -= begin;
      c.duration = std::min(n.end(), stop) - n.onset;
      out.notes.push_back(c);
    }
    return out;
  }
};

/// True if no two notes overlap in step range.
inline bool is_monophonic(const NoteSequence& seq) {
  std::vector<Note> sorted = seq.notes;
  std::sort(sorted.begin(), sorted.end());
  for (std::size_t i = 1; i < sorted.size(); ++i)
    if (sorted[i].onset < sorted[i - 1].end()) return false;
  return true;
}

}  // namespace musicvae
