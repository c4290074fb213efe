#pragma once

// Seeded synthetic melody corpora for desk-scale experiments.

#include <algorithm>
#include <array>
#include <cstdint>
#include <vector>

#include "musicvae/codec.hpp"
#include "musicvae/notes.hpp"
#include "musicvae/rng.hpp"

namespace musicvae::synthetic {

inline constexpr std::array<int, 7> kMajorSteps{0, 2, 4, 5, 7, 9, 11};

/// Knobs for one generated bar. Probabilities are per 16th-note step.
struct BarStyle {
  double onset_prob = 0.35;
  double offbeat_bias = 0.0;  // extra onset probability on odd steps, negative favours even steps
  double chromatic_prob = 0.0;
  int max_leap = 4;           // scale degrees
  int low = 55;
  int high = 79;
};

/// One bar of monophonic notes starting at `offset`; pitches follow a
/// random walk over the C major scale with optional chromatic alterations.
inline std::vector<Note> random_bar(Rng& rng, const BarStyle& style, int offset, int& degree) {
  std::vector<int> onsets;
  for (int s = 0; s < kStepsPerBar; ++s) {
    double p = style.onset_prob + (s % 2 == 1 ? style.offbeat_bias : -style.offbeat_bias);
    p = std::clamp(p, 0.02, 0.98);
    if (rng.bernoulli(p)) onsets.push_back(s);
  }
  if (onsets.empty()) onsets.push_back(static_cast<int>(rng.below(kStepsPerBar)));
  std::vector<Note> notes;
  for (std::size_t i = 0; i < onsets.size(); ++i) {
    const int next = i + 1 < onsets.size() ? onsets[i + 1] : kStepsPerBar;
    const int max_dur = next - onsets[i];
    const int dur = 1 + static_cast<int>(rng.below(static_cast<std::uint64_t>(max_dur)));
    const int leap = static_cast<int>(rng.below(static_cast<std::uint64_t>(2 * style.max_leap + 1))) - style.max_leap;
    degree += leap;
    auto pitch_of = [](int d) {
      const int octave = d >= 0 ? d / 7 : -((-d + 6) / 7);
      const int idx = d - octave * 7;
      return 60 + 12 * octave + kMajorSteps[static_cast<std::size_t>(idx)];
    };
    while (pitch_of(degree) < style.low) degree += 7;
    while (pitch_of(degree) > style.high) degree -= 7;
    int pitch = pitch_of(degree);
    if (rng.bernoulli(style.chromatic_prob)) pitch += rng.bernoulli(0.5) ? 1 : -1;
    notes.push_back(Note{pitch, offset + onsets[i], dur});
  }
  return notes;
}

inline NoteSequence random_melody(Rng& rng, int bars, const BarStyle& style) {
  NoteSequence seq{StreamKind::melody, {}, bars * kStepsPerBar};
  int degree = static_cast<int>(rng.below(7));
  for (int b = 0; b < bars; ++b) {
    auto notes = random_bar(rng, style, b * kStepsPerBar, degree);
    seq.notes.insert(seq.notes.end(), notes.begin(), notes.end());
  }
  return seq;
}

inline TokenSequence as_tokens(const NoteSequence& seq) { return TokenSequence{{encode_melody(seq)}}; }

/// n random melodies of `bars` bars with the default style.
inline std::vector<TokenSequence> random_melodies(int n, int bars, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<TokenSequence> out;
  for (int i = 0; i < n; ++i) out.push_back(as_tokens(random_melody(rng, bars, BarStyle{})));
  return out;
}

/// Melodies with strong bar-level repetition: a shared pool of one-bar
/// motifs; each example picks a 4-bar phrase of motifs and repeats it to
/// fill `bars` bars, transposing each repetition by one of a few offsets.
inline std::vector<TokenSequence> repetition_corpus(int n, int bars, std::uint64_t seed, int pool_size = 16) {
  Rng rng(seed);
  std::vector<std::vector<Note>> pool;
  for (int i = 0; i < pool_size; ++i) {
    int degree = static_cast<int>(rng.below(7));
    BarStyle style;
    style.low = 62;
    style.high = 74;
    pool.push_back(random_bar(rng, style, 0, degree));
  }
  static constexpr std::array<int, 4> kShifts{0, 2, -3, 5};
  std::vector<TokenSequence> out;
  for (int i = 0; i < n; ++i) {
    std::array<std::size_t, 4> phrase{};
    for (auto& m : phrase) m = static_cast<std::size_t>(rng.below(static_cast<std::uint64_t>(pool_size)));
    std::vector<int> shifts;
    for (int r = 0; r < (bars + 3) / 4; ++r) shifts.push_back(kShifts[rng.below(kShifts.size())]);
    NoteSequence seq{StreamKind::melody, {}, bars * kStepsPerBar};
    for (int b = 0; b < bars; ++b)
      for (Note note : pool[phrase[static_cast<std::size_t>(b % 4)]]) {
        note.onset += b * kStepsPerBar;
        note.pitch += shifts[static_cast<std::size_t>(b / 4)];
        seq.notes.push_back(note);
      }
    out.push_back(as_tokens(seq));
  }
  return out;
}

/// Melodies whose styles vary per example along the measured attributes
/// (density, diatonic content, leap size, syncopation).
inline std::vector<TokenSequence> styled_corpus(int n, int bars, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<TokenSequence> out;
  for (int i = 0; i < n; ++i) {
    BarStyle style;
    style.onset_prob = 0.1 + 0.6 * rng.uniform();
    style.offbeat_bias = 0.4 * (rng.uniform() - 0.5);
    style.chromatic_prob = rng.uniform() < 0.5 ? 0.0 : 0.6 * rng.uniform();
    style.max_leap = 1 + static_cast<int>(rng.below(5));
    out.push_back(as_tokens(random_melody(rng, bars, style)));
  }
  return out;
}

}  // namespace musicvae::synthetic
