#pragma once

// Standard MIDI File (format 0/1) reading and writing.

#include <algorithm>
#include <array>
#include <cstdint>
#include <deque>
#include <map>
#include <span>
#include <stdexcept>
#include <string>
#include <tuple>
#include <vector>

namespace musicvae {

class MidiParseError : public std::runtime_error {
 public:
  MidiParseError(const std::string& what, std::size_t offset)
      : std::runtime_error(what + " at byte offset " + std::to_string(offset)), offset_(offset) {}
  std::size_t offset() const { return offset_; }

 private:
  std::size_t offset_;
};

struct MidiNote {
  int channel = 0;
  int pitch = 0;
  int velocity = 0;
  long long on_tick = 0;
  long long off_tick = 0;
  int track = 0;
  auto operator<=>(const MidiNote&) const = default;
};

struct TempoEvent {
  long long tick = 0;
  int us_per_quarter = 500000;
  bool operator==(const TempoEvent&) const = default;
};

struct TimeSignature {
  long long tick = 0;
  int numerator = 4;
  int denominator = 4;
  bool operator==(const TimeSignature&) const = default;
};

struct ProgramChange {
  int channel = 0;
  long long tick = 0;
  int program = 0;
  bool operator==(const ProgramChange&) const = default;
};

struct MidiSong {
  int ticks_per_quarter = 480;
  std::vector<TempoEvent> tempo_events;
  std::vector<TimeSignature> time_signatures;
  std::vector<MidiNote> notes;
  std::vector<ProgramChange> program_changes;
  bool dangling_notes = false;  // some note-on had no matching note-off

  /// Program in effect on `channel` at `tick` (0 if none was set).
  int program_at(int channel, long long tick) const {
    int prog = 0;
    for (const auto& pc : program_changes)
      if (pc.channel == channel && pc.tick <= tick) prog = pc.program;
    return prog;
  }
};

namespace midi_detail {

struct Reader {
  std::span<const std::uint8_t> b;
  std::size_t pos = 0;

  void need(std::size_t n, const char* what) const {
    if (b.size() - pos < n) throw MidiParseError(std::string("truncated ") + what, pos);
  }
  std::uint8_t u8(const char* what = "data") {
    need(1, what);
    return b[pos++];
  }
  std::uint32_t be(int n, const char* what) {
    need(static_cast<std::size_t>(n), what);
    std::uint32_t v = 0;
    for (int i = 0; i < n; ++i) v = (v << 8) | b[pos++];
    return v;
  }
  std::uint32_t vlq(std::size_t limit) {
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) {
      if (pos >= limit) throw MidiParseError("truncated variable-length quantity", pos);
      const std::uint8_t c = b[pos++];
      v = (v << 7) | (c & 0x7f);
      if ((c & 0x80) == 0) return v;
    }
    throw MidiParseError("variable-length quantity longer than 4 bytes", pos);
  }
};

inline void put_be(std::vector<std::uint8_t>& out, std::uint32_t v, int n) {
  for (int i = n - 1; i >= 0; --i) out.push_back(static_cast<std::uint8_t>((v >> (8 * i)) & 0xff));
}

inline void put_vlq(std::vector<std::uint8_t>& out, std::uint32_t v) {
  std::array<std::uint8_t, 5> tmp{};
  int n = 0;
  tmp[static_cast<std::size_t>(n++)] = static_cast<std::uint8_t>(v & 0x7f);
  while ((v >>= 7) != 0) tmp[static_cast<std::size_t>(n++)] = static_cast<std::uint8_t>((v & 0x7f) | 0x80);
  while (n > 0) out.push_back(tmp[static_cast<std::size_t>(--n)]);
}

}  // namespace midi_detail

/// Parses an SMF. Note-ons are paired with note-offs (or velocity-0
/// note-ons) first-in first-out per (channel, pitch); unmatched note-ons
/// are closed at the end of their track and flagged.
inline MidiSong parse_midi(std::span<const std::uint8_t> bytes) {
  midi_detail::Reader r{bytes, 0};
  r.need(4, "header");
  if (!std::equal(bytes.begin(), bytes.begin() + 4, "MThd")) throw MidiParseError("missing MThd header", 0);
  r.pos = 4;
  const auto header_len = r.be(4, "header length");
  if (header_len < 6) throw MidiParseError("header chunk shorter than 6 bytes", 4);
  const std::size_t header_start = r.pos;
  const auto format = r.be(2, "header");
  const auto ntracks = r.be(2, "header");
  const auto division = r.be(2, "header");
  if (format > 1) throw MidiParseError("unsupported SMF format " + std::to_string(format), header_start);
  if (division & 0x8000) throw MidiParseError("SMPTE time division is not supported", header_start + 4);
  if (division == 0) throw MidiParseError("ticks per quarter must be positive", header_start + 4);
  r.need(header_len - 6, "header");
  r.pos = header_start + header_len;

  MidiSong song;
  song.ticks_per_quarter = static_cast<int>(division);
  int track_index = 0;
  while (r.pos < bytes.size() && track_index < static_cast<int>(ntracks)) {
    const std::size_t chunk_at = r.pos;
    r.need(8, "chunk header");
    const bool is_track = std::equal(bytes.begin() + static_cast<std::ptrdiff_t>(r.pos),
                                     bytes.begin() + static_cast<std::ptrdiff_t>(r.pos) + 4, "MTrk");
    r.pos += 4;
    const auto len = r.be(4, "chunk length");
    if (bytes.size() - r.pos < len) throw MidiParseError("truncated chunk", chunk_at);
    const std::size_t end = r.pos + len;
    if (!is_track) {
      r.pos = end;  // unknown chunk types are skipped
      continue;
    }
    long long tick = 0;
    std::uint8_t status = 0;
    std::map<std::pair<int, int>, std::deque<std::pair<long long, int>>> open;  // (ch, pitch) -> (tick, vel)
    auto close = [&](int ch, int pitch, long long at) {
      auto it = open.find({ch, pitch});
      if (it == open.end() || it->second.empty()) return;  // stray note-off
      auto [on, vel] = it->second.front();
      it->second.pop_front();
      song.notes.push_back(MidiNote{ch, pitch, vel, on, at, track_index});
    };
    bool ended = false;
    while (r.pos < end && !ended) {
      tick += r.vlq(end);
      if (r.pos >= end) throw MidiParseError("event truncated after delta time", r.pos);
      std::uint8_t byte = bytes[r.pos];
      if (byte & 0x80) {
        ++r.pos;
        if (byte < 0xf0) status = byte;
      } else {
        if (status == 0) throw MidiParseError("running status without a preceding status byte", r.pos);
        byte = status;
      }
      if (byte == 0xff) {
        const std::size_t at = r.pos;
        if (r.pos >= end) throw MidiParseError("truncated meta event", at);
        const std::uint8_t type = bytes[r.pos++];
        const auto mlen = r.vlq(end);
        if (end - r.pos < mlen) throw MidiParseError("truncated meta event", at);
        const auto* d = bytes.data() + r.pos;
        if (type == 0x51 && mlen == 3) {
          song.tempo_events.push_back({tick, (d[0] << 16) | (d[1] << 8) | d[2]});
        } else if (type == 0x58 && mlen >= 2) {
          if (d[1] > 30) throw MidiParseError("invalid time signature denominator", at);
          song.time_signatures.push_back({tick, d[0], 1 << d[1]});
        } else if (type == 0x2f) {
          ended = true;
        }
        r.pos += mlen;
        status = 0;
        continue;
      }
      if (byte == 0xf0 || byte == 0xf7) {
        const std::size_t at = r.pos;
        const auto slen = r.vlq(end);
        if (end - r.pos < slen) throw MidiParseError("truncated sysex event", at);
        r.pos += slen;
        status = 0;
        continue;
      }
      if (byte >= 0xf0) throw MidiParseError("unsupported system message", r.pos - 1);
      const int kind = byte & 0xf0;
      const int ch = byte & 0x0f;
      const int nbytes = (kind == 0xc0 || kind == 0xd0) ? 1 : 2;
      if (static_cast<std::size_t>(nbytes) > end - r.pos) throw MidiParseError("truncated channel message", r.pos);
      const int d1 = bytes[r.pos++];
      const int d2 = nbytes == 2 ? bytes[r.pos++] : 0;
      if ((d1 | d2) & 0x80) throw MidiParseError("data byte with high bit set", r.pos - 1);
      if (kind == 0x90 && d2 > 0) {
        open[{ch, d1}].emplace_back(tick, d2);
      } else if (kind == 0x80 || kind == 0x90) {
        close(ch, d1, tick);
      } else if (kind == 0xc0) {
        song.program_changes.push_back({ch, tick, d1});
      }
    }
    for (auto& [key, q] : open)
      while (!q.empty()) {
        song.dangling_notes = true;
        close(key.first, key.second, tick);
      }
    r.pos = end;
    ++track_index;
  }
  if (track_index < static_cast<int>(ntracks)) throw MidiParseError("fewer track chunks than declared", r.pos);

  auto by_tick = [](const auto& a, const auto& b) { return a.tick < b.tick; };
  std::stable_sort(song.tempo_events.begin(), song.tempo_events.end(), by_tick);
  std::stable_sort(song.time_signatures.begin(), song.time_signatures.end(), by_tick);
  std::stable_sort(song.program_changes.begin(), song.program_changes.end(), by_tick);
  std::stable_sort(song.notes.begin(), song.notes.end(), [](const MidiNote& a, const MidiNote& b) {
    return std::tie(a.on_tick, a.channel, a.pitch) < std::tie(b.on_tick, b.channel, b.pitch);
  });
  return song;
}

inline MidiSong parse_midi(const std::string& bytes) {
  return parse_midi(std::span<const std::uint8_t>(reinterpret_cast<const std::uint8_t*>(bytes.data()), bytes.size()));
}

/// Serializes a song as a single-track format-0 file. At equal ticks,
/// note-offs precede note-ons.
inline std::vector<std::uint8_t> write_midi(const MidiSong& song) {
  using midi_detail::put_be;
  using midi_detail::put_vlq;
  struct Ev {
    long long tick;
    int order;  // meta 0, program 1, off 2, on 3
    std::vector<std::uint8_t> data;
  };
  std::vector<Ev> evs;
  for (const auto& t : song.tempo_events)
    evs.push_back({t.tick, 0,
                   {0xff, 0x51, 0x03, static_cast<std::uint8_t>(t.us_per_quarter >> 16),
                    static_cast<std::uint8_t>(t.us_per_quarter >> 8), static_cast<std::uint8_t>(t.us_per_quarter)}});
  for (const auto& ts : song.time_signatures) {
    int pow2 = 0;
    while ((1 << pow2) < ts.denominator) ++pow2;
    evs.push_back({ts.tick, 0,
                   {0xff, 0x58, 0x04, static_cast<std::uint8_t>(ts.numerator), static_cast<std::uint8_t>(pow2), 24, 8}});
  }
  for (const auto& pc : song.program_changes)
    evs.push_back({pc.tick, 1, {static_cast<std::uint8_t>(0xc0 | pc.channel), static_cast<std::uint8_t>(pc.program)}});
  for (const auto& n : song.notes) {
    evs.push_back({n.on_tick, 3,
                   {static_cast<std::uint8_t>(0x90 | n.channel), static_cast<std::uint8_t>(n.pitch),
                    static_cast<std::uint8_t>(std::max(1, n.velocity))}});
    evs.push_back({n.off_tick, 2,
                   {static_cast<std::uint8_t>(0x80 | n.channel), static_cast<std::uint8_t>(n.pitch), 0}});
  }
  std::stable_sort(evs.begin(), evs.end(),
                   [](const Ev& a, const Ev& b) { return std::tie(a.tick, a.order) < std::tie(b.tick, b.order); });
  std::vector<std::uint8_t> track;
  long long last = 0;
  for (const auto& e : evs) {
    put_vlq(track, static_cast<std::uint32_t>(e.tick - last));
    last = e.tick;
    track.insert(track.end(), e.data.begin(), e.data.end());
  }
  put_vlq(track, 0);
  track.insert(track.end(), {0xff, 0x2f, 0x00});

  std::vector<std::uint8_t> out{'M', 'T', 'h', 'd'};
  put_be(out, 6, 4);
  put_be(out, 0, 2);
  put_be(out, 1, 2);
  put_be(out, static_cast<std::uint32_t>(song.ticks_per_quarter), 2);
  out.insert(out.end(), {'M', 'T', 'r', 'k'});
  put_be(out, static_cast<std::uint32_t>(track.size()), 4);
  out.insert(out.end(), track.begin(), track.end());
  return out;
}

}  // namespace musicvae
