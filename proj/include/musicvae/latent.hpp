#pragma once

// Latent-space operations: interpolation, the five symbolic attributes, and
// attribute vectors (difference of quartile means of latent codes).

#include <Eigen/Dense>

#include <algorithm>
#include <array>
#include <cmath>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "musicvae/codec.hpp"
#include "musicvae/config.hpp"
#include "musicvae/container.hpp"
#include "musicvae/notes.hpp"
#include "musicvae/rng.hpp"

namespace musicvae {

using Vec = Eigen::VectorXd;

/// alpha * z1 + (1 - alpha) * z2, so alpha = 1 gives z1.
inline Vec lerp(const Vec& z1, const Vec& z2, double alpha) {
  if (z1.size() != z2.size()) throw std::invalid_argument("lerp: dimension mismatch");
  return alpha * z1 + (1.0 - alpha) * z2;
}

/// Great-circle interpolation; alpha = 0 gives z1, alpha = 1 gives z2.
/// Nearly parallel inputs fall back to linear interpolation.
inline Vec slerp(const Vec& z1, const Vec& z2, double alpha) {
  if (z1.size() != z2.size()) throw std::invalid_argument("slerp: dimension mismatch");
  const double n1 = z1.norm();
  const double n2 = z2.norm();
  if (n1 == 0.0 || n2 == 0.0) throw std::invalid_argument("slerp: zero vector");
  if (alpha == 0.0) return z1;
  if (alpha == 1.0) return z2;
  const double cosine = std::clamp(z1.dot(z2) / (n1 * n2), -1.0, 1.0);
  const double theta = std::acos(cosine);
  if (theta < 1e-6) return (1.0 - alpha) * z1 + alpha * z2;
  const double s = std::sin(theta);
  return std::sin((1.0 - alpha) * theta) / s * z1 + std::sin(alpha * theta) / s * z2;
}

// ---- attributes -----------------------------------------------------------------

enum class AttributeKind { c_diatonic, note_density, average_interval, sync16, sync8 };

inline constexpr std::array<AttributeKind, 5> kAllAttributes{AttributeKind::c_diatonic, AttributeKind::note_density,
                                                             AttributeKind::average_interval, AttributeKind::sync16,
                                                             AttributeKind::sync8};

inline std::string to_string(AttributeKind k) {
  switch (k) {
    case AttributeKind::c_diatonic: return "c_diatonic";
    case AttributeKind::note_density: return "note_density";
    case AttributeKind::average_interval: return "average_interval";
    case AttributeKind::sync16: return "sync16";
    case AttributeKind::sync8: return "sync8";
  }
  return "?";
}

inline AttributeKind parse_attribute(const std::string& s) {
  for (auto k : kAllAttributes)
    if (to_string(k) == s) return k;
  throw std::invalid_argument("unknown attribute '" + s +
                              "' (expected c_diatonic, note_density, average_interval, sync16 or sync8)");
}

/// Which 1-indexed grid positions count as syncopated.
///  literal: odd positions, as the definition reads (includes downbeats).
///  offbeat: even positions, the conventional off-beat reading.
enum class SyncParity { literal, offbeat };

inline SyncParity parse_sync_parity(const std::string& s) {
  if (s == "literal") return SyncParity::literal;
  if (s == "offbeat") return SyncParity::offbeat;
  throw std::invalid_argument("unknown syncopation parity '" + s + "' (expected literal or offbeat)");
}

inline std::string to_string(SyncParity p) { return p == SyncParity::literal ? "literal" : "offbeat"; }

namespace detail {

inline std::vector<int> onset_steps(const NoteSequence& seq) {
  std::vector<int> on;
  for (const Note& n : seq.notes) on.push_back(n.onset);
  std::sort(on.begin(), on.end());
  on.erase(std::unique(on.begin(), on.end()), on.end());
  return on;
}

}  // namespace detail

/// Attribute value of a sequence. Fractions are over note onsets; sequences
/// without onsets measure 0, as does the average interval of fewer than two
/// notes. A position before step 0 never holds an onset.
inline double measure(AttributeKind kind, const NoteSequence& seq, SyncParity parity = SyncParity::literal) {
  std::vector<Note> notes = seq.notes;
  std::sort(notes.begin(), notes.end());
  if (notes.empty()) return 0.0;
  const double count = static_cast<double>(notes.size());
  switch (kind) {
    case AttributeKind::c_diatonic: {
      static constexpr std::array<bool, 12> white{true, false, true, false, true, true, false, true, false, true, false, true};
      const auto n = std::count_if(notes.begin(), notes.end(), [](const Note& x) { return white[static_cast<std::size_t>(x.pitch % 12)]; });
      return static_cast<double>(n) / count;
    }
    case AttributeKind::note_density:
      return seq.length_steps > 0 ? count / seq.length_steps : 0.0;
    case AttributeKind::average_interval: {
      if (notes.size() < 2) return 0.0;
      double total = 0.0;
      for (std::size_t i = 1; i < notes.size(); ++i) total += std::abs(notes[i].pitch - notes[i - 1].pitch);
      return total / static_cast<double>(notes.size() - 1);
    }
    case AttributeKind::sync16:
    case AttributeKind::sync8: {
      const auto on = detail::onset_steps(seq);
      auto has = [&](int step) { return step >= 0 && std::binary_search(on.begin(), on.end(), step); };
      // 0-based step s is 1-indexed 16th position s+1 and, when even, 1-indexed
      // 8th position s/2+1. "Odd" 1-indexed positions are even 0-based ones.
      const int want = parity == SyncParity::literal ? 0 : 1;
      std::size_t hits = 0;
      for (const Note& n : notes) {
        const int s = n.onset;
        bool sync;
        if (kind == AttributeKind::sync16) {
          sync = s % 2 == want && !has(s - 1);
        } else {
          sync = s % 2 == 0 && (s / 2) % 2 == want && !has(s - 1) && !has(s - 2);
        }
        hits += sync ? 1 : 0;
      }
      return static_cast<double>(hits) / count;
    }
  }
  return 0.0;
}

struct AttributeValues {
  std::array<double, 5> v{};
  double operator[](AttributeKind k) const { return v[static_cast<std::size_t>(k)]; }
  double& operator[](AttributeKind k) { return v[static_cast<std::size_t>(k)]; }
};

inline AttributeValues measure_all(const NoteSequence& seq, SyncParity parity = SyncParity::literal) {
  AttributeValues out;
  for (auto k : kAllAttributes) out[k] = measure(k, seq, parity);
  return out;
}

/// Attributes are measured on the first (melody) stream.
inline AttributeValues measure_tokens(const TokenSequence& x, SyncParity parity = SyncParity::literal) {
  return measure_all(decode_melody(x.streams.at(0)), parity);
}

// ---- attribute vectors --------------------------------------------------------------

struct AttributeVector {
  AttributeKind kind = AttributeKind::note_density;
  Vec vector;
  std::size_t corpus_size = 0;
  std::size_t quartile_size = 0;
  double bottom_mean = 0.0;  // mean attribute value of the bottom quartile
  double top_mean = 0.0;
};

/// Mean latent of the top quartile minus mean latent of the bottom quartile,
/// where a quartile is floor(n/4) items after a stable sort by value.
/// `latents` holds one code per column.
inline AttributeVector attribute_vector(const Eigen::MatrixXd& latents, const std::vector<double>& values, AttributeKind kind) {
  const auto n = values.size();
  if (static_cast<std::size_t>(latents.cols()) != n) throw std::invalid_argument("attribute_vector: one value per latent required");
  if (n < 8) throw std::invalid_argument("attribute_vector: at least 8 examples required");
  if (std::all_of(values.begin(), values.end(), [&](double v) { return v == values.front(); }))
    throw std::invalid_argument("attribute_vector: " + to_string(kind) + " is constant over the corpus");
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return values[a] < values[b]; });
  const std::size_t q = n / 4;
  AttributeVector out;
  out.kind = kind;
  out.corpus_size = n;
  out.quartile_size = q;
  Vec bottom = Vec::Zero(latents.rows());
  Vec top = Vec::Zero(latents.rows());
  for (std::size_t i = 0; i < q; ++i) {
    bottom += latents.col(static_cast<Eigen::Index>(order[i]));
    top += latents.col(static_cast<Eigen::Index>(order[n - q + i]));
    out.bottom_mean += values[order[i]];
    out.top_mean += values[order[n - q + i]];
  }
  out.vector = (top - bottom) / static_cast<double>(q);
  out.bottom_mean /= static_cast<double>(q);
  out.top_mean /= static_cast<double>(q);
  return out;
}

inline Vec apply_attribute(const Vec& z, const AttributeVector& v, double scale) {
  if (z.size() != v.vector.size()) throw std::invalid_argument("apply_attribute: dimension mismatch");
  return z + scale * v.vector;
}

/// -1.5, -1.0, ..., 1.5.
inline std::vector<double> scale_sweep() {
  std::vector<double> out;
  for (int i = -3; i <= 3; ++i) out.push_back(0.5 * i);
  return out;
}

/// Posterior means (eps = 0) of a dataset, one column per example.
template <typename Model>
Eigen::MatrixXd encode_means(const Model& model, std::span<const TokenSequence> data, std::size_t batch = 64) {
  Eigen::MatrixXd out(model.arch().latent_dim, static_cast<Eigen::Index>(data.size()));
  for (std::size_t i = 0; i < data.size(); i += batch) {
    const auto n = std::min(batch, data.size() - i);
    const auto mu = model.infer(data.subspan(i, n)).first;
    out.middleCols(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(n)) = mu.template cast<double>();
  }
  return out;
}

/// One vector per attribute from a dataset's posterior means.
template <typename Model>
std::vector<AttributeVector> compute_attribute_vectors(const Model& model, std::span<const TokenSequence> data,
                                                       SyncParity parity = SyncParity::literal) {
  const Eigen::MatrixXd z = encode_means(model, data);
  std::vector<AttributeValues> measured;
  measured.reserve(data.size());
  for (const auto& x : data) measured.push_back(measure_tokens(x, parity));
  std::vector<AttributeVector> out;
  for (auto k : kAllAttributes) {
    std::vector<double> values;
    for (const auto& m : measured) values.push_back(m[k]);
    out.push_back(attribute_vector(z, values, k));
  }
  return out;
}

// ---- effect matrix ----------------------------------------------------------------

/// Average relative change (percent) of each measured attribute (column)
/// when an attribute vector (row) is added to or subtracted from prior
/// samples. Samples whose base value is 0 are excluded; `counts` holds how
/// many samples entered each cell.
struct EffectMatrix {
  std::vector<AttributeKind> applied;
  Eigen::MatrixXd percent;  // applied x 5
  Eigen::MatrixXi counts;
  double sign = 1.0;        // +1 adding, -1 subtracting
  int samples = 0;

  /// Rows whose own attribute has the largest absolute change.
  int dominant_rows() const {
    int n = 0;
    for (std::size_t r = 0; r < applied.size(); ++r) {
      const auto row = static_cast<Eigen::Index>(r);
      const auto diag = static_cast<Eigen::Index>(applied[r]);
      if (!std::isfinite(percent(row, diag))) continue;
      bool best = true;
      for (Eigen::Index c = 0; c < percent.cols(); ++c)
        if (c != diag && std::isfinite(percent(row, c)) && std::abs(percent(row, c)) >= std::abs(percent(row, diag))) best = false;
      n += best ? 1 : 0;
    }
    return n;
  }

  std::string to_tsv() const {
    std::string out = sign > 0 ? "# adding" : "# subtracting";
    out += " attribute vectors, " + std::to_string(samples) + " prior samples; percent change (count)\napplied";
    for (auto k : kAllAttributes) out += "\t" + to_string(k);
    out += '\n';
    for (std::size_t r = 0; r < applied.size(); ++r) {
      out += to_string(applied[r]);
      for (Eigen::Index c = 0; c < percent.cols(); ++c) {
        const auto row = static_cast<Eigen::Index>(r);
        out += "\t" + KeyValueConfig::format_double(percent(row, c)) + " (" + std::to_string(counts(row, c)) + ")";
      }
      out += '\n';
    }
    return out;
  }
};

/// For each of n prior samples, decodes the base latent and each shifted
/// latent z + sign * v with the same sampling seed, and measures all
/// attributes on both.
template <typename Model>
EffectMatrix attribute_effect_matrix(const Model& model, int n, const std::vector<AttributeVector>& vectors,
                                     double temperature, std::uint64_t seed, double sign = 1.0,
                                     SyncParity parity = SyncParity::literal) {
  using Mat = typename Model::Mat;
  EffectMatrix m;
  m.sign = sign;
  m.samples = std::max(n, 0);
  for (const auto& v : vectors) m.applied.push_back(v.kind);
  const auto rows = static_cast<Eigen::Index>(vectors.size());
  if (n <= 0) {
    m.percent.resize(0, 5);
    m.counts.resize(0, 5);
    return m;
  }
  m.percent = Eigen::MatrixXd::Zero(rows, 5);
  m.counts = Eigen::MatrixXi::Zero(rows, 5);
  const int D = model.arch().latent_dim;
  Rng zr(derive_seed(seed, 0x2a71));
  for (int i = 0; i < n; ++i) {
    Mat z(D, rows + 1);
    Vec base(D);
    for (int d = 0; d < D; ++d) base(d) = zr.normal();
    z.col(0) = base.cast<typename Mat::Scalar>();
    for (Eigen::Index r = 0; r < rows; ++r)
      z.col(r + 1) = apply_attribute(base, vectors[static_cast<std::size_t>(r)], sign).template cast<typename Mat::Scalar>();
    // Decode every column with the same sampling stream.
    std::vector<AttributeValues> measured;
    for (Eigen::Index c = 0; c <= rows; ++c) {
      Rng rng(derive_seed(seed, 0x5a3e, static_cast<std::uint64_t>(i)));
      const auto out = model.generate(z.col(c), temperature, rng);
      measured.push_back(measure_tokens(out.at(0), parity));
    }
    for (Eigen::Index r = 0; r < rows; ++r)
      for (auto k : kAllAttributes) {
        const double before = measured[0][k];
        if (before == 0.0) continue;
        const auto c = static_cast<Eigen::Index>(k);
        m.percent(r, c) += 100.0 * (measured[static_cast<std::size_t>(r + 1)][k] - before) / before;
        ++m.counts(r, c);
      }
  }
  for (Eigen::Index r = 0; r < rows; ++r)
    for (Eigen::Index c = 0; c < 5; ++c)
      m.percent(r, c) = m.counts(r, c) > 0 ? m.percent(r, c) / m.counts(r, c) : std::nan("");
  return m;
}

// ---- persistence --------------------------------------------------------------------

inline void store_attribute_vectors(Container& c, const std::vector<AttributeVector>& vs) {
  for (const auto& v : vs) {
    const std::string key = "attr/" + to_string(v.kind);
    c.put(key, v.vector);
    KeyValueConfig kv;
    kv.set("kind", to_string(v.kind));
    kv.set("corpus_size", static_cast<long long>(v.corpus_size));
    kv.set("quartile_size", static_cast<long long>(v.quartile_size));
    kv.set("bottom_mean", v.bottom_mean);
    kv.set("top_mean", v.top_mean);
    c.meta[key] = kv.to_text();
  }
}

inline std::vector<AttributeVector> load_attribute_vectors(const Container& c) {
  std::vector<AttributeVector> out;
  for (auto k : kAllAttributes) {
    const std::string key = "attr/" + to_string(k);
    if (!c.has(key)) continue;
    const auto kv = KeyValueConfig::parse(c.meta_at(key));
    AttributeVector v;
    v.kind = k;
    v.vector = c.get(key).col(0);
    v.corpus_size = static_cast<std::size_t>(kv.get_int("corpus_size", 0));
    v.quartile_size = static_cast<std::size_t>(kv.get_int("quartile_size", 0));
    v.bottom_mean = kv.get_double("bottom_mean", 0.0);
    v.top_mean = kv.get_double("top_mean", 0.0);
    out.push_back(std::move(v));
  }
  return out;
}

}  // namespace musicvae
