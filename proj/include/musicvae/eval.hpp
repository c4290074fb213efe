#pragma once

// Evaluation protocols: reconstruction accuracy (teacher-forced and fully
// sampled), Hamming distance, Bernoulli data-space interpolation, and
// interpolation reports scored by an n-gram model.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "musicvae/codec.hpp"
#include "musicvae/config.hpp"
#include "musicvae/latent.hpp"
#include "musicvae/model.hpp"
#include "musicvae/ngram.hpp"
#include "musicvae/rng.hpp"

namespace musicvae {

enum class AccuracyMode { teacher_forced, sampled };

inline std::string to_string(AccuracyMode m) { return m == AccuracyMode::teacher_forced ? "teacher_forced" : "sampled"; }

struct AccuracyResult {
  double accuracy = 0.0;           // mean of per_stream
  std::vector<double> per_stream;
  std::size_t examples = 0;
};

/// Fraction of matching tokens per stream, and their mean.
inline AccuracyResult stream_accuracy(std::span<const TokenSequence> out, std::span<const TokenSequence> ref) {
  if (ref.empty()) throw std::invalid_argument("accuracy: empty dataset");
  if (out.size() != ref.size()) throw std::invalid_argument("accuracy: output and reference counts differ");
  const std::size_t S = ref[0].streams.size();
  std::vector<std::size_t> hit(S, 0), total(S, 0);
  for (std::size_t b = 0; b < ref.size(); ++b) {
    if (out[b].streams.size() != S || ref[b].streams.size() != S) throw std::invalid_argument("accuracy: stream count mismatch");
    for (std::size_t s = 0; s < S; ++s) {
      const auto& x = out[b].streams[s];
      const auto& y = ref[b].streams[s];
      if (x.size() != y.size()) throw std::invalid_argument("accuracy: length mismatch");
      for (std::size_t t = 0; t < y.size(); ++t) hit[s] += x[t] == y[t] ? 1 : 0;
      total[s] += y.size();
    }
  }
  AccuracyResult r;
  r.examples = ref.size();
  for (std::size_t s = 0; s < S; ++s) {
    r.per_stream.push_back(total[s] ? static_cast<double>(hit[s]) / static_cast<double>(total[s]) : 0.0);
    r.accuracy += r.per_stream.back() / static_cast<double>(S);
  }
  return r;
}

/// Reconstructs every example and compares with the input. The latent is
/// the posterior mean unless `sample_posterior` is set. Teacher-forced
/// outputs are per-step argmax predictions given the true prefix; sampled
/// outputs are drawn autoregressively at `temperature`.
template <typename Model>
AccuracyResult reconstruction_accuracy(const Model& model, std::span<const TokenSequence> data, AccuracyMode mode,
                                       double temperature = 1.0, std::uint64_t seed = 0, bool sample_posterior = false,
                                       std::size_t batch = 64) {
  using Mat = typename Model::Mat;
  if (data.empty()) throw std::invalid_argument("accuracy: empty dataset");
  std::vector<TokenSequence> outputs;
  outputs.reserve(data.size());
  for (std::size_t i = 0, chunk = 0; i < data.size(); i += batch, ++chunk) {
    const auto part = data.subspan(i, std::min(batch, data.size() - i));
    auto [mu, sigma] = model.infer(part);
    Mat z = mu;
    if (sample_posterior) {
      Rng er(derive_seed(seed, 0xe95a, chunk));
      for (Eigen::Index j = 0; j < z.cols(); ++j)
        for (Eigen::Index d = 0; d < z.rows(); ++d) z(d, j) += sigma(d, j) * static_cast<typename Mat::Scalar>(er.normal());
    }
    Rng rng(derive_seed(seed, 0x5a4, chunk));
    std::vector<TokenSequence> out;
    if (mode == AccuracyMode::sampled) {
      out = model.generate(z, temperature, rng);
    } else {
      nn::Graph<typename Mat::Scalar> g(false);
      DecodeOptions opt;
      opt.mode = DecodeMode::teacher_forced;
      out = model.decode(g, g.constant(z), part, opt).tokens;
    }
    for (auto& x : out) outputs.push_back(std::move(x));
  }
  return stream_accuracy(outputs, data);
}

// ---- distances and data interpolation ----------------------------------------------------

inline double hamming_normalized(const std::vector<int>& x, const std::vector<int>& y) {
  if (x.size() != y.size()) throw std::invalid_argument("hamming: length mismatch");
  if (x.empty()) return 0.0;
  std::size_t d = 0;
  for (std::size_t t = 0; t < x.size(); ++t) d += x[t] != y[t] ? 1 : 0;
  return static_cast<double>(d) / static_cast<double>(x.size());
}

/// Averaged over streams.
inline double hamming_normalized(const TokenSequence& x, const TokenSequence& y) {
  if (x.streams.size() != y.streams.size() || x.streams.empty()) throw std::invalid_argument("hamming: stream count mismatch");
  double total = 0.0;
  for (std::size_t s = 0; s < x.streams.size(); ++s) total += hamming_normalized(x.streams[s], y.streams[s]);
  return total / static_cast<double>(x.streams.size());
}

/// Takes b_t with probability alpha and a_t otherwise, independently per
/// step (and per stream).
inline TokenSequence data_interpolate(const TokenSequence& a, const TokenSequence& b, double alpha, std::uint64_t seed) {
  if (a.streams.size() != b.streams.size()) throw std::invalid_argument("data_interpolate: stream count mismatch");
  Rng rng(seed);
  TokenSequence out = a;
  for (std::size_t s = 0; s < a.streams.size(); ++s) {
    if (a.streams[s].size() != b.streams[s].size()) throw std::invalid_argument("data_interpolate: length mismatch");
    for (std::size_t t = 0; t < a.streams[s].size(); ++t)
      if (rng.uniform() < alpha) out.streams[s][t] = b.streams[s][t];
  }
  return out;
}

// ---- interpolation reports ----------------------------------------------------------------

using SequencePair = std::pair<TokenSequence, TokenSequence>;

/// n pairs of distinct examples drawn with a seeded generator.
inline std::vector<SequencePair> make_pairs(std::span<const TokenSequence> data, std::size_t n, std::uint64_t seed) {
  if (data.size() < 2) throw std::invalid_argument("make_pairs: need at least two examples");
  Rng rng(derive_seed(seed, 0x9a1));
  std::vector<SequencePair> out;
  for (std::size_t i = 0; i < n; ++i) {
    const auto a = static_cast<std::size_t>(rng.below(data.size()));
    auto b = static_cast<std::size_t>(rng.below(data.size() - 1));
    if (b >= a) ++b;
    out.emplace_back(data[a], data[b]);
  }
  return out;
}

/// 0, 1/(n-1), ..., 1.
inline std::vector<double> alpha_grid(int points = 11) {
  if (points < 2) throw std::invalid_argument("alpha grid needs at least two points");
  std::vector<double> out;
  for (int i = 0; i < points; ++i) out.push_back(static_cast<double>(i) / (points - 1));
  return out;
}

/// Alpha is the fraction of B: alpha = 0 is endpoint A for every method.
struct InterpolationReport {
  std::string method;  // data, flat or hierarchical
  std::vector<double> alphas;
  std::vector<double> hamming_from_a;
  std::vector<double> lm_cost_ratio;
  std::size_t n_pairs = 0;

  std::string to_tsv() const {
    std::string out = "# method " + method + ", " + std::to_string(n_pairs) + " pairs\nalpha\thamming_from_a\tlm_cost_ratio\n";
    for (std::size_t i = 0; i < alphas.size(); ++i)
      out += KeyValueConfig::format_double(alphas[i]) + '\t' + KeyValueConfig::format_double(hamming_from_a[i]) + '\t' +
             KeyValueConfig::format_double(lm_cost_ratio[i]) + '\n';
    return out;
  }
};

namespace detail {

// Adds one pair's curve into the running sums.
inline void accumulate_pair(InterpolationReport& r, const SequencePair& p, const std::vector<TokenSequence>& points,
                            const NgramModel& lm) {
  const double ca = lm.score(p.first.streams.at(0));
  const double cb = lm.score(p.second.streams.at(0));
  for (std::size_t i = 0; i < points.size(); ++i) {
    const double alpha = r.alphas[i];
    r.hamming_from_a[i] += hamming_normalized(p.first, points[i]);
    r.lm_cost_ratio[i] += lm.score(points[i].streams.at(0)) / (alpha * cb + (1.0 - alpha) * ca);
  }
}

inline InterpolationReport empty_report(const std::string& method, const std::vector<double>& alphas, std::size_t pairs) {
  if (pairs == 0) throw std::invalid_argument("interpolation: empty pair list");
  if (alphas.empty()) throw std::invalid_argument("interpolation: empty alpha grid");
  InterpolationReport r;
  r.method = method;
  r.alphas = alphas;
  r.hamming_from_a.assign(alphas.size(), 0.0);
  r.lm_cost_ratio.assign(alphas.size(), 0.0);
  r.n_pairs = pairs;
  return r;
}

inline void finish(InterpolationReport& r) {
  for (std::size_t i = 0; i < r.alphas.size(); ++i) {
    r.hamming_from_a[i] /= static_cast<double>(r.n_pairs);
    r.lm_cost_ratio[i] /= static_cast<double>(r.n_pairs);
  }
}

}  // namespace detail

/// Bernoulli data-space baseline. The LM judges the first stream.
inline InterpolationReport data_interpolation_report(std::span<const SequencePair> pairs, const std::vector<double>& alphas,
                                                     const NgramModel& lm, std::uint64_t seed) {
  auto r = detail::empty_report("data", alphas, pairs.size());
  for (std::size_t p = 0; p < pairs.size(); ++p) {
    std::vector<TokenSequence> points;
    for (std::size_t i = 0; i < alphas.size(); ++i)
      points.push_back(data_interpolate(pairs[p].first, pairs[p].second, alphas[i], derive_seed(seed, p, i)));
    detail::accumulate_pair(r, pairs[p], points, lm);
  }
  detail::finish(r);
  return r;
}

/// decoded[p][i]: pair p decoded at alphas[i]. Every alpha is decoded as one
/// batch with its own sampling stream.
template <typename Model>
std::vector<std::vector<TokenSequence>> latent_interpolate(const Model& model, std::span<const SequencePair> pairs,
                                                           const std::vector<double>& alphas, double temperature,
                                                           std::uint64_t seed) {
  using Mat = typename Model::Mat;
  using Scalar = typename Mat::Scalar;
  std::vector<TokenSequence> a, b;
  for (const auto& p : pairs) {
    a.push_back(p.first);
    b.push_back(p.second);
  }
  const Eigen::MatrixXd za = encode_means(model, a);
  const Eigen::MatrixXd zb = encode_means(model, b);
  std::vector<std::vector<TokenSequence>> out(pairs.size());
  for (std::size_t i = 0; i < alphas.size(); ++i) {
    Mat z(za.rows(), za.cols());
    for (Eigen::Index p = 0; p < za.cols(); ++p)
      z.col(p) = slerp(za.col(p), zb.col(p), alphas[i]).template cast<Scalar>();
    Rng rng(derive_seed(seed, 0x1e7, i));
    auto decoded = model.generate(z, temperature, rng);
    for (std::size_t p = 0; p < pairs.size(); ++p) out[p].push_back(std::move(decoded[p]));
  }
  return out;
}

/// Latent-space interpolation: endpoints encoded to their posterior means,
/// slerp at each alpha, decoded by sampling at `temperature`.
template <typename Model>
InterpolationReport latent_interpolation_report(const Model& model, std::span<const SequencePair> pairs,
                                                const std::vector<double>& alphas, double temperature,
                                                const NgramModel& lm, std::uint64_t seed) {
  auto r = detail::empty_report(to_string(model.arch().decoder), alphas, pairs.size());
  const auto decoded = latent_interpolate(model, pairs, alphas, temperature, seed);
  for (std::size_t p = 0; p < pairs.size(); ++p) detail::accumulate_pair(r, pairs[p], decoded[p], lm);
  detail::finish(r);
  return r;
}

/// Two stacked panels (Hamming distance from A, relative LM cost) with one
/// polyline per report.
inline std::string interpolation_svg(const std::vector<InterpolationReport>& reports) {
  const double W = 640, panel = 260, left = 60, top = 30, gap = 50, plot_w = W - left - 20;
  static const char* colors[] = {"#555555", "#d62728", "#1f77b4", "#2ca02c", "#9467bd"};
  double rmin = 1.0, rmax = 1.0;
  for (const auto& r : reports)
    for (double v : r.lm_cost_ratio)
      if (std::isfinite(v)) {
        rmin = std::min(rmin, v);
        rmax = std::max(rmax, v);
      }
  if (rmax - rmin < 1e-9) rmax = rmin + 1.0;
  const double pad = 0.05 * (rmax - rmin);
  rmin -= pad;
  rmax += pad;
  auto num = [](double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.2f", v);
    return std::string(buf);
  };
  std::string s = "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" + num(W) + "\" height=\"" +
                  num(2 * panel + top + gap + 60) + "\" font-family=\"sans-serif\" font-size=\"12\">\n";
  auto panel_frame = [&](double y0, const std::string& title, double lo, double hi) {
    s += "<rect x=\"" + num(left) + "\" y=\"" + num(y0) + "\" width=\"" + num(plot_w) + "\" height=\"" + num(panel) +
         "\" fill=\"none\" stroke=\"black\"/>\n";
    s += "<text x=\"" + num(left) + "\" y=\"" + num(y0 - 8) + "\">" + title + "</text>\n";
    s += "<text x=\"" + num(left - 6) + "\" y=\"" + num(y0 + 4) + "\" text-anchor=\"end\">" + num(hi) + "</text>\n";
    s += "<text x=\"" + num(left - 6) + "\" y=\"" + num(y0 + panel + 4) + "\" text-anchor=\"end\">" + num(lo) + "</text>\n";
    s += "<text x=\"" + num(left) + "\" y=\"" + num(y0 + panel + 16) + "\" text-anchor=\"middle\">A</text>\n";
    s += "<text x=\"" + num(left + plot_w) + "\" y=\"" + num(y0 + panel + 16) + "\" text-anchor=\"middle\">B</text>\n";
  };
  const double y1 = top, y2 = top + panel + gap;
  panel_frame(y1, "Hamming distance from A", 0.0, 1.0);
  panel_frame(y2, "LM cost relative to endpoints", rmin, rmax);
  for (std::size_t k = 0; k < reports.size(); ++k) {
    const auto& r = reports[k];
    const std::string color = colors[k % 5];
    std::string h, c;
    for (std::size_t i = 0; i < r.alphas.size(); ++i) {
      const double x = left + r.alphas[i] * plot_w;
      h += num(x) + "," + num(y1 + (1.0 - r.hamming_from_a[i]) * panel) + " ";
      if (std::isfinite(r.lm_cost_ratio[i])) c += num(x) + "," + num(y2 + (rmax - r.lm_cost_ratio[i]) / (rmax - rmin) * panel) + " ";
    }
    s += "<polyline fill=\"none\" stroke=\"" + color + "\" stroke-width=\"2\" points=\"" + h + "\"/>\n";
    s += "<polyline fill=\"none\" stroke=\"" + color + "\" stroke-width=\"2\" points=\"" + c + "\"/>\n";
    s += "<text x=\"" + num(left + 10 + 120.0 * static_cast<double>(k)) + "\" y=\"" + num(y2 + panel + 40) + "\" fill=\"" + color +
         "\">" + r.method + "</text>\n";
  }
  s += "</svg>\n";
  return s;
}

/// Several reports side by side: alpha, then (hamming, ratio) per method.
inline std::string interpolation_tsv(const std::vector<InterpolationReport>& reports) {
  if (reports.empty()) return {};
  std::string out = "alpha";
  for (const auto& r : reports) out += "\thamming_" + r.method + "\tlm_ratio_" + r.method;
  out += '\n';
  for (std::size_t i = 0; i < reports[0].alphas.size(); ++i) {
    out += KeyValueConfig::format_double(reports[0].alphas[i]);
    for (const auto& r : reports)
      out += '\t' + KeyValueConfig::format_double(r.hamming_from_a.at(i)) + '\t' + KeyValueConfig::format_double(r.lm_cost_ratio.at(i));
    out += '\n';
  }
  return out;
}

}  // namespace musicvae
