#pragma once

#include <vector>

#include "musicvae/model.hpp"
#include "musicvae/rng.hpp"

namespace testing_support {

using musicvae::ArchConfig;
using musicvae::DecoderKind;
using musicvae::Rng;
using musicvae::TokenSequence;

inline ArchConfig tiny_arch(DecoderKind kind, std::vector<int> vocab = {6}) {
  ArchConfig a;
  a.latent_dim = 4;
  a.encoder_hidden = 8;
  a.conductor_hidden = 8;
  a.conductor_embedding = 8;
  a.decoder_hidden = 8;
  a.steps = 8;
  a.segments = 2;
  a.vocab_sizes = std::move(vocab);
  a.decoder = kind;
  return a;
}

inline TokenSequence random_tokens(const ArchConfig& a, Rng& rng) {
  TokenSequence x;
  for (int v : a.vocab_sizes) {
    std::vector<int> s(static_cast<std::size_t>(a.steps));
    for (auto& t : s) t = static_cast<int>(rng.below(static_cast<std::uint64_t>(v)));
    x.streams.push_back(std::move(s));
  }
  return x;
}

inline std::vector<TokenSequence> random_batch(const ArchConfig& a, int n, Rng& rng) {
  std::vector<TokenSequence> out;
  for (int i = 0; i < n; ++i) out.push_back(random_tokens(a, rng));
  return out;
}

template <typename M>
M random_normal(Eigen::Index r, Eigen::Index c, Rng& rng) {
  M m(r, c);
  for (Eigen::Index j = 0; j < c; ++j)
    for (Eigen::Index i = 0; i < r; ++i) m(i, j) = static_cast<typename M::Scalar>(rng.normal());
  return m;
}

inline bool bitwise_equal(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) return false;
  return std::memcmp(a.data(), b.data(), sizeof(double) * static_cast<std::size_t>(a.size())) == 0;
}

}  // namespace testing_support
