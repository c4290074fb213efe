#pragma once

// Interpolated Kneser-Ney n-gram model over integer tokens, used to judge
// how plausible interpolated melodies are.
//
// Symbols: tokens 0..V-1, end symbol V (predicted), start symbol V+1 (context
// only). Each sequence is padded with order-1 start symbols and one end
// symbol, so the model predicts V+1 outcomes. The highest order uses raw
// counts, lower orders continuation counts (distinct left extensions), all
// with one fixed discount; the unigram level interpolates with the uniform
// distribution over the V+1 outcomes.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "musicvae/config.hpp"
#include "musicvae/container.hpp"

namespace musicvae {

class NgramModel {
 public:
  static constexpr double kDefaultDiscount = 0.75;

  /// An untrained model: every outcome has probability 1/(V+1).
  static NgramModel uniform(int vocab, int order = 5) {
    NgramModel m(vocab, order, kDefaultDiscount);
    m.uniform_ = true;
    return m;
  }

  static NgramModel fit(std::span<const std::vector<int>> corpus, int vocab, int order = 5,
                        double discount = kDefaultDiscount) {
    if (corpus.empty()) throw std::invalid_argument("ngram: empty corpus");
    NgramModel m(vocab, order, discount);
    // Raw counts of every k-gram ending at a predicted position.
    std::vector<std::unordered_map<std::uint64_t, double>> raw(static_cast<std::size_t>(order + 1));
    for (const auto& seq : corpus) {
      for (int t : seq) m.check_symbol(t, false);
      const auto padded = m.pad(seq);
      for (std::size_t p = static_cast<std::size_t>(order - 1); p < padded.size(); ++p)
        for (int k = 1; k <= order; ++k) raw[static_cast<std::size_t>(k)][m.key(padded, p + 1 - static_cast<std::size_t>(k), k)] += 1.0;
    }
    m.counts_.assign(static_cast<std::size_t>(order + 1), {});
    m.counts_[static_cast<std::size_t>(order)] = raw[static_cast<std::size_t>(order)];
    // Continuation count of a k-gram: number of distinct (k+1)-grams that
    // extend it on the left.
    for (int k = 1; k < order; ++k) {
      auto& cont = m.counts_[static_cast<std::size_t>(k)];
      for (const auto& [longer, c] : raw[static_cast<std::size_t>(k + 1)]) {
        (void)c;
        cont[m.drop_first(longer, k + 1)] += 1.0;
      }
    }
    m.index_contexts();
    return m;
  }

  int vocab() const { return vocab_; }
  int order() const { return order_; }
  double discount() const { return discount_; }
  int end_symbol() const { return vocab_; }
  int start_symbol() const { return vocab_ + 1; }
  bool is_uniform() const { return uniform_; }

  /// P(w | history), history being the most recent symbols (start symbols
  /// included); only the last order-1 are used. w may be the end symbol.
  double prob(std::span<const int> history, int w) const {
    check_symbol(w, true);
    if (uniform_) return 1.0 / (vocab_ + 1);
    std::vector<int> ctx(static_cast<std::size_t>(order_ - 1), start_symbol());
    const auto n = std::min(history.size(), ctx.size());
    std::copy(history.end() - static_cast<long>(n), history.end(), ctx.end() - static_cast<long>(n));
    return prob_at(ctx, w, order_);
  }

  /// Per-outcome negative log probabilities of seq followed by the end
  /// symbol; they sum to score(seq).
  std::vector<double> token_costs(std::span<const int> seq) const {
    for (int t : seq) check_symbol(t, false);
    std::vector<double> out;
    out.reserve(seq.size() + 1);
    const auto padded = pad(seq);
    const auto h = static_cast<std::size_t>(order_ - 1);
    for (std::size_t p = h; p < padded.size(); ++p) {
      const std::span<const int> ctx(padded.data() + p - h, h);
      out.push_back(-std::log(uniform_ ? 1.0 / (vocab_ + 1) : prob_at(ctx, padded[p], order_)));
    }
    return out;
  }

  /// Total negative natural-log probability of seq and its end symbol.
  double score(std::span<const int> seq) const {
    double total = 0.0;
    for (double c : token_costs(seq)) total += c;
    return total;
  }

  // ---- persistence ------------------------------------------------------------------
  // meta "ngram" holds vocab/order/discount; tensor "ngram/<k>" holds the
  // k-gram table sorted by key, one column per entry: k symbol rows then the
  // count used at that order.

  void store(Container& c) const {
    KeyValueConfig kv;
    kv.set("vocab", vocab_);
    kv.set("order", order_);
    kv.set("discount", discount_);
    kv.set("uniform", uniform_);
    c.meta["ngram"] = kv.to_text();
    if (uniform_) return;
    for (int k = 1; k <= order_; ++k) {
      const auto& table = counts_[static_cast<std::size_t>(k)];
      std::vector<std::uint64_t> keys;
      keys.reserve(table.size());
      for (const auto& [key, v] : table) keys.push_back(key);
      std::sort(keys.begin(), keys.end());
      Eigen::MatrixXd m(k + 1, static_cast<Eigen::Index>(keys.size()));
      for (std::size_t j = 0; j < keys.size(); ++j) {
        const auto syms = unpack(keys[j], k);
        for (int i = 0; i < k; ++i) m(i, static_cast<Eigen::Index>(j)) = syms[static_cast<std::size_t>(i)];
        m(k, static_cast<Eigen::Index>(j)) = table.at(keys[j]);
      }
      c.put("ngram/" + std::to_string(k), m);
    }
  }

  static NgramModel load(const Container& c) {
    const auto kv = KeyValueConfig::parse(c.meta_at("ngram"));
    NgramModel m(static_cast<int>(kv.get_int("vocab", 0)), static_cast<int>(kv.get_int("order", 5)),
                 kv.get_double("discount", kDefaultDiscount));
    m.uniform_ = kv.get_bool("uniform", false);
    if (m.uniform_) return m;
    m.counts_.assign(static_cast<std::size_t>(m.order_ + 1), {});
    for (int k = 1; k <= m.order_; ++k) {
      const auto& t = c.get("ngram/" + std::to_string(k));
      if (t.rows() != k + 1) throw FormatError("ngram table " + std::to_string(k) + " has wrong shape");
      std::vector<int> syms(static_cast<std::size_t>(k));
      for (Eigen::Index j = 0; j < t.cols(); ++j) {
        for (int i = 0; i < k; ++i) {
          syms[static_cast<std::size_t>(i)] = static_cast<int>(t(i, j));
          if (syms[static_cast<std::size_t>(i)] < 0 || syms[static_cast<std::size_t>(i)] > m.start_symbol())
            throw FormatError("ngram table symbol out of range");
        }
        m.counts_[static_cast<std::size_t>(k)][m.key(syms, 0, k)] = t(k, j);
      }
    }
    m.index_contexts();
    return m;
  }

 private:
  struct ContextStats {
    double total = 0.0;  // sum of counts over continuations
    double types = 0.0;  // number of distinct continuations
  };

  NgramModel(int vocab, int order, double discount) : vocab_(vocab), order_(order), discount_(discount) {
    if (vocab < 1) throw std::invalid_argument("ngram: vocabulary must be positive");
    if (order < 1) throw std::invalid_argument("ngram: order must be positive");
    if (!(discount > 0.0 && discount < 1.0)) throw std::invalid_argument("ngram: discount must be in (0, 1)");
    if (order * std::log2(static_cast<double>(base())) >= 63.0)
      throw std::invalid_argument("ngram: vocabulary too large for this order");
  }

  std::uint64_t base() const { return static_cast<std::uint64_t>(vocab_) + 2; }

  void check_symbol(int t, bool allow_end) const {
    if (t < 0 || t > vocab_ || (t == vocab_ && !allow_end))
      throw std::invalid_argument("ngram: token " + std::to_string(t) + " outside vocabulary");
  }

  std::vector<int> pad(std::span<const int> seq) const {
    std::vector<int> out(static_cast<std::size_t>(order_ - 1), start_symbol());
    out.insert(out.end(), seq.begin(), seq.end());
    out.push_back(end_symbol());
    return out;
  }

  // Keys pack symbols in base V+2, most significant first. Tables are kept
  // per length, so k-grams of different lengths never share a map.
  std::uint64_t key(std::span<const int> s, std::size_t begin, int k) const {
    std::uint64_t v = 0;
    for (int i = 0; i < k; ++i) v = v * base() + static_cast<std::uint64_t>(s[begin + static_cast<std::size_t>(i)]);
    return v;
  }

  std::vector<int> unpack(std::uint64_t v, int k) const {
    std::vector<int> s(static_cast<std::size_t>(k));
    for (int i = k - 1; i >= 0; --i) {
      s[static_cast<std::size_t>(i)] = static_cast<int>(v % base());
      v /= base();
    }
    return s;
  }

  std::uint64_t drop_first(std::uint64_t v, int k) const {
    std::uint64_t p = 1;
    for (int i = 1; i < k; ++i) p *= base();
    return v % p;
  }

  void index_contexts() {
    contexts_.assign(static_cast<std::size_t>(order_ + 1), {});
    for (int k = 1; k <= order_; ++k)
      for (const auto& [key, c] : counts_[static_cast<std::size_t>(k)]) {
        auto& st = contexts_[static_cast<std::size_t>(k)][key / base()];
        st.total += c;
        st.types += 1.0;
      }
  }

  // ctx holds exactly order-1 symbols; level k uses its last k-1.
  double prob_at(std::span<const int> ctx, int w, int k) const {
    const double uniform = 1.0 / (vocab_ + 1);
    if (k == 0) return uniform;
    const std::size_t h = static_cast<std::size_t>(k - 1);
    const std::size_t begin = ctx.size() - h;
    const std::uint64_t ctx_key = key(ctx, begin, k - 1);
    const auto& stats = contexts_[static_cast<std::size_t>(k)];
    const auto it = stats.find(ctx_key);
    if (it == stats.end()) return prob_at(ctx, w, k - 1);
    const auto& table = counts_[static_cast<std::size_t>(k)];
    const auto c = table.find(ctx_key * base() + static_cast<std::uint64_t>(w));
    const double count = c == table.end() ? 0.0 : c->second;
    const double lower = prob_at(ctx, w, k - 1);
    return (std::max(count - discount_, 0.0) + discount_ * it->second.types * lower) / it->second.total;
  }

  int vocab_;
  int order_;
  double discount_;
  bool uniform_ = false;
  std::vector<std::unordered_map<std::uint64_t, double>> counts_;         // by n-gram length
  std::vector<std::unordered_map<std::uint64_t, ContextStats>> contexts_;  // by n-gram length, keyed by context
};

}  // namespace musicvae
