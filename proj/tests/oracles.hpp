#pragma once

#include <algorithm>
#include <cmath>
#include <iterator>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "groundseg/metrics.hpp"
#include "groundseg/rng.hpp"
#include "groundseg/tensor.hpp"

// Brute-force references shared by the unit tests and the acceptance run.
namespace oracle {

using groundseg::Mask;
using groundseg::Rng;
using groundseg::Tensor;
using V = Tensor<double>::Storage;

// Scalar reference implementations written straight from the definitions,
// in long double and without any log-sum-exp tricks.
inline long double ref_bce(const V& z, const V& t, const V& w) {
  long double s = 0;
  for (std::size_t i = 0; i < z.size(); ++i) {
    const long double p = 1.0L / (1.0L + std::exp(-static_cast<long double>(z[i])));
    s += w[i] * (-t[i] * std::log(p) - (1 - t[i]) * std::log(1 - p));
  }
  return s / z.size();
}

inline long double ref_dice(const V& p, const V& t, const V& w, long double s) {
  long double i = 0, a = 0, b = 0;
  for (std::size_t k = 0; k < p.size(); ++k) {
    i += w[k] * p[k] * t[k];
    a += w[k] * p[k];
    b += w[k] * t[k];
  }
  return 1 - (2 * i + s) / (a + b + s);
}

inline long double ref_consistency(const std::vector<Tensor<double>>& maps) {
  long double sum = 0;
  long double n = 0;
  for (const auto& m : maps) {
    const int h = m.dim(0), w = m.dim(1);
    for (int i = 0; i < h; ++i)
      for (int j = 0; j < w; ++j)
        for (auto [di, dj] : {std::pair{-1, 0}, {1, 0}, {0, -1}, {0, 1}}) {
          const int a = i + di, b = j + dj;
          if (a < 0 || a >= h || b < 0 || b >= w) continue;
          sum += std::fabs(m.at(i, j) - m.at(a, b));
          n += 1;
        }
  }
  return n == 0 ? 0 : sum / n;
}

inline long double ref_text(const Tensor<double>& logits, const std::vector<int>& ids, int begin, int end) {
  long double s = 0;
  const int v = logits.dim(1);
  for (int t = begin; t < end; ++t) {
    long double z = 0;
    for (int k = 0; k < v; ++k) z += std::exp(static_cast<long double>(logits.at(t - 1, k)));
    s += -(logits.at(t - 1, ids[static_cast<std::size_t>(t)]) - std::log(z));
  }
  return s / (end - begin);
}

inline V sigmoid(const V& z) {
  V p(z.size());
  for (std::size_t i = 0; i < z.size(); ++i) p[i] = 1 / (1 + std::exp(-z[i]));
  return p;
}


inline Mask random_mask(Rng& rng, int h, int w, double density) {
  Mask m(h, w);
  for (auto& v : m.data) v = rng.uniform01() < density;
  return m;
}

inline std::pair<int, int> ref_counts(const Mask& a, const Mask& b) {
  int i = 0, u = 0;
  for (int r = 0; r < a.height; ++r)
    for (int c = 0; c < a.width; ++c) {
      const bool x = a.data[static_cast<std::size_t>(r * a.width + c)] == 1;
      const bool y = b.data[static_cast<std::size_t>(r * b.width + c)] == 1;
      if (x && y) ++i;
      if (x || y) ++u;
    }
  return {i, u};
}

inline double ref_iou(const Mask& a, const Mask& b) {
  const auto [i, u] = ref_counts(a, b);
  return u == 0 ? 1.0 : static_cast<double>(i) / u;
}

inline std::vector<std::string> words(const std::string& s) {
  std::istringstream in(s);
  std::vector<std::string> out;
  for (std::string w; in >> w;) out.push_back(w);
  return out;
}

// Occurrences of `gram` in `toks` by direct scanning.
inline int occurrences(const std::vector<std::string>& toks, const std::vector<std::string>& gram) {
  int c = 0;
  for (std::size_t i = 0; i + gram.size() <= toks.size(); ++i)
    c += std::equal(gram.begin(), gram.end(), toks.begin() + static_cast<std::ptrdiff_t>(i));
  return c;
}

inline double ref_bleu(const std::string& cand_s, const std::string& ref_s) {
  const auto cand = words(cand_s), ref = words(ref_s);
  if (cand.empty()) return 0.0;
  double logp = 0;
  for (std::size_t n = 1; n <= 4; ++n) {
    int matched = 0, total = 0;
    std::vector<std::vector<std::string>> done;
    for (std::size_t i = 0; i + n <= cand.size(); ++i) {
      ++total;
      std::vector<std::string> g(cand.begin() + static_cast<std::ptrdiff_t>(i),
                                 cand.begin() + static_cast<std::ptrdiff_t>(i + n));
      if (std::find(done.begin(), done.end(), g) != done.end()) continue;
      done.push_back(g);
      matched += std::min(occurrences(cand, g), occurrences(ref, g));
    }
    logp += std::log(matched > 0 ? static_cast<double>(matched) / total : 1.0 / (total + 1));
  }
  const double c = static_cast<double>(cand.size()), r = static_cast<double>(ref.size());
  const double bp = c >= r ? 1.0 : std::exp(1.0 - r / c);
  return bp * std::exp(logp / 4);
}

inline double ref_f1(const std::string& cand_s, const std::string& ref_s) {
  auto cand = words(cand_s), ref = words(ref_s);
  if (cand.empty() && ref.empty()) return 1.0;
  if (cand.empty() || ref.empty()) return 0.0;
  std::sort(cand.begin(), cand.end());
  std::sort(ref.begin(), ref.end());
  std::vector<std::string> common;
  std::set_intersection(cand.begin(), cand.end(), ref.begin(), ref.end(), std::back_inserter(common));
  if (common.empty()) return 0.0;
  const double p = static_cast<double>(common.size()) / cand.size(), r = static_cast<double>(common.size()) / ref.size();
  return 2 * p * r / (p + r);
}

inline std::string random_sentence(Rng& rng, int max_len) {
  static const char* vocab[] = {"the", "cat", "sat", "on", "mat", "nuclei", "are", "a", "dog"};
  std::string s;
  const int n = rng.uniform_int(0, max_len);
  for (int i = 0; i < n; ++i) s += std::string(i ? " " : "") + vocab[rng.uniform_int(0, 8)];
  return s;
}


}  // namespace oracle
