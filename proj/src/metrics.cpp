#include "groundseg/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <sstream>

#include "groundseg/core_data.hpp"
#include "groundseg/mllm.hpp"

namespace groundseg {

Mask::Mask(int h, int w, std::vector<std::uint8_t> d) : height(h), width(w), data(std::move(d)) {
  if (data.size() != static_cast<std::size_t>(h) * w) throw InvalidInput("Mask: data does not match shape");
}

std::size_t Mask::count() const {
  return static_cast<std::size_t>(std::count_if(data.begin(), data.end(), [](auto v) { return v != 0; }));
}

namespace {

std::pair<std::size_t, std::size_t> inter_union(const Mask& a, const Mask& b) {
  if (a.height != b.height || a.width != b.width || a.data.size() != b.data.size())
    throw InvalidInput("iou: mask shapes differ");
  std::size_t inter = 0, uni = 0;
  for (std::size_t i = 0; i < a.data.size(); ++i) {
    const bool x = a.data[i] != 0, y = b.data[i] != 0;
    inter += x && y;
    uni += x || y;
  }
  return {inter, uni};
}

void require_pairs(const std::vector<EvalPair>& pairs) {
  if (pairs.empty()) throw InvalidInput("IoU aggregation needs at least one pair");
}

}  // namespace

double iou(const Mask& pred, const Mask& gt) {
  const auto [i, u] = inter_union(pred, gt);
  return u == 0 ? 1.0 : static_cast<double>(i) / static_cast<double>(u);
}

double giou_dataset(const std::vector<EvalPair>& pairs) {
  require_pairs(pairs);
  double s = 0;
  for (const auto& p : pairs) s += iou(p.pred, p.gt);
  return s / static_cast<double>(pairs.size());
}

double ciou_dataset(const std::vector<EvalPair>& pairs) {
  require_pairs(pairs);
  std::size_t si = 0, su = 0;
  for (const auto& p : pairs) {
    const auto [i, u] = inter_union(p.pred, p.gt);
    si += i;
    su += u;
  }
  return su == 0 ? 1.0 : static_cast<double>(si) / static_cast<double>(su);
}

namespace {

std::map<std::vector<std::string>, int> ngram_counts(const std::vector<std::string>& toks, std::size_t n) {
  std::map<std::vector<std::string>, int> out;
  for (std::size_t i = 0; i + n <= toks.size(); ++i) ++out[std::vector<std::string>(toks.begin() + i, toks.begin() + i + n)];
  return out;
}

}  // namespace

double bleu4(const std::string& candidate, const std::string& reference) {
  const auto cand = split_words(candidate);
  const auto ref = split_words(reference);
  if (cand.empty()) return 0.0;
  double log_sum = 0;
  for (std::size_t n = 1; n <= 4; ++n) {
    const auto cc = ngram_counts(cand, n);
    const auto rc = ngram_counts(ref, n);
    int matched = 0, total = 0;
    for (const auto& [g, c] : cc) {
      total += c;
      auto it = rc.find(g);
      if (it != rc.end()) matched += std::min(c, it->second);
    }
    const double p = matched > 0 ? static_cast<double>(matched) / total : 1.0 / (total + 1.0);
    log_sum += std::log(p);
  }
  const double c = static_cast<double>(cand.size()), r = static_cast<double>(ref.size());
  const double bp = std::exp(std::min(0.0, 1.0 - r / c));
  return bp * std::exp(log_sum / 4.0);
}

double token_f1(const std::string& candidate, const std::string& reference) {
  const auto cand = split_words(candidate);
  const auto ref = split_words(reference);
  if (cand.empty() && ref.empty()) return 1.0;
  if (cand.empty() || ref.empty()) return 0.0;
  std::map<std::string, int> rc;
  for (const auto& t : ref) ++rc[t];
  int matched = 0;
  for (const auto& t : cand)
    if (auto it = rc.find(t); it != rc.end() && it->second > 0) {
      --it->second;
      ++matched;
    }
  if (matched == 0) return 0.0;
  const double p = static_cast<double>(matched) / cand.size();
  const double r = static_cast<double>(matched) / ref.size();
  return 2 * p * r / (p + r);
}

int fragment_count(const Mask& mask) {
  const int h = mask.height, w = mask.width;
  std::vector<std::uint8_t> seen(mask.data.size(), 0);
  std::vector<int> stack;
  int components = 0;
  for (int start = 0; start < h * w; ++start) {
    if (!mask.data[static_cast<std::size_t>(start)] || seen[static_cast<std::size_t>(start)]) continue;
    ++components;
    stack.push_back(start);
    seen[static_cast<std::size_t>(start)] = 1;
    while (!stack.empty()) {
      const int cur = stack.back();
      stack.pop_back();
      const int i = cur / w, j = cur % w;
      const int nb[4][2] = {{i - 1, j}, {i + 1, j}, {i, j - 1}, {i, j + 1}};
      for (const auto& n : nb) {
        if (n[0] < 0 || n[0] >= h || n[1] < 0 || n[1] >= w) continue;
        const auto k = static_cast<std::size_t>(n[0] * w + n[1]);
        if (mask.data[k] && !seen[k]) {
          seen[k] = 1;
          stack.push_back(n[0] * w + n[1]);
        }
      }
    }
  }
  return components;
}

void summarize_pairs(const std::vector<EvalPair>& pairs, MetricsReport& report) {
  report.pairs = static_cast<int>(pairs.size());
  report.per_category.clear();
  if (pairs.empty()) return;
  report.giou = giou_dataset(pairs);
  report.ciou = ciou_dataset(pairs);
  std::map<int, std::vector<EvalPair>> by_cat;
  for (const auto& p : pairs)
    if (p.category > 0) by_cat[p.category].push_back(p);
  for (const auto& [cat, ps] : by_cat)
    report.per_category[cat] = {giou_dataset(ps), ciou_dataset(ps), static_cast<int>(ps.size())};
}

nlohmann::json MetricsReport::to_json() const {
  nlohmann::json cats = nlohmann::json::object();
  for (const auto& [cat, s] : per_category)
    cats[category_name(cat)] = {{"id", cat}, {"giou", s.giou}, {"ciou", s.ciou}, {"pairs", s.pairs}};
  return {{"split", split},
          {"task", task},
          {"examples", examples},
          {"pairs", pairs},
          {"giou", giou},
          {"ciou", ciou},
          {"per_category", cats},
          {"mean_fragments", mean_fragments},
          {"seg_count_accuracy", seg_count_accuracy},
          {"bleu4", bleu4},
          {"token_f1", token_f1}};
}

MetricsReport MetricsReport::from_json(const nlohmann::json& j) {
  MetricsReport r;
  r.split = j.at("split").get<std::string>();
  r.task = j.at("task").get<std::string>();
  r.examples = j.at("examples").get<int>();
  r.pairs = j.at("pairs").get<int>();
  r.giou = j.at("giou").get<double>();
  r.ciou = j.at("ciou").get<double>();
  for (const auto& [name, v] : j.at("per_category").items())
    r.per_category[v.at("id").get<int>()] = {v.at("giou").get<double>(), v.at("ciou").get<double>(),
                                             v.at("pairs").get<int>()};
  r.mean_fragments = j.at("mean_fragments").get<double>();
  r.seg_count_accuracy = j.at("seg_count_accuracy").get<double>();
  r.bleu4 = j.at("bleu4").get<double>();
  r.token_f1 = j.at("token_f1").get<double>();
  return r;
}

std::string MetricsReport::table() const {
  std::ostringstream os;
  os << std::fixed << std::setprecision(3);
  os << "split=" << split << " task=" << task << " examples=" << examples << "\n";
  if (task == "conversation") {
    os << std::left << std::setw(10) << "BLEU-4" << std::setw(10) << "F1" << "\n";
    os << std::setw(10) << bleu4 << std::setw(10) << token_f1 << "\n";
    return os.str();
  }
  const int w = 8;
  os << std::left << std::setw(2 * w) << "Overall";
  for (int c = 1; c <= kNumCategories; ++c) {
    std::string name = category_name(c);
    name[0] = static_cast<char>(std::toupper(static_cast<unsigned char>(name[0])));
    os << std::setw(2 * w) << name;
  }
  os << "\n";
  for (int c = 0; c <= kNumCategories; ++c) os << std::setw(w) << "gIoU" << std::setw(w) << "cIoU";
  os << "\n";
  os << std::setw(w) << giou << std::setw(w) << ciou;
  for (int c = 1; c <= kNumCategories; ++c) {
    auto it = per_category.find(c);
    if (it == per_category.end())
      os << std::setw(w) << "-" << std::setw(w) << "-";
    else
      os << std::setw(w) << it->second.giou << std::setw(w) << it->second.ciou;
  }
  os << "\n";
  os << "pairs=" << pairs << " seg_count_accuracy=" << seg_count_accuracy << " mean_fragments=" << mean_fragments
     << "\n";
  return os.str();
}

}  // namespace groundseg
