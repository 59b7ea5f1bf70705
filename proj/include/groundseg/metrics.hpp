#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

namespace groundseg {

struct Mask {
  int height = 0;
  int width = 0;
  std::vector<std::uint8_t> data;  // 0 or 1

  Mask() = default;
  Mask(int h, int w) : height(h), width(w), data(static_cast<std::size_t>(h) * w, 0) {}
  Mask(int h, int w, std::vector<std::uint8_t> d);
  std::size_t count() const;
  friend bool operator==(const Mask&, const Mask&) = default;
};

struct EvalPair {
  Mask pred;
  Mask gt;
  int category = 0;  // 0 when the pair has no ground-truth category
  std::string example_id;
};

/// |pred & gt| / |pred | gt|; 1 when both are empty.
double iou(const Mask& pred, const Mask& gt);
/// Mean per-pair IoU.
double giou_dataset(const std::vector<EvalPair>& pairs);
/// Total intersection over total union.
double ciou_dataset(const std::vector<EvalPair>& pairs);

/// Sentence BLEU-4 on case-folded word tokens. Zero-match n-gram orders use
/// (0 + 1) / (total + 1); brevity penalty exp(min(0, 1 - r/c)).
double bleu4(const std::string& candidate, const std::string& reference);
/// Multiset token F1; 1 when both are empty, 0 when exactly one is.
double token_f1(const std::string& candidate, const std::string& reference);
/// 4-connected foreground components.
int fragment_count(const Mask& mask);

struct CategoryScores {
  double giou = 0.0;
  double ciou = 0.0;
  int pairs = 0;
  friend bool operator==(const CategoryScores&, const CategoryScores&) = default;
};

struct MetricsReport {
  std::string split;
  std::string task;
  int examples = 0;
  // Segmentation tasks.
  int pairs = 0;
  double giou = 0.0;
  double ciou = 0.0;
  std::map<int, CategoryScores> per_category;
  double mean_fragments = 0.0;
  /// Fraction of examples whose generated seg count equals the reference's.
  double seg_count_accuracy = 0.0;
  // Conversation task.
  double bleu4 = 0.0;
  double token_f1 = 0.0;

  nlohmann::json to_json() const;
  static MetricsReport from_json(const nlohmann::json& j);
  /// Aligned plain-text table: overall then one column pair per category.
  std::string table() const;
  friend bool operator==(const MetricsReport&, const MetricsReport&) = default;
};

/// Fills the segmentation fields of `report` from scored pairs.
void summarize_pairs(const std::vector<EvalPair>& pairs, MetricsReport& report);

}  // namespace groundseg
