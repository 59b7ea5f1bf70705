#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "groundseg/tensor.hpp"

namespace groundseg {

/// Raised for unreadable or inconsistent files on disk.
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr int kNumCategories = 4;
inline constexpr int kBackground = 0;
inline constexpr int kNeoplastic = 1;
inline constexpr int kInflammatory = 2;
inline constexpr int kConnective = 3;
inline constexpr int kEpithelial = 4;

/// Lower-case display name, e.g. "neoplastic". Throws for ids outside 1..4.
const std::string& category_name(int category);

/// H x W x 3 pixels in [0,1]. Values are multiples of 1/255 so they survive
/// an 8-bit PNG round trip.
struct ImagePatch {
  Tensor<float> pixels;  // [H,W,3]

  int height() const { return pixels.dim(0); }
  int width() const { return pixels.dim(1); }
  friend bool operator==(const ImagePatch&, const ImagePatch&) = default;
};

/// Per-pixel category id, 0 = background.
struct CategoryMap {
  int height = 0;
  int width = 0;
  int num_categories = kNumCategories;
  std::vector<std::uint8_t> labels;

  std::uint8_t at(int i, int j) const { return labels[static_cast<std::size_t>(i) * width + j]; }
  /// Binary mask of pixels equal to `category`.
  std::vector<std::uint8_t> binary(int category) const;
  /// Pixel count for each id 0..num_categories.
  std::vector<int> histogram() const;
  friend bool operator==(const CategoryMap&, const CategoryMap&) = default;
};

struct InstanceMap {
  int height = 0;
  int width = 0;
  std::vector<int> ids;  // 0 = background
  std::map<int, int> instance_category;
  friend bool operator==(const InstanceMap&, const InstanceMap&) = default;
};

enum class TaskType { reasoning, referring, conversation };

const char* task_name(TaskType t);
TaskType parse_task(const std::string& s);

inline constexpr const char* kSegToken = "<seg>";

struct QARecord {
  TaskType task = TaskType::conversation;
  std::string question;
  std::string answer_template;  // contains one "<seg>" per entry of slot_categories
  std::vector<int> slot_categories;
  friend bool operator==(const QARecord&, const QARecord&) = default;
};

/// Number of "<seg>" occurrences in `text`.
int count_seg_slots(const std::string& text);

struct PatchRecord {
  std::string patch_id;
  std::string slide_id;
  ImagePatch image;
  CategoryMap gt;
  InstanceMap instances;
  std::vector<QARecord> qa;
  /// Nuclei the generator asked for but could not place.
  int dropped_instances = 0;
  friend bool operator==(const PatchRecord&, const PatchRecord&) = default;
};

struct DatasetSplits {
  std::vector<PatchRecord> train;
  std::vector<PatchRecord> val;
  std::vector<PatchRecord> test;
  friend bool operator==(const DatasetSplits&, const DatasetSplits&) = default;
};

// ---------------------------------------------------------------------------
// Synthetic generation

struct CountRange {
  int min = 0;
  int max = 0;
};

struct GenSpec {
  int height = 64;
  int width = 64;
  /// Indexed by category - 1.
  std::array<CountRange, kNumCategories> counts{{{1, 4}, {0, 5}, {0, 3}, {0, 3}}};
  std::uint64_t seed = 0;
};

/// Renders non-overlapping elliptical nuclei on a noisy stain-like background.
/// Deterministic in `spec`.
PatchRecord generate_patch(const GenSpec& spec);

struct QATemplate {
  std::string question;
  std::string answer;
};

/// Template strings use "{cat}" for a category name, "{list}" for a seg-bound
/// category enumeration, "{top}" for the most abundant category and "{n}" for
/// the number of categories present.
struct TemplateBank {
  std::vector<QATemplate> referring;
  std::vector<QATemplate> referring_absent;
  std::vector<QATemplate> reasoning;
  std::vector<QATemplate> reasoning_absent;
  std::vector<QATemplate> conversation;
  std::vector<QATemplate> conversation_absent;

  static TemplateBank defaults();
  /// Every word the templates and their fillers can produce.
  std::vector<std::string> corpus() const;
};

/// One record per task type: reasoning, referring, conversation.
std::vector<QARecord> build_qa(const CategoryMap& gt, const InstanceMap& instances, const TemplateBank& templates,
                               std::uint64_t seed);

/// Slide i groups patches [i*patches_per_slide, (i+1)*patches_per_slide).
std::vector<PatchRecord> generate_dataset(int slides, int patches_per_slide, std::uint64_t seed,
                                          const TemplateBank& templates = TemplateBank::defaults());

/// Indices whose cosine similarity with `reference` is at least `threshold`.
std::vector<std::size_t> filter_patches(const std::vector<std::vector<double>>& embeddings,
                                        const std::vector<double>& reference, double threshold);

/// Partitions slides (never patches) with a seeded shuffle. Every split gets at
/// least one slide.
DatasetSplits split_dataset(const std::vector<PatchRecord>& records, std::array<int, 3> ratios = {8, 1, 1},
                            std::uint64_t seed = 0);

/// Writes manifest.jsonl plus PNG images, category masks and instance maps.
std::filesystem::path persist_dataset(const DatasetSplits& splits, const std::filesystem::path& dir);
DatasetSplits load_dataset(const std::filesystem::path& dir);

}  // namespace groundseg
