#include "groundseg/core_data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <queue>
#include <random>
#include <set>
#include <sstream>

#include <nlohmann/json.hpp>

#include "groundseg/png_io.hpp"
#include "groundseg/rng.hpp"

namespace groundseg {

namespace fs = std::filesystem;
using nlohmann::json;

const std::string& category_name(int category) {
  static const std::array<std::string, kNumCategories> names{"neoplastic", "inflammatory", "connective",
                                                             "epithelial"};
  if (category < 1 || category > kNumCategories) throw InvalidInput("unknown category id " + std::to_string(category));
  return names[static_cast<std::size_t>(category - 1)];
}

const char* task_name(TaskType t) {
  switch (t) {
    case TaskType::reasoning: return "reasoning";
    case TaskType::referring: return "referring";
    case TaskType::conversation: return "conversation";
  }
  return "?";
}

TaskType parse_task(const std::string& s) {
  if (s == "reasoning") return TaskType::reasoning;
  if (s == "referring") return TaskType::referring;
  if (s == "conversation") return TaskType::conversation;
  throw InvalidInput("unknown task '" + s + "'");
}

int count_seg_slots(const std::string& text) {
  int n = 0;
  const std::string tok = kSegToken;
  for (std::size_t pos = text.find(tok); pos != std::string::npos; pos = text.find(tok, pos + tok.size())) ++n;
  return n;
}

std::vector<std::uint8_t> CategoryMap::binary(int category) const {
  std::vector<std::uint8_t> out(labels.size());
  for (std::size_t i = 0; i < labels.size(); ++i) out[i] = labels[i] == category ? 1 : 0;
  return out;
}

std::vector<int> CategoryMap::histogram() const {
  std::vector<int> h(static_cast<std::size_t>(num_categories) + 1, 0);
  for (auto v : labels) ++h[v];
  return h;
}

// ---------------------------------------------------------------------------
// Patch generation

namespace {

struct NucleusStyle {
  std::array<float, 3> color;
  double major_min, major_max;
  double aspect_min, aspect_max;  // minor / major
};

// Visually separable on purpose: hue, size and elongation all differ.
const std::array<NucleusStyle, kNumCategories> kStyles{{
    {{0.36f, 0.14f, 0.46f}, 4.5, 6.5, 0.70, 1.00},  // neoplastic: large, dark purple
    {{0.10f, 0.12f, 0.42f}, 2.0, 3.0, 0.85, 1.00},  // inflammatory: small, round, dark blue
    {{0.78f, 0.30f, 0.50f}, 5.0, 8.0, 0.25, 0.35},  // connective: spindle, magenta
    {{0.52f, 0.48f, 0.86f}, 3.5, 5.0, 0.60, 0.85},  // epithelial: medium, light violet
}};

constexpr std::array<float, 3> kBackgroundColor{0.94f, 0.82f, 0.87f};
constexpr int kMaxAttempts = 200;

float quantize(double v) {
  const double c = std::clamp(v, 0.0, 1.0);
  return static_cast<float>(std::lround(c * 255.0)) / 255.0f;
}

bool four_connected(const std::vector<std::pair<int, int>>& pixels) {
  if (pixels.empty()) return false;
  std::set<std::pair<int, int>> remaining(pixels.begin(), pixels.end());
  std::queue<std::pair<int, int>> q;
  q.push(*remaining.begin());
  remaining.erase(remaining.begin());
  while (!q.empty()) {
    auto [i, j] = q.front();
    q.pop();
    for (auto [di, dj] : {std::pair{1, 0}, {-1, 0}, {0, 1}, {0, -1}}) {
      auto it = remaining.find({i + di, j + dj});
      if (it != remaining.end()) {
        q.push(*it);
        remaining.erase(it);
      }
    }
  }
  return remaining.empty();
}

}  // namespace

PatchRecord generate_patch(const GenSpec& spec) {
  if (spec.height <= 0 || spec.width <= 0 || spec.height % 16 != 0 || spec.width % 16 != 0)
    throw InvalidInput("generate_patch: canvas must be positive and divisible by 16");
  for (const auto& r : spec.counts)
    if (r.min < 0 || r.max < r.min) throw InvalidInput("generate_patch: invalid count range");

  const int h = spec.height, w = spec.width;
  Rng rng(spec.seed);
  PatchRecord rec;
  rec.gt.height = rec.instances.height = h;
  rec.gt.width = rec.instances.width = w;
  rec.gt.labels.assign(static_cast<std::size_t>(h) * w, 0);
  rec.instances.ids.assign(static_cast<std::size_t>(h) * w, 0);

  std::vector<int> order;  // categories to place, largest styles first
  for (int c : {kConnective, kNeoplastic, kEpithelial, kInflammatory}) {
    const auto& r = spec.counts[static_cast<std::size_t>(c - 1)];
    const int n = rng.uniform_int(r.min, r.max);
    for (int k = 0; k < n; ++k) order.push_back(c);
  }

  std::vector<std::array<float, 3>> instance_color;
  auto occupied = [&](int i, int j) {
    return i >= 0 && i < h && j >= 0 && j < w && rec.instances.ids[static_cast<std::size_t>(i) * w + j] != 0;
  };
  int next_id = 1;
  for (int cat : order) {
    const NucleusStyle& st = kStyles[static_cast<std::size_t>(cat - 1)];
    bool placed = false;
    for (int attempt = 0; attempt < kMaxAttempts && !placed; ++attempt) {
      const double a = rng.uniform(st.major_min, st.major_max);
      const double b = std::max(1.2, a * rng.uniform(st.aspect_min, st.aspect_max));
      const double theta = rng.uniform(0.0, M_PI);
      const double cx = rng.uniform(a + 1.0, w - a - 1.0);
      const double cy = rng.uniform(a + 1.0, h - a - 1.0);
      const double ct = std::cos(theta), sn = std::sin(theta);
      std::vector<std::pair<int, int>> pixels;
      bool clash = false;
      const int i0 = std::max(0, static_cast<int>(cy - a - 1)), i1 = std::min(h - 1, static_cast<int>(cy + a + 1));
      const int j0 = std::max(0, static_cast<int>(cx - a - 1)), j1 = std::min(w - 1, static_cast<int>(cx + a + 1));
      for (int i = i0; i <= i1 && !clash; ++i)
        for (int j = j0; j <= j1; ++j) {
          const double dx = j + 0.5 - cx, dy = i + 0.5 - cy;
          const double u = (dx * ct + dy * sn) / a, v = (-dx * sn + dy * ct) / b;
          if (u * u + v * v > 1.0) continue;
          // Keep a one-pixel gap so instances never touch.
          if (occupied(i, j) || occupied(i + 1, j) || occupied(i - 1, j) || occupied(i, j + 1) || occupied(i, j - 1)) {
            clash = true;
            break;
          }
          pixels.emplace_back(i, j);
        }
      if (clash || !four_connected(pixels)) continue;
      for (auto [i, j] : pixels) {
        rec.instances.ids[static_cast<std::size_t>(i) * w + j] = next_id;
        rec.gt.labels[static_cast<std::size_t>(i) * w + j] = static_cast<std::uint8_t>(cat);
      }
      std::array<float, 3> col = st.color;
      for (auto& ch : col) ch += static_cast<float>(rng.uniform(-0.03, 0.03));
      instance_color.push_back(col);
      rec.instances.instance_category[next_id] = cat;
      ++next_id;
      placed = true;
    }
    if (!placed) ++rec.dropped_instances;
  }

  rec.image.pixels = Tensor<float>({h, w, 3});
  for (int i = 0; i < h; ++i)
    for (int j = 0; j < w; ++j) {
      const int id = rec.instances.ids[static_cast<std::size_t>(i) * w + j];
      const auto& base = id == 0 ? kBackgroundColor : instance_color[static_cast<std::size_t>(id - 1)];
      const double noise = id == 0 ? 0.05 : 0.04;
      for (int ch = 0; ch < 3; ++ch)
        rec.image.pixels[(static_cast<std::size_t>(i) * w + j) * 3 + ch] =
            quantize(base[static_cast<std::size_t>(ch)] + rng.uniform(-noise, noise));
    }
  return rec;
}

// ---------------------------------------------------------------------------
// Question/answer templates

TemplateBank TemplateBank::defaults() {
  TemplateBank b;
  b.referring = {
      {"segment the {cat} nuclei in this image .", "the {cat} nuclei are <seg> ."},
      {"where are the {cat} nuclei ?", "here are the {cat} nuclei <seg> ."},
      {"please highlight all {cat} nuclei .", "sure , {cat} nuclei <seg> ."},
  };
  b.referring_absent = {
      {"segment the {cat} nuclei in this image .", "there are no {cat} nuclei in this image ."},
      {"where are the {cat} nuclei ?", "no {cat} nuclei can be found ."},
      {"please highlight all {cat} nuclei .", "sorry , there are no {cat} nuclei ."},
  };
  b.reasoning = {
      {"what cell types can you find in this patch ?", "this patch contains {list} ."},
      {"which nuclei should a pathologist look at here and why ?", "the key findings are {list} ."},
      {"describe the cellular composition of this tissue .", "the tissue shows {list} ."},
  };
  b.reasoning_absent = {
      {"what cell types can you find in this patch ?", "no nuclei are visible in this patch ."},
      {"which nuclei should a pathologist look at here and why ?", "there are no nuclei to review ."},
      {"describe the cellular composition of this tissue .", "the tissue shows no nuclei ."},
  };
  // Two general questions and two subtype-specific ones.
  b.conversation = {
      {"how many nuclei types are present ?", "there are {n} nuclei types in this patch ."},
      {"is this tissue crowded with cells ?", "the patch contains {n} kinds of nuclei ."},
      {"which nuclei type is most abundant ?", "{top} nuclei are the most abundant ."},
      {"what is the dominant cell population ?", "the dominant population is {top} nuclei ."},
  };
  b.conversation_absent = {
      {"how many nuclei types are present ?", "no nuclei are present ."},
      {"is this tissue crowded with cells ?", "no , the patch is empty ."},
      {"which nuclei type is most abundant ?", "no nuclei are present ."},
      {"what is the dominant cell population ?", "the patch has no cells ."},
  };
  return b;
}

namespace {

const std::array<std::string, 5> kNumberWords{"zero", "one", "two", "three", "four"};

void collect_words(const std::string& s, std::set<std::string>& out) {
  std::istringstream in(s);
  std::string w;
  while (in >> w) {
    if (w.front() == '{') continue;
    out.insert(w);
  }
}

std::string replace_all(std::string s, const std::string& from, const std::string& to) {
  for (std::size_t pos = s.find(from); pos != std::string::npos; pos = s.find(from, pos + to.size()))
    s.replace(pos, from.size(), to);
  return s;
}

const QATemplate& pick(const std::vector<QATemplate>& bank, Rng& rng, const char* what) {
  if (bank.empty()) throw InvalidInput(std::string("build_qa: empty template bank for ") + what);
  return bank[static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(bank.size()) - 1))];
}

}  // namespace

std::vector<std::string> TemplateBank::corpus() const {
  std::set<std::string> words;
  for (const auto* bank : {&referring, &referring_absent, &reasoning, &reasoning_absent, &conversation,
                           &conversation_absent})
    for (const auto& t : *bank) {
      collect_words(t.question, words);
      collect_words(t.answer, words);
    }
  for (int c = 1; c <= kNumCategories; ++c) words.insert(category_name(c));
  for (const auto& n : kNumberWords) words.insert(n);
  for (const char* w : {"nuclei", ",", "and"}) words.insert(w);
  words.erase(kSegToken);
  return {words.begin(), words.end()};
}

std::vector<QARecord> build_qa(const CategoryMap& gt, const InstanceMap& instances, const TemplateBank& templates,
                               std::uint64_t seed) {
  if (gt.height != instances.height || gt.width != instances.width)
    throw InvalidInput("build_qa: category and instance maps differ in shape");
  Rng rng(seed);
  const auto hist = gt.histogram();
  std::vector<int> present;
  for (int c = 1; c <= gt.num_categories; ++c)
    if (hist[static_cast<std::size_t>(c)] > 0) present.push_back(c);
  // Descending pixel count, ties by ascending id.
  std::stable_sort(present.begin(), present.end(), [&](int a, int b) {
    return hist[static_cast<std::size_t>(a)] > hist[static_cast<std::size_t>(b)];
  });
  const bool empty = present.empty();

  std::vector<QARecord> out;
  {
    QARecord r;
    r.task = TaskType::reasoning;
    const auto& t = pick(empty ? templates.reasoning_absent : templates.reasoning, rng, "reasoning");
    std::string list;
    for (std::size_t k = 0; k < present.size(); ++k) {
      if (k > 0) list += k + 1 == present.size() ? " and " : " , ";
      list += category_name(present[k]) + " nuclei " + kSegToken;
    }
    r.question = t.question;
    r.answer_template = replace_all(t.answer, "{list}", list);
    r.slot_categories = present;
    out.push_back(std::move(r));
  }
  {
    QARecord r;
    r.task = TaskType::referring;
    const auto& t = pick(empty ? templates.referring_absent : templates.referring, rng, "referring");
    const int cat = empty ? rng.uniform_int(1, gt.num_categories)
                          : present[static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(present.size()) - 1))];
    r.question = replace_all(t.question, "{cat}", category_name(cat));
    r.answer_template = replace_all(t.answer, "{cat}", category_name(cat));
    if (!empty) r.slot_categories = {cat};
    out.push_back(std::move(r));
  }
  {
    QARecord r;
    r.task = TaskType::conversation;
    const auto& t = pick(empty ? templates.conversation_absent : templates.conversation, rng, "conversation");
    r.question = t.question;
    std::string a = t.answer;
    if (!empty) {
      a = replace_all(a, "{top}", category_name(present.front()));
      a = replace_all(a, "{n}", kNumberWords[present.size()]);
    }
    r.answer_template = a;
    out.push_back(std::move(r));
  }
  for (const auto& r : out)
    if (count_seg_slots(r.answer_template) != static_cast<int>(r.slot_categories.size()))
      throw InvalidInput("build_qa: template produced inconsistent seg slots");
  return out;
}

std::vector<PatchRecord> generate_dataset(int slides, int patches_per_slide, std::uint64_t seed,
                                          const TemplateBank& templates) {
  if (slides <= 0 || patches_per_slide <= 0) throw InvalidInput("generate_dataset: counts must be positive");
  std::vector<PatchRecord> out;
  const int total = slides * patches_per_slide;
  out.reserve(static_cast<std::size_t>(total));
  for (int i = 0; i < total; ++i) {
    GenSpec spec;
    spec.seed = mix_seed(seed, static_cast<std::uint64_t>(i));
    PatchRecord rec = generate_patch(spec);
    char buf[32];
    std::snprintf(buf, sizeof(buf), "p%05d", i);
    rec.patch_id = buf;
    std::snprintf(buf, sizeof(buf), "s%04d", i / patches_per_slide);
    rec.slide_id = buf;
    rec.qa = build_qa(rec.gt, rec.instances, templates, mix_seed(spec.seed, 0x51a));
    out.push_back(std::move(rec));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Filtering and splitting

std::vector<std::size_t> filter_patches(const std::vector<std::vector<double>>& embeddings,
                                        const std::vector<double>& reference, double threshold) {
  auto check_unit = [](const std::vector<double>& v, const char* what) {
    double n = 0;
    for (double x : v) n += x * x;
    if (std::abs(std::sqrt(n) - 1.0) > 1e-6) throw InvalidInput(std::string("filter_patches: ") + what + " is not unit norm");
  };
  check_unit(reference, "reference");
  std::vector<std::size_t> kept;
  for (std::size_t i = 0; i < embeddings.size(); ++i) {
    if (embeddings[i].size() != reference.size())
      throw InvalidInput("filter_patches: embedding " + std::to_string(i) + " has dimension " +
                         std::to_string(embeddings[i].size()) + ", expected " + std::to_string(reference.size()));
    check_unit(embeddings[i], "embedding");
    double dot = 0;
    for (std::size_t k = 0; k < reference.size(); ++k) dot += embeddings[i][k] * reference[k];
    if (dot >= threshold) kept.push_back(i);
  }
  return kept;
}

DatasetSplits split_dataset(const std::vector<PatchRecord>& records, std::array<int, 3> ratios, std::uint64_t seed) {
  for (int r : ratios)
    if (r <= 0) throw InvalidInput("split_dataset: ratios must be positive");
  std::set<std::string> slide_set;
  for (const auto& r : records) {
    if (r.slide_id.empty()) throw InvalidInput("split_dataset: record " + r.patch_id + " has no slide_id");
    slide_set.insert(r.slide_id);
  }
  const int n = static_cast<int>(slide_set.size());
  if (n < 3) throw InvalidInput("split_dataset: need at least 3 slides, got " + std::to_string(n));

  std::vector<std::string> slides(slide_set.begin(), slide_set.end());
  Rng rng(seed);
  rng.shuffle(slides);

  const double total = ratios[0] + ratios[1] + ratios[2];
  const int n_val = std::max(1, static_cast<int>(std::lround(n * ratios[1] / total)));
  const int n_test = std::max(1, static_cast<int>(std::lround(n * ratios[2] / total)));
  const int n_train = n - n_val - n_test;
  if (n_train < 1) throw InvalidInput("split_dataset: too few slides for the requested ratios");

  std::map<std::string, int> assignment;
  for (int i = 0; i < n; ++i) assignment[slides[static_cast<std::size_t>(i)]] = i < n_train ? 0 : (i < n_train + n_val ? 1 : 2);
  DatasetSplits out;
  for (const auto& r : records) {
    switch (assignment[r.slide_id]) {
      case 0: out.train.push_back(r); break;
      case 1: out.val.push_back(r); break;
      default: out.test.push_back(r); break;
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Persistence

namespace {

json qa_to_json(const QARecord& q) {
  return {{"task", task_name(q.task)},
          {"question", q.question},
          {"answer_template", q.answer_template},
          {"slot_categories", q.slot_categories}};
}

QARecord qa_from_json(const json& j) {
  QARecord q;
  q.task = parse_task(j.at("task").get<std::string>());
  q.question = j.at("question").get<std::string>();
  q.answer_template = j.at("answer_template").get<std::string>();
  q.slot_categories = j.at("slot_categories").get<std::vector<int>>();
  if (count_seg_slots(q.answer_template) != static_cast<int>(q.slot_categories.size()))
    throw InvalidInput("seg slot count does not match slot_categories");
  return q;
}

void write_record_files(const PatchRecord& r, const fs::path& dir) {
  const int h = r.image.height(), w = r.image.width();
  png::Image8 img{w, h, 3, {}};
  img.data.resize(r.image.pixels.size());
  for (std::size_t i = 0; i < img.data.size(); ++i)
    img.data[i] = static_cast<std::uint8_t>(std::lround(r.image.pixels[i] * 255.0f));
  png::write(dir / "images" / (r.patch_id + ".png"), img);
  png::write(dir / "masks" / (r.patch_id + ".png"), png::Image8{w, h, 1, r.gt.labels});
  png::Image8 inst{w, h, 1, {}};
  inst.data.resize(r.instances.ids.size());
  for (std::size_t i = 0; i < inst.data.size(); ++i) {
    if (r.instances.ids[i] > 255) throw DataError("patch " + r.patch_id + " has more than 255 instances");
    inst.data[i] = static_cast<std::uint8_t>(r.instances.ids[i]);
  }
  png::write(dir / "instances" / (r.patch_id + ".png"), inst);
}

}  // namespace

fs::path persist_dataset(const DatasetSplits& splits, const fs::path& dir) {
  for (const char* sub : {"images", "masks", "instances"}) fs::create_directories(dir / sub);
  const fs::path manifest = dir / "manifest.jsonl";
  std::ofstream out(manifest);
  if (!out) throw DataError("cannot open " + manifest.string() + " for writing");
  auto emit = [&](const std::vector<PatchRecord>& recs, const char* split) {
    for (const auto& r : recs) {
      write_record_files(r, dir);
      json inst = json::object();
      for (auto [id, cat] : r.instances.instance_category) inst[std::to_string(id)] = cat;
      json qa = json::array();
      for (const auto& q : r.qa) qa.push_back(qa_to_json(q));
      json line = {{"patch_id", r.patch_id},
                   {"slide_id", r.slide_id},
                   {"split", split},
                   {"image", "images/" + r.patch_id + ".png"},
                   {"mask", "masks/" + r.patch_id + ".png"},
                   {"instances", "instances/" + r.patch_id + ".png"},
                   {"instance_category", inst},
                   {"dropped_instances", r.dropped_instances},
                   {"num_categories", r.gt.num_categories},
                   {"qa", qa}};
      out << line.dump() << '\n';
    }
  };
  emit(splits.train, "train");
  emit(splits.val, "val");
  emit(splits.test, "test");
  if (!out) throw DataError("failed writing " + manifest.string());
  return manifest;
}

DatasetSplits load_dataset(const fs::path& dir) {
  const fs::path manifest = dir / "manifest.jsonl";
  std::ifstream in(manifest);
  if (!in) throw DataError("cannot open " + manifest.string());
  DatasetSplits out;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    PatchRecord r;
    std::string split;
    try {
      const json j = json::parse(line);
      r.patch_id = j.at("patch_id").get<std::string>();
      r.slide_id = j.at("slide_id").get<std::string>();
      split = j.at("split").get<std::string>();
      for (const auto& [k, v] : j.at("instance_category").items()) r.instances.instance_category[std::stoi(k)] = v.get<int>();
      r.dropped_instances = j.value("dropped_instances", 0);
      r.gt.num_categories = j.value("num_categories", kNumCategories);
      for (const auto& q : j.at("qa")) r.qa.push_back(qa_from_json(q));
      if (split != "train" && split != "val" && split != "test") throw InvalidInput("unknown split '" + split + "'");

      auto load = [&](const char* key, int channels, const char* what) {
        const fs::path p = dir / j.at(key).get<std::string>();
        if (!fs::exists(p)) throw DataError("missing " + std::string(what) + " file for patch " + r.patch_id + ": " + p.string());
        return png::read(p, channels);
      };
      const auto img = load("image", 3, "image");
      const auto mask = load("mask", 1, "mask");
      const auto inst = load("instances", 1, "instance");
      if (mask.width != img.width || mask.height != img.height || inst.width != img.width || inst.height != img.height)
        throw DataError("patch " + r.patch_id + ": image, mask and instance sizes differ");
      r.image.pixels = Tensor<float>({img.height, img.width, 3});
      for (std::size_t i = 0; i < img.data.size(); ++i) r.image.pixels[i] = static_cast<float>(img.data[i]) / 255.0f;
      r.gt.height = r.instances.height = img.height;
      r.gt.width = r.instances.width = img.width;
      r.gt.labels = mask.data;
      r.instances.ids.assign(inst.data.begin(), inst.data.end());
    } catch (const DataError&) {
      throw;
    } catch (const std::exception& e) {
      throw DataError(manifest.string() + ":" + std::to_string(line_no) + ": " + e.what());
    }
    (split == "train" ? out.train : split == "val" ? out.val : out.test).push_back(std::move(r));
  }
  return out;
}

}  // namespace groundseg
