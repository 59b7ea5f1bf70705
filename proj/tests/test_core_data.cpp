#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <fstream>
#include <set>

#include "groundseg/core_data.hpp"
#include "groundseg/rng.hpp"
#include "test_util.hpp"

using namespace groundseg;

namespace {

GenSpec empty_spec(std::uint64_t seed) {
  GenSpec s;
  s.seed = seed;
  for (auto& r : s.counts) r = {0, 0};
  return s;
}

CategoryMap map_from(int h, int w, std::vector<std::uint8_t> labels) { return {h, w, kNumCategories, std::move(labels)}; }

std::set<std::string> slides_of(const std::vector<PatchRecord>& rs) {
  std::set<std::string> s;
  for (const auto& r : rs) s.insert(r.slide_id);
  return s;
}

}  // namespace

TEST_CASE("empty count ranges give an empty patch") {
  const auto p = generate_patch(empty_spec(7));
  CHECK(p.image.height() == 64);
  CHECK(p.image.width() == 64);
  for (auto v : p.gt.labels) CHECK(v == 0);
  CHECK(p.instances.instance_category.empty());
  for (int v : p.instances.ids) CHECK(v == 0);
}

TEST_CASE("generation is deterministic") {
  GenSpec s;
  s.seed = 123;
  CHECK(generate_patch(s) == generate_patch(s));
  GenSpec t = s;
  t.seed = 124;
  CHECK_FALSE(generate_patch(s) == generate_patch(t));
}

TEST_CASE("fixed neoplastic count is honoured") {
  auto s = empty_spec(7);
  s.counts[kNeoplastic - 1] = {3, 3};
  const auto p = generate_patch(s);
  int neo = 0;
  for (const auto& [id, cat] : p.instances.instance_category) neo += cat == kNeoplastic;
  CHECK(neo + p.dropped_instances == 3);
  CHECK(neo == 3);
}

TEST_CASE("instances are consistent with the category map") {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    GenSpec s;
    s.seed = seed;
    const auto p = generate_patch(s);
    std::map<int, int> pixels;
    for (std::size_t i = 0; i < p.gt.labels.size(); ++i) {
      const int id = p.instances.ids[i];
      if (id == 0) {
        CHECK(p.gt.labels[i] == 0);
        continue;
      }
      REQUIRE(p.instances.instance_category.count(id) == 1);
      CHECK(p.gt.labels[i] == p.instances.instance_category.at(id));
      ++pixels[id];
    }
    for (const auto& [id, cat] : p.instances.instance_category) {
      CHECK(pixels[id] > 0);
      CHECK(test::components_of(p.instances.ids, 64, 64, id) == 1);
    }
    for (float v : p.image.pixels.data) {
      CHECK(v >= 0.0f);
      CHECK(v <= 1.0f);
      CHECK(std::round(v * 255.0f) / 255.0f == v);
    }
  }
}

TEST_CASE("canvas must be divisible by 16") {
  GenSpec s;
  s.height = 40;
  CHECK_THROWS_AS(generate_patch(s), InvalidInput);
}

TEST_CASE("build_qa slot rules") {
  const auto bank = TemplateBank::defaults();
  InstanceMap inst{4, 4, std::vector<int>(16, 0), {}};

  SUBCASE("only inflammatory") {
    std::vector<std::uint8_t> l(16, 0);
    l[5] = l[6] = kInflammatory;
    const auto qa = build_qa(map_from(4, 4, l), inst, bank, 1);
    REQUIRE(qa.size() == 3);
    CHECK(qa[1].task == TaskType::referring);
    CHECK(qa[1].slot_categories == std::vector<int>{kInflammatory});
    CHECK(qa[0].slot_categories == std::vector<int>{kInflammatory});
  }
  SUBCASE("empty gt has no slots") {
    const auto qa = build_qa(map_from(4, 4, std::vector<std::uint8_t>(16, 0)), inst, bank, 2);
    for (const auto& q : qa) {
      CHECK(q.slot_categories.empty());
      CHECK(count_seg_slots(q.answer_template) == 0);
    }
  }
  SUBCASE("reasoning order follows pixel counts") {
    // Neoplastic 120 px, connective 40 px on a 16x16 map.
    std::vector<std::uint8_t> l(256, 0);
    for (int i = 0; i < 40; ++i) l[static_cast<std::size_t>(i)] = kConnective;
    for (int i = 100; i < 220; ++i) l[static_cast<std::size_t>(i)] = kNeoplastic;
    InstanceMap big{16, 16, std::vector<int>(256, 0), {}};
    const auto qa = build_qa(map_from(16, 16, l), big, bank, 3);
    CHECK(qa[0].slot_categories == std::vector<int>{kNeoplastic, kConnective});
  }
  SUBCASE("ties go to the lower id") {
    std::vector<std::uint8_t> l(16, 0);
    l[0] = l[1] = kEpithelial;
    l[8] = l[9] = kInflammatory;
    const auto qa = build_qa(map_from(4, 4, l), inst, bank, 4);
    CHECK(qa[0].slot_categories == std::vector<int>{kInflammatory, kEpithelial});
  }
}

TEST_CASE("every generated record keeps seg slots consistent") {
  for (const auto& r : generate_dataset(3, 5, 9)) {
    REQUIRE(r.qa.size() == 3);
    for (const auto& q : r.qa) CHECK(count_seg_slots(q.answer_template) == static_cast<int>(q.slot_categories.size()));
    CHECK(r.qa[2].slot_categories.empty());
  }
}

TEST_CASE("filter_patches") {
  const std::vector<double> ref{1, 0, 0};
  CHECK(filter_patches({ref}, ref, 0.5) == std::vector<std::size_t>{0});
  CHECK(filter_patches({{-1, 0, 0}}, ref, 0.0).empty());

  // Unit vectors with cosines 0.9, 0.3 and 0.6 against ref.
  auto unit = [](double c) { return std::vector<double>{c, std::sqrt(1 - c * c), 0}; };
  CHECK(filter_patches({unit(0.9), unit(0.3), unit(0.6)}, ref, 0.5) == std::vector<std::size_t>{0, 2});

  CHECK_THROWS_AS(filter_patches({{1, 0}}, ref, 0.5), InvalidInput);
  CHECK_THROWS_AS(filter_patches({{2, 0, 0}}, ref, 0.5), InvalidInput);
}

TEST_CASE("split_dataset partitions slides") {
  auto make = [](int slides, int per) {
    std::vector<PatchRecord> rs;
    for (int s = 0; s < slides; ++s)
      for (int k = 0; k < per; ++k) {
        PatchRecord r;
        r.patch_id = "p" + std::to_string(s * per + k);
        r.slide_id = "s" + std::to_string(s);
        rs.push_back(r);
      }
    return rs;
  };

  SUBCASE("ten slides give 8/1/1") {
    const auto sp = split_dataset(make(10, 1), {8, 1, 1}, 3);
    CHECK(sp.train.size() == 8);
    CHECK(sp.val.size() == 1);
    CHECK(sp.test.size() == 1);
  }
  SUBCASE("repeatable for a fixed seed") {
    const auto rs = make(100, 2);
    CHECK(split_dataset(rs, {8, 1, 1}, 42) == split_dataset(rs, {8, 1, 1}, 42));
    CHECK_FALSE(split_dataset(rs, {8, 1, 1}, 42) == split_dataset(rs, {8, 1, 1}, 43));
  }
  SUBCASE("too few slides") { CHECK_THROWS_AS(split_dataset(make(2, 5)), InvalidInput); }
  SUBCASE("disjoint for random seeds and sizes") {
    Rng rng(5);
    for (int trial = 0; trial < 50; ++trial) {
      const int n = rng.uniform_int(3, 40);
      const auto rs = make(n, rng.uniform_int(1, 3));
      const auto sp = split_dataset(rs, {8, 1, 1}, rng.next());
      const auto a = slides_of(sp.train), b = slides_of(sp.val), c = slides_of(sp.test);
      CHECK(a.size() + b.size() + c.size() == static_cast<std::size_t>(n));
      std::set<std::string> all = a;
      all.insert(b.begin(), b.end());
      all.insert(c.begin(), c.end());
      CHECK(all.size() == static_cast<std::size_t>(n));
      CHECK(sp.train.size() + sp.val.size() + sp.test.size() == rs.size());
    }
  }
}

TEST_CASE("persist and load round trip") {
  test::TempDir dir;
  const auto sp = split_dataset(generate_dataset(3, 2, 11), {8, 1, 1}, 1);
  const auto manifest = persist_dataset(sp, dir.path);
  CHECK(load_dataset(dir.path) == sp);

  std::ifstream in(manifest);
  std::size_t lines = 0;
  for (std::string l; std::getline(in, l);) lines += !l.empty();
  CHECK(lines == 6);
}

TEST_CASE("manifest line count matches record count at scale") {
  test::TempDir dir;
  std::vector<PatchRecord> rs;
  PatchRecord proto = generate_patch(empty_spec(1));
  proto.qa = build_qa(proto.gt, proto.instances, TemplateBank::defaults(), 1);
  for (int i = 0; i < 1000; ++i) {
    proto.patch_id = "p" + std::to_string(i);
    proto.slide_id = "s" + std::to_string(i / 10);
    rs.push_back(proto);
  }
  const auto manifest = persist_dataset(split_dataset(rs), dir.path);
  std::ifstream in(manifest);
  std::size_t lines = 0;
  for (std::string l; std::getline(in, l);) lines += !l.empty();
  CHECK(lines == 1000);
}

TEST_CASE("load errors name the line or patch") {
  test::TempDir dir;
  const auto sp = split_dataset(generate_dataset(3, 1, 2), {8, 1, 1}, 1);
  const auto manifest = persist_dataset(sp, dir.path);

  SUBCASE("truncated line") {
    std::ifstream in(manifest);
    std::string l1, l2;
    std::getline(in, l1);
    std::getline(in, l2);
    in.close();
    std::ofstream(manifest) << l1 << "\n" << l2.substr(0, l2.size() / 2) << "\n";
    try {
      load_dataset(dir.path);
      FAIL("expected a load error");
    } catch (const DataError& e) {
      CHECK(std::string(e.what()).find("manifest.jsonl:2:") != std::string::npos);
    }
  }
  SUBCASE("missing image") {
    const auto& victim = sp.train.front();
    std::filesystem::remove(dir.path / "images" / (victim.patch_id + ".png"));
    try {
      load_dataset(dir.path);
      FAIL("expected a load error");
    } catch (const DataError& e) {
      CHECK(std::string(e.what()).find(victim.patch_id) != std::string::npos);
    }
  }
}
