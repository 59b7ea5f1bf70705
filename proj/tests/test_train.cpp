#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <fstream>
#include <limits>

#include "groundseg/train.hpp"
#include "test_util.hpp"

using namespace groundseg;
namespace fs = std::filesystem;

namespace {

ModelDims small_dims() {
  ModelDims d;
  d.enc1 = 4;
  d.enc2 = 8;
  d.c_local = 8;
  d.c_global = 16;
  d.decoder_widths = {8, 8, 4, 4};
  d.d_proj = 8;
  d.d_model = 32;
  d.n_heads = 2;
  d.n_layers = 1;
  d.d_ff = 64;
  return d;
}

RunConfig small_config(int steps) {
  RunConfig c;
  c.model = small_dims();
  c.steps = steps;
  c.batch_size = 4;
  c.seed = 3;
  c.max_answer_tokens = 24;
  return c;
}

const DatasetSplits& small_data() {
  static const DatasetSplits d = split_dataset(generate_dataset(4, 2, 21), {8, 1, 1}, 5);
  return d;
}

std::string read_bytes(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

bool same_parameters(const Model<float>& a, const Model<float>& b) {
  const auto pa = a.parameters(), pb = b.parameters();
  if (pa.size() != pb.size()) return false;
  for (std::size_t i = 0; i < pa.size(); ++i)
    if (pa[i]->name != pb[i]->name || !(pa[i]->value == pb[i]->value)) return false;
  return true;
}

}  // namespace

TEST_CASE("run config json round trip and validation") {
  RunConfig c = small_config(7);
  c.data_dir = "somewhere";
  c.loss.penalty = 1.0;
  c.optimizer.lr = 1e-3;
  CHECK(RunConfig::from_json(c.to_json()) == c);
  CHECK(RunConfig::from_json(nlohmann::json::object()) == RunConfig{});

  auto bad = c.to_json();
  bad["optimizer"]["lr"] = 0.0;
  CHECK_THROWS_AS(RunConfig::from_json(bad), InvalidInput);
  bad = c.to_json();
  bad["batch_size"] = 0;
  CHECK_THROWS_AS(RunConfig::from_json(bad), InvalidInput);
  bad = c.to_json();
  bad["optimizer"]["name"] = "sgd";
  CHECK_THROWS_AS(RunConfig::from_json(bad), InvalidInput);
}

TEST_CASE("examples follow the sequence layout") {
  const auto vocab = default_vocabulary();
  const auto& p = small_data().train.front();
  for (const auto& qa : p.qa) {
    const auto ex = make_example(p, qa, vocab);
    CHECK(ex.text_ids.front() == Vocabulary::kBos);
    CHECK(ex.text_ids.back() == Vocabulary::kEos);
    CHECK(ex.answer_begin == 1 + static_cast<int>(tokenize(vocab, qa.question).size()));
    int segs = 0;
    for (int id : ex.text_ids) segs += id == Vocabulary::kSeg;
    CHECK(segs == static_cast<int>(qa.slot_categories.size()));
    for (int id : ex.text_ids) CHECK(id != Vocabulary::kUnk);
  }
}

TEST_CASE("zero steps returns the initialization") {
  const auto r = train(small_config(0), small_data());
  Model<float> fresh(small_dims());
  fresh.init(3);
  CHECK(same_parameters(r.checkpoint.model, fresh));
  CHECK(r.log.steps.empty());
  CHECK(r.checkpoint.step == 0);
}

TEST_CASE("training is deterministic and checkpoints round trip") {
  const auto a = train(small_config(6), small_data());
  const auto b = train(small_config(6), small_data());
  REQUIRE(a.log.steps.size() == 6);
  CHECK(a.log == b.log);
  CHECK(same_parameters(a.checkpoint.model, b.checkpoint.model));

  test::TempDir d1, d2;
  save_checkpoint(a.checkpoint, d1.path);
  save_checkpoint(b.checkpoint, d2.path);
  CHECK(read_bytes(d1.path / "arrays.bin") == read_bytes(d2.path / "arrays.bin"));
  CHECK(read_bytes(d1.path / "manifest.json") == read_bytes(d2.path / "manifest.json"));

  const auto loaded = load_checkpoint(d1.path);
  CHECK(same_parameters(loaded.model, a.checkpoint.model));
  CHECK(loaded.config == a.checkpoint.config);
  CHECK(loaded.step == 6);
  CHECK(loaded.vocab == a.checkpoint.vocab);

  const auto r1 = evaluate(a.checkpoint, small_data(), "val", TaskType::referring);
  const auto r2 = evaluate(loaded, small_data(), "val", TaskType::referring);
  CHECK(r1 == r2);
}

TEST_CASE("checkpoint errors name the array") {
  const auto r = train(small_config(0), small_data());
  test::TempDir dir;
  save_checkpoint(r.checkpoint, dir.path);

  SUBCASE("truncated arrays") {
    const auto bytes = read_bytes(dir.path / "arrays.bin");
    std::ofstream(dir.path / "arrays.bin", std::ios::binary).write(bytes.data(), static_cast<std::streamsize>(bytes.size() - 10));
    const auto last = r.checkpoint.model.parameters().back();
    try {
      load_checkpoint(dir.path);
      FAIL("expected a load error");
    } catch (const DataError& e) {
      const std::string msg = e.what();
      CHECK(msg.find(last->name) != std::string::npos);
      CHECK(msg.find(std::to_string(last->value.size() * 4) + " bytes") != std::string::npos);
    }
  }
  SUBCASE("shape mismatch") {
    auto m = nlohmann::json::parse(read_bytes(dir.path / "manifest.json"));
    m["arrays"][0]["shape"] = {1, 2, 3};
    std::ofstream(dir.path / "manifest.json") << m.dump();
    try {
      load_checkpoint(dir.path);
      FAIL("expected a load error");
    } catch (const DataError& e) {
      CHECK(std::string(e.what()).find(m["arrays"][0]["name"].get<std::string>()) != std::string::npos);
    }
  }
}

TEST_CASE("mask loss reaches the language model") {
  Model<double> model(small_dims());
  model.init(4);
  const auto vocab = default_vocabulary();
  const auto& p = small_data().train.front();
  const QARecord* grounded = nullptr;
  for (const auto& qa : p.qa)
    if (!qa.slot_categories.empty()) grounded = &qa;
  REQUIRE(grounded != nullptr);
  LossConfig cfg;
  cfg.lambda_txt = 0;
  cfg.lambda_con = 0;
  ag::Graph<double> g;
  auto [root, losses] = batch_objective(g, model, {make_example(p, *grounded, vocab)}, cfg);
  CHECK(losses.mask > 0);
  for (auto* q : model.parameters()) q->zero_grad();
  g.backward(root);
  double norm = 0;
  for (double v : model.lm.blocks[0].qkv_w.grad.data) norm += v * v;
  CHECK(norm > 0);
  // The token head only sees text loss.
  double head = 0;
  for (double v : model.lm.head_w.grad.data) head += v * v;
  CHECK(head == 0);
}

TEST_CASE("scoring conventions") {
  const auto& p = small_data().train.front();
  const QARecord* ref = nullptr;
  for (const auto& qa : p.qa)
    if (qa.task == TaskType::reasoning) ref = &qa;
  REQUIRE(ref != nullptr);

  SUBCASE("ground-truth masks score 1") {
    Prediction oracle;
    for (int c : ref->slot_categories) oracle.masks.emplace_back(p.gt.height, p.gt.width, p.gt.binary(c));
    const auto r = score_predictions({{&p, ref, oracle}}, TaskType::reasoning, "train");
    CHECK(r.giou == 1.0);
    CHECK(r.ciou == 1.0);
    CHECK(r.seg_count_accuracy == 1.0);
  }
  SUBCASE("no seg tokens scores 0 on a grounded answer") {
    if (ref->slot_categories.empty()) return;
    const auto r = score_predictions({{&p, ref, Prediction{}}}, TaskType::reasoning, "train");
    CHECK(r.giou == 0.0);
    CHECK(r.pairs == static_cast<int>(ref->slot_categories.size()));
    CHECK(r.seg_count_accuracy == 0.0);
  }
  SUBCASE("absent category answered with no mask scores 1") {
    QARecord absent{TaskType::referring, "q", "none", {}};
    const auto r = score_predictions({{&p, &absent, Prediction{}}}, TaskType::referring, "train");
    CHECK(r.giou == 1.0);
    CHECK(r.pairs == 1);
  }
  SUBCASE("conversation uses text metrics") {
    const QARecord* conv = &p.qa[2];
    Prediction exact;
    exact.answer_text = conv->answer_template;
    const auto r = score_predictions({{&p, conv, exact}}, TaskType::conversation, "train");
    CHECK(r.bleu4 == doctest::Approx(1.0));
    CHECK(r.token_f1 == doctest::Approx(1.0));
  }
}

TEST_CASE("evaluation rejects empty splits") {
  const auto r = train(small_config(0), small_data());
  DatasetSplits empty;
  CHECK_THROWS_AS(evaluate(r.checkpoint, empty, "val", TaskType::referring), InvalidInput);
  CHECK_THROWS_AS(evaluate(r.checkpoint, small_data(), "dev", TaskType::referring), InvalidInput);
}

TEST_CASE("untrained model scores near zero on conversation") {
  RunConfig c;
  c.steps = 0;
  const auto r = train(c, small_data());
  const auto rep = evaluate(r.checkpoint, small_data(), "train", TaskType::conversation);
  CHECK(rep.bleu4 < 0.05);
}

TEST_CASE("non-finite loss aborts with the last good checkpoint") {
  DatasetSplits data = small_data();
  data.train.front().image.pixels[0] = std::numeric_limits<float>::quiet_NaN();
  auto cfg = small_config(3);
  cfg.max_train_patches = 1;
  cfg.batch_size = 1;
  test::TempDir dir;
  TrainOptions opts;
  opts.abort_dir = dir.path;
  try {
    train(cfg, data, opts);
    FAIL("expected training to abort");
  } catch (const TrainingAborted& e) {
    REQUIRE_FALSE(e.batch_ids.empty());
    CHECK(e.batch_ids[0].find(data.train.front().patch_id) == 0);
  }
  const auto saved = load_checkpoint(dir.path);
  CHECK(saved.step == 0);
}

TEST_CASE("overfitting one referring sample reproduces its answer") {
  DatasetSplits data = small_data();
  PatchRecord& p = data.train.front();
  std::erase_if(p.qa, [](const QARecord& q) { return q.task != TaskType::referring; });
  REQUIRE(p.qa.size() == 1);
  auto cfg = small_config(150);
  cfg.max_train_patches = 1;
  cfg.batch_size = 1;
  cfg.optimizer.lr = 2e-3;
  const auto r = train(cfg, data);
  const auto pred = predict(r.checkpoint, p, p.qa[0]);
  std::vector<int> want = tokenize(r.checkpoint.vocab, p.qa[0].answer_template);
  CHECK(pred.answer_ids == want);
  CHECK(r.log.steps.back().total < r.log.steps.front().total);
}
