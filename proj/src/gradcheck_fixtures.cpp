#include <cmath>

#include "groundseg/train.hpp"

namespace groundseg {

namespace {

using D = double;

Parameter<D> random_param(const std::string& name, std::vector<int> shape, Rng& rng, double scale) {
  Parameter<D> p(name, std::move(shape));
  for (auto& v : p.value.data) v = rng.normal() * scale;
  return p;
}

// A 6x6 map with two labelled blocks; category 1 is the token's target.
CategoryMap toy_map(int h, int w) {
  CategoryMap m{h, w, kNumCategories, std::vector<std::uint8_t>(static_cast<std::size_t>(h) * w, 0)};
  for (int i = 0; i < h; ++i)
    for (int j = 0; j < w; ++j) {
      if (i >= 1 && i < h / 2 && j >= 1 && j < w / 2) m.labels[static_cast<std::size_t>(i) * w + j] = 1;
      if (i >= h / 2 && j >= w / 2 && j < w - 1) m.labels[static_cast<std::size_t>(i) * w + j] = 2;
    }
  return m;
}

Tensor<D> target_of(const CategoryMap& m, int cat) {
  const auto b = m.binary(cat);
  return Tensor<D>({m.height, m.width}, std::vector<D>(b.begin(), b.end()));
}

// Runs `build` on a fresh graph; with `backward` the parameter grads are
// zeroed and filled first.
template <typename Build>
GradCheckReport check(const std::string& fixture, std::vector<Parameter<D>*> params, Build build) {
  auto eval = [&](bool backward) {
    ag::Graph<D> g;
    auto root = build(g);
    if (backward) {
      for (auto* p : params) p->zero_grad();
      g.backward(root);
    }
    return root.value()[0];
  };
  auto report = grad_check(params, [&] { return eval(true); }, [&] { return eval(false); });
  report.fixture = fixture;
  return report;
}

GradCheckReport bce_fixture() {
  Rng rng(11);
  auto z = random_param("logits", {6, 6}, rng, 1.5);
  const auto gt = toy_map(6, 6);
  const auto t = target_of(gt, 1);
  const auto w = penalty_weight_map<D>(gt, 1, LossConfig{});
  return check("bce", {&z}, [&](ag::Graph<D>& g) { return ag::weighted_bce(g.param(z), t, w); });
}

GradCheckReport dice_fixture() {
  Rng rng(12);
  auto z = random_param("logits", {6, 6}, rng, 1.5);
  const auto gt = toy_map(6, 6);
  const auto t = target_of(gt, 1);
  const auto w = penalty_weight_map<D>(gt, 1, LossConfig{});
  return check("dice", {&z},
               [&](ag::Graph<D>& g) { return ag::weighted_dice(ag::sigmoid(g.param(z)), t, w, 1e-6); });
}

GradCheckReport consistency_fixture() {
  // |a - b| has a kink at a == b; redraw until every neighbour pair is well
  // separated relative to the finite-difference step.
  Rng rng(13);
  Parameter<D> a, b;
  for (;;) {
    a = random_param("map0", {5, 5}, rng, 2.0);
    b = random_param("map1", {5, 5}, rng, 2.0);
    double gap = 1.0;
    for (const auto* p : {&a, &b})
      for (int i = 0; i < 5; ++i)
        for (int j = 0; j < 5; ++j) {
          if (i + 1 < 5) gap = std::min(gap, std::abs(p->value.at(i, j) - p->value.at(i + 1, j)));
          if (j + 1 < 5) gap = std::min(gap, std::abs(p->value.at(i, j) - p->value.at(i, j + 1)));
        }
    if (gap > 1e-2) break;
  }
  return check("consistency", {&a, &b}, [&](ag::Graph<D>& g) {
    return ag::consistency_loss<D>({ag::sigmoid(g.param(a)), ag::sigmoid(g.param(b))});
  });
}

GradCheckReport text_fixture() {
  Rng rng(14);
  auto z = random_param("logits", {7, 10}, rng, 1.0);
  const std::vector<int> ids{1, 6, 7, 4, 8, 4, 2};
  return check("text", {&z}, [&](ag::Graph<D>& g) { return ag::text_loss(g.param(z), ids, 3, 7); });
}

ModelDims pipeline_dims() {
  ModelDims d;
  d.image_size = 16;
  d.enc1 = 2;
  d.enc2 = 2;
  d.c_local = 2;
  d.c_global = 4;
  d.decoder_widths = {2, 2, 2, 2};
  d.d_proj = 2;
  d.d_model = 8;
  d.n_heads = 2;
  d.n_layers = 1;
  d.d_ff = 8;
  d.vocab_size = 12;
  d.context = 12;
  return d;
}

GradCheckReport pipeline_fixture() {
  const auto dims = pipeline_dims();
  Model<D> model(dims);
  model.init(15);

  PatchRecord patch;
  patch.patch_id = "toy";
  Rng rng(16);
  patch.image.pixels = Tensor<float>({16, 16, 3});
  for (auto& v : patch.image.pixels.data) v = static_cast<float>(rng.uniform_int(0, 255)) / 255.0f;
  patch.gt = toy_map(16, 16);
  QARecord qa{TaskType::reasoning, "q", "a <seg> b <seg>", {1, 2}};

  Example ex;
  ex.patch = &patch;
  ex.qa = &qa;
  ex.id = "toy/reasoning";
  ex.text_ids = {Vocabulary::kBos, 6, 7, 8, Vocabulary::kSeg, 9, Vocabulary::kSeg, Vocabulary::kEos};
  ex.answer_begin = 3;

  const LossConfig cfg;
  return check("pipeline", model.parameters(),
               [&](ag::Graph<D>& g) { return batch_objective(g, model, {ex}, cfg).first; });
}

}  // namespace

std::vector<std::string> grad_check_fixture_names() { return {"bce", "dice", "consistency", "text", "pipeline"}; }

double grad_check_tolerance(const std::string& name) {
  if (name == "pipeline") return 1e-2;
  for (const auto& n : grad_check_fixture_names())
    if (n == name) return 1e-3;
  throw InvalidInput("unknown grad-check fixture '" + name + "'");
}

GradCheckReport run_grad_check_fixture(const std::string& name) {
  if (name == "bce") return bce_fixture();
  if (name == "dice") return dice_fixture();
  if (name == "consistency") return consistency_fixture();
  if (name == "text") return text_fixture();
  if (name == "pipeline") return pipeline_fixture();
  throw InvalidInput("unknown grad-check fixture '" + name + "'");
}

}  // namespace groundseg
