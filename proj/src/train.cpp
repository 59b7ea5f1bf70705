#include <cmath>
#include <fstream>
#include <map>

#include "groundseg/train.hpp"

namespace groundseg {

using nlohmann::json;

// ---------------------------------------------------------------------------
// Config

void RunConfig::validate() const {
  model.validate();
  loss.validate();
  if (optimizer.name != "adamw") throw InvalidInput("RunConfig: only the adamw optimizer is supported");
  if (!(optimizer.lr > 0)) throw InvalidInput("RunConfig: lr must be positive");
  if (optimizer.beta1 < 0 || optimizer.beta1 >= 1 || optimizer.beta2 < 0 || optimizer.beta2 >= 1)
    throw InvalidInput("RunConfig: betas must lie in [0,1)");
  if (optimizer.weight_decay < 0 || optimizer.clip_norm < 0 || !(optimizer.eps > 0))
    throw InvalidInput("RunConfig: invalid optimizer settings");
  if (batch_size < 1) throw InvalidInput("RunConfig: batch_size must be at least 1");
  if (steps < 0 || eval_every < 0 || max_train_patches < 0 || max_answer_tokens < 0)
    throw InvalidInput("RunConfig: counts must be non-negative");
}

json RunConfig::to_json() const {
  return {{"data_dir", data_dir},
          {"model",
           {{"image_size", model.image_size},
            {"enc1", model.enc1},
            {"enc2", model.enc2},
            {"c_local", model.c_local},
            {"c_global", model.c_global},
            {"decoder_widths", model.decoder_widths},
            {"decoder_skips", model.decoder_skips},
            {"d_proj", model.d_proj},
            {"d_model", model.d_model},
            {"n_heads", model.n_heads},
            {"n_layers", model.n_layers},
            {"d_ff", model.d_ff},
            {"vocab_size", model.vocab_size},
            {"context", model.context}}},
          {"loss",
           {{"lambda_bce", loss.lambda_bce},
            {"lambda_dice", loss.lambda_dice},
            {"penalty", loss.penalty},
            {"lambda_mask", loss.lambda_mask},
            {"lambda_txt", loss.lambda_txt},
            {"lambda_con", loss.lambda_con},
            {"dice_smooth", loss.dice_smooth}}},
          {"optimizer",
           {{"name", optimizer.name},
            {"lr", optimizer.lr},
            {"beta1", optimizer.beta1},
            {"beta2", optimizer.beta2},
            {"eps", optimizer.eps},
            {"weight_decay", optimizer.weight_decay},
            {"clip_norm", optimizer.clip_norm}}},
          {"batch_size", batch_size},
          {"steps", steps},
          {"seed", seed},
          {"eval_every", eval_every},
          {"max_train_patches", max_train_patches},
          {"max_answer_tokens", max_answer_tokens}};
}

namespace {
template <typename V>
void read_opt(const json& j, const char* key, V& out) {
  if (j.contains(key)) out = j.at(key).get<V>();
}
}  // namespace

// Missing keys keep their defaults, so a config may list only what it changes.
RunConfig RunConfig::from_json(const json& j) {
  RunConfig c;
  try {
    read_opt(j, "data_dir", c.data_dir);
    if (j.contains("model")) {
      const auto& m = j.at("model");
      read_opt(m, "image_size", c.model.image_size);
      read_opt(m, "enc1", c.model.enc1);
      read_opt(m, "enc2", c.model.enc2);
      read_opt(m, "c_local", c.model.c_local);
      read_opt(m, "c_global", c.model.c_global);
      read_opt(m, "decoder_widths", c.model.decoder_widths);
      read_opt(m, "decoder_skips", c.model.decoder_skips);
      read_opt(m, "d_proj", c.model.d_proj);
      read_opt(m, "d_model", c.model.d_model);
      read_opt(m, "n_heads", c.model.n_heads);
      read_opt(m, "n_layers", c.model.n_layers);
      read_opt(m, "d_ff", c.model.d_ff);
      read_opt(m, "vocab_size", c.model.vocab_size);
      read_opt(m, "context", c.model.context);
    }
    if (j.contains("loss")) {
      const auto& l = j.at("loss");
      read_opt(l, "lambda_bce", c.loss.lambda_bce);
      read_opt(l, "lambda_dice", c.loss.lambda_dice);
      read_opt(l, "penalty", c.loss.penalty);
      read_opt(l, "lambda_mask", c.loss.lambda_mask);
      read_opt(l, "lambda_txt", c.loss.lambda_txt);
      read_opt(l, "lambda_con", c.loss.lambda_con);
      read_opt(l, "dice_smooth", c.loss.dice_smooth);
    }
    if (j.contains("optimizer")) {
      const auto& o = j.at("optimizer");
      read_opt(o, "name", c.optimizer.name);
      read_opt(o, "lr", c.optimizer.lr);
      read_opt(o, "beta1", c.optimizer.beta1);
      read_opt(o, "beta2", c.optimizer.beta2);
      read_opt(o, "eps", c.optimizer.eps);
      read_opt(o, "weight_decay", c.optimizer.weight_decay);
      read_opt(o, "clip_norm", c.optimizer.clip_norm);
    }
    read_opt(j, "batch_size", c.batch_size);
    read_opt(j, "steps", c.steps);
    read_opt(j, "seed", c.seed);
    read_opt(j, "eval_every", c.eval_every);
    read_opt(j, "max_train_patches", c.max_train_patches);
    read_opt(j, "max_answer_tokens", c.max_answer_tokens);
  } catch (const json::exception& e) {
    throw InvalidInput(std::string("RunConfig: ") + e.what());
  }
  c.validate();
  return c;
}

// ---------------------------------------------------------------------------
// Model

template <typename T>
void Model<T>::init(std::uint64_t seed) {
  Rng vision_rng(mix_seed(seed, 101));
  Rng lm_rng(mix_seed(seed, 202));
  vision.init(vision_rng);
  lm.init(lm_rng);
}

template <typename T>
std::vector<Parameter<T>*> Model<T>::parameters() {
  auto out = vision.all();
  for (auto* p : lm.all()) out.push_back(p);
  return out;
}

template <typename T>
std::vector<const Parameter<T>*> Model<T>::parameters() const {
  std::vector<const Parameter<T>*> out;
  for (auto* p : const_cast<Model*>(this)->parameters()) out.push_back(p);
  return out;
}

template struct Model<float>;
template struct Model<double>;

// ---------------------------------------------------------------------------
// Examples and objective

Vocabulary default_vocabulary() { return Vocabulary::build(TemplateBank::defaults().corpus()); }

Example make_example(const PatchRecord& patch, const QARecord& qa, const Vocabulary& vocab) {
  Example ex;
  ex.patch = &patch;
  ex.qa = &qa;
  ex.id = patch.patch_id + "/" + task_name(qa.task);
  ex.text_ids.push_back(Vocabulary::kBos);
  for (int id : tokenize(vocab, qa.question)) ex.text_ids.push_back(id);
  ex.answer_begin = static_cast<int>(ex.text_ids.size());
  for (int id : tokenize(vocab, qa.answer_template)) ex.text_ids.push_back(id);
  ex.text_ids.push_back(Vocabulary::kEos);
  return ex;
}

template <typename T>
std::pair<ag::Var<T>, BatchLosses> batch_objective(ag::Graph<T>& g, Model<T>& model, const std::vector<Example>& batch,
                                                   const LossConfig& cfg) {
  if (batch.empty()) throw InvalidInput("batch_objective: empty batch");
  struct Encoded {
    ag::Var<T> v_seg;
    std::vector<ag::Var<T>> skips;
    ag::Var<T> image_tokens;
  };
  std::map<const PatchRecord*, Encoded> cache;
  std::vector<ag::Var<T>> txt_terms, mask_terms, con_terms;

  for (const auto& ex : batch) {
    auto it = cache.find(ex.patch);
    if (it == cache.end()) {
      auto enc = ag::encode_image(g, g.constant(image_to_chw<T>(ex.patch->image)), model.vision);
      Encoded e{ag::aggregate_features(g, enc, model.vision), enc.skips,
                ag::project_image_tokens(g, enc.v_g, model.lm)};
      it = cache.emplace(ex.patch, std::move(e)).first;
    }
    const Encoded& enc = it->second;
    const int n_img = enc.image_tokens.shape()[0];
    const int len = static_cast<int>(ex.text_ids.size());
    auto out = ag::lm_forward(g, enc.image_tokens, ex.text_ids, model.lm);

    std::vector<int> seq(static_cast<std::size_t>(n_img), Vocabulary::kImage);
    seq.insert(seq.end(), ex.text_ids.begin(), ex.text_ids.end());
    txt_terms.push_back(ag::text_loss(out.logits, seq, n_img + ex.answer_begin, n_img + len));

    auto segs = ag::extract_seg_embeddings(g, out.hiddens, ex.text_ids, n_img, {ex.answer_begin, len}, model.lm,
                                           Vocabulary::kSeg);
    const auto& slots = ex.qa->slot_categories;
    if (segs.size() != slots.size())
      throw InvalidInput("batch_objective: " + ex.id + " has " + std::to_string(segs.size()) + " seg tokens but " +
                         std::to_string(slots.size()) + " slot categories");
    if (segs.empty()) continue;
    std::vector<ag::Var<T>> logits;
    std::vector<Tensor<T>> targets, weights;
    const auto& gt = ex.patch->gt;
    for (std::size_t k = 0; k < segs.size(); ++k) {
      logits.push_back(ag::decode_mask(g, enc.v_seg, enc.skips, segs[k], model.vision));
      const auto bin = gt.binary(slots[k]);
      targets.emplace_back(std::vector<int>{gt.height, gt.width}, std::vector<T>(bin.begin(), bin.end()));
      weights.push_back(penalty_weight_map<T>(gt, slots[k], cfg));
    }
    auto [mask, con] = ag::mask_and_consistency(g, logits, targets, weights, cfg);
    mask_terms.push_back(mask);
    con_terms.push_back(con);
  }

  BatchLosses losses;
  std::vector<ag::Var<T>> terms;
  std::vector<T> coeffs;
  const double nb = static_cast<double>(txt_terms.size());
  for (auto& v : txt_terms) {
    losses.txt += v.value()[0] / nb;
    terms.push_back(v);
    coeffs.push_back(static_cast<T>(cfg.lambda_txt / nb));
  }
  const double ns = static_cast<double>(mask_terms.size());
  for (std::size_t k = 0; k < mask_terms.size(); ++k) {
    losses.mask += mask_terms[k].value()[0] / ns;
    losses.con += con_terms[k].value()[0] / ns;
    terms.push_back(mask_terms[k]);
    coeffs.push_back(static_cast<T>(cfg.lambda_mask / ns));
    terms.push_back(con_terms[k]);
    coeffs.push_back(static_cast<T>(cfg.lambda_con / ns));
  }
  auto root = ag::weighted_sum(terms, coeffs);
  losses.total = root.value()[0];
  return {root, losses};
}

template std::pair<ag::Var<float>, BatchLosses> batch_objective<float>(ag::Graph<float>&, Model<float>&,
                                                                       const std::vector<Example>&, const LossConfig&);
template std::pair<ag::Var<double>, BatchLosses> batch_objective<double>(ag::Graph<double>&, Model<double>&,
                                                                         const std::vector<Example>&,
                                                                         const LossConfig&);

// ---------------------------------------------------------------------------
// Training loop

namespace {

class AdamW {
 public:
  AdamW(const OptimizerConfig& cfg, const std::vector<Parameter<float>*>& params) : cfg_(cfg), params_(params) {
    for (auto* p : params_) {
      m_.emplace_back(p->value.size(), 0.0f);
      v_.emplace_back(p->value.size(), 0.0f);
    }
  }

  void step() {
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, t_);
    const double bc2 = 1.0 - std::pow(cfg_.beta2, t_);
    const float lr = static_cast<float>(cfg_.lr);
    const float b1 = static_cast<float>(cfg_.beta1), b2 = static_cast<float>(cfg_.beta2);
    for (std::size_t k = 0; k < params_.size(); ++k) {
      auto& p = *params_[k];
      // Decay matrices and embeddings only.
      const float decay = p.value.rank() >= 2 ? static_cast<float>(cfg_.lr * cfg_.weight_decay) : 0.0f;
      auto& m = m_[k];
      auto& v = v_[k];
      for (std::size_t i = 0; i < p.value.size(); ++i) {
        const float g = p.grad[i];
        m[i] = b1 * m[i] + (1 - b1) * g;
        v[i] = b2 * v[i] + (1 - b2) * g * g;
        const float mhat = static_cast<float>(m[i] / bc1);
        const float vhat = static_cast<float>(v[i] / bc2);
        p.value[i] -= decay * p.value[i];
        p.value[i] -= lr * mhat / (std::sqrt(vhat) + static_cast<float>(cfg_.eps));
      }
    }
  }

 private:
  OptimizerConfig cfg_;
  std::vector<Parameter<float>*> params_;
  std::vector<std::vector<float>> m_, v_;
  int t_ = 0;
};

double clip_gradients(const std::vector<Parameter<float>*>& params, double max_norm) {
  double sq = 0;
  for (auto* p : params)
    for (float g : p->grad.data) sq += static_cast<double>(g) * g;
  const double norm = std::sqrt(sq);
  if (max_norm > 0 && norm > max_norm) {
    const float s = static_cast<float>(max_norm / (norm + 1e-12));
    for (auto* p : params)
      for (auto& g : p->grad.data) g *= s;
  }
  return norm;
}

std::vector<std::string> ids_of(const std::vector<Example>& batch) {
  std::vector<std::string> out;
  for (const auto& e : batch) out.push_back(e.id);
  return out;
}

}  // namespace

TrainResult train(const RunConfig& config, const DatasetSplits& data, const TrainOptions& options) {
  config.validate();
  TrainResult result{CheckpointBundle(config), {}};
  auto& ck = result.checkpoint;
  ck.vocab = default_vocabulary();
  if (ck.vocab.size() > config.model.vocab_size)
    throw InvalidInput("train: vocabulary has " + std::to_string(ck.vocab.size()) + " tokens but the model allows " +
                       std::to_string(config.model.vocab_size));
  ck.model.init(config.seed);

  std::vector<const PatchRecord*> patches;
  for (const auto& p : data.train) {
    if (config.max_train_patches > 0 && static_cast<int>(patches.size()) >= config.max_train_patches) break;
    if (p.image.height() != config.model.image_size || p.image.width() != config.model.image_size)
      throw InvalidInput("train: patch " + p.patch_id + " does not match model image_size");
    patches.push_back(&p);
  }
  std::vector<Example> examples;
  for (const auto* p : patches)
    for (const auto& qa : p->qa) {
      examples.push_back(make_example(*p, qa, ck.vocab));
      if (config.model.image_tokens() + static_cast<int>(examples.back().text_ids.size()) > config.model.context)
        throw InvalidInput("train: example " + examples.back().id + " exceeds the context length");
    }
  if (config.steps > 0 && examples.empty()) throw InvalidInput("train: the train split is empty");

  auto params = ck.model.parameters();
  AdamW opt(config.optimizer, params);
  Rng order_rng(mix_seed(config.seed, 303));
  std::vector<std::size_t> order;
  std::size_t cursor = 0;

  for (int step = 0; step < config.steps; ++step) {
    std::vector<Example> batch;
    while (static_cast<int>(batch.size()) < config.batch_size) {
      if (cursor == order.size()) {
        order.resize(examples.size());
        for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
        order_rng.shuffle(order);
        cursor = 0;
      }
      batch.push_back(examples[order[cursor++]]);
    }

    for (auto* p : params) p->zero_grad();
    ag::Graph<float> g;
    auto [root, losses] = batch_objective(g, ck.model, batch, config.loss);
    bool finite = std::isfinite(losses.total);
    if (finite) {
      g.backward(root);
      for (auto* p : params)
        for (float v : p->grad.data) finite = finite && std::isfinite(v);
    }
    if (!finite) {
      if (options.abort_dir) {
        ck.step = step;
        save_checkpoint(ck, *options.abort_dir);
      }
      std::string msg = "train: non-finite loss or gradient at step " + std::to_string(step) + "; batch:";
      for (const auto& id : ids_of(batch)) msg += " " + id;
      throw TrainingAborted(msg, ids_of(batch));
    }
    clip_gradients(params, config.optimizer.clip_norm);
    opt.step();

    StepRecord rec{step, losses.mask, losses.txt, losses.con, losses.total};
    result.log.steps.push_back(rec);
    if (options.on_step) options.on_step(rec);
    ck.step = step + 1;

    if (config.eval_every > 0 && (step + 1) % config.eval_every == 0 && !data.val.empty())
      result.log.evals.emplace_back(step + 1, evaluate(ck, data, "val", TaskType::referring));
  }
  return result;
}

TrainResult train(const RunConfig& config, const TrainOptions& options) {
  if (config.data_dir.empty()) throw InvalidInput("train: config has no data_dir");
  const auto data = load_dataset(config.data_dir);
  return train(config, data, options);
}

void save_train_log(const TrainLog& log, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path.string());
  for (const auto& s : log.steps)
    out << json{{"step", s.step}, {"mask", s.mask}, {"txt", s.txt}, {"con", s.con}, {"total", s.total}}.dump() << '\n';
  for (const auto& [step, report] : log.evals) out << json{{"eval_step", step}, {"report", report.to_json()}}.dump() << '\n';
}

}  // namespace groundseg
