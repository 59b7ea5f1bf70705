#include <algorithm>

#include "groundseg/train.hpp"

namespace groundseg {

Prediction predict(const CheckpointBundle& ckpt, const PatchRecord& patch, const QARecord& qa) {
  const auto& model = ckpt.model;
  const auto fp = encode_image(patch.image, model.vision);
  const auto tokens = project_image_tokens(fp.v_g, model.lm);
  const int n_img = tokens.dim(0);

  std::vector<int> ids{Vocabulary::kBos};
  for (int id : tokenize(ckpt.vocab, qa.question)) ids.push_back(id);
  const int prompt_len = static_cast<int>(ids.size());

  Prediction pred;
  pred.answer_ids = generate(tokens, ids, model.lm, ckpt.config.max_answer_tokens, Vocabulary::kEos, ckpt.vocab.size());
  pred.answer_text = detokenize(ckpt.vocab, pred.answer_ids);
  ids.insert(ids.end(), pred.answer_ids.begin(), pred.answer_ids.end());
  if (n_img + static_cast<int>(ids.size()) > model.dims.context) ids.resize(static_cast<std::size_t>(model.dims.context - n_img));

  const auto out = lm_forward(MultimodalInput<float>{tokens, ids}, model.lm);
  const auto segs = extract_seg_embeddings(out, ids, {prompt_len, static_cast<int>(ids.size())}, model.lm);
  if (segs.embeddings.empty()) return pred;
  const auto logits = decode_masks(aggregate_features(fp, model.vision), segs.embeddings, model.vision);
  for (const auto& l : logits) {
    Mask m(l.dim(0), l.dim(1));
    for (std::size_t i = 0; i < l.size(); ++i) m.data[i] = l[i] > 0.0f ? 1 : 0;
    pred.masks.push_back(std::move(m));
  }
  return pred;
}

MetricsReport score_predictions(const std::vector<EvalItem>& items, TaskType task, const std::string& split) {
  if (items.empty()) throw InvalidInput("score_predictions: no items");
  MetricsReport report;
  report.split = split;
  report.task = task_name(task);
  report.examples = static_cast<int>(items.size());

  if (task == TaskType::conversation) {
    for (const auto& it : items) {
      report.bleu4 += bleu4(it.prediction.answer_text, it.qa->answer_template);
      report.token_f1 += token_f1(it.prediction.answer_text, it.qa->answer_template);
    }
    report.bleu4 /= static_cast<double>(items.size());
    report.token_f1 /= static_cast<double>(items.size());
    return report;
  }

  std::vector<EvalPair> pairs;
  int count_hits = 0, masks = 0;
  double fragments = 0;
  for (const auto& it : items) {
    const auto& gt = it.patch->gt;
    const auto& slots = it.qa->slot_categories;
    const auto& pm = it.prediction.masks;
    const std::string id = it.patch->patch_id + "/" + task_name(task);
    count_hits += pm.size() == slots.size();
    for (const auto& m : pm) {
      fragments += fragment_count(m);
      ++masks;
    }
    // Slot order pairing; missing predictions are empty masks against a
    // non-empty reference, extra predictions are scored against nothing.
    const std::size_t n = std::max<std::size_t>({slots.size(), pm.size(), 1});
    for (std::size_t k = 0; k < n; ++k) {
      EvalPair p;
      p.example_id = id;
      p.pred = k < pm.size() ? pm[k] : Mask(gt.height, gt.width);
      if (k < slots.size()) {
        p.category = slots[k];
        p.gt = Mask(gt.height, gt.width, gt.binary(slots[k]));
      } else {
        p.gt = Mask(gt.height, gt.width);
      }
      pairs.push_back(std::move(p));
    }
  }
  summarize_pairs(pairs, report);
  report.seg_count_accuracy = static_cast<double>(count_hits) / static_cast<double>(items.size());
  report.mean_fragments = masks > 0 ? fragments / masks : 0.0;
  return report;
}

const std::vector<PatchRecord>& split_by_name(const DatasetSplits& data, const std::string& split) {
  if (split == "train") return data.train;
  if (split == "val") return data.val;
  if (split == "test") return data.test;
  throw InvalidInput("unknown split '" + split + "' (expected train, val or test)");
}

MetricsReport evaluate(const CheckpointBundle& ckpt, const DatasetSplits& data, const std::string& split,
                       TaskType task) {
  const auto& patches = split_by_name(data, split);
  if (patches.empty()) throw InvalidInput("evaluate: split '" + split + "' is empty");
  std::vector<EvalItem> items;
  for (const auto& p : patches)
    for (const auto& qa : p.qa)
      if (qa.task == task) items.push_back({&p, &qa, predict(ckpt, p, qa)});
  if (items.empty()) throw InvalidInput("evaluate: split '" + split + "' has no " + task_name(task) + " questions");
  return score_predictions(items, task, split);
}

MetricsReport evaluate(const CheckpointBundle& ckpt, const std::string& split, TaskType task) {
  if (ckpt.config.data_dir.empty()) throw InvalidInput("evaluate: checkpoint config has no data_dir");
  return evaluate(ckpt, load_dataset(ckpt.config.data_dir), split, task);
}

}  // namespace groundseg
