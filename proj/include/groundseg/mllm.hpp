#pragma once

#include <string>
#include <unordered_map>
#include <vector>

#include <nlohmann/json.hpp>

#include "groundseg/autograd.hpp"
#include "groundseg/model_dims.hpp"
#include "groundseg/rng.hpp"

namespace groundseg {

/// Lower-cased word-level split: runs of letters/digits/'/- form words, every
/// other non-space character is its own token, and "<seg>" stays whole.
std::vector<std::string> split_words(const std::string& text);

class Vocabulary {
 public:
  static constexpr int kPad = 0, kBos = 1, kEos = 2, kImage = 3, kSeg = 4, kUnk = 5;

  Vocabulary();
  /// Specials first, then `words` in the given order (duplicates ignored).
  static Vocabulary build(const std::vector<std::string>& words);

  int size() const { return static_cast<int>(tokens_.size()); }
  int id(const std::string& token) const;
  const std::string& token(int id) const;
  const std::vector<std::string>& tokens() const { return tokens_; }

  nlohmann::json to_json() const;
  static Vocabulary from_json(const nlohmann::json& j);

  friend bool operator==(const Vocabulary& a, const Vocabulary& b) { return a.tokens_ == b.tokens_; }

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, int> index_;
};

std::vector<int> tokenize(const Vocabulary& vocab, const std::string& text);
/// Tokens joined by single spaces; pad/bos/eos are dropped.
std::string detokenize(const Vocabulary& vocab, const std::vector<int>& ids);

template <typename T>
struct TransformerBlock {
  Parameter<T> ln1_g, ln1_b, qkv_w, qkv_b, out_w, out_b;
  Parameter<T> ln2_g, ln2_b, ff1_w, ff1_b, ff2_w, ff2_b;
};

template <typename T>
struct LMParams {
  ModelDims dims;
  Parameter<T> tok_emb, pos_emb;
  Parameter<T> img_proj_w, img_proj_b;  // c_global -> d_model
  std::vector<TransformerBlock<T>> blocks;
  Parameter<T> lnf_g, lnf_b;
  Parameter<T> head_w, head_b;
  Parameter<T> seg_proj_w, seg_proj_b;  // d_model -> d_proj

  explicit LMParams(const ModelDims& dims);
  LMParams() : LMParams(ModelDims{}) {}

  void init(Rng& rng);
  std::vector<Parameter<T>*> all();
};

template <typename T>
struct MultimodalInput {
  Tensor<T> image_tokens;  // [N_img, d_model]
  std::vector<int> text_ids;
};

template <typename T>
struct LMOutput {
  Tensor<T> logits;   // [L, V]
  Tensor<T> hiddens;  // [L, d_model], after the final layer norm
  int image_tokens = 0;
};

/// Half-open range of text positions (indices into text_ids).
struct AnswerSpan {
  int begin = 0;
  int end = 0;
};

template <typename T>
struct SegTokenEmbeddings {
  std::vector<Tensor<T>> embeddings;  // each [d_proj]
  std::vector<int> positions;         // text positions of the seg tokens
};

/// [c_global, h, w] grid -> [h*w, d_model] image tokens.
template <typename T>
Tensor<T> project_image_tokens(const Tensor<T>& v_g, const LMParams<T>& params);
template <typename T>
LMOutput<T> lm_forward(const MultimodalInput<T>& input, const LMParams<T>& params);
template <typename T>
SegTokenEmbeddings<T> extract_seg_embeddings(const LMOutput<T>& out, const std::vector<int>& text_ids,
                                             AnswerSpan span, const LMParams<T>& params,
                                             int seg_id = Vocabulary::kSeg);
/// Greedy continuation of `prompt_ids`, excluding the terminating eos. Only
/// ids below `active_vocab` are considered when it is positive.
template <typename T>
std::vector<int> generate(const Tensor<T>& image_tokens, const std::vector<int>& prompt_ids, const LMParams<T>& params,
                          int max_len, int eos_id = Vocabulary::kEos, int active_vocab = 0);

namespace ag {

template <typename T>
struct LMGraphOutput {
  Var<T> logits;
  Var<T> hiddens;
};

template <typename T>
Var<T> project_image_tokens(Graph<T>& g, Var<T> v_g, LMParams<T>& params);
template <typename T>
LMGraphOutput<T> lm_forward(Graph<T>& g, Var<T> image_tokens, const std::vector<int>& text_ids, LMParams<T>& params);
/// Projected hidden states at seg positions of text_ids[span). `positions`
/// receives the text positions when non-null.
template <typename T>
std::vector<Var<T>> extract_seg_embeddings(Graph<T>& g, Var<T> hiddens, const std::vector<int>& text_ids,
                                           int image_tokens, AnswerSpan span, LMParams<T>& params, int seg_id,
                                           std::vector<int>* positions = nullptr);

}  // namespace ag

}  // namespace groundseg
