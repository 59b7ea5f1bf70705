#include "groundseg/mllm.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>

namespace groundseg {

std::vector<std::string> split_words(const std::string& text) {
  static const std::string seg = "<seg>";
  std::vector<std::string> out;
  std::size_t i = 0;
  auto is_word = [](unsigned char c) { return std::isalnum(c) || c == '\'' || c == '-' || c == '_'; };
  while (i < text.size()) {
    const auto c = static_cast<unsigned char>(text[i]);
    if (std::isspace(c)) {
      ++i;
    } else if (text.compare(i, seg.size(), seg) == 0) {
      out.push_back(seg);
      i += seg.size();
    } else if (is_word(c)) {
      std::size_t j = i;
      std::string w;
      while (j < text.size() && is_word(static_cast<unsigned char>(text[j])))
        w.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(text[j++]))));
      out.push_back(std::move(w));
      i = j;
    } else {
      out.emplace_back(1, static_cast<char>(c));
      ++i;
    }
  }
  return out;
}

Vocabulary::Vocabulary() {
  tokens_ = {"<pad>", "<bos>", "<eos>", "<image>", "<seg>", "<unk>"};
  for (int i = 0; i < size(); ++i) index_[tokens_[static_cast<std::size_t>(i)]] = i;
}

Vocabulary Vocabulary::build(const std::vector<std::string>& words) {
  Vocabulary v;
  for (const auto& w : words) {
    if (w.empty() || v.index_.count(w)) continue;
    v.index_[w] = v.size();
    v.tokens_.push_back(w);
  }
  return v;
}

int Vocabulary::id(const std::string& token) const {
  auto it = index_.find(token);
  return it == index_.end() ? kUnk : it->second;
}

const std::string& Vocabulary::token(int id) const {
  if (id < 0 || id >= size()) throw InvalidInput("Vocabulary: id " + std::to_string(id) + " out of range");
  return tokens_[static_cast<std::size_t>(id)];
}

nlohmann::json Vocabulary::to_json() const {
  return {{"specials", {{"pad", kPad}, {"bos", kBos}, {"eos", kEos}, {"image", kImage}, {"seg", kSeg}, {"unk", kUnk}}},
          {"tokens", tokens_}};
}

Vocabulary Vocabulary::from_json(const nlohmann::json& j) {
  const auto tokens = j.at("tokens").get<std::vector<std::string>>();
  Vocabulary v;
  const auto& sp = j.at("specials");
  for (const auto& [name, expect] : {std::pair{"pad", kPad}, {"bos", kBos}, {"eos", kEos}, {"image", kImage},
                                     {"seg", kSeg}, {"unk", kUnk}})
    if (sp.at(name).get<int>() != expect) throw InvalidInput(std::string("Vocabulary: unexpected id for special ") + name);
  for (int i = 0; i < v.size(); ++i)
    if (static_cast<int>(tokens.size()) <= i || tokens[static_cast<std::size_t>(i)] != v.tokens_[static_cast<std::size_t>(i)])
      throw InvalidInput("Vocabulary: specials missing from token list");
  return build(std::vector<std::string>(tokens.begin() + v.size(), tokens.end()));
}

std::vector<int> tokenize(const Vocabulary& vocab, const std::string& text) {
  std::vector<int> ids;
  for (const auto& w : split_words(text)) ids.push_back(vocab.id(w));
  return ids;
}

std::string detokenize(const Vocabulary& vocab, const std::vector<int>& ids) {
  std::string out;
  for (int id : ids) {
    if (id == Vocabulary::kPad || id == Vocabulary::kBos || id == Vocabulary::kEos) continue;
    if (!out.empty()) out += ' ';
    out += vocab.token(id);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Parameters

template <typename T>
LMParams<T>::LMParams(const ModelDims& d)
    : dims(d),
      tok_emb("lm.tok_emb", {d.vocab_size, d.d_model}),
      pos_emb("lm.pos_emb", {d.context, d.d_model}),
      img_proj_w("lm.img_proj.w", {d.c_global, d.d_model}),
      img_proj_b("lm.img_proj.b", {d.d_model}),
      lnf_g("lm.lnf.g", {d.d_model}),
      lnf_b("lm.lnf.b", {d.d_model}),
      head_w("lm.head.w", {d.d_model, d.vocab_size}),
      head_b("lm.head.b", {d.vocab_size}),
      seg_proj_w("lm.seg_proj.w", {d.d_model, d.d_proj}),
      seg_proj_b("lm.seg_proj.b", {d.d_proj}) {
  d.validate();
  for (int l = 0; l < d.n_layers; ++l) {
    const std::string p = "lm.block" + std::to_string(l) + ".";
    TransformerBlock<T> b{
        {p + "ln1.g", {d.d_model}},           {p + "ln1.b", {d.d_model}},
        {p + "qkv.w", {d.d_model, 3 * d.d_model}}, {p + "qkv.b", {3 * d.d_model}},
        {p + "out.w", {d.d_model, d.d_model}},     {p + "out.b", {d.d_model}},
        {p + "ln2.g", {d.d_model}},           {p + "ln2.b", {d.d_model}},
        {p + "ff1.w", {d.d_model, d.d_ff}},   {p + "ff1.b", {d.d_ff}},
        {p + "ff2.w", {d.d_ff, d.d_model}},   {p + "ff2.b", {d.d_model}},
    };
    blocks.push_back(std::move(b));
  }
}

namespace {
template <typename T>
void fill_normal(Parameter<T>& p, Rng& rng, double std) {
  for (auto& v : p.value.data) v = static_cast<T>(rng.normal() * std);
}
template <typename T>
void fill_const(Parameter<T>& p, T v) {
  std::fill(p.value.data.begin(), p.value.data.end(), v);
}
}  // namespace

template <typename T>
void LMParams<T>::init(Rng& rng) {
  const auto& d = dims;
  fill_normal(tok_emb, rng, 0.02);
  fill_normal(pos_emb, rng, 0.02);
  fill_normal(img_proj_w, rng, 1.0 / std::sqrt(static_cast<double>(d.c_global)));
  fill_const(img_proj_b, T(0));
  for (auto& b : blocks) {
    fill_const(b.ln1_g, T(1));
    fill_const(b.ln1_b, T(0));
    fill_normal(b.qkv_w, rng, 0.02);
    fill_const(b.qkv_b, T(0));
    fill_normal(b.out_w, rng, 0.02 / std::sqrt(2.0 * d.n_layers));
    fill_const(b.out_b, T(0));
    fill_const(b.ln2_g, T(1));
    fill_const(b.ln2_b, T(0));
    fill_normal(b.ff1_w, rng, 0.02);
    fill_const(b.ff1_b, T(0));
    fill_normal(b.ff2_w, rng, 0.02 / std::sqrt(2.0 * d.n_layers));
    fill_const(b.ff2_b, T(0));
  }
  fill_const(lnf_g, T(1));
  fill_const(lnf_b, T(0));
  fill_normal(head_w, rng, 0.02);
  fill_const(head_b, T(0));
  fill_normal(seg_proj_w, rng, 1.0 / std::sqrt(static_cast<double>(d.d_model)));
  fill_const(seg_proj_b, T(0));
}

template <typename T>
std::vector<Parameter<T>*> LMParams<T>::all() {
  std::vector<Parameter<T>*> out{&tok_emb, &pos_emb, &img_proj_w, &img_proj_b};
  for (auto& b : blocks)
    for (auto* p : {&b.ln1_g, &b.ln1_b, &b.qkv_w, &b.qkv_b, &b.out_w, &b.out_b, &b.ln2_g, &b.ln2_b, &b.ff1_w,
                    &b.ff1_b, &b.ff2_w, &b.ff2_b})
      out.push_back(p);
  for (auto* p : {&lnf_g, &lnf_b, &head_w, &head_b, &seg_proj_w, &seg_proj_b}) out.push_back(p);
  return out;
}

// ---------------------------------------------------------------------------
// Graph-level forward

namespace ag {

template <typename T>
Var<T> project_image_tokens(Graph<T>& g, Var<T> v_g, LMParams<T>& p) {
  return linear(grid_to_rows(v_g), g.param(p.img_proj_w), g.param(p.img_proj_b));
}

template <typename T>
LMGraphOutput<T> lm_forward(Graph<T>& g, Var<T> image_tokens, const std::vector<int>& text_ids, LMParams<T>& p) {
  const auto& d = p.dims;
  const auto& shape = image_tokens.shape();
  if (shape.size() != 2 || shape[1] != d.d_model) throw InvalidInput("lm_forward: image tokens must be [N_img, d_model]");
  const int total = shape[0] + static_cast<int>(text_ids.size());
  if (total > d.context)
    throw InvalidInput("lm_forward: sequence length " + std::to_string(total) + " exceeds context " +
                       std::to_string(d.context));
  for (int id : text_ids)
    if (id < 0 || id >= d.vocab_size) throw InvalidInput("lm_forward: token id out of range");
  Var<T> x = image_tokens;
  if (!text_ids.empty()) x = concat_rows(x, embedding(g.param(p.tok_emb), text_ids));
  x = add_leading_rows(x, g.param(p.pos_emb));
  for (auto& b : p.blocks) {
    auto h = layer_norm(x, g.param(b.ln1_g), g.param(b.ln1_b));
    h = causal_attention(linear(h, g.param(b.qkv_w), g.param(b.qkv_b)), d.n_heads);
    x = add(x, linear(h, g.param(b.out_w), g.param(b.out_b)));
    h = layer_norm(x, g.param(b.ln2_g), g.param(b.ln2_b));
    h = gelu(linear(h, g.param(b.ff1_w), g.param(b.ff1_b)));
    x = add(x, linear(h, g.param(b.ff2_w), g.param(b.ff2_b)));
  }
  auto hid = layer_norm(x, g.param(p.lnf_g), g.param(p.lnf_b));
  return {linear(hid, g.param(p.head_w), g.param(p.head_b)), hid};
}

template <typename T>
std::vector<Var<T>> extract_seg_embeddings(Graph<T>& g, Var<T> hiddens, const std::vector<int>& text_ids,
                                           int image_tokens, AnswerSpan span, LMParams<T>& p, int seg_id,
                                           std::vector<int>* positions) {
  if (span.begin < 0 || span.end < span.begin || span.end > static_cast<int>(text_ids.size()))
    throw InvalidInput("extract_seg_embeddings: answer span outside the text region");
  std::vector<int> rows, pos;
  for (int t = span.begin; t < span.end; ++t)
    if (text_ids[static_cast<std::size_t>(t)] == seg_id) {
      pos.push_back(t);
      rows.push_back(image_tokens + t);
    }
  if (positions) *positions = pos;
  std::vector<Var<T>> out;
  if (rows.empty()) return out;
  auto proj = linear(take_rows(hiddens, rows), g.param(p.seg_proj_w), g.param(p.seg_proj_b));
  for (int i = 0; i < static_cast<int>(rows.size()); ++i) out.push_back(row(proj, i));
  return out;
}

}  // namespace ag

// ---------------------------------------------------------------------------
// Value-level entry points (no gradients are accumulated into params).

template <typename T>
Tensor<T> project_image_tokens(const Tensor<T>& v_g, const LMParams<T>& params) {
  ag::Graph<T> g;
  return ag::project_image_tokens(g, g.constant(v_g), const_cast<LMParams<T>&>(params)).value();
}

template <typename T>
LMOutput<T> lm_forward(const MultimodalInput<T>& input, const LMParams<T>& params) {
  ag::Graph<T> g;
  auto out = ag::lm_forward(g, g.constant(input.image_tokens), input.text_ids, const_cast<LMParams<T>&>(params));
  return {out.logits.value(), out.hiddens.value(), input.image_tokens.dim(0)};
}

template <typename T>
SegTokenEmbeddings<T> extract_seg_embeddings(const LMOutput<T>& out, const std::vector<int>& text_ids, AnswerSpan span,
                                             const LMParams<T>& params, int seg_id) {
  if (out.hiddens.dim(0) != out.image_tokens + static_cast<int>(text_ids.size()))
    throw InvalidInput("extract_seg_embeddings: hidden states do not match the text length");
  ag::Graph<T> g;
  SegTokenEmbeddings<T> res;
  auto vars = ag::extract_seg_embeddings(g, g.constant(out.hiddens), text_ids, out.image_tokens, span,
                                         const_cast<LMParams<T>&>(params), seg_id, &res.positions);
  for (const auto& v : vars) res.embeddings.push_back(v.value());
  return res;
}

template <typename T>
std::vector<int> generate(const Tensor<T>& image_tokens, const std::vector<int>& prompt_ids, const LMParams<T>& params,
                          int max_len, int eos_id, int active_vocab) {
  const int n_img = image_tokens.dim(0);
  if (n_img + static_cast<int>(prompt_ids.size()) > params.dims.context)
    throw InvalidInput("generate: prompt exceeds the context");
  std::vector<int> ids = prompt_ids;
  std::vector<int> produced;
  for (int step = 0; step < max_len; ++step) {
    if (n_img + static_cast<int>(ids.size()) >= params.dims.context) break;
    const auto out = lm_forward(MultimodalInput<T>{image_tokens, ids}, params);
    const int last = out.logits.dim(0) - 1;
    const int v = active_vocab > 0 ? std::min(active_vocab, out.logits.dim(1)) : out.logits.dim(1);
    int best = 0;
    for (int k = 1; k < v; ++k)
      if (out.logits.at(last, k) > out.logits.at(last, best)) best = k;
    if (best == eos_id) break;
    ids.push_back(best);
    produced.push_back(best);
  }
  return produced;
}

#define GROUNDSEG_INSTANTIATE(T)                                                                                   \
  template struct LMParams<T>;                                                                                     \
  template Tensor<T> project_image_tokens<T>(const Tensor<T>&, const LMParams<T>&);                                \
  template LMOutput<T> lm_forward<T>(const MultimodalInput<T>&, const LMParams<T>&);                               \
  template SegTokenEmbeddings<T> extract_seg_embeddings<T>(const LMOutput<T>&, const std::vector<int>&,           \
                                                           AnswerSpan, const LMParams<T>&, int);                  \
  template std::vector<int> generate<T>(const Tensor<T>&, const std::vector<int>&, const LMParams<T>&, int, int, int);\
  template ag::Var<T> ag::project_image_tokens<T>(ag::Graph<T>&, ag::Var<T>, LMParams<T>&);                        \
  template ag::LMGraphOutput<T> ag::lm_forward<T>(ag::Graph<T>&, ag::Var<T>, const std::vector<int>&,             \
                                                  LMParams<T>&);                                                   \
  template std::vector<ag::Var<T>> ag::extract_seg_embeddings<T>(ag::Graph<T>&, ag::Var<T>,                       \
                                                                 const std::vector<int>&, int, AnswerSpan,         \
                                                                 LMParams<T>&, int, std::vector<int>*);

GROUNDSEG_INSTANTIATE(float)
GROUNDSEG_INSTANTIATE(double)

#undef GROUNDSEG_INSTANTIATE

}  // namespace groundseg
