#include "groundseg/vision.hpp"

#include <cmath>
#include <string>

namespace groundseg {

void ModelDims::validate() const {
  if (image_size <= 0 || image_size % 16 != 0) throw InvalidInput("ModelDims: image_size must be a positive multiple of 16");
  if (decoder_widths.size() != 4) throw InvalidInput("ModelDims: decoder needs exactly four x2 stages");
  for (int v : {enc1, enc2, c_local, c_global, d_proj, d_model, n_heads, n_layers, d_ff, vocab_size, context})
    if (v <= 0) throw InvalidInput("ModelDims: sizes must be positive");
  for (int v : decoder_widths)
    if (v <= 0) throw InvalidInput("ModelDims: decoder widths must be positive");
  if (d_model % n_heads != 0) throw InvalidInput("ModelDims: d_model must be divisible by n_heads");
  if (image_tokens() >= context) throw InvalidInput("ModelDims: context too short for the image tokens");
}

namespace {

std::vector<int> skip_channels(const ModelDims& d) { return {d.c_local, d.enc2, d.enc1, 3}; }

template <typename T>
void init_conv(Parameter<T>& w, Rng& rng, double gain = std::sqrt(2.0)) {
  const int fan_in = w.value.dim(1) * w.value.dim(2) * w.value.dim(3);
  const double std = gain / std::sqrt(static_cast<double>(fan_in));
  for (auto& v : w.value.data) v = static_cast<T>(rng.normal() * std);
}

}  // namespace

template <typename T>
VisionParams<T>::VisionParams(const ModelDims& d)
    : dims(d),
      enc1_w("vision.enc1.w", {d.enc1, 3, 3, 3}),
      enc1_b("vision.enc1.b", {d.enc1}),
      enc2_w("vision.enc2.w", {d.enc2, d.enc1, 3, 3}),
      enc2_b("vision.enc2.b", {d.enc2}),
      enc3_w("vision.enc3.w", {d.c_local, d.enc2, 3, 3}),
      enc3_b("vision.enc3.b", {d.c_local}),
      enc4_w("vision.enc4.w", {d.c_global, d.c_local, 3, 3}),
      enc4_b("vision.enc4.b", {d.c_global}),
      agg_w("vision.agg.w", {d.c_global, d.c_local, 3, 3}),
      agg_b("vision.agg.b", {d.c_global}),
      fuse_w("vision.fuse.w", {d.c_global, d.c_global + d.d_proj, 3, 3}),
      fuse_b("vision.fuse.b", {d.c_global}),
      head_w("vision.head.w", {1, d.decoder_widths.back(), 1, 1}),
      head_b("vision.head.b", {1}) {
  d.validate();
  const auto skips = skip_channels(d);
  int in = d.c_global;
  for (std::size_t s = 0; s < d.decoder_widths.size(); ++s) {
    const int cin = in + (d.decoder_skips ? skips[s] : 0);
    up_w.emplace_back("vision.up" + std::to_string(s) + ".w", std::vector<int>{d.decoder_widths[s], cin, 3, 3});
    up_b.emplace_back("vision.up" + std::to_string(s) + ".b", std::vector<int>{d.decoder_widths[s]});
    in = d.decoder_widths[s];
  }
}

template <typename T>
void VisionParams<T>::init(Rng& rng) {
  for (auto* w : {&enc1_w, &enc2_w, &enc3_w, &enc4_w, &fuse_w}) init_conv(*w, rng);
  init_conv(agg_w, rng, 1.0);
  for (auto& w : up_w) init_conv(w, rng);
  init_conv(head_w, rng, 1.0);
  for (auto* p : all())
    if (p->value.rank() == 1) std::fill(p->value.data.begin(), p->value.data.end(), T(0));
  // Foreground is a minority of pixels; start the head near p = 0.1.
  head_b.value[0] = static_cast<T>(-2.2);
}

template <typename T>
std::vector<Parameter<T>*> VisionParams<T>::all() {
  std::vector<Parameter<T>*> out{&enc1_w, &enc1_b, &enc2_w, &enc2_b, &enc3_w, &enc3_b, &enc4_w, &enc4_b,
                                 &agg_w,  &agg_b,  &fuse_w, &fuse_b};
  for (std::size_t s = 0; s < up_w.size(); ++s) {
    out.push_back(&up_w[s]);
    out.push_back(&up_b[s]);
  }
  out.push_back(&head_w);
  out.push_back(&head_b);
  return out;
}

template <typename T>
Tensor<T> image_to_chw(const ImagePatch& image) {
  const int h = image.height(), w = image.width();
  Tensor<T> out({3, h, w});
  for (int i = 0; i < h; ++i)
    for (int j = 0; j < w; ++j)
      for (int c = 0; c < 3; ++c)
        out.at(c, i, j) = static_cast<T>(image.pixels[(static_cast<std::size_t>(i) * w + j) * 3 + c]);
  return out;
}

namespace ag {

template <typename T>
EncodedImage<T> encode_image(Graph<T>& g, Var<T> image_chw, VisionParams<T>& p) {
  const auto& shape = image_chw.shape();
  if (shape.size() != 3 || shape[0] != 3) throw InvalidInput("encode_image: expects a [3,H,W] image");
  if (shape[1] % 16 != 0 || shape[2] % 16 != 0)
    throw InvalidInput("encode_image: image dims must be divisible by 16, got " + shape_string(shape));
  auto s2 = gelu(conv2d(image_chw, g.param(p.enc1_w), g.param(p.enc1_b), 2, 1));
  auto s4 = gelu(conv2d(s2, g.param(p.enc2_w), g.param(p.enc2_b), 2, 1));
  auto s8 = gelu(conv2d(s4, g.param(p.enc3_w), g.param(p.enc3_b), 2, 1));
  auto s16 = gelu(conv2d(s8, g.param(p.enc4_w), g.param(p.enc4_b), 2, 1));
  return {s16, avg_pool2(s8), {s8, s4, s2, image_chw}};
}

template <typename T>
Var<T> aggregate_features(Graph<T>& g, const EncodedImage<T>& enc, VisionParams<T>& p) {
  auto local = conv2d(enc.v_l, g.param(p.agg_w), g.param(p.agg_b), 1, 1);
  if (local.shape() != enc.v_g.shape())
    throw InvalidInput("aggregate_features: Conv(v_l) " + shape_string(local.shape()) + " does not match v_g " +
                       shape_string(enc.v_g.shape()));
  return add(enc.v_g, local);
}

template <typename T>
Var<T> decode_mask(Graph<T>& g, Var<T> v_seg, const std::vector<Var<T>>& skips, Var<T> f_seg, VisionParams<T>& p) {
  const auto& d = p.dims;
  if (f_seg.value().size() != static_cast<std::size_t>(d.d_proj))
    throw InvalidInput("decode_mask: seg embedding must have " + std::to_string(d.d_proj) + " values");
  const int gh = v_seg.shape()[1], gw = v_seg.shape()[2];
  auto x = concat_channels(v_seg, broadcast_grid(f_seg, gh, gw));
  x = gelu(conv2d(x, g.param(p.fuse_w), g.param(p.fuse_b), 1, 1));
  for (std::size_t s = 0; s < p.up_w.size(); ++s) {
    x = upsample2(x);
    if (d.decoder_skips) x = concat_channels(x, skips.at(s));
    x = gelu(conv2d(x, g.param(p.up_w[s]), g.param(p.up_b[s]), 1, 1));
  }
  auto logits = conv2d(x, g.param(p.head_w), g.param(p.head_b), 1, 0);
  return reshape(logits, {logits.shape()[1], logits.shape()[2]});
}

}  // namespace ag

// Value-level entry points run the graph ops without recording gradients
// into `params` (backward is never called on these graphs).

template <typename T>
FeaturePair<T> encode_image(const ImagePatch& image, const VisionParams<T>& params) {
  if (image.height() % 16 != 0 || image.width() % 16 != 0)
    throw InvalidInput("encode_image: image dims must be divisible by 16");
  auto& p = const_cast<VisionParams<T>&>(params);
  ag::Graph<T> g;
  auto enc = ag::encode_image(g, g.constant(image_to_chw<T>(image)), p);
  FeaturePair<T> out{enc.v_g.value(), enc.v_l.value(), {}};
  for (const auto& s : enc.skips) out.skips.push_back(s.value());
  return out;
}

template <typename T>
SegFeatures<T> aggregate_features(const FeaturePair<T>& fp, const VisionParams<T>& params) {
  auto& p = const_cast<VisionParams<T>&>(params);
  ag::Graph<T> g;
  ag::EncodedImage<T> enc{g.constant(fp.v_g), g.constant(fp.v_l), {}};
  return {ag::aggregate_features(g, enc, p).value(), fp.skips};
}

template <typename T>
MaskLogits<T> decode_masks(const SegFeatures<T>& features, const std::vector<Tensor<T>>& f_seg,
                           const VisionParams<T>& params) {
  auto& p = const_cast<VisionParams<T>&>(params);
  MaskLogits<T> out;
  if (f_seg.empty()) return out;
  ag::Graph<T> g;
  auto v_seg = g.constant(features.v_seg);
  std::vector<ag::Var<T>> skips;
  for (const auto& s : features.skips) skips.push_back(g.constant(s));
  for (const auto& e : f_seg) out.push_back(ag::decode_mask(g, v_seg, skips, g.constant(e), p).value());
  return out;
}

#define GROUNDSEG_INSTANTIATE(T)                                                                                 \
  template struct VisionParams<T>;                                                                               \
  template Tensor<T> image_to_chw<T>(const ImagePatch&);                                                         \
  template FeaturePair<T> encode_image<T>(const ImagePatch&, const VisionParams<T>&);                            \
  template SegFeatures<T> aggregate_features<T>(const FeaturePair<T>&, const VisionParams<T>&);                  \
  template MaskLogits<T> decode_masks<T>(const SegFeatures<T>&, const std::vector<Tensor<T>>&,                   \
                                         const VisionParams<T>&);                                                \
  template ag::EncodedImage<T> ag::encode_image<T>(ag::Graph<T>&, ag::Var<T>, VisionParams<T>&);                 \
  template ag::Var<T> ag::aggregate_features<T>(ag::Graph<T>&, const ag::EncodedImage<T>&, VisionParams<T>&);    \
  template ag::Var<T> ag::decode_mask<T>(ag::Graph<T>&, ag::Var<T>, const std::vector<ag::Var<T>>&, ag::Var<T>, \
                                         VisionParams<T>&);

GROUNDSEG_INSTANTIATE(float)
GROUNDSEG_INSTANTIATE(double)

#undef GROUNDSEG_INSTANTIATE

}  // namespace groundseg
