#pragma once

#include <vector>

#include "groundseg/autograd.hpp"
#include "groundseg/core_data.hpp"
#include "groundseg/model_dims.hpp"
#include "groundseg/rng.hpp"

namespace groundseg {

template <typename T>
struct VisionParams {
  ModelDims dims;
  Parameter<T> enc1_w, enc1_b, enc2_w, enc2_b, enc3_w, enc3_b, enc4_w, enc4_b;
  Parameter<T> agg_w, agg_b;  // c_local -> c_global, 3x3
  Parameter<T> fuse_w, fuse_b;  // c_global + d_proj -> c_global, 3x3
  std::vector<Parameter<T>> up_w, up_b;
  Parameter<T> head_w, head_b;  // 1x1 -> one logit channel

  /// Allocates every array for `dims` with zero values.
  explicit VisionParams(const ModelDims& dims);
  VisionParams() : VisionParams(ModelDims{}) {}

  void init(Rng& rng);
  std::vector<Parameter<T>*> all();
};

/// v_g and v_l at stride 16. `skips` holds the decoder's same-resolution
/// inputs from coarse to fine: stride-8, stride-4, stride-2 activations and
/// the image itself.
template <typename T>
struct FeaturePair {
  Tensor<T> v_g;  // [c_global, H/16, W/16]
  Tensor<T> v_l;  // [c_local, H/16, W/16]
  std::vector<Tensor<T>> skips;
};

template <typename T>
struct SegFeatures {
  Tensor<T> v_seg;  // [c_global, H/16, W/16]
  std::vector<Tensor<T>> skips;
};

/// One [H,W] logit map per seg token, in token order.
template <typename T>
using MaskLogits = std::vector<Tensor<T>>;

/// [H,W,3] pixels -> [3,H,W].
template <typename T>
Tensor<T> image_to_chw(const ImagePatch& image);

template <typename T>
FeaturePair<T> encode_image(const ImagePatch& image, const VisionParams<T>& params);
/// v_seg = v_g + Conv(v_l).
template <typename T>
SegFeatures<T> aggregate_features(const FeaturePair<T>& fp, const VisionParams<T>& params);
template <typename T>
MaskLogits<T> decode_masks(const SegFeatures<T>& features, const std::vector<Tensor<T>>& f_seg,
                           const VisionParams<T>& params);

namespace ag {

template <typename T>
struct EncodedImage {
  Var<T> v_g;
  Var<T> v_l;
  std::vector<Var<T>> skips;
};

template <typename T>
EncodedImage<T> encode_image(Graph<T>& g, Var<T> image_chw, VisionParams<T>& params);
template <typename T>
Var<T> aggregate_features(Graph<T>& g, const EncodedImage<T>& enc, VisionParams<T>& params);
/// Decodes one [H,W] logit map for a single [d_proj] seg embedding.
template <typename T>
Var<T> decode_mask(Graph<T>& g, Var<T> v_seg, const std::vector<Var<T>>& skips, Var<T> f_seg,
                   VisionParams<T>& params);

}  // namespace ag

}  // namespace groundseg
