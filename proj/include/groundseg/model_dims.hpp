#pragma once

#include <vector>

namespace groundseg {

/// Sizes shared by the vision and language halves of the model.
struct ModelDims {
  int image_size = 64;
  // Encoder: 3 -> enc1 (stride 2) -> enc2 (stride 4) -> c_local (stride 8) -> c_global (stride 16).
  int enc1 = 16;
  int enc2 = 32;
  int c_local = 32;
  int c_global = 64;
  /// Output channels of the four x2 decoder stages.
  std::vector<int> decoder_widths{32, 16, 8, 8};
  /// Concatenate same-resolution encoder activations into each decoder stage.
  bool decoder_skips = false;
  /// Width of seg-token embeddings handed to the decoder.
  int d_proj = 32;

  int d_model = 128;
  int n_heads = 4;
  int n_layers = 2;
  int d_ff = 512;
  int vocab_size = 512;
  int context = 160;

  int grid() const { return image_size / 16; }
  int image_tokens() const { return grid() * grid(); }
  void validate() const;

  friend bool operator==(const ModelDims&, const ModelDims&) = default;
};

}  // namespace groundseg
