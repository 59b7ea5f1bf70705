#pragma once

#include <functional>
#include <span>
#include <string>
#include <vector>

#include "groundseg/autograd.hpp"
#include "groundseg/core_data.hpp"
#include "groundseg/tensor.hpp"

namespace groundseg {

struct LossConfig {
  double lambda_bce = 2.0;   // lambda_1
  double lambda_dice = 0.5;  // lambda_2
  /// Weight on pixels of a different foreground category than the token's.
  double penalty = 1.5;
  double lambda_mask = 1.0;
  double lambda_txt = 1.0;
  double lambda_con = 1.0;
  double dice_smooth = 1e-6;

  void validate() const;
  friend bool operator==(const LossConfig&, const LossConfig&) = default;
};

/// [H,W] map: `cfg.penalty` where gt holds a foreground category other than
/// `current_category`, 1 elsewhere.
template <typename T>
Tensor<T> penalty_weight_map(const CategoryMap& gt, int current_category, const LossConfig& cfg);

// Value kernels. Each *_grad variant returns the same value and writes
// d(loss)/d(input) into `grad` (overwriting).

/// Mean over pixels of w * BCE(sigmoid(z), t), evaluated from logits.
template <typename T>
T weighted_bce(std::span<const T> logits, std::span<const T> target, std::span<const T> weight);
template <typename T>
T weighted_bce_grad(std::span<const T> logits, std::span<const T> target, std::span<const T> weight,
                    std::span<T> grad);

/// 1 - (2 sum(w p t) + s) / (sum(w p) + sum(w t) + s).
template <typename T>
T weighted_dice(std::span<const T> probs, std::span<const T> target, std::span<const T> weight, T smooth);
template <typename T>
T weighted_dice_grad(std::span<const T> probs, std::span<const T> target, std::span<const T> weight, T smooth,
                     std::span<T> grad);

/// Mean |p_a - p_b| over every directed 4-neighbour pair of every map. All
/// maps must share one [H,W] shape; 0 when there are no pairs.
template <typename T>
T consistency_loss(const std::vector<Tensor<T>>& probs);
template <typename T>
T consistency_loss_grad(const std::vector<Tensor<T>>& probs, std::vector<Tensor<T>>& grads);

/// Mean next-token cross entropy: position t in [begin,end) is predicted by
/// logits row t-1. Requires 1 <= begin < end <= rows.
template <typename T>
T text_loss(const Tensor<T>& logits, const std::vector<int>& target_ids, int begin, int end);
template <typename T>
T text_loss_grad(const Tensor<T>& logits, const std::vector<int>& target_ids, int begin, int end, Tensor<T>& grad);

/// Mean over tokens of lambda_1 * BCE + lambda_2 * Dice(sigmoid(logits)); 0 for no tokens.
template <typename T>
T mask_loss(const std::vector<Tensor<T>>& logits, const std::vector<Tensor<T>>& targets,
            const std::vector<Tensor<T>>& weights, const LossConfig& cfg);

double total_loss(double mask, double txt, double con, const LossConfig& cfg);

namespace ag {

template <typename T>
Var<T> weighted_bce(Var<T> logits, const Tensor<T>& target, const Tensor<T>& weight);
template <typename T>
Var<T> weighted_dice(Var<T> probs, const Tensor<T>& target, const Tensor<T>& weight, T smooth);
template <typename T>
Var<T> consistency_loss(const std::vector<Var<T>>& probs);
template <typename T>
Var<T> text_loss(Var<T> logits, const std::vector<int>& target_ids, int begin, int end);

/// Builds L_mask and L_con for one example from per-token logit maps.
/// Returns {mask, con}; both are scalar constants 0 when `logits` is empty.
template <typename T>
std::pair<Var<T>, Var<T>> mask_and_consistency(Graph<T>& g, const std::vector<Var<T>>& logits,
                                               const std::vector<Tensor<T>>& targets,
                                               const std::vector<Tensor<T>>& weights, const LossConfig& cfg);

}  // namespace ag

// ---------------------------------------------------------------------------
// Gradient verification

struct GradCheckReport {
  std::string fixture;
  double max_rel_error = 0.0;
  std::size_t checked = 0;
  std::string worst_param;
  std::size_t worst_index = 0;
  bool finite = true;
  std::string message;
};

/// `loss_and_grad` must zero and fill the parameters' grads and return the
/// loss; `loss` evaluates the loss only. Every scalar of every parameter is
/// perturbed; relative error uses max(|g|, |g_fd|, 1e-8) as denominator.
GradCheckReport grad_check(const std::vector<Parameter<double>*>& params, const std::function<double()>& loss_and_grad,
                           const std::function<double()>& loss, double step = 1e-4);

inline constexpr std::size_t kGradCheckMaxScalars = 2000;

}  // namespace groundseg
