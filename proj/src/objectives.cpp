#include "groundseg/objectives.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace groundseg {

void LossConfig::validate() const {
  for (double v : {lambda_bce, lambda_dice, penalty, lambda_mask, lambda_txt, lambda_con, dice_smooth})
    if (!(v >= 0.0) || !std::isfinite(v)) throw InvalidInput("LossConfig: weights must be finite and non-negative");
}

template <typename T>
Tensor<T> penalty_weight_map(const CategoryMap& gt, int current_category, const LossConfig& cfg) {
  if (current_category < 1 || current_category > gt.num_categories)
    throw InvalidInput("penalty_weight_map: category " + std::to_string(current_category) + " is not in 1.." +
                       std::to_string(gt.num_categories));
  Tensor<T> w({gt.height, gt.width}, T(1));
  for (std::size_t i = 0; i < gt.labels.size(); ++i) {
    const int c = gt.labels[i];
    if (c != kBackground && c != current_category) w[i] = static_cast<T>(cfg.penalty);
  }
  return w;
}

namespace {

void require_same(std::size_t a, std::size_t b, const char* what) {
  if (a != b) throw InvalidInput(std::string(what) + ": size mismatch");
}

template <typename T>
T softplus_neg_abs(T z) {
  return std::log1p(std::exp(-std::abs(z)));
}

template <typename T>
T stable_sigmoid(T z) {
  return z >= 0 ? T(1) / (T(1) + std::exp(-z)) : std::exp(z) / (T(1) + std::exp(z));
}

template <typename T>
T sign_of(T v) {
  return v > 0 ? T(1) : (v < 0 ? T(-1) : T(0));
}

}  // namespace

template <typename T>
T weighted_bce(std::span<const T> z, std::span<const T> t, std::span<const T> w) {
  require_same(z.size(), t.size(), "weighted_bce");
  require_same(z.size(), w.size(), "weighted_bce");
  if (z.empty()) return T(0);
  T sum = 0;
  for (std::size_t i = 0; i < z.size(); ++i)
    sum += w[i] * (std::max(z[i], T(0)) - z[i] * t[i] + softplus_neg_abs(z[i]));
  return sum / static_cast<T>(z.size());
}

template <typename T>
T weighted_bce_grad(std::span<const T> z, std::span<const T> t, std::span<const T> w, std::span<T> grad) {
  require_same(z.size(), grad.size(), "weighted_bce_grad");
  const T n = static_cast<T>(z.size());
  for (std::size_t i = 0; i < z.size(); ++i) grad[i] = w[i] * (stable_sigmoid(z[i]) - t[i]) / n;
  return weighted_bce(z, t, w);
}

template <typename T>
T weighted_dice(std::span<const T> p, std::span<const T> t, std::span<const T> w, T s) {
  require_same(p.size(), t.size(), "weighted_dice");
  require_same(p.size(), w.size(), "weighted_dice");
  T inter = 0, sp = 0, st = 0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    inter += w[i] * p[i] * t[i];
    sp += w[i] * p[i];
    st += w[i] * t[i];
  }
  return T(1) - (T(2) * inter + s) / (sp + st + s);
}

template <typename T>
T weighted_dice_grad(std::span<const T> p, std::span<const T> t, std::span<const T> w, T s, std::span<T> grad) {
  require_same(p.size(), grad.size(), "weighted_dice_grad");
  T inter = 0, sp = 0, st = 0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    inter += w[i] * p[i] * t[i];
    sp += w[i] * p[i];
    st += w[i] * t[i];
  }
  const T num = T(2) * inter + s, den = sp + st + s;
  for (std::size_t i = 0; i < p.size(); ++i) grad[i] = -(T(2) * w[i] * t[i] * den - num * w[i]) / (den * den);
  return T(1) - num / den;
}

template <typename T>
T consistency_loss(const std::vector<Tensor<T>>& probs) {
  std::vector<Tensor<T>> unused;
  return consistency_loss_grad(probs, unused);
}

// Each unordered neighbour pair appears twice in the directed sum, once from
// each side; values and counts are accumulated that way.
template <typename T>
T consistency_loss_grad(const std::vector<Tensor<T>>& probs, std::vector<Tensor<T>>& grads) {
  if (probs.empty()) throw InvalidInput("consistency_loss: no probability maps");
  const auto& shape = probs.front().shape;
  if (shape.size() != 2) throw InvalidInput("consistency_loss: maps must be [H,W]");
  const int h = shape[0], w = shape[1];
  const std::size_t pairs_per_map = 2u * (static_cast<std::size_t>(h) * (w - 1) + static_cast<std::size_t>(h - 1) * w);
  const std::size_t n = pairs_per_map * probs.size();
  grads.clear();
  T sum = 0;
  for (const auto& p : probs) {
    if (p.shape != shape) throw InvalidInput("consistency_loss: maps differ in shape");
    Tensor<T> gmap(shape);
    for (int i = 0; i < h; ++i)
      for (int j = 0; j < w; ++j) {
        const T v = p.at(i, j);
        if (j + 1 < w) {
          const T d = v - p.at(i, j + 1);
          sum += T(2) * std::abs(d);
          gmap.at(i, j) += T(2) * sign_of(d);
          gmap.at(i, j + 1) -= T(2) * sign_of(d);
        }
        if (i + 1 < h) {
          const T d = v - p.at(i + 1, j);
          sum += T(2) * std::abs(d);
          gmap.at(i, j) += T(2) * sign_of(d);
          gmap.at(i + 1, j) -= T(2) * sign_of(d);
        }
      }
    grads.push_back(std::move(gmap));
  }
  if (n == 0) {
    for (auto& g : grads) std::fill(g.data.begin(), g.data.end(), T(0));
    return T(0);
  }
  for (auto& g : grads)
    for (auto& v : g.data) v /= static_cast<T>(n);
  return sum / static_cast<T>(n);
}

template <typename T>
T text_loss(const Tensor<T>& logits, const std::vector<int>& ids, int begin, int end) {
  Tensor<T> unused(logits.shape);
  return text_loss_grad(logits, ids, begin, end, unused);
}

template <typename T>
T text_loss_grad(const Tensor<T>& logits, const std::vector<int>& ids, int begin, int end, Tensor<T>& grad) {
  if (logits.rank() != 2) throw InvalidInput("text_loss: logits must be [L,V]");
  const int rows = logits.dim(0), v = logits.dim(1);
  if (begin >= end) throw InvalidInput("text_loss: empty loss region");
  if (begin < 1 || end > rows || static_cast<int>(ids.size()) < end)
    throw InvalidInput("text_loss: loss region out of range");
  grad = Tensor<T>(logits.shape);
  const T count = static_cast<T>(end - begin);
  T total = 0;
  for (int t = begin; t < end; ++t) {
    const int r = t - 1;
    const int target = ids[static_cast<std::size_t>(t)];
    if (target < 0 || target >= v) throw InvalidInput("text_loss: target id out of range");
    T mx = logits.at(r, 0);
    for (int k = 1; k < v; ++k) mx = std::max(mx, logits.at(r, k));
    T z = 0;
    for (int k = 0; k < v; ++k) z += std::exp(logits.at(r, k) - mx);
    const T lse = mx + std::log(z);
    total += lse - logits.at(r, target);
    for (int k = 0; k < v; ++k) grad.at(r, k) = std::exp(logits.at(r, k) - lse) / count;
    grad.at(r, target) -= T(1) / count;
  }
  return total / count;
}

template <typename T>
T mask_loss(const std::vector<Tensor<T>>& logits, const std::vector<Tensor<T>>& targets,
            const std::vector<Tensor<T>>& weights, const LossConfig& cfg) {
  if (logits.size() != targets.size() || logits.size() != weights.size())
    throw InvalidInput("mask_loss: list lengths differ");
  if (logits.empty()) return T(0);
  T sum = 0;
  for (std::size_t k = 0; k < logits.size(); ++k) {
    std::vector<T> p(logits[k].size());
    for (std::size_t i = 0; i < p.size(); ++i) p[i] = stable_sigmoid(logits[k][i]);
    sum += static_cast<T>(cfg.lambda_bce) * weighted_bce<T>(logits[k].span(), targets[k].span(), weights[k].span()) +
           static_cast<T>(cfg.lambda_dice) *
               weighted_dice<T>(p, targets[k].span(), weights[k].span(), static_cast<T>(cfg.dice_smooth));
  }
  return sum / static_cast<T>(logits.size());
}

double total_loss(double mask, double txt, double con, const LossConfig& cfg) {
  return cfg.lambda_mask * mask + cfg.lambda_txt * txt + cfg.lambda_con * con;
}

// ---------------------------------------------------------------------------
// Autograd wrappers

namespace ag {

template <typename T>
Var<T> weighted_bce(Var<T> logits, const Tensor<T>& target, const Tensor<T>& weight) {
  const T v = groundseg::weighted_bce<T>(logits.value().span(), target.span(), weight.span());
  return logits.graph->record(Tensor<T>({1}, v), {logits}, [logits, target, weight](Graph<T>& g, int self) {
    const T go = g.grad(self)[0];
    std::vector<T> d(target.size());
    groundseg::weighted_bce_grad<T>(logits.value().span(), target.span(), weight.span(), d);
    Tensor<T>& gz = g.grad(logits.id);
    for (std::size_t i = 0; i < d.size(); ++i) gz[i] += go * d[i];
  });
}

template <typename T>
Var<T> weighted_dice(Var<T> probs, const Tensor<T>& target, const Tensor<T>& weight, T smooth) {
  const T v = groundseg::weighted_dice<T>(probs.value().span(), target.span(), weight.span(), smooth);
  return probs.graph->record(Tensor<T>({1}, v), {probs}, [probs, target, weight, smooth](Graph<T>& g, int self) {
    const T go = g.grad(self)[0];
    std::vector<T> d(target.size());
    groundseg::weighted_dice_grad<T>(probs.value().span(), target.span(), weight.span(), smooth, d);
    Tensor<T>& gp = g.grad(probs.id);
    for (std::size_t i = 0; i < d.size(); ++i) gp[i] += go * d[i];
  });
}

template <typename T>
Var<T> consistency_loss(const std::vector<Var<T>>& probs) {
  std::vector<Tensor<T>> maps;
  for (const auto& p : probs) maps.push_back(p.value());
  const T v = groundseg::consistency_loss<T>(maps);
  return probs.front().graph->record(Tensor<T>({1}, v), probs, [probs](Graph<T>& g, int self) {
    const T go = g.grad(self)[0];
    std::vector<Tensor<T>> maps, grads;
    for (const auto& p : probs) maps.push_back(p.value());
    groundseg::consistency_loss_grad<T>(maps, grads);
    for (std::size_t k = 0; k < probs.size(); ++k) {
      if (!g.needs_grad(probs[k].id)) continue;
      Tensor<T>& gp = g.grad(probs[k].id);
      for (std::size_t i = 0; i < gp.size(); ++i) gp[i] += go * grads[k][i];
    }
  });
}

template <typename T>
Var<T> text_loss(Var<T> logits, const std::vector<int>& ids, int begin, int end) {
  const T v = groundseg::text_loss<T>(logits.value(), ids, begin, end);
  return logits.graph->record(Tensor<T>({1}, v), {logits}, [logits, ids, begin, end](Graph<T>& g, int self) {
    const T go = g.grad(self)[0];
    Tensor<T> d;
    groundseg::text_loss_grad<T>(logits.value(), ids, begin, end, d);
    Tensor<T>& gl = g.grad(logits.id);
    // Only rows begin-1 .. end-2 carry gradient.
    const int v = logits.value().dim(1);
    for (int r = begin - 1; r < end - 1; ++r)
      for (int k = 0; k < v; ++k) gl.at(r, k) += go * d.at(r, k);
  });
}

template <typename T>
std::pair<Var<T>, Var<T>> mask_and_consistency(Graph<T>& g, const std::vector<Var<T>>& logits,
                                               const std::vector<Tensor<T>>& targets,
                                               const std::vector<Tensor<T>>& weights, const LossConfig& cfg) {
  if (logits.size() != targets.size() || logits.size() != weights.size())
    throw InvalidInput("mask_and_consistency: list lengths differ");
  if (logits.empty()) return {g.constant(Tensor<T>({1}, T(0))), g.constant(Tensor<T>({1}, T(0)))};
  std::vector<Var<T>> terms, probs;
  std::vector<T> coeffs;
  const T n = static_cast<T>(logits.size());
  for (std::size_t k = 0; k < logits.size(); ++k) {
    terms.push_back(weighted_bce(logits[k], targets[k], weights[k]));
    coeffs.push_back(static_cast<T>(cfg.lambda_bce) / n);
    auto p = sigmoid(logits[k]);
    probs.push_back(p);
    terms.push_back(weighted_dice(p, targets[k], weights[k], static_cast<T>(cfg.dice_smooth)));
    coeffs.push_back(static_cast<T>(cfg.lambda_dice) / n);
  }
  return {weighted_sum(terms, coeffs), consistency_loss(probs)};
}

}  // namespace ag

// ---------------------------------------------------------------------------

GradCheckReport grad_check(const std::vector<Parameter<double>*>& params, const std::function<double()>& loss_and_grad,
                           const std::function<double()>& loss, double step) {
  std::size_t total = 0;
  for (const auto* p : params) total += p->value.size();
  if (total > kGradCheckMaxScalars)
    throw InvalidInput("grad_check: fixture has " + std::to_string(total) + " scalars, limit is " +
                       std::to_string(kGradCheckMaxScalars));
  GradCheckReport report;
  const double base = loss_and_grad();
  if (!std::isfinite(base)) {
    report.finite = false;
    report.message = "non-finite loss at fixture";
    report.max_rel_error = std::numeric_limits<double>::infinity();
    return report;
  }
  std::vector<Tensor<double>> analytic;
  for (const auto* p : params) analytic.push_back(p->grad);

  for (std::size_t k = 0; k < params.size(); ++k) {
    auto& value = params[k]->value;
    for (std::size_t i = 0; i < value.size(); ++i) {
      const double orig = value[i];
      value[i] = orig + step;
      const double up = loss();
      value[i] = orig - step;
      const double down = loss();
      value[i] = orig;
      if (!std::isfinite(up) || !std::isfinite(down)) {
        report.finite = false;
        report.message = "non-finite loss perturbing " + params[k]->name + "[" + std::to_string(i) + "]";
        report.max_rel_error = std::numeric_limits<double>::infinity();
        return report;
      }
      const double fd = (up - down) / (2.0 * step);
      const double g = analytic[k][i];
      const double rel = std::abs(g - fd) / std::max({std::abs(g), std::abs(fd), 1e-8});
      ++report.checked;
      if (rel > report.max_rel_error) {
        report.max_rel_error = rel;
        report.worst_param = params[k]->name;
        report.worst_index = i;
      }
    }
  }
  return report;
}

#define GROUNDSEG_INSTANTIATE(T)                                                                              \
  template Tensor<T> penalty_weight_map<T>(const CategoryMap&, int, const LossConfig&);                       \
  template T weighted_bce<T>(std::span<const T>, std::span<const T>, std::span<const T>);                     \
  template T weighted_bce_grad<T>(std::span<const T>, std::span<const T>, std::span<const T>, std::span<T>);  \
  template T weighted_dice<T>(std::span<const T>, std::span<const T>, std::span<const T>, T);                 \
  template T weighted_dice_grad<T>(std::span<const T>, std::span<const T>, std::span<const T>, T,             \
                                   std::span<T>);                                                             \
  template T consistency_loss<T>(const std::vector<Tensor<T>>&);                                              \
  template T consistency_loss_grad<T>(const std::vector<Tensor<T>>&, std::vector<Tensor<T>>&);                \
  template T text_loss<T>(const Tensor<T>&, const std::vector<int>&, int, int);                               \
  template T text_loss_grad<T>(const Tensor<T>&, const std::vector<int>&, int, int, Tensor<T>&);              \
  template T mask_loss<T>(const std::vector<Tensor<T>>&, const std::vector<Tensor<T>>&,                       \
                          const std::vector<Tensor<T>>&, const LossConfig&);                                  \
  template ag::Var<T> ag::weighted_bce<T>(ag::Var<T>, const Tensor<T>&, const Tensor<T>&);                    \
  template ag::Var<T> ag::weighted_dice<T>(ag::Var<T>, const Tensor<T>&, const Tensor<T>&, T);                \
  template ag::Var<T> ag::consistency_loss<T>(const std::vector<ag::Var<T>>&);                                \
  template ag::Var<T> ag::text_loss<T>(ag::Var<T>, const std::vector<int>&, int, int);                        \
  template std::pair<ag::Var<T>, ag::Var<T>> ag::mask_and_consistency<T>(                                     \
      ag::Graph<T>&, const std::vector<ag::Var<T>>&, const std::vector<Tensor<T>>&,                           \
      const std::vector<Tensor<T>>&, const LossConfig&);

GROUNDSEG_INSTANTIATE(float)
GROUNDSEG_INSTANTIATE(double)

#undef GROUNDSEG_INSTANTIATE

}  // namespace groundseg
