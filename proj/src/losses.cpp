#include "moelab/losses.hpp"

#include <cmath>
#include <stdexcept>

namespace moelab {

void LossWeights::validate() const {
  if (!(alpha >= 0.0) || !(beta >= 0.0) || !(gamma >= 0.0))
    throw std::invalid_argument("LossWeights: alpha, beta, gamma must be >= 0");
  if (!(eps_norm > 0.0)) throw std::invalid_argument("LossWeights: eps_norm must be > 0");
  if (!(tau_gate >= 0.0)) throw std::invalid_argument("LossWeights: tau_gate must be >= 0");
}

double task_loss(const Matrix& outputs, const Matrix& targets) {
  if (outputs.rows() != targets.rows() || outputs.cols() != targets.cols())
    throw DimensionError("task_loss: shape mismatch");
  if (outputs.empty()) return 0.0;
  double s = 0.0;
  auto a = outputs.data();
  auto b = targets.data();
  for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return s / static_cast<double>(a.size());
}

double aux_loss(const RoutingState& state, AuxNormalization mode) {
  const std::size_t n = state.num_experts();
  double s = 0.0;
  for (std::size_t j = 0; j < n; ++j) s += state.loads_f[j] * state.loads_p[j];
  if (mode == AuxNormalization::Paper) return s;
  const double k = state.selected.empty() ? 1.0 : static_cast<double>(state.selected[0].size());
  return static_cast<double>(n) / k * s / static_cast<double>(state.num_tokens());
}

double ortho_loss(const ExpertOutputs& outputs, double eps_norm) {
  double sum = 0.0;
  std::size_t terms = 0;
  for (const auto& token : outputs.per_token) {
    for (const auto& xj : token) {
      if (!xj.active) continue;
      for (const auto& xk : token) {
        if (!xk.active || &xk == &xj) continue;
        const double q = squared_norm(xk.value);
        const double c = dot(xj.value, xk.value) / (q + eps_norm);
        sum += c * c * q;
        ++terms;
      }
    }
  }
  return terms == 0 ? 0.0 : sum / static_cast<double>(terms);
}

double variance_loss(const RoutingState& state) {
  const std::size_t N = state.num_tokens();
  const std::size_t n = state.num_experts();
  if (N == 0 || n == 0) return 0.0;
  double total = 0.0;
  for (std::size_t j = 0; j < n; ++j) {
    double mean = 0.0;
    for (std::size_t i = 0; i < N; ++i) mean += state.scores(i, j);
    mean /= static_cast<double>(N);
    for (std::size_t i = 0; i < N; ++i) {
      const double dev = state.scores(i, j) - mean;
      total += dev * dev;
    }
  }
  return -total / static_cast<double>(n);
}

ScalePair dynamic_scales(double l_aux, double l_o, double l_v,
                         const std::optional<ScalePair>& prev) {
  ScalePair raw{std::abs(l_aux) / (std::abs(l_o) + kScaleFloor),
                std::abs(l_aux) / (std::abs(l_v) + kScaleFloor)};
  if (!prev) return raw;
  return {kScaleMomentum * prev->ortho + (1.0 - kScaleMomentum) * raw.ortho,
          kScaleMomentum * prev->variance + (1.0 - kScaleMomentum) * raw.variance};
}

LossBreakdown combine_with_scales(double l_h, double l_aux, double l_o, double l_v,
                                  const LossWeights& weights, ScalePair scales) {
  for (double v : {l_h, l_aux, l_o, l_v, scales.ortho, scales.variance})
    if (!std::isfinite(v)) throw NonFiniteError("combine: non-finite loss term");
  LossBreakdown b{l_h, l_aux, l_o, l_v, scales.ortho, scales.variance, 0.0};
  b.total = l_h + weights.alpha * l_aux + weights.beta * scales.ortho * l_o +
            weights.gamma * scales.variance * l_v;
  return b;
}

LossBreakdown combine(double l_h, double l_aux, double l_o, double l_v, const LossWeights& weights,
                      const std::optional<ScalePair>& prev_scales) {
  for (double v : {l_h, l_aux, l_o, l_v})
    if (!std::isfinite(v)) throw NonFiniteError("combine: non-finite loss term");
  const ScalePair scales =
      weights.dynamic_scaling ? dynamic_scales(l_aux, l_o, l_v, prev_scales) : ScalePair{};
  return combine_with_scales(l_h, l_aux, l_o, l_v, weights, scales);
}

}  // namespace moelab
