#pragma once

#include <optional>

#include "moelab/moe_layer.hpp"

namespace moelab {

enum class AuxNormalization {
  Paper,   // sum_j f_j * p_j as written
  Switch,  // (n/k) * sum_j f_j * p_j / N, equals 1 under perfect balance
};

struct LossWeights {
  double alpha = 1e-3;
  double beta = 1e-3;
  double gamma = 1e-3;
  double eps_norm = 1e-8;
  double tau_gate = 0.0;
  AuxNormalization aux_normalization = AuxNormalization::Switch;
  bool dynamic_scaling = true;

  void validate() const;
};

/// Dynamic scale factors applied to the orthogonality and variance terms.
struct ScalePair {
  double ortho = 1.0;
  double variance = 1.0;
};

struct LossBreakdown {
  double l_h = 0.0;
  double l_aux = 0.0;
  double l_o = 0.0;
  double l_v = 0.0;
  double scale_o = 1.0;
  double scale_v = 1.0;
  double total = 0.0;

  ScalePair scales() const noexcept { return {scale_o, scale_v}; }
};

inline constexpr double kScaleMomentum = 0.9;
inline constexpr double kScaleFloor = 1e-12;

/// Mean squared error over all N * d_out entries.
double task_loss(const Matrix& outputs, const Matrix& targets);

double aux_loss(const RoutingState& state, AuxNormalization mode);

/// Mean over ordered pairs (j, k), j != k, of active outputs of the same token of
/// || <x_j, x_k> / (<x_k, x_k> + eps) * x_k ||^2. Zero when no pair exists.
double ortho_loss(const ExpertOutputs& outputs, double eps_norm);

/// -(1/n) * sum_i sum_j (s_ij - mean_i s_ij)^2. Not normalized by N.
double variance_loss(const RoutingState& state);

/// Raw dynamic scales |l_aux| / (|l| + 1e-12), smoothed against prev when given.
ScalePair dynamic_scales(double l_aux, double l_o, double l_v,
                         const std::optional<ScalePair>& prev);

LossBreakdown combine(double l_h, double l_aux, double l_o, double l_v, const LossWeights& weights,
                      const std::optional<ScalePair>& prev_scales = std::nullopt);

/// Total with the scales held fixed; no smoothing.
LossBreakdown combine_with_scales(double l_h, double l_aux, double l_o, double l_v,
                                  const LossWeights& weights, ScalePair scales);

}  // namespace moelab
