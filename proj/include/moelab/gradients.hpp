#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <vector>

#include "moelab/losses.hpp"
#include "moelab/moe_layer.hpp"

namespace moelab {

/// Gradients w.r.t. the router and every expert matrix, shaped like MoeParams.
struct GradientBundle {
  Matrix d_router;
  std::vector<Matrix> d_experts;

  static GradientBundle zeros_like(const MoeParams& params);
  double norm() const;
  double expert_norm(std::size_t j) const { return frobenius_norm(d_experts.at(j)); }
  double router_norm() const { return frobenius_norm(d_router); }
  /// this += scale * other
  void add_scaled(double scale, const GradientBundle& other);
};

/// Unweighted gradient of each loss term.
struct TermGradients {
  GradientBundle task;
  GradientBundle aux;
  GradientBundle ortho;
  GradientBundle variance;
};

struct ForwardBackwardResult {
  LossBreakdown losses;
  GradientBundle grads;
  TermGradients terms;
  RoutingState state;
  ExpertOutputs outputs;
};

/// Exact gradient of LossBreakdown::total. The top-k support is frozen at the
/// routed selection, f_j is piecewise constant and the dynamic scales are
/// constants. grads == task + alpha*aux + beta*scale_o*ortho + gamma*scale_v*variance.
ForwardBackwardResult forward_backward(const MoeParams& params, const Matrix& tokens,
                                       const Matrix& targets, const LossWeights& weights,
                                       const std::optional<ScalePair>& prev_scales = std::nullopt);

/// Loss breakdown with the support and scales fixed, the function that
/// forward_backward differentiates.
LossBreakdown evaluate_frozen(const MoeParams& params, const Matrix& tokens, const Matrix& targets,
                              const LossWeights& weights, const Support& support,
                              ScalePair scales);

/// Central difference of a scalar function of one variable.
double central_difference(const std::function<double(double)>& f, double x, double h);

/// Central differences of an arbitrary scalar function of the parameters.
GradientBundle fd_gradient_of(const std::function<double(const MoeParams&)>& loss,
                              const MoeParams& params, double h);

/// Finite-difference oracle for forward_backward: the support and scales are
/// taken from the unperturbed point and held fixed.
GradientBundle fd_gradient(const MoeParams& params, const Matrix& tokens, const Matrix& targets,
                           const LossWeights& weights, double h,
                           const std::optional<ScalePair>& prev_scales = std::nullopt);

/// Entries smaller than this fraction of the largest gradient entry are
/// compared against that floor instead of their own magnitude.
inline constexpr double kGradientErrorFloor = 1e-3;
inline constexpr double kGradientAbsoluteFloor = 1e-12;

struct EntryError {
  double relative = 0.0;
  double a = 0.0;
  double b = 0.0;
};

/// Worst entry of |a - b| / max(|a|, |b|, kGradientErrorFloor * max entry).
EntryError worst_entry_error(const GradientBundle& a, const GradientBundle& b);

double max_relative_error(const GradientBundle& a, const GradientBundle& b);

struct TermNorms {
  double router = 0.0;
  std::vector<double> experts;
};

/// Per-term gradient norms. The zero claims (L_aux and L_v do not reach the
/// experts, L_o does not reach the router) are checked both on the analytic
/// gradients and on finite differences of the isolated terms.
struct AttributionReport {
  TermNorms task;
  TermNorms aux;
  TermNorms ortho;
  TermNorms variance;
  double fd_aux_expert_norm = 0.0;
  double fd_variance_expert_norm = 0.0;
  double fd_ortho_router_norm = 0.0;

  bool zeros_hold() const;
};

AttributionReport attribute_gradients(const MoeParams& params, const Matrix& tokens,
                                      const Matrix& targets, const LossWeights& weights,
                                      double h = 1e-4);

/// dL_v/ds from exact differentiation (coefficient 2/n) next to the
/// form that drops the cross terms (coefficient 2(N-1)/(nN)).
struct VarianceGradientProbe {
  Matrix exact;
  Matrix no_cross;
  double max_abs_divergence = 0.0;
  double coefficient_ratio = 0.0;  // no_cross / exact = (N-1)/N
};

VarianceGradientProbe variance_gradient_probe(const RoutingState& state);

}  // namespace moelab

namespace moelab {

struct GradcheckInstance {
  std::uint64_t seed = 0;
  std::size_t N = 0, n = 0, k = 0, d = 0, d_out = 0;
  LossWeights weights;
  std::optional<ScalePair> prev_scales;
  double max_rel_err = 0.0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
};

struct GradcheckReport {
  std::vector<GradcheckInstance> instances;
  double max_rel_err = 0.0;
  std::uint64_t worst_seed = 0;

  bool passed(double tolerance) const noexcept { return max_rel_err <= tolerance; }
};

inline constexpr double kGradcheckTolerance = 1e-5;
inline constexpr double kGradcheckStep = 1e-4;

/// Random instances (N <= 16, n <= 6, k <= 3, d <= 8, 2 <= d_out <= 4) cycling through every
/// on/off combination of alpha, beta, gamma and dynamic scaling, both aux
/// normalizations, with and without smoothed previous scales.
GradcheckReport run_gradcheck_suite(std::uint64_t seed, double h = kGradcheckStep,
                                    std::size_t instances = 20);

}  // namespace moelab
