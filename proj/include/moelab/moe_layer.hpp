#pragma once

#include <cstddef>
#include <vector>

#include "moelab/core_math.hpp"

namespace moelab {

/// Router (d x n) plus n linear experts (each d x d_out); k experts per token.
struct MoeParams {
  Matrix router;
  std::vector<Matrix> experts;
  std::size_t k = 1;

  std::size_t input_dim() const noexcept { return router.rows(); }
  std::size_t num_experts() const noexcept { return router.cols(); }
  std::size_t output_dim() const noexcept { return experts.empty() ? 0 : experts.front().cols(); }

  /// Throws DimensionError unless 1 <= k <= n and all experts are d x d_out.
  void validate() const;
};

/// Per-token top-k expert sets, each listed in descending probability order.
using Support = std::vector<std::vector<std::size_t>>;

struct RoutingState {
  Matrix logits;  // N x n
  Matrix probs;   // N x n, row softmax of logits
  Support selected;
  Matrix scores;  // N x n, probs renormalized over the selected set, zero elsewhere
  std::vector<double> loads_f;  // fraction of tokens selecting each expert
  std::vector<double> loads_p;  // column sums of scores

  std::size_t num_tokens() const noexcept { return scores.rows(); }
  std::size_t num_experts() const noexcept { return scores.cols(); }
};

/// Output of one selected expert for one token.
struct SelectedOutput {
  std::size_t expert = 0;
  double score = 0.0;
  /// score > tau_gate; only active outputs take part in the orthogonality loss.
  bool active = true;
  std::vector<double> value;
};

struct ExpertOutputs {
  std::vector<std::vector<SelectedOutput>> per_token;
  Matrix combined;  // N x d_out
};

/// Top-k routing. Ties in probability go to the lower expert index.
RoutingState route(const MoeParams& params, const Matrix& tokens);

/// Routing with a caller-supplied top-k support instead of the argmax one.
/// Used to differentiate with the selection frozen.
RoutingState route_with_support(const MoeParams& params, const Matrix& tokens,
                                const Support& support);

/// Evaluates only the selected experts and mixes them by score.
ExpertOutputs forward(const MoeParams& params, const Matrix& tokens, const RoutingState& state,
                      double tau_gate = 0.0);

}  // namespace moelab
