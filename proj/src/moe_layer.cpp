#include "moelab/moe_layer.hpp"

#include <algorithm>
#include <numeric>
#include <string>

namespace moelab {

void MoeParams::validate() const {
  const std::size_t n = num_experts();
  if (n == 0) throw DimensionError("MoeParams: need at least one expert");
  if (k < 1 || k > n)
    throw DimensionError("MoeParams: k=" + std::to_string(k) + " outside [1, " +
                         std::to_string(n) + "]");
  if (experts.size() != n)
    throw DimensionError("MoeParams: router has " + std::to_string(n) + " columns but " +
                         std::to_string(experts.size()) + " experts were given");
  for (const auto& e : experts)
    if (e.rows() != input_dim() || e.cols() != output_dim())
      throw DimensionError("MoeParams: experts must all be d x d_out");
}

namespace {

Support top_k_support(const Matrix& probs, std::size_t k) {
  const std::size_t n = probs.cols();
  Support support(probs.rows());
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < probs.rows(); ++i) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    auto row = probs.row(i);
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return row[a] > row[b]; });
    support[i].assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k));
  }
  return support;
}

RoutingState finish_routing(Matrix logits, Matrix probs, Support support, std::size_t n) {
  const std::size_t N = probs.rows();
  RoutingState st;
  st.scores = Matrix(N, n);
  st.loads_f.assign(n, 0.0);
  st.loads_p.assign(n, 0.0);
  for (std::size_t i = 0; i < N; ++i) {
    double z = 0.0;
    for (std::size_t j : support[i]) z += probs(i, j);
    for (std::size_t j : support[i]) {
      st.scores(i, j) = probs(i, j) / z;
      st.loads_f[j] += 1.0;
    }
  }
  for (std::size_t j = 0; j < n; ++j) {
    st.loads_f[j] /= static_cast<double>(N);
    for (std::size_t i = 0; i < N; ++i) st.loads_p[j] += st.scores(i, j);
  }
  st.scores.require_finite("routing scores");
  st.logits = std::move(logits);
  st.probs = std::move(probs);
  st.selected = std::move(support);
  return st;
}

std::pair<Matrix, Matrix> logits_and_probs(const MoeParams& params, const Matrix& tokens) {
  params.validate();
  if (tokens.cols() != params.input_dim())
    throw DimensionError("route: tokens have " + std::to_string(tokens.cols()) +
                         " features, router expects " + std::to_string(params.input_dim()));
  Matrix logits = matmul(tokens, params.router);
  Matrix probs(logits.rows(), logits.cols());
  for (std::size_t i = 0; i < logits.rows(); ++i) {
    auto p = softmax_row(logits.row(i));
    std::copy(p.begin(), p.end(), probs.row(i).begin());
  }
  return {std::move(logits), std::move(probs)};
}

}  // namespace

RoutingState route(const MoeParams& params, const Matrix& tokens) {
  auto [logits, probs] = logits_and_probs(params, tokens);
  Support support = top_k_support(probs, params.k);
  return finish_routing(std::move(logits), std::move(probs), std::move(support),
                        params.num_experts());
}

RoutingState route_with_support(const MoeParams& params, const Matrix& tokens,
                                const Support& support) {
  auto [logits, probs] = logits_and_probs(params, tokens);
  if (support.size() != tokens.rows()) throw DimensionError("route_with_support: support rows");
  for (const auto& row : support) {
    if (row.size() != params.k) throw DimensionError("route_with_support: support size != k");
    for (std::size_t j : row)
      if (j >= params.num_experts()) throw DimensionError("route_with_support: expert index");
  }
  return finish_routing(std::move(logits), std::move(probs), support, params.num_experts());
}

ExpertOutputs forward(const MoeParams& params, const Matrix& tokens, const RoutingState& state,
                      double tau_gate) {
  params.validate();
  const std::size_t N = tokens.rows();
  const std::size_t d_out = params.output_dim();
  if (tokens.cols() != params.input_dim() || state.num_tokens() != N ||
      state.num_experts() != params.num_experts())
    throw DimensionError("forward: tokens/state do not match params");

  ExpertOutputs out;
  out.per_token.resize(N);
  out.combined = Matrix(N, d_out);
  for (std::size_t i = 0; i < N; ++i) {
    auto x = tokens.row(i);
    auto y = out.combined.row(i);
    for (std::size_t j : state.selected[i]) {
      const Matrix& w = params.experts[j];
      SelectedOutput so{j, state.scores(i, j), state.scores(i, j) > tau_gate,
                        std::vector<double>(d_out, 0.0)};
      for (std::size_t p = 0; p < x.size(); ++p) {
        if (x[p] == 0.0) continue;
        auto wr = w.row(p);
        for (std::size_t c = 0; c < d_out; ++c) so.value[c] += x[p] * wr[c];
      }
      for (std::size_t c = 0; c < d_out; ++c) y[c] += so.score * so.value[c];
      out.per_token[i].push_back(std::move(so));
    }
  }
  out.combined.require_finite("expert outputs");
  return out;
}

}  // namespace moelab
