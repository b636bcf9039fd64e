#include "moelab/gradients.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace moelab {

GradientBundle GradientBundle::zeros_like(const MoeParams& params) {
  GradientBundle g;
  g.d_router = Matrix(params.router.rows(), params.router.cols());
  g.d_experts.reserve(params.experts.size());
  for (const auto& e : params.experts) g.d_experts.emplace_back(e.rows(), e.cols());
  return g;
}

double GradientBundle::norm() const {
  double s = squared_norm(d_router.data());
  for (const auto& e : d_experts) s += squared_norm(e.data());
  return std::sqrt(s);
}

void GradientBundle::add_scaled(double scale, const GradientBundle& other) {
  if (other.d_experts.size() != d_experts.size())
    throw DimensionError("GradientBundle: expert count mismatch");
  axpy(scale, other.d_router, d_router);
  for (std::size_t j = 0; j < d_experts.size(); ++j) axpy(scale, other.d_experts[j], d_experts[j]);
}

namespace {

/// Gradient w.r.t. each selected expert output, indexed like ExpertOutputs::per_token.
using OutputGrads = std::vector<std::vector<std::vector<double>>>;

OutputGrads zero_output_grads(const ExpertOutputs& outputs) {
  OutputGrads g(outputs.per_token.size());
  for (std::size_t i = 0; i < g.size(); ++i)
    for (const auto& so : outputs.per_token[i]) g[i].emplace_back(so.value.size(), 0.0);
  return g;
}

/// Pulls dL/dS and dL/dx~ back to the parameters. Scores on the frozen support
/// are a softmax of the selected logits, so ds_ij/dh_il = s_ij (delta_jl - s_il).
GradientBundle backprop(const MoeParams& params, const Matrix& tokens, const RoutingState& state,
                        const Matrix* dscores, const OutputGrads* doutputs) {
  GradientBundle g = GradientBundle::zeros_like(params);
  const std::size_t N = tokens.rows();
  if (dscores) {
    Matrix dlogits(N, params.num_experts());
    for (std::size_t i = 0; i < N; ++i) {
      double inner = 0.0;
      for (std::size_t j : state.selected[i]) inner += (*dscores)(i, j) * state.scores(i, j);
      for (std::size_t l : state.selected[i])
        dlogits(i, l) = state.scores(i, l) * ((*dscores)(i, l) - inner);
    }
    g.d_router = matmul(tokens.transpose(), dlogits);
  }
  if (doutputs) {
    for (std::size_t i = 0; i < N; ++i) {
      auto x = tokens.row(i);
      for (std::size_t slot = 0; slot < state.selected[i].size(); ++slot) {
        const std::size_t j = state.selected[i][slot];
        const auto& gx = (*doutputs)[i][slot];
        Matrix& dw = g.d_experts[j];
        for (std::size_t p = 0; p < x.size(); ++p) {
          auto row = dw.row(p);
          for (std::size_t c = 0; c < gx.size(); ++c) row[c] += x[p] * gx[c];
        }
      }
    }
  }
  return g;
}

TermGradients term_gradients(const MoeParams& params, const Matrix& tokens, const Matrix& targets,
                             const LossWeights& weights, const RoutingState& state,
                             const ExpertOutputs& outputs) {
  const std::size_t N = tokens.rows();
  const std::size_t n = params.num_experts();
  const std::size_t d_out = params.output_dim();
  TermGradients tg;

  {  // task: L_h = mean (y - t)^2
    Matrix ds(N, n);
    OutputGrads dx = zero_output_grads(outputs);
    const double c = 2.0 / static_cast<double>(N * d_out);
    std::vector<double> gy(d_out);
    for (std::size_t i = 0; i < N; ++i) {
      for (std::size_t c2 = 0; c2 < d_out; ++c2)
        gy[c2] = c * (outputs.combined(i, c2) - targets(i, c2));
      for (std::size_t slot = 0; slot < outputs.per_token[i].size(); ++slot) {
        const auto& so = outputs.per_token[i][slot];
        ds(i, so.expert) = dot(gy, so.value);
        for (std::size_t c2 = 0; c2 < d_out; ++c2) dx[i][slot][c2] = so.score * gy[c2];
      }
    }
    tg.task = backprop(params, tokens, state, &ds, &dx);
  }

  {  // aux: gradient flows through p_j only
    Matrix ds(N, n);
    const double c = weights.aux_normalization == AuxNormalization::Paper
                         ? 1.0
                         : static_cast<double>(n) /
                               (static_cast<double>(params.k) * static_cast<double>(N));
    for (std::size_t i = 0; i < N; ++i)
      for (std::size_t j = 0; j < n; ++j) ds(i, j) = c * state.loads_f[j];
    tg.aux = backprop(params, tokens, state, &ds, nullptr);
  }

  {  // orthogonality: acts on expert outputs only
    std::size_t terms = 0;
    for (const auto& tok : outputs.per_token) {
      std::size_t active = 0;
      for (const auto& so : tok) active += so.active ? 1 : 0;
      if (active >= 2) terms += active * (active - 1);
    }
    OutputGrads dx = zero_output_grads(outputs);
    if (terms > 0) {
      const double inv_m = 1.0 / static_cast<double>(terms);
      const double eps = weights.eps_norm;
      for (std::size_t i = 0; i < N; ++i) {
        const auto& tok = outputs.per_token[i];
        for (std::size_t a = 0; a < tok.size(); ++a) {
          if (!tok[a].active) continue;
          for (std::size_t b = 0; b < tok.size(); ++b) {
            if (b == a || !tok[b].active) continue;
            const auto& xj = tok[a].value;
            const auto& xk = tok[b].value;
            const double inner = dot(xj, xk);
            const double q = squared_norm(xk);
            const double den = q + eps;
            const double cj = 2.0 * inner * q / (den * den) * inv_m;
            const double ck = 2.0 * inner * inner / (den * den) * (1.0 - 2.0 * q / den) * inv_m;
            for (std::size_t c2 = 0; c2 < d_out; ++c2) {
              dx[i][a][c2] += cj * xk[c2];
              dx[i][b][c2] += cj * xj[c2] + ck * xk[c2];
            }
          }
        }
      }
    }
    tg.ortho = backprop(params, tokens, state, nullptr, &dx);
  }

  {  // variance: dL_v/ds_ij = -(2/n)(s_ij - sbar_j); the cross terms cancel
    Matrix ds(N, n);
    for (std::size_t j = 0; j < n; ++j) {
      double mean = 0.0;
      for (std::size_t i = 0; i < N; ++i) mean += state.scores(i, j);
      mean /= static_cast<double>(N);
      for (std::size_t i = 0; i < N; ++i)
        ds(i, j) = -2.0 / static_cast<double>(n) * (state.scores(i, j) - mean);
    }
    tg.variance = backprop(params, tokens, state, &ds, nullptr);
  }
  return tg;
}

LossBreakdown raw_losses(const Matrix& targets, const LossWeights& weights,
                         const RoutingState& state, const ExpertOutputs& outputs) {
  LossBreakdown b;
  b.l_h = task_loss(outputs.combined, targets);
  b.l_aux = aux_loss(state, weights.aux_normalization);
  b.l_o = ortho_loss(outputs, weights.eps_norm);
  b.l_v = variance_loss(state);
  return b;
}

void check_targets(const MoeParams& params, const Matrix& tokens, const Matrix& targets) {
  if (targets.rows() != tokens.rows() || targets.cols() != params.output_dim())
    throw DimensionError("targets must be N x d_out");
}

}  // namespace

ForwardBackwardResult forward_backward(const MoeParams& params, const Matrix& tokens,
                                       const Matrix& targets, const LossWeights& weights,
                                       const std::optional<ScalePair>& prev_scales) {
  weights.validate();
  check_targets(params, tokens, targets);
  ForwardBackwardResult r;
  r.state = route(params, tokens);
  r.outputs = forward(params, tokens, r.state, weights.tau_gate);
  const LossBreakdown raw = raw_losses(targets, weights, r.state, r.outputs);
  r.losses = combine(raw.l_h, raw.l_aux, raw.l_o, raw.l_v, weights, prev_scales);
  r.terms = term_gradients(params, tokens, targets, weights, r.state, r.outputs);

  r.grads = r.terms.task;
  r.grads.add_scaled(weights.alpha, r.terms.aux);
  r.grads.add_scaled(weights.beta * r.losses.scale_o, r.terms.ortho);
  r.grads.add_scaled(weights.gamma * r.losses.scale_v, r.terms.variance);
  r.grads.d_router.require_finite("router gradient");
  for (const auto& e : r.grads.d_experts) e.require_finite("expert gradient");
  return r;
}

LossBreakdown evaluate_frozen(const MoeParams& params, const Matrix& tokens, const Matrix& targets,
                              const LossWeights& weights, const Support& support,
                              ScalePair scales) {
  check_targets(params, tokens, targets);
  const RoutingState state = route_with_support(params, tokens, support);
  const ExpertOutputs outputs = forward(params, tokens, state, weights.tau_gate);
  const LossBreakdown raw = raw_losses(targets, weights, state, outputs);
  return combine_with_scales(raw.l_h, raw.l_aux, raw.l_o, raw.l_v, weights, scales);
}

double central_difference(const std::function<double(double)>& f, double x, double h) {
  if (!(h > 0.0)) throw std::invalid_argument("central_difference: h must be > 0");
  const double v = (f(x + h) - f(x - h)) / (2.0 * h);
  if (!std::isfinite(v)) throw NonFiniteError("central_difference: non-finite evaluation");
  return v;
}

GradientBundle fd_gradient_of(const std::function<double(const MoeParams&)>& loss,
                              const MoeParams& params, double h) {
  if (!(h > 0.0)) throw std::invalid_argument("fd_gradient: h must be > 0");
  GradientBundle g = GradientBundle::zeros_like(params);
  MoeParams probe = params;
  auto diff = [&](double& slot) {
    const double saved = slot;
    slot = saved + h;
    const double up = loss(probe);
    slot = saved - h;
    const double down = loss(probe);
    slot = saved;
    const double v = (up - down) / (2.0 * h);
    if (!std::isfinite(v)) throw NonFiniteError("fd_gradient: non-finite evaluation");
    return v;
  };
  {
    auto dst = g.d_router.data();
    auto src = probe.router.data();
    for (std::size_t e = 0; e < src.size(); ++e) dst[e] = diff(src[e]);
  }
  for (std::size_t j = 0; j < probe.experts.size(); ++j) {
    auto dst = g.d_experts[j].data();
    auto src = probe.experts[j].data();
    for (std::size_t e = 0; e < src.size(); ++e) dst[e] = diff(src[e]);
  }
  return g;
}

GradientBundle fd_gradient(const MoeParams& params, const Matrix& tokens, const Matrix& targets,
                           const LossWeights& weights, double h,
                           const std::optional<ScalePair>& prev_scales) {
  weights.validate();
  check_targets(params, tokens, targets);
  const RoutingState base = route(params, tokens);
  const ExpertOutputs outputs = forward(params, tokens, base, weights.tau_gate);
  const LossBreakdown raw = raw_losses(targets, weights, base, outputs);
  const ScalePair scales =
      combine(raw.l_h, raw.l_aux, raw.l_o, raw.l_v, weights, prev_scales).scales();
  return fd_gradient_of(
      [&](const MoeParams& p) {
        return evaluate_frozen(p, tokens, targets, weights, base.selected, scales).total;
      },
      params, h);
}

EntryError worst_entry_error(const GradientBundle& a, const GradientBundle& b) {
  if (a.d_experts.size() != b.d_experts.size())
    throw DimensionError("max_relative_error: bundle shape mismatch");
  EntryError worst;
  double scale = 0.0;
  auto magnitude = [&](const Matrix& m) {
    for (double v : m.data()) scale = std::max(scale, std::abs(v));
  };
  magnitude(a.d_router);
  magnitude(b.d_router);
  for (std::size_t j = 0; j < a.d_experts.size(); ++j) {
    magnitude(a.d_experts[j]);
    magnitude(b.d_experts[j]);
  }
  const double floor = std::max(kGradientErrorFloor * scale, kGradientAbsoluteFloor);
  auto scan = [&](const Matrix& x, const Matrix& y) {
    if (x.rows() != y.rows() || x.cols() != y.cols())
      throw DimensionError("max_relative_error: bundle shape mismatch");
    auto xs = x.data();
    auto ys = y.data();
    for (std::size_t e = 0; e < xs.size(); ++e) {
      const double den = std::max({std::abs(xs[e]), std::abs(ys[e]), floor});
      const double rel = std::abs(xs[e] - ys[e]) / den;
      if (rel > worst.relative) worst = {rel, xs[e], ys[e]};
    }
  };
  scan(a.d_router, b.d_router);
  for (std::size_t j = 0; j < a.d_experts.size(); ++j) scan(a.d_experts[j], b.d_experts[j]);
  return worst;
}

double max_relative_error(const GradientBundle& a, const GradientBundle& b) {
  return worst_entry_error(a, b).relative;
}

namespace {

TermNorms norms_of(const GradientBundle& g) {
  TermNorms t;
  t.router = g.router_norm();
  for (std::size_t j = 0; j < g.d_experts.size(); ++j) t.experts.push_back(g.expert_norm(j));
  return t;
}

double experts_only_norm(const GradientBundle& g) {
  double s = 0.0;
  for (const auto& e : g.d_experts) s += squared_norm(e.data());
  return std::sqrt(s);
}

}  // namespace

bool AttributionReport::zeros_hold() const {
  auto all_zero = [](const std::vector<double>& v) {
    return std::all_of(v.begin(), v.end(), [](double x) { return x == 0.0; });
  };
  return all_zero(aux.experts) && all_zero(variance.experts) && ortho.router == 0.0 &&
         fd_aux_expert_norm == 0.0 && fd_variance_expert_norm == 0.0 &&
         fd_ortho_router_norm == 0.0;
}

AttributionReport attribute_gradients(const MoeParams& params, const Matrix& tokens,
                                      const Matrix& targets, const LossWeights& weights,
                                      double h) {
  const ForwardBackwardResult fb = forward_backward(params, tokens, targets, weights);
  AttributionReport rep;
  rep.task = norms_of(fb.terms.task);
  rep.aux = norms_of(fb.terms.aux);
  rep.ortho = norms_of(fb.terms.ortho);
  rep.variance = norms_of(fb.terms.variance);

  const Support& support = fb.state.selected;
  auto term_fd = [&](double LossBreakdown::*term) {
    return fd_gradient_of(
        [&](const MoeParams& p) {
          return evaluate_frozen(p, tokens, targets, weights, support, ScalePair{}).*term;
        },
        params, h);
  };
  rep.fd_aux_expert_norm = experts_only_norm(term_fd(&LossBreakdown::l_aux));
  rep.fd_variance_expert_norm = experts_only_norm(term_fd(&LossBreakdown::l_v));
  rep.fd_ortho_router_norm = term_fd(&LossBreakdown::l_o).router_norm();
  return rep;
}

VarianceGradientProbe variance_gradient_probe(const RoutingState& state) {
  const std::size_t N = state.num_tokens();
  const std::size_t n = state.num_experts();
  if (N == 0 || n == 0) throw std::invalid_argument("variance_gradient_probe: empty state");
  VarianceGradientProbe probe;
  probe.exact = Matrix(N, n);
  probe.no_cross = Matrix(N, n);
  const double exact_c = 2.0 / static_cast<double>(n);
  const double no_cross_c =
      2.0 * static_cast<double>(N - 1) / (static_cast<double>(n) * static_cast<double>(N));
  for (std::size_t j = 0; j < n; ++j) {
    double mean = 0.0;
    for (std::size_t i = 0; i < N; ++i) mean += state.scores(i, j);
    mean /= static_cast<double>(N);
    for (std::size_t i = 0; i < N; ++i) {
      const double dev = state.scores(i, j) - mean;
      probe.exact(i, j) = -exact_c * dev;
      probe.no_cross(i, j) = -no_cross_c * dev;
      probe.max_abs_divergence =
          std::max(probe.max_abs_divergence, std::abs(probe.exact(i, j) - probe.no_cross(i, j)));
    }
  }
  probe.coefficient_ratio = no_cross_c / exact_c;
  return probe;
}

}  // namespace moelab

namespace moelab {

namespace {
constexpr double kMinOutputNorm = 0.75;
}  // namespace

GradcheckReport run_gradcheck_suite(std::uint64_t seed, double h, std::size_t instances) {
  GradcheckReport report;
  for (std::size_t idx = 0; idx < instances; ++idx) {
    GradcheckInstance inst;
    inst.seed = derive_seed(seed, idx);
    Rng rng(inst.seed);
    auto pick = [&](std::size_t lo, std::size_t hi) {
      return lo + static_cast<std::size_t>(rng.next_u64() % (hi - lo + 1));
    };
    inst.N = pick(4, 16);
    inst.n = pick(2, 6);
    inst.k = pick(1, std::min<std::size_t>(3, inst.n));
    inst.d = pick(2, 8);
    inst.d_out = pick(2, 4);

    const std::size_t combo = idx % 16;
    auto weight = [&] { return 0.5 + rng.uniform(); };
    inst.weights.alpha = (combo & 1) ? weight() : 0.0;
    inst.weights.beta = (combo & 2) ? weight() : 0.0;
    inst.weights.gamma = (combo & 4) ? weight() : 0.0;
    inst.weights.dynamic_scaling = (combo & 8) != 0;
    inst.weights.aux_normalization =
        (idx / 16 + idx) % 2 == 0 ? AuxNormalization::Switch : AuxNormalization::Paper;
    if (inst.weights.dynamic_scaling && idx % 3 == 0)
      inst.prev_scales = ScalePair{0.5 + rng.uniform(), 0.5 + rng.uniform()};

    const double std = 1.0 / std::sqrt(static_cast<double>(inst.d));
    MoeParams params;
    params.router = gaussian_sample(rng, inst.d, inst.n, 0.0, 1.0);
    for (std::size_t j = 0; j < inst.n; ++j)
      params.experts.push_back(gaussian_sample(rng, inst.d, inst.d_out, 0.0, std));
    params.k = inst.k;
    Matrix tokens = gaussian_sample(rng, inst.N, inst.d, 0.0, 1.0);
    // Redraw tokens whose selected outputs are short: the projection in L_o
    // has third derivatives ~ 1/|x|^3 there, which swamps central differences.
    for (int attempt = 0; attempt < 1000; ++attempt) {
      const RoutingState st = route(params, tokens);
      const ExpertOutputs out = forward(params, tokens, st);
      bool redrawn = false;
      for (std::size_t i = 0; i < inst.N; ++i) {
        bool short_output = false;
        for (const auto& so : out.per_token[i])
          short_output = short_output || squared_norm(so.value) < kMinOutputNorm * kMinOutputNorm;
        if (!short_output) continue;
        for (double& x : tokens.row(i)) x = rng.normal();
        redrawn = true;
      }
      if (!redrawn) break;
    }
    const Matrix targets = gaussian_sample(rng, inst.N, inst.d_out, 0.0, 1.0);

    const auto analytic =
        forward_backward(params, tokens, targets, inst.weights, inst.prev_scales).grads;
    const auto numeric = fd_gradient(params, tokens, targets, inst.weights, h, inst.prev_scales);
    const EntryError worst = worst_entry_error(analytic, numeric);
    inst.max_rel_err = worst.relative;
    inst.worst_analytic = worst.a;
    inst.worst_numeric = worst.b;
    if (inst.max_rel_err >= report.max_rel_err) {
      report.max_rel_err = inst.max_rel_err;
      report.worst_seed = inst.seed;
    }
    report.instances.push_back(inst);
  }
  return report;
}

}  // namespace moelab
