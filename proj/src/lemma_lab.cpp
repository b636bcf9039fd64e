#include "moelab/lemma_lab.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

namespace moelab::lemma {

std::string to_string(const Node& node) {
  return (node.side == Node::Side::Row ? "r" : "c") + std::to_string(node.index);
}

std::string Cycle::to_string() const {
  std::string s;
  for (std::size_t i = 0; i < nodes.size(); ++i) {
    if (i) s += '-';
    s += lemma::to_string(nodes[i]);
  }
  return s;
}

Matrix build_balanced_support(std::size_t N, std::size_t n, std::size_t k) {
  if (n == 0 || k < 1 || k > n)
    throw std::invalid_argument("build_balanced_support: need 1 <= k <= n");
  Matrix support(N, n);
  for (std::size_t i = 0; i < N; ++i)
    for (std::size_t t = 0; t < k; ++t) support(i, (i * k + t) % n) = 1.0;
  return support;
}

namespace {

// Vertices 0..N-1 are rows, N..N+n-1 are columns.
class CycleSearch {
 public:
  explicit CycleSearch(const Matrix& support)
      : support_(support), N_(support.rows()), n_(support.cols()), state_(N_ + n_, kUnseen) {}

  std::optional<Cycle> run() {
    for (std::size_t v = 0; v < N_ + n_; ++v) {
      if (state_[v] != kUnseen) continue;
      if (auto c = dfs(v, kNoParent)) return c;
    }
    return std::nullopt;
  }

 private:
  static constexpr int kUnseen = 0, kOnStack = 1, kDone = 2;
  static constexpr std::size_t kNoParent = static_cast<std::size_t>(-1);

  std::vector<std::size_t> neighbours(std::size_t v) const {
    std::vector<std::size_t> out;
    if (v < N_) {
      for (std::size_t c = 0; c < n_; ++c)
        if (support_(v, c) != 0.0) out.push_back(N_ + c);
    } else {
      for (std::size_t r = 0; r < N_; ++r)
        if (support_(r, v - N_) != 0.0) out.push_back(r);
    }
    return out;
  }

  Node node(std::size_t v) const {
    return v < N_ ? Node{Node::Side::Row, v} : Node{Node::Side::Col, v - N_};
  }

  std::optional<Cycle> dfs(std::size_t v, std::size_t parent) {
    state_[v] = kOnStack;
    stack_.push_back(v);
    for (std::size_t w : neighbours(v)) {
      if (w == parent) continue;
      if (state_[w] == kOnStack) {
        auto start = std::find(stack_.begin(), stack_.end(), w);
        Cycle cycle;
        for (auto it = start; it != stack_.end(); ++it) cycle.nodes.push_back(node(*it));
        if (cycle.nodes.front().side == Node::Side::Col)
          std::rotate(cycle.nodes.begin(), cycle.nodes.begin() + 1, cycle.nodes.end());
        return cycle;
      }
      if (state_[w] == kUnseen)
        if (auto c = dfs(w, v)) return c;
    }
    stack_.pop_back();
    state_[v] = kDone;
    return std::nullopt;
  }

  const Matrix& support_;
  std::size_t N_, n_;
  std::vector<int> state_;
  std::vector<std::size_t> stack_;
};

struct Edge {
  std::size_t row, col;
  double sign;
};

std::vector<Edge> cycle_edges(const Cycle& cycle) {
  const auto& v = cycle.nodes;
  if (v.size() < 4 || v.size() % 2 != 0)
    throw std::invalid_argument("cycle must alternate rows and columns with length >= 4");
  std::vector<Edge> edges;
  for (std::size_t i = 0; i < v.size(); ++i) {
    const Node& a = v[i];
    const Node& b = v[(i + 1) % v.size()];
    const bool a_row = a.side == Node::Side::Row;
    if (a_row == (b.side == Node::Side::Row))
      throw std::invalid_argument("cycle must alternate rows and columns");
    if (a_row != (i % 2 == 0)) throw std::invalid_argument("cycle must start with a row");
    const std::size_t r = a_row ? a.index : b.index;
    const std::size_t c = a_row ? b.index : a.index;
    edges.push_back({r, c, i % 2 == 0 ? 1.0 : -1.0});
  }
  return edges;
}

double population_variance(const std::vector<double>& v) {
  if (v.empty()) return 0.0;
  double mean = 0.0;
  for (double x : v) mean += x;
  mean /= static_cast<double>(v.size());
  double s = 0.0;
  for (double x : v) s += (x - mean) * (x - mean);
  return s / static_cast<double>(v.size());
}

/// Entries of a row on the base support (which may include entries driven to 0).
std::vector<double> support_entries(const Matrix& support_of, const Matrix& m, std::size_t r) {
  std::vector<double> out;
  for (std::size_t c = 0; c < m.cols(); ++c)
    if (support_of(r, c) != 0.0) out.push_back(m(r, c));
  return out;
}

}  // namespace

std::optional<Cycle> find_cycle(const Matrix& support) { return CycleSearch(support).run(); }

Matrix perturb_cycle(const Matrix& base, const Cycle& cycle, double delta) {
  const auto edges = cycle_edges(cycle);
  double min_entry = std::numeric_limits<double>::infinity();
  for (const auto& e : edges) {
    if (e.row >= base.rows() || e.col >= base.cols())
      throw std::invalid_argument("perturb_cycle: cycle leaves the matrix");
    min_entry = std::min(min_entry, base(e.row, e.col));
  }
  if (!(delta >= 0.0) || delta > min_entry + 1e-15)
    throw std::invalid_argument("perturb_cycle: delta must lie in [0, min cycle entry]");
  Matrix out = base;
  for (const auto& e : edges) out(e.row, e.col) = std::max(0.0, out(e.row, e.col) + e.sign * delta);
  return out;
}

Certificate certify_lemma1(const Matrix& base, const Matrix& perturbed, const Cycle& cycle,
                           double delta, std::size_t k) {
  if (base.rows() != perturbed.rows() || base.cols() != perturbed.cols())
    throw DimensionError("certify_lemma1: shape mismatch");
  if (k == 0) throw std::invalid_argument("certify_lemma1: k must be positive");
  const auto edges = cycle_edges(cycle);
  std::vector<bool> on_cycle(base.rows(), false);
  for (const auto& e : edges) on_cycle.at(e.row) = true;

  Certificate cert;
  cert.row_sums.name = "row sums equal 1";
  cert.column_sums.name = "column sums preserved";
  cert.cycle_row_variance.name = "cycle-row variance equals 2*delta^2/k";
  cert.off_cycle_variance.name = "off-cycle rows unchanged";
  cert.expected_variance = 2.0 * delta * delta / static_cast<double>(k);

  auto record = [](Clause& clause, double deviation) {
    clause.max_deviation = std::max(clause.max_deviation, deviation);
    if (!(deviation <= kCertificateTolerance)) clause.passed = false;
  };

  for (std::size_t r = 0; r < base.rows(); ++r) {
    double sum = 0.0;
    for (double x : perturbed.row(r)) sum += x;
    record(cert.row_sums, std::abs(sum - 1.0));
  }
  for (std::size_t c = 0; c < base.cols(); ++c) {
    double before = 0.0, after = 0.0;
    for (std::size_t r = 0; r < base.rows(); ++r) {
      before += base(r, c);
      after += perturbed(r, c);
    }
    record(cert.column_sums, std::abs(after - before));
  }
  for (std::size_t r = 0; r < base.rows(); ++r) {
    const double var_after = population_variance(support_entries(base, perturbed, r));
    if (on_cycle[r]) {
      cert.cycle_row_variances.push_back(var_after);
      record(cert.cycle_row_variance, std::abs(var_after - cert.expected_variance));
    } else {
      const double var_before = population_variance(support_entries(base, base, r));
      record(cert.off_cycle_variance, std::abs(var_after - var_before));
    }
  }
  return cert;
}

bool certify_lemma2(const std::set<long long>& a, const std::set<long long>& b) {
  if (a.size() != b.size()) return false;
  for (long long x : a)
    if (b.contains(x)) return false;
  return true;
}

std::optional<LemmaInstance> make_instance(std::size_t N, std::size_t n, std::size_t k,
                                           double delta) {
  if (k < 2) throw std::invalid_argument("the cycle construction requires k >= 2");
  LemmaInstance inst;
  inst.N = N;
  inst.n = n;
  inst.k = k;
  inst.delta = delta;
  inst.support = build_balanced_support(N, n, k);
  auto cycle = find_cycle(inst.support);
  if (!cycle) return std::nullopt;
  inst.cycle = std::move(*cycle);
  inst.base = inst.support;
  for (double& x : inst.base.data()) x /= static_cast<double>(k);
  inst.perturbed = perturb_cycle(inst.base, inst.cycle, delta);
  return inst;
}

}  // namespace moelab::lemma
