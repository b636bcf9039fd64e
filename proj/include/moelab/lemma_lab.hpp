#pragma once

#include <cstddef>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "moelab/core_math.hpp"

namespace moelab::lemma {

/// Vertex of the bipartite support graph.
struct Node {
  enum class Side { Row, Col } side;
  std::size_t index;

  friend bool operator==(const Node&, const Node&) = default;
};

std::string to_string(const Node& node);

/// Alternating row/column vertices r0 c0 r1 c1 ...; the closing edge joins the
/// last column back to the first row. Always starts with a row.
struct Cycle {
  std::vector<Node> nodes;

  std::size_t length() const noexcept { return nodes.size(); }
  std::string to_string() const;
};

/// Row i selects columns (i*k + t) mod n for t in [0, k).
Matrix build_balanced_support(std::size_t N, std::size_t n, std::size_t k);

/// First cycle found by a DFS that visits vertices in index order (rows before
/// columns), or nullopt when the support graph is a forest.
std::optional<Cycle> find_cycle(const Matrix& support);

/// Adds +delta, -delta, ... along the cycle edges. Throws when delta is
/// negative or exceeds the smallest entry on the cycle.
Matrix perturb_cycle(const Matrix& base, const Cycle& cycle, double delta);

struct Clause {
  std::string name;
  bool passed = true;
  double max_deviation = 0.0;
};

struct Certificate {
  Clause row_sums;
  Clause column_sums;
  Clause cycle_row_variance;
  Clause off_cycle_variance;
  double expected_variance = 0.0;
  std::vector<double> cycle_row_variances;

  bool passed() const noexcept {
    return row_sums.passed && column_sums.passed && cycle_row_variance.passed &&
           off_cycle_variance.passed;
  }
  std::vector<const Clause*> clauses() const {
    return {&row_sums, &column_sums, &cycle_row_variance, &off_cycle_variance};
  }
};

inline constexpr double kCertificateTolerance = 1e-12;

/// Checks that the perturbation kept every row and column sum, that each
/// cycle row's selected entries now have population variance 2*delta^2/k and
/// that the other rows are untouched.
Certificate certify_lemma1(const Matrix& base, const Matrix& perturbed, const Cycle& cycle,
                           double delta, std::size_t k);

/// True iff |a| == |b| and the sets are disjoint.
bool certify_lemma2(const std::set<long long>& a, const std::set<long long>& b);

struct LemmaInstance {
  std::size_t N = 0, n = 0, k = 0;
  double delta = 0.0;
  Matrix support;
  Matrix base;       // 1/k on the support
  Matrix perturbed;
  Cycle cycle;
};

/// Balanced support -> uniform scores -> cycle perturbation. Returns nullopt
/// when the support has no cycle. Throws std::invalid_argument for k < 2.
std::optional<LemmaInstance> make_instance(std::size_t N, std::size_t n, std::size_t k,
                                           double delta);

}  // namespace moelab::lemma
