#pragma once

#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <span>
#include <stdexcept>
#include <vector>

namespace moelab {

class DimensionError : public std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

class NonFiniteError : public std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Dense row-major matrix of doubles.
///
/// Construction from data rejects NaN/Inf. Element writes through operator()
/// are unchecked; call require_finite() after filling a matrix in place.
class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0);
  Matrix(std::size_t rows, std::size_t cols, std::vector<double> data);
  Matrix(std::initializer_list<std::initializer_list<double>> rows);

  static Matrix identity(std::size_t n);

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  double operator()(std::size_t r, std::size_t c) const noexcept { return data_[r * cols_ + c]; }
  double& operator()(std::size_t r, std::size_t c) noexcept { return data_[r * cols_ + c]; }

  std::span<const double> row(std::size_t r) const noexcept {
    return {data_.data() + r * cols_, cols_};
  }
  std::span<double> row(std::size_t r) noexcept { return {data_.data() + r * cols_, cols_}; }

  std::span<const double> data() const noexcept { return data_; }
  std::span<double> data() noexcept { return data_; }

  Matrix transpose() const;
  void require_finite(const char* what = "matrix") const;

  friend bool operator==(const Matrix&, const Matrix&) = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

Matrix matmul(const Matrix& a, const Matrix& b);

/// a += scale * b, shapes must agree.
void axpy(double scale, const Matrix& b, Matrix& a);

double dot(std::span<const double> a, std::span<const double> b);
double squared_norm(std::span<const double> v);
double frobenius_norm(const Matrix& m);

/// Max-subtracted softmax; throws on an empty vector.
std::vector<double> softmax_row(std::span<const double> v);

/// xoshiro256** seeded through splitmix64. The sequence depends only on the
/// seed, so runs reproduce bit for bit across platforms.
class Rng {
 public:
  explicit Rng(std::uint64_t seed);

  std::uint64_t next_u64() noexcept;
  /// Uniform in [0, 1) with 53 random bits.
  double uniform() noexcept;
  /// Standard normal via Box-Muller.
  double normal() noexcept;
  std::uint64_t seed() const noexcept { return seed_; }

 private:
  std::uint64_t seed_;
  std::uint64_t s_[4];
  bool has_spare_ = false;
  double spare_ = 0.0;
};

/// Derives an independent stream seed from a base seed and a stream tag.
std::uint64_t derive_seed(std::uint64_t base, std::uint64_t stream) noexcept;

Matrix gaussian_sample(Rng& rng, std::size_t rows, std::size_t cols, double mean, double stddev);

}  // namespace moelab
