#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace hpmi {

// Thrown when operand shapes do not agree; message names both shapes.
class ShapeError : public std::runtime_error {
 public:
  explicit ShapeError(const std::string& msg) : std::runtime_error(msg) {}
};

// Thrown when a caller violates a documented precondition.
class ContractError : public std::runtime_error {
 public:
  explicit ContractError(const std::string& msg) : std::runtime_error(msg) {}
};

// Thrown by file readers; message names the offending byte offset.
class ParseError : public std::runtime_error {
 public:
  explicit ParseError(const std::string& msg) : std::runtime_error(msg) {}
};

// Dense row-major tensor of 64-bit floats. Rank 0 (scalar), 1 and 2 are the
// only ranks the model needs; nothing here broadcasts.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::vector<int64_t> shape);
  Tensor(std::vector<int64_t> shape, std::vector<double> data);

  static Tensor scalar(double v);
  static Tensor zeros(std::vector<int64_t> shape);
  static Tensor full(std::vector<int64_t> shape, double v);
  static Tensor matrix(std::initializer_list<std::initializer_list<double>> rows);
  static Tensor vector(std::initializer_list<double> values);

  const std::vector<int64_t>& shape() const { return shape_; }
  int64_t rank() const { return static_cast<int64_t>(shape_.size()); }
  int64_t numel() const { return static_cast<int64_t>(data_.size()); }
  int64_t rows() const;
  int64_t cols() const;

  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }
  std::vector<double>& values() { return data_; }
  const std::vector<double>& values() const { return data_; }

  double& at(int64_t i);
  double at(int64_t i) const;
  double& at(int64_t r, int64_t c);
  double at(int64_t r, int64_t c) const;

  double item() const;

  bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }
  bool all_finite() const;

  // Throws ContractError naming `label` if any entry is NaN or infinite.
  void require_finite(const char* label) const;

  std::string shape_string() const;

 private:
  std::vector<int64_t> shape_;
  std::vector<double> data_;
};

int64_t shape_numel(const std::vector<int64_t>& shape);
std::string shape_to_string(const std::vector<int64_t>& shape);

// Throws ShapeError naming both shapes unless they match exactly.
void require_same_shape(const Tensor& a, const Tensor& b, const char* context);

}  // namespace hpmi
