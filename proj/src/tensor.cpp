#include "hpmi/tensor.hpp"

#include <cmath>
#include <sstream>

namespace hpmi {

int64_t shape_numel(const std::vector<int64_t>& shape) {
  int64_t n = 1;
  for (int64_t d : shape) {
    if (d <= 0) throw ShapeError("non-positive dimension in shape " + shape_to_string(shape));
    n *= d;
  }
  return n;
}

std::string shape_to_string(const std::vector<int64_t>& shape) {
  std::ostringstream os;
  os << '[';
  for (size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

Tensor::Tensor(std::vector<int64_t> shape)
    : shape_(std::move(shape)), data_(static_cast<size_t>(shape_numel(shape_)), 0.0) {}

Tensor::Tensor(std::vector<int64_t> shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
  if (shape_numel(shape_) != static_cast<int64_t>(data_.size())) {
    throw ShapeError("data length " + std::to_string(data_.size()) + " does not match shape " + shape_to_string(shape_));
  }
}

Tensor Tensor::scalar(double v) { return Tensor({}, {v}); }

Tensor Tensor::zeros(std::vector<int64_t> shape) { return Tensor(std::move(shape)); }

Tensor Tensor::full(std::vector<int64_t> shape, double v) {
  Tensor t(std::move(shape));
  for (double& x : t.data_) x = v;
  return t;
}

Tensor Tensor::matrix(std::initializer_list<std::initializer_list<double>> rows) {
  const int64_t m = static_cast<int64_t>(rows.size());
  const int64_t n = m > 0 ? static_cast<int64_t>(rows.begin()->size()) : 0;
  Tensor t({m, n});
  int64_t r = 0;
  for (const auto& row : rows) {
    if (static_cast<int64_t>(row.size()) != n) throw ShapeError("ragged matrix initializer");
    int64_t c = 0;
    for (double v : row) t.at(r, c++) = v;
    ++r;
  }
  return t;
}

Tensor Tensor::vector(std::initializer_list<double> values) {
  return Tensor({static_cast<int64_t>(values.size())}, std::vector<double>(values));
}

int64_t Tensor::rows() const {
  if (rank() != 2) throw ShapeError("rows() on tensor of shape " + shape_string());
  return shape_[0];
}

int64_t Tensor::cols() const {
  if (rank() != 2) throw ShapeError("cols() on tensor of shape " + shape_string());
  return shape_[1];
}

double& Tensor::at(int64_t i) { return data_[static_cast<size_t>(i)]; }
double Tensor::at(int64_t i) const { return data_[static_cast<size_t>(i)]; }

double& Tensor::at(int64_t r, int64_t c) { return data_[static_cast<size_t>(r * shape_[1] + c)]; }
double Tensor::at(int64_t r, int64_t c) const { return data_[static_cast<size_t>(r * shape_[1] + c)]; }

double Tensor::item() const {
  if (numel() != 1) throw ShapeError("item() on tensor of shape " + shape_string());
  return data_[0];
}

bool Tensor::all_finite() const {
  for (double v : data_) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

void Tensor::require_finite(const char* label) const {
  if (!all_finite()) throw ContractError(std::string("non-finite value in ") + label);
}

std::string Tensor::shape_string() const { return shape_to_string(shape_); }

void require_same_shape(const Tensor& a, const Tensor& b, const char* context) {
  if (!a.same_shape(b)) {
    throw ShapeError(std::string(context) + ": shape " + a.shape_string() + " vs " + b.shape_string());
  }
}

}  // namespace hpmi
