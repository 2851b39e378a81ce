#include "deepterra/nn/tensor.hpp"

#include "deepterra/error.hpp"

#include <algorithm>
#include <cmath>

namespace deepterra::nn {

Tensor::Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data))
{
  require(data_.size() == element_count(shape_), ErrorKind::Domain, "tensor data does not match its shape");
}

void Tensor::reshape(Shape s)
{
  require(element_count(s) == data_.size(), ErrorKind::Domain, "reshape changes element count");
  shape_ = std::move(s);
}

bool Tensor::all_finite() const
{
  return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
}

}  // namespace deepterra::nn
