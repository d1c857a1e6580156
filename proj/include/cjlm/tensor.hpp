#pragma once

#include <span>
#include <string>
#include <type_traits>
#include <vector>

#include "cjlm/common.hpp"

namespace cjlm {

// Flat view of one named parameter tensor.
template <typename T>
struct BasicTensorView {
  std::string name;
  std::span<T> values;
  std::vector<std::size_t> dims;  // rank 1 for vectors, 2 for matrices
};

using TensorView = BasicTensorView<double>;
using ConstTensorView = BasicTensorView<const double>;

// Views of every tensor of a parameter holder, in visiting order.
template <typename Holder>
auto tensor_views(Holder& holder) {
  using T = std::conditional_t<std::is_const_v<Holder>, const double, double>;
  std::vector<BasicTensorView<T>> out;
  holder.for_each_tensor([&](const std::string& name, auto& t) {
    using Tensor = std::remove_cvref_t<decltype(t)>;
    std::vector<std::size_t> dims;
    if constexpr (Tensor::ColsAtCompileTime == 1) {
      dims = {static_cast<std::size_t>(t.size())};
    } else {
      dims = {static_cast<std::size_t>(t.rows()), static_cast<std::size_t>(t.cols())};
    }
    out.push_back({name, std::span<T>(t.data(), static_cast<std::size_t>(t.size())), std::move(dims)});
  });
  return out;
}

}  // namespace cjlm
