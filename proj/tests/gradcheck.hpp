#pragma once

// Finite-difference oracle shared by the unit tests. Analytic gradients come
// from the float graph; the reference is a central difference of the same
// function re-evaluated entirely in double precision.

#include <algorithm>
#include <cmath>
#include <vector>

#include "elusive/tensor.hpp"

namespace elusive::testing {

inline double relative_error(double analytic, double numeric, double floor = 1e-4) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

// `fn` is a generic callable taking std::vector<ad::Tensor<S>>& and returning a
// scalar ad::Tensor<S>. Returns the largest relative error over all coordinates.
template <typename Fn>
double gradcheck(Fn&& fn, std::vector<ad::Matrix<double>> inputs,
                 const std::vector<ad::Shape>& shapes, double h = 1e-3) {
  // Both routes see the same float-representable point.
  for (auto& m : inputs) m = m.cast<float>().cast<double>();
  std::vector<ad::Tensor<float>> leaves;
  for (std::size_t i = 0; i < inputs.size(); ++i)
    leaves.push_back(ad::Tensor<float>::leaf(shapes[i], inputs[i].cast<float>(), true));
  auto loss = fn(leaves);
  ad::backward(loss);

  double worst = 0.0;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    for (ad::Index c = 0; c < inputs[i].size(); ++c) {
      auto eval = [&](double delta) {
        std::vector<ad::Tensor<double>> probe;
        for (std::size_t j = 0; j < inputs.size(); ++j) {
          ad::Matrix<double> v = inputs[j];
          if (j == i) v.data()[c] += delta;
          probe.push_back(ad::Tensor<double>::leaf(shapes[j], v, false));
        }
        return fn(probe).item();
      };
      const double numeric = (eval(h) - eval(-h)) / (2 * h);
      const double analytic = leaves[i].has_grad() ? leaves[i].grad().data()[c] : 0.0;
      worst = std::max(worst, relative_error(analytic, numeric));
    }
  }
  return worst;
}

}  // namespace elusive::testing
