#pragma once

#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include "exvt/tensor.hpp"

namespace exvt::testing {

template <class T = float>
TensorT<T> random_tensor(Shape shape, std::uint64_t seed, double stddev = 1.0) {
  TensorT<T> t(std::move(shape));
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> dist(0.0, stddev);
  for (auto& v : t.data()) v = static_cast<T>(dist(rng));
  return t;
}

template <class T>
TensorT<T> param_tensor(Shape shape, std::uint64_t seed, double stddev = 1.0) {
  auto t = random_tensor<T>(std::move(shape), seed, stddev);
  t.set_requires_grad(true);
  return t;
}

template <class U, class T>
TensorT<U> convert(const TensorT<T>& t) {
  TensorT<U> out(t.shape());
  for (std::size_t i = 0; i < t.numel(); ++i) out[i] = static_cast<U>(t[i]);
  return out;
}

// Naive 6-loop cross-correlation.
inline std::vector<double> naive_conv(const Tensor& x, const Tensor& w, const std::vector<float>& b,
                                      std::size_t stride, std::size_t pad, std::size_t groups,
                                      Shape& out_shape) {
  const std::size_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const std::size_t O = w.dim(0), cg = w.dim(1), kh = w.dim(2), kw = w.dim(3);
  const std::size_t og = O / groups;
  const std::size_t Ho = (H + 2 * pad - kh) / stride + 1, Wo = (W + 2 * pad - kw) / stride + 1;
  out_shape = {B, O, Ho, Wo};
  std::vector<double> y(B * O * Ho * Wo, 0.0);
  for (std::size_t n = 0; n < B; ++n)
    for (std::size_t o = 0; o < O; ++o)
      for (std::size_t i = 0; i < Ho; ++i)
        for (std::size_t j = 0; j < Wo; ++j) {
          double acc = b.empty() ? 0.0 : b[o];
          for (std::size_t c = 0; c < cg; ++c)
            for (std::size_t u = 0; u < kh; ++u)
              for (std::size_t v = 0; v < kw; ++v) {
                const long yy = static_cast<long>(i * stride + u) - static_cast<long>(pad);
                const long xx = static_cast<long>(j * stride + v) - static_cast<long>(pad);
                if (yy < 0 || xx < 0 || yy >= static_cast<long>(H) || xx >= static_cast<long>(W))
                  continue;
                const std::size_t ic = (o / og) * cg + c;
                acc += static_cast<double>(x[((n * C + ic) * H + yy) * W + xx]) *
                       w[((o * cg + c) * kh + u) * kw + v];
              }
          y[((n * O + o) * Ho + i) * Wo + j] = acc;
        }
  return y;
}

// Central difference of a scalar function of one tensor entry.
template <class T>
double central_difference(TensorT<T>& t, std::size_t i, double h,
                          const std::function<double()>& f) {
  const T original = t[i];
  t[i] = static_cast<T>(original + h);
  const double plus = f();
  t[i] = static_cast<T>(original - h);
  const double minus = f();
  t[i] = original;
  return (plus - minus) / (2 * h);
}

inline double rel_err(double a, double n) {
  return std::abs(a - n) / std::max({std::abs(a), std::abs(n), 1e-8});
}

}  // namespace exvt::testing
