#include <cmath>

#include "clsa/kernels.hpp"

namespace clsa::simd::scalar {

namespace {

// Four interleaved accumulators, reduced pairwise. Mirrors the lane layout of
// the vector paths closely enough to keep results within a few ulps.
template <typename T>
T dot_impl(const T* x, const T* y, std::size_t n) {
  T acc[4] = {0, 0, 0, 0};
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    acc[0] = std::fma(x[i], y[i], acc[0]);
    acc[1] = std::fma(x[i + 1], y[i + 1], acc[1]);
    acc[2] = std::fma(x[i + 2], y[i + 2], acc[2]);
    acc[3] = std::fma(x[i + 3], y[i + 3], acc[3]);
  }
  T total = (acc[0] + acc[1]) + (acc[2] + acc[3]);
  for (; i < n; ++i) total = std::fma(x[i], y[i], total);
  return total;
}

template <typename T>
void axpy_impl(T a, const T* x, T* y, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) y[i] = std::fma(a, x[i], y[i]);
}

template <typename T>
T sum_impl(const T* x, std::size_t n) {
  T acc[4] = {0, 0, 0, 0};
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    acc[0] += x[i];
    acc[1] += x[i + 1];
    acc[2] += x[i + 2];
    acc[3] += x[i + 3];
  }
  T total = (acc[0] + acc[1]) + (acc[2] + acc[3]);
  for (; i < n; ++i) total += x[i];
  return total;
}

}  // namespace

float dot(const float* x, const float* y, std::size_t n) { return dot_impl(x, y, n); }
double dot(const double* x, const double* y, std::size_t n) { return dot_impl(x, y, n); }
void axpy(float a, const float* x, float* y, std::size_t n) { axpy_impl(a, x, y, n); }
void axpy(double a, const double* x, double* y, std::size_t n) { axpy_impl(a, x, y, n); }
float sum(const float* x, std::size_t n) { return sum_impl(x, n); }
double sum(const double* x, std::size_t n) { return sum_impl(x, n); }

}  // namespace clsa::simd::scalar
