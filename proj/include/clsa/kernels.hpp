#pragma once
// Vector kernels used by the convolution and linear layers.
//
// Every kernel has a portable scalar reference and an AVX2+FMA variant. The
// variant is chosen once at startup from CPUID and can be overridden (tests
// pin each path and compare them).

#include <cstddef>
#include <span>
#include <string_view>

namespace clsa::simd {

enum class Isa { kScalar, kAvx2 };

std::string_view isa_name(Isa isa);

// Best ISA supported by the running CPU and compiled into this binary.
Isa detected_isa();

// ISA currently used by the dispatching entry points below.
Isa active_isa();

// Throws ContractError when `isa` is not available on this machine.
void set_active_isa(Isa isa);

// sum_i x[i] * y[i]
float dot(std::span<const float> x, std::span<const float> y);
double dot(std::span<const double> x, std::span<const double> y);

// y[i] += a * x[i]   (fused multiply-add, so both paths round identically)
void axpy(float a, std::span<const float> x, std::span<float> y);
void axpy(double a, std::span<const double> x, std::span<double> y);

// sum_i x[i]
float sum(std::span<const float> x);
double sum(std::span<const double> x);

namespace scalar {
float dot(const float* x, const float* y, std::size_t n);
double dot(const double* x, const double* y, std::size_t n);
void axpy(float a, const float* x, float* y, std::size_t n);
void axpy(double a, const double* x, double* y, std::size_t n);
float sum(const float* x, std::size_t n);
double sum(const double* x, std::size_t n);
}  // namespace scalar

#if defined(__x86_64__) || defined(_M_X64)
#define CLSA_HAVE_AVX2_KERNELS 1
namespace avx2 {
float dot(const float* x, const float* y, std::size_t n);
double dot(const double* x, const double* y, std::size_t n);
void axpy(float a, const float* x, float* y, std::size_t n);
void axpy(double a, const double* x, double* y, std::size_t n);
float sum(const float* x, std::size_t n);
double sum(const double* x, std::size_t n);
}  // namespace avx2
#endif

}  // namespace clsa::simd
