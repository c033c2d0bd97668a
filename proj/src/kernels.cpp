#include "clsa/kernels.hpp"

#include <atomic>
#include <cstdlib>
#include <cstring>
#include <string>

#include "clsa/errors.hpp"

namespace clsa::simd {

namespace {

struct Table {
  float (*dot_f)(const float*, const float*, std::size_t);
  double (*dot_d)(const double*, const double*, std::size_t);
  void (*axpy_f)(float, const float*, float*, std::size_t);
  void (*axpy_d)(double, const double*, double*, std::size_t);
  float (*sum_f)(const float*, std::size_t);
  double (*sum_d)(const double*, std::size_t);
};

constexpr Table kScalarTable{scalar::dot, scalar::dot, scalar::axpy,
                             scalar::axpy, scalar::sum, scalar::sum};
#if defined(CLSA_HAVE_AVX2_KERNELS)
constexpr Table kAvx2Table{avx2::dot, avx2::dot, avx2::axpy,
                           avx2::axpy, avx2::sum, avx2::sum};
#endif

const Table& table_for(Isa isa) {
#if defined(CLSA_HAVE_AVX2_KERNELS)
  if (isa == Isa::kAvx2) return kAvx2Table;
#endif
  (void)isa;
  return kScalarTable;
}

// CLSA_FORCE_SCALAR=1 pins the reference path for a whole process.
Isa initial_isa() {
  const char* force = std::getenv("CLSA_FORCE_SCALAR");
  if (force != nullptr && std::strcmp(force, "0") != 0) return Isa::kScalar;
  return detected_isa();
}

std::atomic<const Table*>& current() {
  static std::atomic<const Table*> table{&table_for(initial_isa())};
  return table;
}

}  // namespace

std::string_view isa_name(Isa isa) {
  switch (isa) {
    case Isa::kScalar:
      return "scalar";
    case Isa::kAvx2:
      return "avx2";
  }
  return "unknown";
}

Isa detected_isa() {
#if defined(CLSA_HAVE_AVX2_KERNELS)
  static const bool has_avx2 = [] {
    __builtin_cpu_init();
    return __builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma");
  }();
  if (has_avx2) return Isa::kAvx2;
#endif
  return Isa::kScalar;
}

Isa active_isa() {
  return current().load() == &kScalarTable ? Isa::kScalar : Isa::kAvx2;
}

void set_active_isa(Isa isa) {
  if (isa == Isa::kAvx2 && detected_isa() != Isa::kAvx2) {
    throw ContractError("AVX2 kernels are not available on this CPU");
  }
  current().store(&table_for(isa));
}

float dot(std::span<const float> x, std::span<const float> y) {
  if (x.size() != y.size()) throw ContractError("dot: length mismatch");
  return current().load()->dot_f(x.data(), y.data(), x.size());
}

double dot(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size()) throw ContractError("dot: length mismatch");
  return current().load()->dot_d(x.data(), y.data(), x.size());
}

void axpy(float a, std::span<const float> x, std::span<float> y) {
  if (x.size() != y.size()) throw ContractError("axpy: length mismatch");
  current().load()->axpy_f(a, x.data(), y.data(), x.size());
}

void axpy(double a, std::span<const double> x, std::span<double> y) {
  if (x.size() != y.size()) throw ContractError("axpy: length mismatch");
  current().load()->axpy_d(a, x.data(), y.data(), x.size());
}

float sum(std::span<const float> x) { return current().load()->sum_f(x.data(), x.size()); }

double sum(std::span<const double> x) { return current().load()->sum_d(x.data(), x.size()); }

}  // namespace clsa::simd
