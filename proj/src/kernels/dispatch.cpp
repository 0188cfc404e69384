#include <atomic>
#include <cstdlib>
#include <stdexcept>
#include <string>

#include "ctsl/kernels.hpp"

namespace ctsl::kernels {
namespace {

const KernelTable* resolve() {
  const char* forced = std::getenv("CTSL_ISA");
  if (forced != nullptr && std::string(forced) == "scalar") return &scalar_table();
  if (cpu_supports_avx2() && avx2_table() != nullptr) return avx2_table();
  return &scalar_table();
}

std::atomic<const KernelTable*>& slot() {
  static std::atomic<const KernelTable*> table{resolve()};
  return table;
}

}  // namespace

bool cpu_supports_avx2() {
#if defined(__x86_64__) || defined(__i386__)
  return __builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma");
#else
  return false;
#endif
}

const KernelTable& active() { return *slot().load(std::memory_order_relaxed); }

void set_active(Isa isa) {
  if (isa == Isa::scalar) {
    slot().store(&scalar_table());
    return;
  }
  if (!cpu_supports_avx2() || avx2_table() == nullptr) {
    throw std::runtime_error("AVX2 kernels are not available on this machine");
  }
  slot().store(avx2_table());
}

std::string_view isa_name(Isa isa) { return isa == Isa::avx2 ? "avx2" : "scalar"; }

}  // namespace ctsl::kernels
