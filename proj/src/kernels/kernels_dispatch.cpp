#include <atomic>
#include <cstdlib>
#include <string>

#include "lipcert/kernels/kernels.hpp"

namespace lipcert::kernels {
namespace {

bool cpu_has_avx2_fma() {
#if defined(__x86_64__) || defined(__i386__)
  return __builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma");
#else
  return false;
#endif
}

const Ops* resolve(std::string_view request) {
  if (request == "scalar") return &scalar_ops();
  if (request == "avx2") {
    const Ops* simd = avx2_ops();
    return (simd && cpu_has_avx2_fma()) ? simd : nullptr;
  }
  if (request == "auto" || request.empty()) {
    const Ops* simd = avx2_ops();
    if (simd && cpu_has_avx2_fma()) return simd;
    return &scalar_ops();
  }
  return nullptr;
}

std::atomic<const Ops*> g_active{nullptr};

}  // namespace

const Ops& active() {
  const Ops* table = g_active.load(std::memory_order_acquire);
  if (table) return *table;
  const char* env = std::getenv("LIPCERT_SIMD");
  table = resolve(env ? env : "auto");
  if (!table) table = &scalar_ops();  // unknown/unavailable request
  g_active.store(table, std::memory_order_release);
  return *table;
}

bool force_backend(std::string_view name) {
  const Ops* table = resolve(name);
  if (!table) return false;
  g_active.store(table, std::memory_order_release);
  return true;
}

}  // namespace lipcert::kernels
