#include "tscg/kernels.hpp"

#include <cstdlib>
#include <stdexcept>

namespace tscg::kernels {

bool avx2_supported() {
#if defined(__x86_64__) || defined(__i386__)
  return __builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma");
#else
  return false;
#endif
}

namespace {

const Backend* pick_default() {
  if (const char* env = std::getenv("TSCG_BACKEND")) {
    std::string s(env);
    if (s == "scalar") return &scalar_backend();
    if (s == "avx2" && avx2_supported()) return &avx2_backend();
  }
  return avx2_supported() ? &avx2_backend() : &scalar_backend();
}

const Backend*& current() {
  static const Backend* b = pick_default();
  return b;
}

}  // namespace

const Backend& active() { return *current(); }

void set_backend(const std::string& name) {
  if (name == "scalar") {
    current() = &scalar_backend();
  } else if (name == "avx2") {
    if (!avx2_supported()) throw std::runtime_error("avx2 not supported on this CPU");
    current() = &avx2_backend();
  } else {
    throw std::invalid_argument("unknown kernel backend: " + name);
  }
}

}  // namespace tscg::kernels
