#pragma once
// Data-parallel inner loops used by the fusion, denoiser and training code.
// Every kernel exists as a scalar reference implementation and, where the
// CPU supports it, an AVX2 variant. The active backend is chosen once at
// startup (override with set_backend or the TSCG_BACKEND env var) and the
// two variants are equivalence-tested against each other.

#include <cstddef>
#include <string>

namespace tscg::kernels {

// 3x3 convolution, zero padding, stride 1, channel-major row-major tensors.
// in:  [c_in][rows][cols], w: [c_out][c_in][3][3], bias: [c_out],
// out: [c_out][rows][cols].
using conv3x3_fn = void (*)(const float* in, int c_in, int rows, int cols,
                            const float* w, const float* bias, int c_out,
                            float* out);

// Gradient of conv3x3 w.r.t. its input: grad_in[ci] += sum_co corr(grad_out, w).
using conv3x3_bwd_data_fn = void (*)(const float* grad_out, int c_out, int rows,
                                     int cols, const float* w, int c_in,
                                     float* grad_in);

// Gradient w.r.t. weights and bias, accumulated into grad_w / grad_b.
using conv3x3_bwd_weights_fn = void (*)(const float* in, int c_in, int rows,
                                        int cols, const float* grad_out,
                                        int c_out, float* grad_w, float* grad_b);

using map1_fn = void (*)(const float* x, float* y, std::size_t n);          // y = f(x)
using axpby_fn = void (*)(std::size_t n, float a, const float* x, float b,
                          const float* y, float* out);                      // out = a*x + b*y
using dot_fn = float (*)(std::size_t n, const float* x, const float* y);
using relu_bwd_fn = void (*)(std::size_t n, const float* pre, const float* gout,
                             float* gin);
struct Backend {
  const char* name;
  conv3x3_fn conv3x3;
  conv3x3_bwd_data_fn conv3x3_bwd_data;
  conv3x3_bwd_weights_fn conv3x3_bwd_weights;
  map1_fn relu;
  map1_fn sigmoid;
  axpby_fn axpby;
  dot_fn dot;
  relu_bwd_fn relu_bwd;
};

const Backend& scalar_backend();
const Backend& avx2_backend();   // valid only if avx2_supported()
bool avx2_supported();

// Active backend (process-wide). Defaults to the best supported variant.
const Backend& active();
void set_backend(const std::string& name);  // "scalar" or "avx2"

// Convenience forwarders through the active backend.
inline void conv3x3(const float* in, int c_in, int rows, int cols,
                    const float* w, const float* bias, int c_out, float* out) {
  active().conv3x3(in, c_in, rows, cols, w, bias, c_out, out);
}
inline void conv3x3_bwd_data(const float* gout, int c_out, int rows, int cols,
                             const float* w, int c_in, float* gin) {
  active().conv3x3_bwd_data(gout, c_out, rows, cols, w, c_in, gin);
}
inline void conv3x3_bwd_weights(const float* in, int c_in, int rows, int cols,
                                const float* gout, int c_out, float* gw,
                                float* gb) {
  active().conv3x3_bwd_weights(in, c_in, rows, cols, gout, c_out, gw, gb);
}
inline void relu(const float* x, float* y, std::size_t n) { active().relu(x, y, n); }
inline void sigmoid(const float* x, float* y, std::size_t n) { active().sigmoid(x, y, n); }
inline void axpby(std::size_t n, float a, const float* x, float b,
                  const float* y, float* out) {
  active().axpby(n, a, x, b, y, out);
}
inline float dot(std::size_t n, const float* x, const float* y) {
  return active().dot(n, x, y);
}
inline void relu_bwd(std::size_t n, const float* pre, const float* gout, float* gin) {
  active().relu_bwd(n, pre, gout, gin);
}
}  // namespace tscg::kernels
