#include "tscg/kernels.hpp"

#include <cmath>
#include <cstring>

namespace tscg::kernels {
namespace {

inline const float* chan(const float* base, int c, int rows, int cols) {
  return base + static_cast<std::size_t>(c) * rows * cols;
}
inline float* chan(float* base, int c, int rows, int cols) {
  return base + static_cast<std::size_t>(c) * rows * cols;
}

void conv3x3_s(const float* in, int c_in, int rows, int cols, const float* w,
               const float* bias, int c_out, float* out) {
  for (int co = 0; co < c_out; ++co) {
    float* o = chan(out, co, rows, cols);
    const float b = bias ? bias[co] : 0.0f;
    for (int i = 0; i < rows; ++i)
      for (int j = 0; j < cols; ++j) {
        float acc = b;
        for (int ci = 0; ci < c_in; ++ci) {
          const float* src = chan(in, ci, rows, cols);
          const float* k = w + ((co * c_in + ci) * 9);
          for (int di = 0; di < 3; ++di) {
            const int r = i + di - 1;
            if (r < 0 || r >= rows) continue;
            for (int dj = 0; dj < 3; ++dj) {
              const int c = j + dj - 1;
              if (c < 0 || c >= cols) continue;
              acc += k[di * 3 + dj] * src[r * cols + c];
            }
          }
        }
        o[i * cols + j] = acc;
      }
  }
}

void conv3x3_bwd_data_s(const float* gout, int c_out, int rows, int cols,
                        const float* w, int c_in, float* gin) {
  for (int ci = 0; ci < c_in; ++ci) {
    float* g = chan(gin, ci, rows, cols);
    for (int p = 0; p < rows; ++p)
      for (int q = 0; q < cols; ++q) {
        float acc = 0.0f;
        for (int co = 0; co < c_out; ++co) {
          const float* go = chan(gout, co, rows, cols);
          const float* k = w + ((co * c_in + ci) * 9);
          for (int di = 0; di < 3; ++di) {
            const int r = p + 1 - di;
            if (r < 0 || r >= rows) continue;
            for (int dj = 0; dj < 3; ++dj) {
              const int c = q + 1 - dj;
              if (c < 0 || c >= cols) continue;
              acc += k[di * 3 + dj] * go[r * cols + c];
            }
          }
        }
        g[p * cols + q] += acc;
      }
  }
}

void conv3x3_bwd_weights_s(const float* in, int c_in, int rows, int cols,
                           const float* gout, int c_out, float* gw, float* gb) {
  for (int co = 0; co < c_out; ++co) {
    const float* go = chan(gout, co, rows, cols);
    if (gb) {
      float s = 0.0f;
      for (int n = 0; n < rows * cols; ++n) s += go[n];
      gb[co] += s;
    }
    for (int ci = 0; ci < c_in; ++ci) {
      const float* src = chan(in, ci, rows, cols);
      float* k = gw + ((co * c_in + ci) * 9);
      for (int di = 0; di < 3; ++di)
        for (int dj = 0; dj < 3; ++dj) {
          float acc = 0.0f;
          const int r0 = (di == 0) ? 1 : 0;
          const int r1 = (di == 2) ? rows - 1 : rows;
          const int q0 = (dj == 0) ? 1 : 0;
          const int q1 = (dj == 2) ? cols - 1 : cols;
          for (int i = r0; i < r1; ++i) {
            const float* a = src + (i + di - 1) * cols + (dj - 1);
            const float* b = go + i * cols;
            for (int j = q0; j < q1; ++j) acc += a[j] * b[j];
          }
          k[di * 3 + dj] += acc;
        }
    }
  }
}

void relu_s(const float* x, float* y, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) y[i] = x[i] > 0.0f ? x[i] : 0.0f;
}

void sigmoid_s(const float* x, float* y, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) y[i] = 1.0f / (1.0f + std::exp(-x[i]));
}

void axpby_s(std::size_t n, float a, const float* x, float b, const float* y,
             float* out) {
  for (std::size_t i = 0; i < n; ++i) out[i] = a * x[i] + b * y[i];
}

float dot_s(std::size_t n, const float* x, const float* y) {
  double acc = 0.0;
  for (std::size_t i = 0; i < n; ++i) acc += static_cast<double>(x[i]) * y[i];
  return static_cast<float>(acc);
}

void relu_bwd_s(std::size_t n, const float* pre, const float* gout, float* gin) {
  for (std::size_t i = 0; i < n; ++i) gin[i] = pre[i] > 0.0f ? gout[i] : 0.0f;
}

}  // namespace

const Backend& scalar_backend() {
  static const Backend b{"scalar",     conv3x3_s, conv3x3_bwd_data_s,
                         conv3x3_bwd_weights_s, relu_s,    sigmoid_s,
                         axpby_s,      dot_s,     relu_bwd_s};
  return b;
}

}  // namespace tscg::kernels
