#include "tscg/kernels.hpp"

#include <immintrin.h>

#include <cmath>
#include <cstring>
#include <vector>

// Compiled with -mavx2 -mfma; only reachable after the dispatcher has
// confirmed CPU support.
//
// The convolutions copy their input into a zero-padded scratch buffer so
// the inner loops carry no border branches and each 8-wide output block
// accumulates entirely in registers.

namespace tscg::kernels {
namespace {

// Padded layout: per channel (rows + 2) x (cols + 2), data at offset (1, 1).
float* pad_copy(std::vector<float>& scratch, const float* in, int channels,
                int rows, int cols) {
  const int prows = rows + 2, pcols = cols + 2;
  scratch.assign(static_cast<std::size_t>(channels) * prows * pcols, 0.0f);
  for (int c = 0; c < channels; ++c)
    for (int i = 0; i < rows; ++i)
      std::memcpy(scratch.data() + (static_cast<std::size_t>(c) * prows + i + 1) * pcols + 1,
                  in + (static_cast<std::size_t>(c) * rows + i) * cols,
                  static_cast<std::size_t>(cols) * sizeof(float));
  return scratch.data();
}

thread_local std::vector<float> tls_pad;

// out[j..j+7] for a fixed output row: taps read padded rows i..i+2.
inline __m256 conv_block(const float* pad, int prows, int pcols, int c_in, int i,
                         int j, const float* k, bool flip, float init) {
  __m256 acc = _mm256_set1_ps(init);
  for (int ci = 0; ci < c_in; ++ci, k += 9) {
    const float* base = pad + (static_cast<std::size_t>(ci) * prows + i) * pcols + j;
    for (int di = 0; di < 3; ++di) {
      const float* row = base + static_cast<std::size_t>(di) * pcols;
      const int ki = flip ? 2 - di : di;
      acc = _mm256_fmadd_ps(_mm256_loadu_ps(row),
                            _mm256_set1_ps(k[ki * 3 + (flip ? 2 : 0)]), acc);
      acc = _mm256_fmadd_ps(_mm256_loadu_ps(row + 1),
                            _mm256_set1_ps(k[ki * 3 + 1]), acc);
      acc = _mm256_fmadd_ps(_mm256_loadu_ps(row + 2),
                            _mm256_set1_ps(k[ki * 3 + (flip ? 0 : 2)]), acc);
    }
  }
  return acc;
}

inline float conv_scalar(const float* pad, int prows, int pcols, int c_in, int i,
                         int j, const float* k, bool flip, float init) {
  float acc = init;
  for (int ci = 0; ci < c_in; ++ci, k += 9) {
    const float* base = pad + (static_cast<std::size_t>(ci) * prows + i) * pcols + j;
    for (int di = 0; di < 3; ++di) {
      const float* row = base + static_cast<std::size_t>(di) * pcols;
      const int ki = flip ? 2 - di : di;
      acc += row[0] * k[ki * 3 + (flip ? 2 : 0)];
      acc += row[1] * k[ki * 3 + 1];
      acc += row[2] * k[ki * 3 + (flip ? 0 : 2)];
    }
  }
  return acc;
}

void conv3x3_v(const float* in, int c_in, int rows, int cols, const float* w,
               const float* bias, int c_out, float* out) {
  const int prows = rows + 2, pcols = cols + 2;
  const float* pad = pad_copy(tls_pad, in, c_in, rows, cols);
  for (int co = 0; co < c_out; ++co) {
    const float b = bias ? bias[co] : 0.0f;
    const float* k = w + static_cast<std::size_t>(co) * c_in * 9;
    for (int i = 0; i < rows; ++i) {
      float* o = out + (static_cast<std::size_t>(co) * rows + i) * cols;
      int j = 0;
      for (; j + 8 <= cols; j += 8)
        _mm256_storeu_ps(o + j, conv_block(pad, prows, pcols, c_in, i, j, k, false, b));
      for (; j < cols; ++j)
        o[j] = conv_scalar(pad, prows, pcols, c_in, i, j, k, false, b);
    }
  }
}

void conv3x3_bwd_data_v(const float* gout, int c_out, int rows, int cols,
                        const float* w, int c_in, float* gin) {
  // correlation with the flipped kernel over the padded output gradient
  const int prows = rows + 2, pcols = cols + 2;
  const float* pad = pad_copy(tls_pad, gout, c_out, rows, cols);
  std::vector<float> kt(static_cast<std::size_t>(c_in) * c_out * 9);
  for (int ci = 0; ci < c_in; ++ci)
    for (int co = 0; co < c_out; ++co)
      std::memcpy(kt.data() + (static_cast<std::size_t>(ci) * c_out + co) * 9,
                  w + (static_cast<std::size_t>(co) * c_in + ci) * 9,
                  9 * sizeof(float));
  for (int ci = 0; ci < c_in; ++ci) {
    const float* k = kt.data() + static_cast<std::size_t>(ci) * c_out * 9;
    for (int p = 0; p < rows; ++p) {
      float* g = gin + (static_cast<std::size_t>(ci) * rows + p) * cols;
      int q = 0;
      for (; q + 8 <= cols; q += 8) {
        __m256 acc = conv_block(pad, prows, pcols, c_out, p, q, k, true, 0.0f);
        _mm256_storeu_ps(g + q, _mm256_add_ps(_mm256_loadu_ps(g + q), acc));
      }
      for (; q < cols; ++q)
        g[q] += conv_scalar(pad, prows, pcols, c_out, p, q, k, true, 0.0f);
    }
  }
}

// sum over j in [0, n) of a[j] * b[j]
inline float dot_n(const float* a, const float* b, int n) {
  __m256 vacc = _mm256_setzero_ps();
  int j = 0;
  for (; j + 8 <= n; j += 8)
    vacc = _mm256_fmadd_ps(_mm256_loadu_ps(a + j), _mm256_loadu_ps(b + j), vacc);
  __m128 lo = _mm256_castps256_ps128(vacc);
  __m128 hi = _mm256_extractf128_ps(vacc, 1);
  __m128 s = _mm_add_ps(lo, hi);
  s = _mm_hadd_ps(s, s);
  s = _mm_hadd_ps(s, s);
  float acc = _mm_cvtss_f32(s);
  for (; j < n; ++j) acc += a[j] * b[j];
  return acc;
}

void conv3x3_bwd_weights_v(const float* in, int c_in, int rows, int cols,
                           const float* gout, int c_out, float* gw, float* gb) {
  const int prows = rows + 2, pcols = cols + 2;
  const float* pad = pad_copy(tls_pad, in, c_in, rows, cols);
  for (int co = 0; co < c_out; ++co) {
    const float* go = gout + static_cast<std::size_t>(co) * rows * cols;
    if (gb) {
      float s = 0.0f;
      for (int n = 0; n < rows * cols; ++n) s += go[n];
      gb[co] += s;
    }
    for (int ci = 0; ci < c_in; ++ci) {
      const float* src = pad + static_cast<std::size_t>(ci) * prows * pcols;
      float* k = gw + (static_cast<std::size_t>(co) * c_in + ci) * 9;
      for (int di = 0; di < 3; ++di)
        for (int dj = 0; dj < 3; ++dj) {
          float acc = 0.0f;
          for (int i = 0; i < rows; ++i)
            acc += dot_n(src + (static_cast<std::size_t>(i) + di) * pcols + dj,
                         go + static_cast<std::size_t>(i) * cols, cols);
          k[di * 3 + dj] += acc;
        }
    }
  }
}

void relu_v(const float* x, float* y, std::size_t n) {
  const __m256 z = _mm256_setzero_ps();
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8)
    _mm256_storeu_ps(y + i, _mm256_max_ps(_mm256_loadu_ps(x + i), z));
  for (; i < n; ++i) y[i] = x[i] > 0.0f ? x[i] : 0.0f;
}

void sigmoid_v(const float* x, float* y, std::size_t n) {
  // exp is not worth hand-vectorizing here; keep the scalar form.
  for (std::size_t i = 0; i < n; ++i) y[i] = 1.0f / (1.0f + std::exp(-x[i]));
}

void axpby_v(std::size_t n, float a, const float* x, float b, const float* y,
             float* out) {
  const __m256 va = _mm256_set1_ps(a);
  const __m256 vb = _mm256_set1_ps(b);
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    __m256 r = _mm256_mul_ps(va, _mm256_loadu_ps(x + i));
    r = _mm256_fmadd_ps(vb, _mm256_loadu_ps(y + i), r);
    _mm256_storeu_ps(out + i, r);
  }
  for (; i < n; ++i) out[i] = a * x[i] + b * y[i];
}

float dot_v(std::size_t n, const float* x, const float* y) {
  return dot_n(x, y, static_cast<int>(n));
}

void relu_bwd_v(std::size_t n, const float* pre, const float* gout, float* gin) {
  const __m256 z = _mm256_setzero_ps();
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    __m256 mask = _mm256_cmp_ps(_mm256_loadu_ps(pre + i), z, _CMP_GT_OQ);
    _mm256_storeu_ps(gin + i, _mm256_and_ps(mask, _mm256_loadu_ps(gout + i)));
  }
  for (; i < n; ++i) gin[i] = pre[i] > 0.0f ? gout[i] : 0.0f;
}

}  // namespace

const Backend& avx2_backend() {
  static const Backend b{"avx2",       conv3x3_v, conv3x3_bwd_data_v,
                         conv3x3_bwd_weights_v, relu_v,    sigmoid_v,
                         axpby_v,      dot_v,     relu_bwd_v};
  return b;
}

}  // namespace tscg::kernels
