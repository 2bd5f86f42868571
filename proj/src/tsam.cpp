#include "tscg/tsam.hpp"

#include <cmath>
#include <stdexcept>

#include "tscg/kernels.hpp"

namespace tscg {

Conv3x3Layer::Conv3x3Layer(int in, int out)
    : c_in(in), c_out(out), w(static_cast<std::size_t>(in) * out * 9, 0.0f), b(out, 0.0f) {}

void Conv3x3Layer::validate() const {
  if (c_in < 1 || c_out < 1) throw std::invalid_argument("Conv3x3Layer: bad channel counts");
  if (w.size() != static_cast<std::size_t>(c_in) * c_out * 9 ||
      b.size() != static_cast<std::size_t>(c_out))
    throw std::invalid_argument("Conv3x3Layer: parameter size mismatch");
  for (float v : w)
    if (!std::isfinite(v)) throw std::invalid_argument("Conv3x3Layer: non-finite weight");
  for (float v : b)
    if (!std::isfinite(v)) throw std::invalid_argument("Conv3x3Layer: non-finite bias");
}

void FusionParams::validate() const {
  phi1.validate();
  phi2.validate();
  phi3.validate();
  if (phi1.c_out != phi3.c_in || phi2.c_out != phi3.c_in)
    throw std::invalid_argument("FusionParams: fusion widths disagree");
  if (phi2.c_in % 2 != 0)
    throw std::invalid_argument("FusionParams: phi2 must eat concatenated (2K) channels");
}

FeatureGrid conv3x3_apply(const Conv3x3Layer& layer, const FeatureGrid& in) {
  if (in.channels != layer.c_in) throw std::invalid_argument("conv3x3_apply: channel mismatch");
  FeatureGrid out(in.spec, layer.c_out);
  kernels::conv3x3(in.data.data(), layer.c_in, in.spec.rows, in.spec.cols, layer.w.data(),
                   layer.b.data(), layer.c_out, out.data.data());
  return out;
}

namespace {

void check_matrix(const Mat3& m) {
  for (double v : m)
    if (!std::isfinite(v)) throw std::invalid_argument("align_grid: non-finite matrix");
}

// Core resampler over channel-major data.
std::vector<float> warp(const std::vector<float>& src, const GridSpec& spec, int channels,
                        const Mat3& m_ego, const InterpPolicy& policy) {
  check_matrix(m_ego);
  const Mat3 inv = mat3_inverse(m_ego);
  const std::size_t cells = spec.cells();
  std::vector<float> out(src.size());
  for (int i = 0; i < spec.rows; ++i) {
    for (int j = 0; j < spec.cols; ++j) {
      const auto xy = spec.cell_center(i, j);
      const double sx = inv[0] * xy[0] + inv[1] * xy[1] + inv[2];
      const double sy = inv[3] * xy[0] + inv[4] * xy[1] + inv[5];
      const auto fij = spec.metric_to_cell(sx, sy);
      const std::size_t o = static_cast<std::size_t>(i) * spec.cols + j;
      if (policy.mode == Interp::Nearest) {
        const int si = static_cast<int>(std::lround(fij[0]));
        const int sj = static_cast<int>(std::lround(fij[1]));
        if (si < 0 || si >= spec.rows || sj < 0 || sj >= spec.cols) {
          for (int c = 0; c < channels; ++c) out[c * cells + o] = policy.oob_fill;
        } else {
          const std::size_t s = static_cast<std::size_t>(si) * spec.cols + sj;
          for (int c = 0; c < channels; ++c) out[c * cells + o] = src[c * cells + s];
        }
      } else {
        // in-extent means inside the cell-covered area; samples between the
        // last cell center and the border clamp to the border cell
        if (fij[0] < -0.5 || fij[0] > spec.rows - 0.5 || fij[1] < -0.5 ||
            fij[1] > spec.cols - 0.5) {
          for (int c = 0; c < channels; ++c) out[c * cells + o] = policy.oob_fill;
        } else {
          const int i0 = static_cast<int>(std::floor(fij[0]));
          const int j0 = static_cast<int>(std::floor(fij[1]));
          const double fi = fij[0] - i0, fj = fij[1] - j0;
          const int i0c = std::clamp(i0, 0, spec.rows - 1);
          const int i1c = std::clamp(i0 + 1, 0, spec.rows - 1);
          const int j0c = std::clamp(j0, 0, spec.cols - 1);
          const int j1c = std::clamp(j0 + 1, 0, spec.cols - 1);
          for (int c = 0; c < channels; ++c) {
            const float* p = src.data() + c * cells;
            auto at = [&](int r, int q) { return p[static_cast<std::size_t>(r) * spec.cols + q]; };
            const double v = (1 - fi) * ((1 - fj) * at(i0c, j0c) + fj * at(i0c, j1c)) +
                             fi * ((1 - fj) * at(i1c, j0c) + fj * at(i1c, j1c));
            out[c * cells + o] = static_cast<float>(v);
          }
        }
      }
    }
  }
  return out;
}

}  // namespace

FeatureGrid align_grid(const FeatureGrid& prev, const Mat3& m_ego, const InterpPolicy& policy) {
  FeatureGrid out(prev.spec, prev.channels);
  out.data = warp(prev.data, prev.spec, prev.channels, m_ego, policy);
  return out;
}

SemanticGrid align_grid(const SemanticGrid& prev, const Mat3& m_ego, const InterpPolicy& policy) {
  return SemanticGrid::from_values(prev.spec, prev.classes,
                                   warp(prev.data, prev.spec, prev.classes.size(), m_ego, policy));
}

FeatureGrid fuse_map_level(const SemanticGrid& prev_aligned, const SemanticGrid& cur,
                           const FusionParams& params) {
  if (prev_aligned.spec != cur.spec || !(prev_aligned.classes == cur.classes))
    throw std::invalid_argument("fuse_map_level: spec/class mismatch");
  FeatureGrid sum(cur.spec, cur.classes.size());
  kernels::axpby(sum.data.size(), 1.0f, prev_aligned.data.data(), 1.0f, cur.data.data(),
                 sum.data.data());
  FeatureGrid fm = conv3x3_apply(params.phi1, sum);
  kernels::relu(fm.data.data(), fm.data.data(), fm.data.size());
  return fm;
}

FeatureGrid fuse_feature_level(const FeatureGrid& prev_feat, const FeatureGrid& cur_feat,
                               const Mat3& m_ego, const FusionParams& params,
                               const InterpPolicy& policy) {
  if (prev_feat.spec != cur_feat.spec || prev_feat.channels != cur_feat.channels)
    throw std::invalid_argument("fuse_feature_level: spec/channel mismatch");
  FeatureGrid aligned = align_grid(prev_feat, m_ego, policy);
  FeatureGrid cat(cur_feat.spec, 2 * cur_feat.channels);
  std::copy(aligned.data.begin(), aligned.data.end(), cat.data.begin());
  std::copy(cur_feat.data.begin(), cur_feat.data.end(), cat.data.begin() + aligned.data.size());
  return conv3x3_apply(params.phi2, cat);
}

FeatureGrid fuse_final(const FeatureGrid& f_m, const FeatureGrid& f_b,
                       const FusionParams& params) {
  if (f_m.spec != f_b.spec || f_m.channels != f_b.channels)
    throw std::invalid_argument("fuse_final: spec/channel mismatch");
  FeatureGrid sum(f_m.spec, f_m.channels);
  kernels::axpby(sum.data.size(), 1.0f, f_m.data.data(), 1.0f, f_b.data.data(), sum.data.data());
  return conv3x3_apply(params.phi3, sum);
}

}  // namespace tscg
