#pragma once
// Temporal-spatial alignment and fusion: warp the previous frame's map and
// features into the current ego frame, then fuse map-level, feature-level
// and final features with 3x3 convolutions.

#include "tscg/grid.hpp"

namespace tscg {

enum class Interp { Nearest, Bilinear };

struct InterpPolicy {
  Interp mode = Interp::Bilinear;
  float oob_fill = 0.0f;
};

struct Conv3x3Layer {
  int c_in = 0, c_out = 0;
  std::vector<float> w;  // [c_out][c_in][3][3]
  std::vector<float> b;  // [c_out]

  Conv3x3Layer() = default;
  Conv3x3Layer(int in, int out);
  void validate() const;
  std::size_t param_count() const { return w.size() + b.size(); }
};

FeatureGrid conv3x3_apply(const Conv3x3Layer& layer, const FeatureGrid& in);

struct FusionParams {
  Conv3x3Layer phi1;  // map channels -> fusion width
  Conv3x3Layer phi2;  // 2K feature channels -> fusion width
  Conv3x3Layer phi3;  // fusion width -> prompt channels
  void validate() const;
};

// Resample `prev` into the current frame: output cell (i,j) reads prev at
// m_ego^-1 * (x_ij, y_ij, 1). Out-of-extent locations get policy.oob_fill.
FeatureGrid align_grid(const FeatureGrid& prev, const Mat3& m_ego,
                       const InterpPolicy& policy = {});
SemanticGrid align_grid(const SemanticGrid& prev, const Mat3& m_ego,
                        const InterpPolicy& policy = {});

// F_m = ReLU(phi1(prev_aligned + cur))
FeatureGrid fuse_map_level(const SemanticGrid& prev_aligned, const SemanticGrid& cur,
                           const FusionParams& params);

// F_b = phi2(concat(align(prev_feat, m_ego), cur_feat))
FeatureGrid fuse_feature_level(const FeatureGrid& prev_feat, const FeatureGrid& cur_feat,
                               const Mat3& m_ego, const FusionParams& params,
                               const InterpPolicy& policy = {});

// F_f = phi3(F_m + F_b)
FeatureGrid fuse_final(const FeatureGrid& f_m, const FeatureGrid& f_b,
                       const FusionParams& params);

}  // namespace tscg
