#pragma once
// Centerline-guided diffusion: noise schedule, latent codec, forward
// noising, a reduced conditional UNet denoiser with analytic backward
// pass, and DDPM/DDIM samplers.

#include <functional>
#include <memory>
#include <random>
#include <string>
#include <vector>

#include "tscg/grid.hpp"
#include "tscg/tsam.hpp"

namespace tscg {

// Deterministic RNG used everywhere randomness is needed; Box-Muller
// normals so results do not depend on the standard library's
// distribution internals.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : gen_(seed) {}
  double uniform();                    // [0,1)
  double normal();                     // standard normal
  std::uint64_t next_u64() { return gen_(); }
  int uniform_int(int lo, int hi);     // inclusive bounds
 private:
  std::mt19937_64 gen_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

struct NoiseSchedule {
  int T = 0;
  std::vector<double> betas, alphas, alpha_bars;
};

NoiseSchedule make_schedule(int T, double beta_min, double beta_max);

struct CenterlineGrid {
  GridSpec spec;
  std::vector<float> data;  // single channel, values in [0,1]

  CenterlineGrid() = default;
  CenterlineGrid(GridSpec s, float fill = 0.0f);
  float& at(int i, int j) { return data[static_cast<std::size_t>(i) * spec.cols + j]; }
  float at(int i, int j) const { return data[static_cast<std::size_t>(i) * spec.cols + j]; }
};

struct LatentCodec {
  int downscale = 1;  // 1 or 2

  void validate(const GridSpec& spec) const;
  // z = 2y - 1 (after optional 2x2 average pooling); [0,1] -> [-1,1]
  FeatureGrid encode(const SemanticGrid& y) const;
  // inverse affine + clamp, nearest upsample back to the full grid
  SemanticGrid decode(const FeatureGrid& z, const ClassSet& classes) const;
  GridSpec latent_spec(const GridSpec& spec) const;
};

// z_t = sqrt(ab_t) z0 + sqrt(1 - ab_t) noise
FeatureGrid q_sample(const FeatureGrid& z0, int t, const FeatureGrid& noise,
                     const NoiseSchedule& sched);

FeatureGrid sample_noise_like(const FeatureGrid& shape, Rng& rng);

// ---------------------------------------------------------------------------
// Reduced conditional UNet

struct Linear {
  int in = 0, out = 0;
  std::vector<float> w, b;   // w: [out][in]
  std::vector<float> gw, gb;
  Linear() = default;
  Linear(int i, int o);
};

struct ConvParam {
  int c_in = 0, c_out = 0, k = 3;  // k in {1,3}
  std::vector<float> w, b;
  std::vector<float> gw, gb;
  ConvParam() = default;
  ConvParam(int in, int out, int kk);
};

struct ResBlockParams {
  ConvParam conv1, conv2;
  Linear film;              // time embedding -> per-channel scale/shift
  ConvParam skip;           // 1x1, present only when c_in != c_out
  bool has_skip = false;
};

struct AttentionParams {
  ConvParam mask_conv;      // 3x3, 1 -> 1 channel
  std::vector<float> cw, cb;     // conditional vector: cw*mean(map_o)+cb per channel
  std::vector<float> gcw, gcb;
};

struct DenoiserConfig {
  int z_channels = 3;
  int prompt_channels = 3;
  int base_width = 16;
  int levels = 2;                // resolution levels; levels-1 downsamples
  int resblocks_per_level = 2;
  int bottleneck_blocks = 4;     // plain residual blocks at the deepest level
  int time_embed_dim = 32;
  bool centerline_attention = true;

  void validate() const;
  bool operator==(const DenoiserConfig&) const = default;
};

class Denoiser {
 public:
  Denoiser() = default;
  explicit Denoiser(const DenoiserConfig& cfg);
  void init_weights(Rng& rng);  // He-style init

  const DenoiserConfig& config() const { return cfg_; }

  // Predicted noise field; shape of z_t. Deterministic.
  FeatureGrid forward(const FeatureGrid& z_t, int t, const FeatureGrid& prompt,
                      const CenterlineGrid& map_o, const NoiseSchedule& sched) const;

  // Forward with cached activations followed by backward. grad_out has the
  // output's shape; returns the gradient w.r.t. the prompt input and
  // accumulates parameter gradients.
  FeatureGrid forward_cached(const FeatureGrid& z_t, int t, const FeatureGrid& prompt,
                             const CenterlineGrid& map_o, const NoiseSchedule& sched);
  FeatureGrid backward(const FeatureGrid& grad_out);

  void zero_grads();
  // Visit every parameter tensor (values + gradient storage).
  void for_each_param(const std::function<void(const std::string&, std::vector<float>&,
                                               std::vector<float>&)>& fn);
  std::size_t param_count();

 private:
  struct Ctx;
  DenoiserConfig cfg_;
  ConvParam conv_in_, conv_out_;
  std::vector<std::vector<ResBlockParams>> down_;  // [level][block]
  std::vector<AttentionParams> down_attn_;          // [level]
  std::vector<ResBlockParams> mid_;
  std::vector<std::vector<ResBlockParams>> up_;    // [level][block]
  std::vector<AttentionParams> up_attn_;
  std::shared_ptr<Ctx> ctx_;

  friend struct DenoiserDetail;
};

std::vector<double> time_embedding(int t, int T, int dim);

// ---------------------------------------------------------------------------
// Samplers

using DenoiseFn = std::function<FeatureGrid(const FeatureGrid& z_t, int t)>;

// Fractional DDIM time grid; steps == 3 uses the fixed schedule
// {1.0, 0.666, 0.333, 0} instead of exact thirds.
std::vector<double> ddim_time_grid(int steps);

// Coefficients (cz, cp) of the denoiser's fixed preconditioning skip: an
// untrained model predicts cz * z_t + cp * prompt, which reads the prompt as
// a latent z0 estimate with constant prior variance. The UNet output is a
// learned correction on top of this base.
std::pair<double, double> denoiser_skip(const NoiseSchedule& sched, int t);

struct SamplerOptions {
  int steps = 3;
  double output_gain = 4.0;  // probability = sigmoid(gain * z0)
};

// Deterministic DDIM (eta = 0) over a caller-supplied noise predictor.
// Returns the final z0 estimate in latent space.
FeatureGrid ddim_sample_latent(const DenoiseFn& fn, const NoiseSchedule& sched,
                               const GridSpec& latent_spec, int z_channels, int steps,
                               std::uint64_t seed);
// Full ancestral DDPM; returns the final z0 estimate.
FeatureGrid ddpm_sample_latent(const DenoiseFn& fn, const NoiseSchedule& sched,
                               const GridSpec& latent_spec, int z_channels,
                               std::uint64_t seed);

// End-to-end samplers: latent trajectory, then logistic map to [0,1].
SemanticGrid ddim_sample(const Denoiser& params, const NoiseSchedule& sched,
                         const FeatureGrid& prompt, const CenterlineGrid& map_o,
                         int steps, std::uint64_t seed, const LatentCodec& codec,
                         const ClassSet& classes, double output_gain = 4.0);
SemanticGrid ddpm_sample(const Denoiser& params, const NoiseSchedule& sched,
                         const FeatureGrid& prompt, const CenterlineGrid& map_o,
                         std::uint64_t seed, const LatentCodec& codec,
                         const ClassSet& classes, double output_gain = 4.0);

// Latent z0 -> probability map (nearest upsample if the codec pooled).
SemanticGrid latent_to_map(const FeatureGrid& z0, const LatentCodec& codec,
                           const ClassSet& classes, const GridSpec& full_spec,
                           double output_gain);

// Standalone centerline attention (the same transform the UNet applies).
FeatureGrid centerline_attention(const FeatureGrid& h, const CenterlineGrid& map_o,
                                 const AttentionParams& params);

}  // namespace tscg
