#include "tscg/cgdm.hpp"

#include <cmath>
#include <cstring>
#include <memory>
#include <stdexcept>

#include "tscg/kernels.hpp"

namespace tscg {

// ---------------------------------------------------------------------------
// RNG

double Rng::uniform() {
  return (gen_() >> 11) * (1.0 / 9007199254740992.0);  // 53-bit mantissa
}

double Rng::normal() {
  if (has_spare_) {
    has_spare_ = false;
    return spare_;
  }
  double u1 = uniform(), u2 = uniform();
  while (u1 <= 1e-300) u1 = uniform();
  const double r = std::sqrt(-2.0 * std::log(u1));
  const double a = 2.0 * M_PI * u2;
  spare_ = r * std::sin(a);
  has_spare_ = true;
  return r * std::cos(a);
}

int Rng::uniform_int(int lo, int hi) {
  const std::uint64_t span = static_cast<std::uint64_t>(hi - lo) + 1;
  return lo + static_cast<int>(gen_() % span);
}

// ---------------------------------------------------------------------------
// Schedule / codec / forward process

NoiseSchedule make_schedule(int T, double beta_min, double beta_max) {
  if (T < 2) throw std::invalid_argument("make_schedule: T must be >= 2");
  if (!(beta_min > 0 && beta_min <= beta_max && beta_max < 1))
    throw std::invalid_argument("make_schedule: need 0 < beta_min <= beta_max < 1");
  NoiseSchedule s;
  s.T = T;
  s.betas.resize(T);
  s.alphas.resize(T);
  s.alpha_bars.resize(T);
  double prod = 1.0;
  for (int t = 0; t < T; ++t) {
    s.betas[t] = beta_min + (beta_max - beta_min) * t / (T - 1);
    s.alphas[t] = 1.0 - s.betas[t];
    prod *= s.alphas[t];
    s.alpha_bars[t] = prod;
  }
  return s;
}

CenterlineGrid::CenterlineGrid(GridSpec s, float fill) : spec(s) {
  spec.validate();
  data.assign(spec.cells(), fill);
}

void LatentCodec::validate(const GridSpec& spec) const {
  if (downscale != 1 && downscale != 2)
    throw std::invalid_argument("LatentCodec: downscale must be 1 or 2");
  if (spec.rows % downscale || spec.cols % downscale)
    throw std::invalid_argument("LatentCodec: downscale must divide grid dims");
}

GridSpec LatentCodec::latent_spec(const GridSpec& spec) const {
  validate(spec);
  return {spec.rows / downscale, spec.cols / downscale, spec.resolution_m * downscale};
}

FeatureGrid LatentCodec::encode(const SemanticGrid& y) const {
  validate(y.spec);
  const GridSpec ls = latent_spec(y.spec);
  FeatureGrid z(ls, y.classes.size());
  for (int c = 0; c < y.classes.size(); ++c)
    for (int i = 0; i < ls.rows; ++i)
      for (int j = 0; j < ls.cols; ++j) {
        double v = 0;
        for (int di = 0; di < downscale; ++di)
          for (int dj = 0; dj < downscale; ++dj)
            v += y.at(c, i * downscale + di, j * downscale + dj);
        v /= downscale * downscale;
        z.at(c, i, j) = static_cast<float>(2.0 * v - 1.0);
      }
  return z;
}

SemanticGrid LatentCodec::decode(const FeatureGrid& z, const ClassSet& classes) const {
  const GridSpec full{z.spec.rows * downscale, z.spec.cols * downscale,
                      z.spec.resolution_m / downscale};
  std::vector<float> vals(static_cast<std::size_t>(classes.size()) * full.rows * full.cols);
  const std::size_t cells = full.rows * static_cast<std::size_t>(full.cols);
  for (int c = 0; c < classes.size(); ++c)
    for (int i = 0; i < full.rows; ++i)
      for (int j = 0; j < full.cols; ++j)
        vals[c * cells + i * full.cols + j] =
            (z.at(c, i / downscale, j / downscale) + 1.0f) * 0.5f;
  return SemanticGrid::from_values(full, classes, std::move(vals));  // clamps
}

FeatureGrid q_sample(const FeatureGrid& z0, int t, const FeatureGrid& noise,
                     const NoiseSchedule& sched) {
  if (t < 0 || t >= sched.T) throw std::invalid_argument("q_sample: t out of range");
  if (noise.data.size() != z0.data.size()) throw std::invalid_argument("q_sample: shape mismatch");
  const float a = static_cast<float>(std::sqrt(sched.alpha_bars[t]));
  const float b = static_cast<float>(std::sqrt(1.0 - sched.alpha_bars[t]));
  FeatureGrid zt(z0.spec, z0.channels);
  kernels::axpby(z0.data.size(), a, z0.data.data(), b, noise.data.data(), zt.data.data());
  return zt;
}

FeatureGrid sample_noise_like(const FeatureGrid& shape, Rng& rng) {
  FeatureGrid n(shape.spec, shape.channels);
  for (auto& v : n.data) v = static_cast<float>(rng.normal());
  return n;
}

// ---------------------------------------------------------------------------
// UNet plumbing

Linear::Linear(int i, int o)
    : in(i), out(o), w(static_cast<std::size_t>(i) * o, 0.0f), b(o, 0.0f),
      gw(w.size(), 0.0f), gb(o, 0.0f) {}

ConvParam::ConvParam(int in, int out, int kk)
    : c_in(in), c_out(out), k(kk),
      w(static_cast<std::size_t>(in) * out * kk * kk, 0.0f), b(out, 0.0f),
      gw(w.size(), 0.0f), gb(out, 0.0f) {}

void DenoiserConfig::validate() const {
  if (z_channels < 1 || prompt_channels < 1 || base_width < 1)
    throw std::invalid_argument("DenoiserConfig: bad channel counts");
  if (levels < 1 || resblocks_per_level < 1 || bottleneck_blocks < 0)
    throw std::invalid_argument("DenoiserConfig: bad depth");
  if (time_embed_dim < 2 || time_embed_dim % 2)
    throw std::invalid_argument("DenoiserConfig: time_embed_dim must be even and >= 2");
}

std::vector<double> time_embedding(int t, int T, int dim) {
  const int half = dim / 2;
  std::vector<double> e(dim);
  const double pos = static_cast<double>(t) / std::max(1, T - 1) * 1000.0;
  for (int k = 0; k < half; ++k) {
    const double w = std::exp(-std::log(10000.0) * k / std::max(1, half - 1));
    e[k] = std::sin(pos * w);
    e[half + k] = std::cos(pos * w);
  }
  return e;
}

namespace {

struct Act {
  int ch = 0, rows = 0, cols = 0;
  std::vector<float> v;
  Act() = default;
  Act(int c, int r, int co) : ch(c), rows(r), cols(co),
      v(static_cast<std::size_t>(c) * r * co, 0.0f) {}
  std::size_t plane() const { return static_cast<std::size_t>(rows) * cols; }
};

void check_finite(const Act& a, const char* block) {
  for (float x : a.v)
    if (!std::isfinite(x))
      throw std::runtime_error(std::string("denoiser: non-finite activation in ") + block);
}

Act conv_fwd(const ConvParam& p, const Act& x) {
  Act y(p.c_out, x.rows, x.cols);
  if (p.k == 3) {
    kernels::conv3x3(x.v.data(), p.c_in, x.rows, x.cols, p.w.data(), p.b.data(), p.c_out,
                     y.v.data());
  } else {
    const std::size_t n = x.plane();
    for (int co = 0; co < p.c_out; ++co) {
      float* o = y.v.data() + co * n;
      for (std::size_t q = 0; q < n; ++q) o[q] = p.b[co];
      for (int ci = 0; ci < p.c_in; ++ci)
        kernels::axpby(n, p.w[co * p.c_in + ci], x.v.data() + ci * n, 1.0f, o, o);
    }
  }
  return y;
}

// Accumulates parameter grads; adds the data gradient into gx.
void conv_bwd(ConvParam& p, const Act& x, const Act& gy, Act& gx) {
  if (p.k == 3) {
    kernels::conv3x3_bwd_weights(x.v.data(), p.c_in, x.rows, x.cols, gy.v.data(), p.c_out,
                                 p.gw.data(), p.gb.data());
    kernels::conv3x3_bwd_data(gy.v.data(), p.c_out, x.rows, x.cols, p.w.data(), p.c_in,
                              gx.v.data());
  } else {
    const std::size_t n = x.plane();
    for (int co = 0; co < p.c_out; ++co) {
      const float* g = gy.v.data() + co * n;
      double bs = 0;
      for (std::size_t q = 0; q < n; ++q) bs += g[q];
      p.gb[co] += static_cast<float>(bs);
      for (int ci = 0; ci < p.c_in; ++ci) {
        p.gw[co * p.c_in + ci] += kernels::dot(n, x.v.data() + ci * n, g);
        kernels::axpby(n, p.w[co * p.c_in + ci], g, 1.0f, gx.v.data() + ci * n,
                       gx.v.data() + ci * n);
      }
    }
  }
}

Act downsample2(const Act& x) {
  Act y(x.ch, x.rows / 2, x.cols / 2);
  for (int c = 0; c < x.ch; ++c)
    for (int i = 0; i < y.rows; ++i)
      for (int j = 0; j < y.cols; ++j) {
        const float* p = x.v.data() + (static_cast<std::size_t>(c) * x.rows + 2 * i) * x.cols + 2 * j;
        y.v[(static_cast<std::size_t>(c) * y.rows + i) * y.cols + j] =
            0.25f * (p[0] + p[1] + p[x.cols] + p[x.cols + 1]);
      }
  return y;
}

Act downsample2_bwd(const Act& gy, int rows, int cols) {
  Act gx(gy.ch, rows, cols);
  for (int c = 0; c < gy.ch; ++c)
    for (int i = 0; i < gy.rows; ++i)
      for (int j = 0; j < gy.cols; ++j) {
        const float g = 0.25f * gy.v[(static_cast<std::size_t>(c) * gy.rows + i) * gy.cols + j];
        float* p = gx.v.data() + (static_cast<std::size_t>(c) * rows + 2 * i) * cols + 2 * j;
        p[0] += g;
        p[1] += g;
        p[cols] += g;
        p[cols + 1] += g;
      }
  return gx;
}

Act upsample2(const Act& x) {
  Act y(x.ch, x.rows * 2, x.cols * 2);
  for (int c = 0; c < x.ch; ++c)
    for (int i = 0; i < y.rows; ++i)
      for (int j = 0; j < y.cols; ++j)
        y.v[(static_cast<std::size_t>(c) * y.rows + i) * y.cols + j] =
            x.v[(static_cast<std::size_t>(c) * x.rows + i / 2) * x.cols + j / 2];
  return y;
}

Act upsample2_bwd(const Act& gy) {
  Act gx(gy.ch, gy.rows / 2, gy.cols / 2);
  for (int c = 0; c < gy.ch; ++c)
    for (int i = 0; i < gy.rows; ++i)
      for (int j = 0; j < gy.cols; ++j)
        gx.v[(static_cast<std::size_t>(c) * gx.rows + i / 2) * gx.cols + j / 2] +=
            gy.v[(static_cast<std::size_t>(c) * gy.rows + i) * gy.cols + j];
  return gx;
}

struct RBCtx {
  Act x, a, h, r;                 // input, conv1 out, post-film, relu out
  std::vector<float> scale;       // per-channel film scale
};

struct AtCtx {
  Act h_in, A;
  float s = 0;
};

// y = x*(1+scale) + shift  (per channel)
Act resblock_fwd(const ResBlockParams& p, const Act& x, const std::vector<double>& temb,
                 RBCtx* ctx) {
  Act a = conv_fwd(p.conv1, x);
  const int C = p.conv1.c_out;
  std::vector<float> scale(C), shift(C);
  for (int c = 0; c < C; ++c) {
    double sv = p.film.b[c], hv = p.film.b[C + c];
    for (int e = 0; e < p.film.in; ++e) {
      sv += p.film.w[c * p.film.in + e] * temb[e];
      hv += p.film.w[(C + c) * p.film.in + e] * temb[e];
    }
    scale[c] = static_cast<float>(sv);
    shift[c] = static_cast<float>(hv);
  }
  Act h(C, a.rows, a.cols);
  const std::size_t n = a.plane();
  for (int c = 0; c < C; ++c) {
    const float* ap = a.v.data() + c * n;
    float* hp = h.v.data() + c * n;
    const float sc = 1.0f + scale[c], sh = shift[c];
    for (std::size_t q = 0; q < n; ++q) hp[q] = ap[q] * sc + sh;
  }
  Act r(C, a.rows, a.cols);
  kernels::relu(h.v.data(), r.v.data(), r.v.size());
  Act y = conv_fwd(p.conv2, r);
  if (p.has_skip) {
    Act s = conv_fwd(p.skip, x);
    kernels::axpby(y.v.size(), 1.0f, y.v.data(), 1.0f, s.v.data(), y.v.data());
  } else {
    kernels::axpby(y.v.size(), 1.0f, y.v.data(), 1.0f, x.v.data(), y.v.data());
  }
  if (ctx) {
    ctx->x = x;
    ctx->a = std::move(a);
    ctx->h = std::move(h);
    ctx->r = std::move(r);
    ctx->scale = std::move(scale);
  }
  return y;
}

Act resblock_bwd(ResBlockParams& p, const RBCtx& ctx, const Act& gy,
                 const std::vector<double>& temb) {
  const int C = p.conv1.c_out;
  const std::size_t n = ctx.a.plane();
  Act gx(ctx.x.ch, ctx.x.rows, ctx.x.cols);
  // skip path
  if (p.has_skip)
    conv_bwd(p.skip, ctx.x, gy, gx);
  else
    kernels::axpby(gx.v.size(), 1.0f, gy.v.data(), 1.0f, gx.v.data(), gx.v.data());
  // conv2
  Act gr(C, ctx.a.rows, ctx.a.cols);
  conv_bwd(p.conv2, ctx.r, gy, gr);
  // relu
  Act gh(C, ctx.a.rows, ctx.a.cols);
  kernels::relu_bwd(gh.v.size(), ctx.h.v.data(), gr.v.data(), gh.v.data());
  // film
  Act ga(C, ctx.a.rows, ctx.a.cols);
  for (int c = 0; c < C; ++c) {
    const float* ghp = gh.v.data() + c * n;
    const float* ap = ctx.a.v.data() + c * n;
    float* gap = ga.v.data() + c * n;
    const float sc = 1.0f + ctx.scale[c];
    double gscale = 0, gshift = 0;
    for (std::size_t q = 0; q < n; ++q) {
      gap[q] = ghp[q] * sc;
      gscale += static_cast<double>(ghp[q]) * ap[q];
      gshift += ghp[q];
    }
    for (int e = 0; e < p.film.in; ++e) {
      p.film.gw[c * p.film.in + e] += static_cast<float>(gscale * temb[e]);
      p.film.gw[(C + c) * p.film.in + e] += static_cast<float>(gshift * temb[e]);
    }
    p.film.gb[c] += static_cast<float>(gscale);
    p.film.gb[C + c] += static_cast<float>(gshift);
  }
  conv_bwd(p.conv1, ctx.x, ga, gx);
  return gx;
}

Act attention_fwd(const AttentionParams& p, const Act& h, const Act& mapo, AtCtx* ctx) {
  if (mapo.rows != h.rows || mapo.cols != h.cols)
    throw std::invalid_argument("centerline_attention: spatial mismatch");
  Act pre = conv_fwd(p.mask_conv, mapo);
  Act A(1, h.rows, h.cols);
  kernels::sigmoid(pre.v.data(), A.v.data(), A.v.size());
  double s = 0;
  for (float v : mapo.v) s += v;
  s /= mapo.v.size();
  const std::size_t n = h.plane();
  Act y(h.ch, h.rows, h.cols);
  for (int c = 0; c < h.ch; ++c) {
    const float cvec = static_cast<float>(p.cw[c] * s + p.cb[c]);
    const float* hp = h.v.data() + c * n;
    float* yp = y.v.data() + c * n;
    // gate centered at 1: zero mask weights give sigmoid 0.5 and a unit gate,
    // so an untrained attention layer passes h through unchanged
    for (std::size_t q = 0; q < n; ++q) yp[q] = hp[q] * (0.5f + A.v[q]) + cvec;
  }
  if (ctx) {
    ctx->h_in = h;
    ctx->A = std::move(A);
    ctx->s = static_cast<float>(s);
  }
  return y;
}

Act attention_bwd(AttentionParams& p, const AtCtx& ctx, const Act& gy, const Act& mapo) {
  const std::size_t n = ctx.h_in.plane();
  Act gh(ctx.h_in.ch, ctx.h_in.rows, ctx.h_in.cols);
  Act gA(1, ctx.h_in.rows, ctx.h_in.cols);
  for (int c = 0; c < ctx.h_in.ch; ++c) {
    const float* gyp = gy.v.data() + c * n;
    const float* hp = ctx.h_in.v.data() + c * n;
    float* ghp = gh.v.data() + c * n;
    double gc = 0;
    for (std::size_t q = 0; q < n; ++q) {
      ghp[q] = gyp[q] * (0.5f + ctx.A.v[q]);
      gA.v[q] += gyp[q] * hp[q];
      gc += gyp[q];
    }
    p.gcw[c] += static_cast<float>(gc * ctx.s);
    p.gcb[c] += static_cast<float>(gc);
  }
  Act gpre(1, ctx.h_in.rows, ctx.h_in.cols);
  for (std::size_t q = 0; q < gpre.v.size(); ++q)
    gpre.v[q] = gA.v[q] * ctx.A.v[q] * (1.0f - ctx.A.v[q]);
  Act dummy(1, ctx.h_in.rows, ctx.h_in.cols);  // map_o carries no gradient
  conv_bwd(p.mask_conv, mapo, gpre, dummy);
  return gh;
}

}  // namespace

FeatureGrid centerline_attention(const FeatureGrid& h, const CenterlineGrid& map_o,
                                 const AttentionParams& params) {
  Act ha(h.channels, h.spec.rows, h.spec.cols);
  ha.v = h.data;
  Act mo(1, map_o.spec.rows, map_o.spec.cols);
  mo.v = map_o.data;
  Act y = attention_fwd(params, ha, mo, nullptr);
  FeatureGrid out(h.spec, h.channels);
  out.data = std::move(y.v);
  return out;
}

// ---------------------------------------------------------------------------
// Denoiser

struct Denoiser::Ctx {
  double skip_cp = 0.0;  // prompt coefficient of the fixed skip, for backward
  Act x_cat;
  std::vector<double> temb;
  std::vector<Act> mapo;                 // per level
  std::vector<std::vector<RBCtx>> down_rb, up_rb;
  std::vector<RBCtx> mid_rb;
  std::vector<AtCtx> down_at, up_at;
  std::vector<Act> skips;
  Act final_h;
  int latent_rows = 0, latent_cols = 0;
};

namespace {
ResBlockParams make_resblock(int c_in, int c_out, int embed_dim) {
  ResBlockParams p;
  p.conv1 = ConvParam(c_in, c_out, 3);
  p.conv2 = ConvParam(c_out, c_out, 3);
  p.film = Linear(embed_dim, 2 * c_out);
  if (c_in != c_out) {
    p.skip = ConvParam(c_in, c_out, 1);
    p.has_skip = true;
  }
  return p;
}

AttentionParams make_attention(int channels) {
  AttentionParams p;
  p.mask_conv = ConvParam(1, 1, 3);
  p.cw.assign(channels, 0.0f);
  p.cb.assign(channels, 0.0f);
  p.gcw.assign(channels, 0.0f);
  p.gcb.assign(channels, 0.0f);
  return p;
}
}  // namespace

Denoiser::Denoiser(const DenoiserConfig& cfg) : cfg_(cfg) {
  cfg_.validate();
  const int B = cfg_.base_width, E = cfg_.time_embed_dim;
  conv_in_ = ConvParam(cfg_.z_channels + cfg_.prompt_channels, B, 3);
  conv_out_ = ConvParam(B, cfg_.z_channels, 3);
  down_.resize(cfg_.levels);
  up_.resize(cfg_.levels);
  for (int l = 0; l < cfg_.levels; ++l) {
    for (int r = 0; r < cfg_.resblocks_per_level; ++r) {
      down_[l].push_back(make_resblock(B, B, E));
      up_[l].push_back(make_resblock(r == 0 ? 2 * B : B, B, E));
    }
    down_attn_.push_back(make_attention(B));
    up_attn_.push_back(make_attention(B));
  }
  for (int m = 0; m < cfg_.bottleneck_blocks; ++m) mid_.push_back(make_resblock(B, B, E));
}

void Denoiser::init_weights(Rng& rng) {
  auto he_conv = [&](ConvParam& p) {
    const double std = std::sqrt(2.0 / (p.c_in * p.k * p.k));
    for (auto& v : p.w) v = static_cast<float>(rng.normal() * std);
  };
  // conv2 of every residual block stays zero so each block starts as the
  // identity; a deep stack of He-initialized residual branches would
  // amplify activations multiplicatively and destabilize early training
  auto init_rb = [&](ResBlockParams& rb) {
    he_conv(rb.conv1);
    if (rb.has_skip) he_conv(rb.skip);
  };
  he_conv(conv_in_);
  for (auto& lvl : down_)
    for (auto& rb : lvl) init_rb(rb);
  for (auto& rb : mid_) init_rb(rb);
  for (auto& lvl : up_)
    for (auto& rb : lvl) init_rb(rb);
  // film, attention and conv_out start at zero: identity modulation,
  // uniform mask, zero predicted noise.
}

namespace {
Act mapo_to_act(const CenterlineGrid& map_o, int rows, int cols) {
  // nearest resample to the requested resolution
  Act a(1, rows, cols);
  for (int i = 0; i < rows; ++i)
    for (int j = 0; j < cols; ++j) {
      const int si = std::min(static_cast<int>((i + 0.5) * map_o.spec.rows / rows),
                              map_o.spec.rows - 1);
      const int sj = std::min(static_cast<int>((j + 0.5) * map_o.spec.cols / cols),
                              map_o.spec.cols - 1);
      a.v[static_cast<std::size_t>(i) * cols + j] = map_o.at(si, sj);
    }
  return a;
}
}  // namespace

struct DenoiserDetail {
  static Act run(const Denoiser& d, const DenoiserConfig& cfg,
                        const ConvParam& conv_in, const ConvParam& conv_out,
                        const std::vector<std::vector<ResBlockParams>>& down,
                        const std::vector<AttentionParams>& down_attn,
                        const std::vector<ResBlockParams>& mid,
                        const std::vector<std::vector<ResBlockParams>>& up,
                        const std::vector<AttentionParams>& up_attn,
                        const FeatureGrid& z_t, int t, const FeatureGrid& prompt,
                        const CenterlineGrid& map_o, const NoiseSchedule& sched,
                        Denoiser::Ctx* ctx) {
  (void)d;
  if (z_t.channels != cfg.z_channels || prompt.channels != cfg.prompt_channels)
    throw std::invalid_argument("denoiser: channel mismatch");
  if (z_t.spec.rows != prompt.spec.rows || z_t.spec.cols != prompt.spec.cols)
    throw std::invalid_argument("denoiser: z/prompt spatial mismatch");
  if (t < 0 || t >= sched.T) throw std::invalid_argument("denoiser: t out of range");
  const int rows = z_t.spec.rows, cols = z_t.spec.cols;
  const int down_factor = 1 << (cfg.levels - 1);
  if (rows % down_factor || cols % down_factor)
    throw std::invalid_argument("denoiser: grid not divisible by 2^(levels-1)");

  Act x(cfg.z_channels + cfg.prompt_channels, rows, cols);
  std::copy(z_t.data.begin(), z_t.data.end(), x.v.begin());
  std::copy(prompt.data.begin(), prompt.data.end(), x.v.begin() + z_t.data.size());
  std::vector<double> temb = time_embedding(t, sched.T, cfg.time_embed_dim);

  std::vector<Act> mapo(cfg.levels);
  for (int l = 0; l < cfg.levels; ++l) mapo[l] = mapo_to_act(map_o, rows >> l, cols >> l);

  if (ctx) {
    ctx->x_cat = x;
    ctx->temb = temb;
    ctx->mapo = mapo;
    ctx->down_rb.assign(cfg.levels, {});
    ctx->up_rb.assign(cfg.levels, {});
    ctx->mid_rb.clear();
    ctx->down_at.resize(cfg.levels);
    ctx->up_at.resize(cfg.levels);
    ctx->skips.clear();
    ctx->latent_rows = rows;
    ctx->latent_cols = cols;
  }

  Act h = conv_fwd(conv_in, x);
  check_finite(h, "conv_in");
  std::vector<Act> skips;
  for (int l = 0; l < cfg.levels; ++l) {
    for (int r = 0; r < cfg.resblocks_per_level; ++r) {
      RBCtx rc;
      h = resblock_fwd(down[l][r], h, temb, ctx ? &rc : nullptr);
      if (ctx) ctx->down_rb[l].push_back(std::move(rc));
    }
    if (cfg.centerline_attention) {
      AtCtx ac;
      h = attention_fwd(down_attn[l], h, mapo[l], ctx ? &ac : nullptr);
      if (ctx) ctx->down_at[l] = std::move(ac);
    }
    check_finite(h, "down path");
    skips.push_back(h);
    if (l < cfg.levels - 1) h = downsample2(h);
  }
  for (std::size_t m = 0; m < mid.size(); ++m) {
    RBCtx rc;
    h = resblock_fwd(mid[m], h, temb, ctx ? &rc : nullptr);
    if (ctx) ctx->mid_rb.push_back(std::move(rc));
  }
  check_finite(h, "bottleneck");
  for (int l = cfg.levels - 1; l >= 0; --l) {
    Act cat(h.ch + skips[l].ch, h.rows, h.cols);
    std::copy(h.v.begin(), h.v.end(), cat.v.begin());
    std::copy(skips[l].v.begin(), skips[l].v.end(), cat.v.begin() + h.v.size());
    h = std::move(cat);
    for (int r = 0; r < cfg.resblocks_per_level; ++r) {
      RBCtx rc;
      h = resblock_fwd(up[l][r], h, temb, ctx ? &rc : nullptr);
      if (ctx) ctx->up_rb[l].push_back(std::move(rc));
    }
    if (cfg.centerline_attention) {
      AtCtx ac;
      h = attention_fwd(up_attn[l], h, mapo[l], ctx ? &ac : nullptr);
      if (ctx) ctx->up_at[l] = std::move(ac);
    }
    check_finite(h, "up path");
    if (l > 0) h = upsample2(h);
  }
  if (ctx) {
    ctx->skips = std::move(skips);
    ctx->final_h = h;
  }
  Act out = conv_fwd(conv_out, h);
  check_finite(out, "conv_out");
  return out;
  }
};

// Fixed preconditioning skip. The untrained net predicts
//   cz * z_t + cp * prompt,
// the noise implied by reading the prompt as a latent-space estimate of z0
// with constant prior variance kSkipPriorVar, blended against the information
// in z_t itself. At high t this is almost (z_t - sqrt(ab) * prompt) /
// sqrt(1 - ab) ("trust the prompt"); at low t the prompt's weight in the
// implied z0 posterior vanishes, so the base defers to z_t where the chain
// already carries more information than the prompt.
// The learned UNet output is a correction on top of this base, so training
// starts from prompt-copy quality instead of having to transport both inputs
// through the narrow trunk.
std::pair<double, double> denoiser_skip(const NoiseSchedule& sched, int t) {
  constexpr double kSkipPriorVar = 0.25;
  const double ab = sched.alpha_bars[t];
  const double evidence = ab / (1.0 - ab);      // z_t's precision about z0
  const double prior = 1.0 / kSkipPriorVar;     // the prompt's precision
  const double c = (prior / (evidence + prior)) / std::sqrt(1.0 - ab);
  return {c, -c * std::sqrt(ab)};
}

namespace {
void add_identity_skip(FeatureGrid& eps, const FeatureGrid& z_t,
                       const FeatureGrid& prompt, int t, const NoiseSchedule& sched) {
  const auto [cz, cp] = denoiser_skip(sched, t);
  const float fz = static_cast<float>(cz), fp = static_cast<float>(cp);
  if (prompt.channels == eps.channels && prompt.data.size() == eps.data.size()) {
    for (std::size_t q = 0; q < eps.data.size(); ++q)
      eps.data[q] += fz * z_t.data[q] + fp * prompt.data[q];
  } else {
    const float s = static_cast<float>(std::sqrt(1.0 - sched.alpha_bars[t]));
    for (std::size_t q = 0; q < eps.data.size(); ++q) eps.data[q] += s * z_t.data[q];
  }
}
}  // namespace

FeatureGrid Denoiser::forward(const FeatureGrid& z_t, int t, const FeatureGrid& prompt,
                              const CenterlineGrid& map_o, const NoiseSchedule& sched) const {
  Act out = DenoiserDetail::run(*this, cfg_, conv_in_, conv_out_, down_, down_attn_, mid_, up_,
                         up_attn_, z_t, t, prompt, map_o, sched, nullptr);
  FeatureGrid r(z_t.spec, cfg_.z_channels);
  r.data = std::move(out.v);
  add_identity_skip(r, z_t, prompt, t, sched);
  return r;
}

FeatureGrid Denoiser::forward_cached(const FeatureGrid& z_t, int t, const FeatureGrid& prompt,
                                     const CenterlineGrid& map_o, const NoiseSchedule& sched) {
  ctx_ = std::make_shared<Ctx>();
  Act out = DenoiserDetail::run(*this, cfg_, conv_in_, conv_out_, down_, down_attn_, mid_, up_,
                         up_attn_, z_t, t, prompt, map_o, sched, ctx_.get());
  FeatureGrid r(z_t.spec, cfg_.z_channels);
  r.data = std::move(out.v);
  add_identity_skip(r, z_t, prompt, t, sched);
  ctx_->skip_cp = (prompt.channels == r.channels && prompt.data.size() == r.data.size())
                      ? denoiser_skip(sched, t).second
                      : 0.0;
  return r;
}

FeatureGrid Denoiser::backward(const FeatureGrid& grad_out) {
  if (!ctx_) throw std::runtime_error("denoiser backward without cached forward");
  Ctx& c = *ctx_;
  const int rows = c.latent_rows, cols = c.latent_cols;

  Act gy(cfg_.z_channels, rows, cols);
  gy.v = grad_out.data;
  Act gh(cfg_.base_width, rows, cols);
  conv_bwd(conv_out_, c.final_h, gy, gh);

  std::vector<Act> skip_grads(cfg_.levels);

  // reverse the up path (levels 0 .. levels-1 in forward-reverse order)
  for (int l = 0; l < cfg_.levels; ++l) {
    if (l > 0) gh = upsample2_bwd(gh);
    if (cfg_.centerline_attention)
      gh = attention_bwd(up_attn_[l], c.up_at[l], gh, c.mapo[l]);
    for (int r = cfg_.resblocks_per_level - 1; r >= 0; --r)
      gh = resblock_bwd(up_[l][r], c.up_rb[l][r], gh, c.temb);
    // split the concat gradient: first base_width channels continue down
    // the tape, the rest belongs to the skip connection
    const int B = cfg_.base_width;
    Act g_into(B, gh.rows, gh.cols), g_skip(B, gh.rows, gh.cols);
    std::copy(gh.v.begin(), gh.v.begin() + g_into.v.size(), g_into.v.begin());
    std::copy(gh.v.begin() + g_into.v.size(), gh.v.end(), g_skip.v.begin());
    skip_grads[l] = std::move(g_skip);
    gh = std::move(g_into);
  }

  // bottleneck
  for (int m = static_cast<int>(mid_.size()) - 1; m >= 0; --m)
    gh = resblock_bwd(mid_[m], c.mid_rb[m], gh, c.temb);

  // reverse the down path
  for (int l = cfg_.levels - 1; l >= 0; --l) {
    if (l < cfg_.levels - 1) gh = downsample2_bwd(gh, rows >> l, cols >> l);
    kernels::axpby(gh.v.size(), 1.0f, gh.v.data(), 1.0f, skip_grads[l].v.data(), gh.v.data());
    if (cfg_.centerline_attention)
      gh = attention_bwd(down_attn_[l], c.down_at[l], gh, c.mapo[l]);
    for (int r = cfg_.resblocks_per_level - 1; r >= 0; --r)
      gh = resblock_bwd(down_[l][r], c.down_rb[l][r], gh, c.temb);
  }

  Act gx(cfg_.z_channels + cfg_.prompt_channels, rows, cols);
  conv_bwd(conv_in_, c.x_cat, gh, gx);

  FeatureGrid gprompt({rows, cols, 1.0}, cfg_.prompt_channels);
  const std::size_t zn = static_cast<std::size_t>(cfg_.z_channels) * rows * cols;
  std::copy(gx.v.begin() + zn, gx.v.end(), gprompt.data.begin());
  if (c.skip_cp != 0.0) {
    const float cp = static_cast<float>(c.skip_cp);
    for (std::size_t q = 0; q < gprompt.data.size(); ++q)
      gprompt.data[q] += cp * grad_out.data[q];
  }
  ctx_.reset();
  return gprompt;
}

void Denoiser::zero_grads() {
  for_each_param([](const std::string&, std::vector<float>&, std::vector<float>& g) {
    std::fill(g.begin(), g.end(), 0.0f);
  });
}

void Denoiser::for_each_param(const std::function<void(const std::string&, std::vector<float>&,
                                                       std::vector<float>&)>& fn) {
  auto conv = [&](const std::string& n, ConvParam& p) {
    fn(n + ".w", p.w, p.gw);
    fn(n + ".b", p.b, p.gb);
  };
  auto rb = [&](const std::string& n, ResBlockParams& p) {
    conv(n + ".conv1", p.conv1);
    conv(n + ".conv2", p.conv2);
    fn(n + ".film.w", p.film.w, p.film.gw);
    fn(n + ".film.b", p.film.b, p.film.gb);
    if (p.has_skip) conv(n + ".skip", p.skip);
  };
  auto at = [&](const std::string& n, AttentionParams& p) {
    conv(n + ".mask", p.mask_conv);
    fn(n + ".cw", p.cw, p.gcw);
    fn(n + ".cb", p.cb, p.gcb);
  };
  conv("conv_in", conv_in_);
  for (int l = 0; l < cfg_.levels; ++l) {
    for (int r = 0; r < cfg_.resblocks_per_level; ++r)
      rb("down." + std::to_string(l) + "." + std::to_string(r), down_[l][r]);
    if (cfg_.centerline_attention) at("down_attn." + std::to_string(l), down_attn_[l]);
  }
  for (std::size_t m = 0; m < mid_.size(); ++m) rb("mid." + std::to_string(m), mid_[m]);
  for (int l = 0; l < cfg_.levels; ++l) {
    for (int r = 0; r < cfg_.resblocks_per_level; ++r)
      rb("up." + std::to_string(l) + "." + std::to_string(r), up_[l][r]);
    if (cfg_.centerline_attention) at("up_attn." + std::to_string(l), up_attn_[l]);
  }
  conv("conv_out", conv_out_);
}

std::size_t Denoiser::param_count() {
  std::size_t n = 0;
  for_each_param([&](const std::string&, std::vector<float>& v, std::vector<float>&) {
    n += v.size();
  });
  return n;
}

// ---------------------------------------------------------------------------
// Samplers

std::vector<double> ddim_time_grid(int steps) {
  if (steps < 1) throw std::invalid_argument("ddim: steps must be >= 1");
  if (steps == 3) return {1.0, 0.666, 0.333, 0.0};  // literal printed schedule
  std::vector<double> g;
  for (int k = 0; k <= steps; ++k) g.push_back(1.0 - static_cast<double>(k) / steps);
  return g;
}

namespace {
int grid_index(double tau, int T) { return static_cast<int>(std::lround(tau * (T - 1))); }
}  // namespace

FeatureGrid ddim_sample_latent(const DenoiseFn& fn, const NoiseSchedule& sched,
                               const GridSpec& latent_spec, int z_channels, int steps,
                               std::uint64_t seed) {
  const std::vector<double> grid = ddim_time_grid(steps);
  Rng rng(seed);
  FeatureGrid z(latent_spec, z_channels);
  for (auto& v : z.data) v = static_cast<float>(rng.normal());
  FeatureGrid z0(latent_spec, z_channels);
  for (std::size_t k = 0; k + 1 < grid.size(); ++k) {
    const int t = grid_index(grid[k], sched.T);
    const double ab = sched.alpha_bars[t];
    FeatureGrid eps = fn(z, t);
    const float ia = static_cast<float>(1.0 / std::sqrt(ab));
    const float ib = static_cast<float>(-std::sqrt(1.0 - ab) / std::sqrt(ab));
    kernels::axpby(z.data.size(), ia, z.data.data(), ib, eps.data.data(), z0.data.data());
    if (grid[k + 1] > 0.0) {
      const int tn = grid_index(grid[k + 1], sched.T);
      const double abn = sched.alpha_bars[tn];
      kernels::axpby(z.data.size(), static_cast<float>(std::sqrt(abn)), z0.data.data(),
                     static_cast<float>(std::sqrt(1.0 - abn)), eps.data.data(), z.data.data());
    }
  }
  return z0;
}

FeatureGrid ddpm_sample_latent(const DenoiseFn& fn, const NoiseSchedule& sched,
                               const GridSpec& latent_spec, int z_channels,
                               std::uint64_t seed) {
  Rng rng(seed);
  FeatureGrid z(latent_spec, z_channels);
  for (auto& v : z.data) v = static_cast<float>(rng.normal());
  FeatureGrid mean(latent_spec, z_channels);
  for (int t = sched.T - 1; t >= 0; --t) {
    FeatureGrid eps = fn(z, t);
    const double a = sched.alphas[t], ab = sched.alpha_bars[t], b = sched.betas[t];
    const float ca = static_cast<float>(1.0 / std::sqrt(a));
    const float cb = static_cast<float>(-b / (std::sqrt(a) * std::sqrt(1.0 - ab)));
    kernels::axpby(z.data.size(), ca, z.data.data(), cb, eps.data.data(), mean.data.data());
    if (t > 0) {
      const float sb = static_cast<float>(std::sqrt(b));
      for (std::size_t q = 0; q < z.data.size(); ++q)
        z.data[q] = mean.data[q] + sb * static_cast<float>(rng.normal());
    }
  }
  return mean;
}

SemanticGrid latent_to_map(const FeatureGrid& z0, const LatentCodec& codec,
                           const ClassSet& classes, const GridSpec& full_spec,
                           double output_gain) {
  std::vector<float> vals(static_cast<std::size_t>(classes.size()) * full_spec.cells());
  const std::size_t cells = full_spec.cells();
  for (int c = 0; c < classes.size(); ++c)
    for (int i = 0; i < full_spec.rows; ++i)
      for (int j = 0; j < full_spec.cols; ++j) {
        const float zv = z0.at(c, i / codec.downscale, j / codec.downscale);
        vals[c * cells + static_cast<std::size_t>(i) * full_spec.cols + j] =
            static_cast<float>(1.0 / (1.0 + std::exp(-output_gain * zv)));
      }
  return SemanticGrid::from_values(full_spec, classes, std::move(vals));
}

namespace {
GridSpec full_spec_from_latent(const GridSpec& latent, int downscale) {
  return {latent.rows * downscale, latent.cols * downscale, latent.resolution_m / downscale};
}
}  // namespace

SemanticGrid ddim_sample(const Denoiser& params, const NoiseSchedule& sched,
                         const FeatureGrid& prompt, const CenterlineGrid& map_o,
                         int steps, std::uint64_t seed, const LatentCodec& codec,
                         const ClassSet& classes, double output_gain) {
  DenoiseFn fn = [&](const FeatureGrid& z, int t) {
    return params.forward(z, t, prompt, map_o, sched);
  };
  FeatureGrid z0 = ddim_sample_latent(fn, sched, prompt.spec, params.config().z_channels,
                                      steps, seed);
  return latent_to_map(z0, codec, classes, full_spec_from_latent(prompt.spec, codec.downscale),
                       output_gain);
}

SemanticGrid ddpm_sample(const Denoiser& params, const NoiseSchedule& sched,
                         const FeatureGrid& prompt, const CenterlineGrid& map_o,
                         std::uint64_t seed, const LatentCodec& codec,
                         const ClassSet& classes, double output_gain) {
  DenoiseFn fn = [&](const FeatureGrid& z, int t) {
    return params.forward(z, t, prompt, map_o, sched);
  };
  FeatureGrid z0 = ddpm_sample_latent(fn, sched, prompt.spec, params.config().z_channels, seed);
  return latent_to_map(z0, codec, classes, full_spec_from_latent(prompt.spec, codec.downscale),
                       output_gain);
}

}  // namespace tscg
