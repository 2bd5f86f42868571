#include "tscg/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <stdexcept>

#include "json.hpp"
#include "tscg/kernels.hpp"

namespace tscg {

using nlohmann::json;

namespace {

std::uint64_t mix(std::uint64_t a, std::uint64_t b) {
  // splitmix64 over the combined word
  std::uint64_t z = a + 0x9E3779B97F4A7C15ULL * (b + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

}  // namespace

// ---------------------------------------------------------------------------
// Config

void TrainConfig::validate() const {
  if (batch_size < 1) throw std::invalid_argument("train: batch_size must be >= 1");
  if (lr <= 0) throw std::invalid_argument("train: lr must be positive");
  if (lr_decay <= 0 || lr_decay > 1) throw std::invalid_argument("train: lr_decay in (0,1]");
  if (lr_step_epochs < 1) throw std::invalid_argument("train: lr_step_epochs must be >= 1");
  if (pretrain_epochs < 0 || finetune_epochs < 0)
    throw std::invalid_argument("train: epoch counts must be non-negative");
  if (mask_ratio < 0 || mask_ratio > 1)
    throw std::invalid_argument("train: mask_ratio in [0,1]");
  if (mask_patch < 1) throw std::invalid_argument("train: mask_patch must be >= 1");
  if (fusion_width < 1) throw std::invalid_argument("train: fusion_width must be >= 1");
  if (focal_weight < 0) throw std::invalid_argument("train: focal_weight must be >= 0");
  if (corrupt_augment < 0 || corrupt_augment > 1)
    throw std::invalid_argument("train: corrupt_augment in [0,1]");
  if (output_gain <= 0) throw std::invalid_argument("train: output_gain must be positive");
  if (T < 2) throw std::invalid_argument("train: T must be >= 2");
  if (!(beta_min > 0 && beta_max > beta_min && beta_max < 1))
    throw std::invalid_argument("train: need 0 < beta_min < beta_max < 1");
  if (latent_downscale != 1)
    throw std::invalid_argument("train: only latent_downscale == 1 is supported");
  loss.validate();
  denoiser.validate();
}

std::string TrainConfig::to_json() const {
  json d{{"z_channels", denoiser.z_channels},
         {"prompt_channels", denoiser.prompt_channels},
         {"base_width", denoiser.base_width},
         {"levels", denoiser.levels},
         {"resblocks_per_level", denoiser.resblocks_per_level},
         {"bottleneck_blocks", denoiser.bottleneck_blocks},
         {"time_embed_dim", denoiser.time_embed_dim},
         {"centerline_attention", denoiser.centerline_attention}};
  json j{{"seed", seed},
         {"batch_size", batch_size},
         {"lr", lr},
         {"lr_decay", lr_decay},
         {"lr_step_epochs", lr_step_epochs},
         {"pretrain_epochs", pretrain_epochs},
         {"finetune_epochs", finetune_epochs},
         {"mask_ratio", mask_ratio},
         {"mask_patch", mask_patch},
         {"fusion_width", fusion_width},
         {"focal_weight", focal_weight},
         {"corrupt_augment", corrupt_augment},
         {"output_gain", output_gain},
         {"gamma", loss.gamma},
         {"epsilon", loss.epsilon},
         {"T", T},
         {"beta_min", beta_min},
         {"beta_max", beta_max},
         {"latent_downscale", latent_downscale},
         {"use_tsam", use_tsam},
         {"use_centerline", use_centerline},
         {"denoiser", d}};
  return j.dump(2);
}

TrainConfig TrainConfig::from_json(const std::string& text) {
  json j = json::parse(text);
  TrainConfig c;
  c.seed = j.value("seed", c.seed);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.lr = j.value("lr", c.lr);
  c.lr_decay = j.value("lr_decay", c.lr_decay);
  c.lr_step_epochs = j.value("lr_step_epochs", c.lr_step_epochs);
  c.pretrain_epochs = j.value("pretrain_epochs", c.pretrain_epochs);
  c.finetune_epochs = j.value("finetune_epochs", c.finetune_epochs);
  c.mask_ratio = j.value("mask_ratio", c.mask_ratio);
  c.mask_patch = j.value("mask_patch", c.mask_patch);
  c.fusion_width = j.value("fusion_width", c.fusion_width);
  c.focal_weight = j.value("focal_weight", c.focal_weight);
  c.corrupt_augment = j.value("corrupt_augment", c.corrupt_augment);
  c.output_gain = j.value("output_gain", c.output_gain);
  c.loss.gamma = j.value("gamma", c.loss.gamma);
  c.loss.epsilon = j.value("epsilon", c.loss.epsilon);
  c.T = j.value("T", c.T);
  c.beta_min = j.value("beta_min", c.beta_min);
  c.beta_max = j.value("beta_max", c.beta_max);
  c.latent_downscale = j.value("latent_downscale", c.latent_downscale);
  c.use_tsam = j.value("use_tsam", c.use_tsam);
  c.use_centerline = j.value("use_centerline", c.use_centerline);
  if (j.contains("denoiser")) {
    const json& d = j["denoiser"];
    c.denoiser.z_channels = d.value("z_channels", c.denoiser.z_channels);
    c.denoiser.prompt_channels = d.value("prompt_channels", c.denoiser.prompt_channels);
    c.denoiser.base_width = d.value("base_width", c.denoiser.base_width);
    c.denoiser.levels = d.value("levels", c.denoiser.levels);
    c.denoiser.resblocks_per_level = d.value("resblocks_per_level", c.denoiser.resblocks_per_level);
    c.denoiser.bottleneck_blocks = d.value("bottleneck_blocks", c.denoiser.bottleneck_blocks);
    c.denoiser.time_embed_dim = d.value("time_embed_dim", c.denoiser.time_embed_dim);
    c.denoiser.centerline_attention = d.value("centerline_attention", c.denoiser.centerline_attention);
  }
  c.validate();
  return c;
}

double lr_at_epoch(const TrainConfig& cfg, int epoch) {
  if (epoch < 0) throw std::invalid_argument("lr_at_epoch: negative epoch");
  const int k = epoch / cfg.lr_step_epochs;
  double lr = cfg.lr;
  for (int i = 0; i < k; ++i) lr *= cfg.lr_decay;
  return lr;
}

// ---------------------------------------------------------------------------
// Adam

void adam_update(std::size_t n, double* w, const double* g, double* m, double* v,
                 int step, double lr, double beta1, double beta2, double eps) {
  if (step < 1) throw std::invalid_argument("adam_update: step is 1-based");
  const double c1 = 1.0 - std::pow(beta1, step);
  const double c2 = 1.0 - std::pow(beta2, step);
  for (std::size_t i = 0; i < n; ++i) {
    m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
    v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
    const double mhat = m[i] / c1;
    const double vhat = v[i] / c2;
    w[i] -= lr * mhat / (std::sqrt(vhat) + eps);
  }
}

Adam::Adam(double lr, double beta1, double beta2, double eps)
    : lr_(lr), b1_(beta1), b2_(beta2), eps_(eps) {}

void Adam::add(std::vector<float>& w, std::vector<float>& g) {
  if (w.size() != g.size()) throw std::invalid_argument("adam: tensor/grad size mismatch");
  Slot s;
  s.w = w.data();
  s.g = g.data();
  s.n = w.size();
  s.shadow.assign(w.begin(), w.end());
  s.m.assign(w.size(), 0.0);
  s.v.assign(w.size(), 0.0);
  slots_.push_back(std::move(s));
}

void Adam::step() {
  ++t_;
  std::vector<double> g;
  for (Slot& s : slots_) {
    g.assign(s.g, s.g + s.n);
    adam_update(s.n, s.shadow.data(), g.data(), s.m.data(), s.v.data(), t_, lr_, b1_,
                b2_, eps_);
    for (std::size_t i = 0; i < s.n; ++i) s.w[i] = static_cast<float>(s.shadow[i]);
  }
}

// ---------------------------------------------------------------------------
// Model assembly

CameraRig default_rig() {
  return CameraRig::surround(40, 64, 70.0 * M_PI / 180.0, 1.5, 0.35);
}

Model make_model(const TrainConfig& cfg, const GridSpec& spec, const ClassSet& classes) {
  cfg.validate();
  spec.validate();
  Model m;
  m.cfg = cfg;
  // channel counts follow the class set regardless of the config defaults
  m.cfg.denoiser.z_channels = classes.size();
  m.cfg.denoiser.prompt_channels = classes.size();
  m.spec = spec;
  m.classes = classes;
  m.denoiser = Denoiser(m.cfg.denoiser);
  Rng rng(mix(cfg.seed, 0xD1));
  m.denoiser.init_weights(rng);
  const int N = classes.size(), K = cfg.fusion_width;
  m.fusion.phi1 = Conv3x3Layer(N, K);
  m.fusion.phi2 = Conv3x3Layer(2 * N, K);
  m.fusion.phi3 = Conv3x3Layer(K, N);
  // The fusion stack starts as a near-identity: phi1 forwards the summed map
  // through its first N channels (He noise on the rest breaks symmetry), phi2
  // is zero, and phi3 reads the identity channels back as the codec affine
  // of the previous/current average. The fused prompt therefore starts in
  // the pretrain prompt distribution at the start of fine-tuning; gradient
  // descent grows the temporal pathways from there.
  const double std1 = std::sqrt(2.0 / (N * 9));
  for (std::size_t q = 0; q < m.fusion.phi1.w.size(); ++q) {
    const int co = static_cast<int>(q / (static_cast<std::size_t>(N) * 9));
    m.fusion.phi1.w[q] = co < N ? 0.0f : static_cast<float>(rng.normal() * std1);
  }
  for (int c = 0; c < N; ++c)
    m.fusion.phi1.w[(static_cast<std::size_t>(c) * N + c) * 9 + 4] = 1.0f;
  std::fill(m.fusion.phi2.w.begin(), m.fusion.phi2.w.end(), 0.0f);
  std::fill(m.fusion.phi3.w.begin(), m.fusion.phi3.w.end(), 0.0f);
  for (int c = 0; c < N; ++c) {
    m.fusion.phi3.w[(static_cast<std::size_t>(c) * K + c) * 9 + 4] = 1.0f;
    m.fusion.phi3.b[c] = -1.0f;
  }
  m.head = DecodeHead(N, N);
  m.codec.downscale = cfg.latent_downscale;
  m.codec.validate(spec);
  m.sched = make_schedule(cfg.T, cfg.beta_min, cfg.beta_max);
  m.rig = default_rig();
  return m;
}

// ---------------------------------------------------------------------------
// Observation pipeline

Observation observe(const Model& model, const SceneFrame& frame) {
  if (frame.images.empty())
    throw std::invalid_argument("observe: frame carries no rendered images");
  Observation o;
  o.features = ipm_warp(frame.images, model.rig, model.spec);
  o.map = decode_map(o.features, model.head, model.classes);
  return o;
}

namespace {
Observation observe_clean(const Model& model, const SemanticGrid& gt) {
  Observation o;
  auto images = render_rig(gt, model.rig);
  o.features = ipm_warp(images, model.rig, model.spec);
  o.map = decode_map(o.features, model.head, model.classes);
  return o;
}

// Intermediates of the fusion forward pass needed by its backward pass.
struct PromptTape {
  FeatureGrid sum_map;   // prev_aligned + cur map (phi1 input)
  FeatureGrid pre1;      // phi1 output before ReLU
  FeatureGrid cat_feat;  // concat(aligned prev feat, cur feat) (phi2 input)
  FeatureGrid s;         // F_m + F_b (phi3 input)
};

FeatureGrid fusion_forward(const Model& model, const Observation& cur,
                           const SemanticGrid* prev_map, const FeatureGrid* prev_feat,
                           const Mat3& m_ego, PromptTape* tape) {
  const int N = model.classes.size();
  // with no history the current observation stands in for the previous frame,
  // so the summed map keeps the same scale on the first frame as later ones
  const SemanticGrid& prev_m = prev_map ? *prev_map : cur.map;
  const FeatureGrid& prev_f = prev_feat ? *prev_feat : cur.features;
  SemanticGrid prev_aligned = align_grid(prev_m, m_ego);

  FeatureGrid sum_map(model.spec, N);
  kernels::axpby(sum_map.data.size(), 1.0f, prev_aligned.data.data(), 1.0f,
                 cur.map.data.data(), sum_map.data.data());
  FeatureGrid pre1 = conv3x3_apply(model.fusion.phi1, sum_map);
  FeatureGrid f_m(model.spec, model.cfg.fusion_width);
  kernels::relu(pre1.data.data(), f_m.data.data(), f_m.data.size());

  FeatureGrid aligned_f = align_grid(prev_f, m_ego);
  FeatureGrid cat_feat(model.spec, 2 * N);
  std::copy(aligned_f.data.begin(), aligned_f.data.end(), cat_feat.data.begin());
  std::copy(cur.features.data.begin(), cur.features.data.end(),
            cat_feat.data.begin() + aligned_f.data.size());
  FeatureGrid f_b = conv3x3_apply(model.fusion.phi2, cat_feat);

  FeatureGrid s(model.spec, model.cfg.fusion_width);
  kernels::axpby(s.data.size(), 1.0f, f_m.data.data(), 1.0f, f_b.data.data(),
                 s.data.data());
  FeatureGrid f_f = conv3x3_apply(model.fusion.phi3, s);
  if (tape) {
    tape->sum_map = std::move(sum_map);
    tape->pre1 = std::move(pre1);
    tape->cat_feat = std::move(cat_feat);
    tape->s = std::move(s);
  }
  return f_f;
}

struct FusionGrads {
  std::vector<float> g1w, g1b, g2w, g2b, g3w, g3b;
  explicit FusionGrads(const FusionParams& p)
      : g1w(p.phi1.w.size(), 0.0f), g1b(p.phi1.b.size(), 0.0f),
        g2w(p.phi2.w.size(), 0.0f), g2b(p.phi2.b.size(), 0.0f),
        g3w(p.phi3.w.size(), 0.0f), g3b(p.phi3.b.size(), 0.0f) {}
  void zero() {
    for (auto* v : {&g1w, &g1b, &g2w, &g2b, &g3w, &g3b})
      std::fill(v->begin(), v->end(), 0.0f);
  }
};

void fusion_backward(const Model& model, const PromptTape& tape,
                     const FeatureGrid& g_prompt, FusionGrads& g) {
  const GridSpec& sp = model.spec;
  const FusionParams& p = model.fusion;
  // phi3
  kernels::conv3x3_bwd_weights(tape.s.data.data(), p.phi3.c_in, sp.rows, sp.cols,
                               g_prompt.data.data(), p.phi3.c_out, g.g3w.data(),
                               g.g3b.data());
  FeatureGrid gs(sp, p.phi3.c_in);
  kernels::conv3x3_bwd_data(g_prompt.data.data(), p.phi3.c_out, sp.rows, sp.cols,
                            p.phi3.w.data(), p.phi3.c_in, gs.data.data());
  // map branch through the ReLU
  FeatureGrid gpre1(sp, p.phi1.c_out);
  kernels::relu_bwd(gpre1.data.size(), tape.pre1.data.data(), gs.data.data(),
                    gpre1.data.data());
  kernels::conv3x3_bwd_weights(tape.sum_map.data.data(), p.phi1.c_in, sp.rows, sp.cols,
                               gpre1.data.data(), p.phi1.c_out, g.g1w.data(),
                               g.g1b.data());
  // feature branch
  kernels::conv3x3_bwd_weights(tape.cat_feat.data.data(), p.phi2.c_in, sp.rows, sp.cols,
                               gs.data.data(), p.phi2.c_out, g.g2w.data(), g.g2b.data());
}
}  // namespace

FeatureGrid build_prompt(const Model& model, const Observation& cur,
                         const SemanticGrid* prev_map, const FeatureGrid* prev_feat,
                         const Mat3& m_ego) {
  if (!model.cfg.use_tsam) return model.codec.encode(cur.map);
  return fusion_forward(model, cur, prev_map, prev_feat, m_ego, nullptr);
}

CenterlineGrid guidance_map(const Model& model, const SceneSequence& seq, int frame) {
  if (!model.cfg.use_centerline) return CenterlineGrid(model.spec);
  return rasterize_centerline(seq, frame);
}

// ---------------------------------------------------------------------------
// Decode head fit

void fit_decode_head(Model& model, const std::vector<SceneSequence>& data,
                     int iterations) {
  if (data.empty()) throw std::invalid_argument("fit_decode_head: empty dataset");
  const int N = model.classes.size();
  const std::size_t cells = model.spec.cells();

  std::vector<FeatureGrid> xs;
  std::vector<const SemanticGrid*> ys;
  const int n_seq = std::min<int>(8, static_cast<int>(data.size()));
  for (int s = 0; s < n_seq; ++s) {
    const SceneFrame& f = data[s].frames.front();
    auto images = render_rig(f.gt, model.rig);
    xs.push_back(ipm_warp(images, model.rig, model.spec));
    ys.push_back(&f.gt);
  }

  // positive-class reweighting keeps the thin-structure classes from being
  // drowned out by the empty background
  std::vector<double> wpos(N, 1.0);
  for (int c = 0; c < N; ++c) {
    double pos = 0;
    for (const auto* y : ys)
      for (std::size_t q = 0; q < cells; ++q) pos += y->channel(c)[q] > 0.5f ? 1.0 : 0.0;
    const double total = static_cast<double>(cells) * ys.size();
    if (pos > 0) wpos[c] = std::clamp((total - pos) / pos, 1.0, 25.0);
  }

  const std::size_t np = static_cast<std::size_t>(N) * N + N;  // weights then bias
  std::vector<double> w(np, 0.0), g(np), m(np, 0.0), v(np, 0.0);
  for (int it = 1; it <= iterations; ++it) {
    std::fill(g.begin(), g.end(), 0.0);
    double count = 0;
    for (std::size_t s = 0; s < xs.size(); ++s) {
      const FeatureGrid& x = xs[s];
      const SemanticGrid& y = *ys[s];
      for (std::size_t q = 0; q < cells; ++q) {
        for (int c = 0; c < N; ++c) {
          double logit = w[static_cast<std::size_t>(N) * N + c];
          for (int k = 0; k < N; ++k)
            logit += w[static_cast<std::size_t>(c) * N + k] * x.channel(k)[q];
          const double p = 1.0 / (1.0 + std::exp(-logit));
          const double yy = y.channel(c)[q] > 0.5f ? 1.0 : 0.0;
          const double weight = yy > 0.5 ? wpos[c] : 1.0;
          const double dlogit = weight * (p - yy);
          for (int k = 0; k < N; ++k)
            g[static_cast<std::size_t>(c) * N + k] += dlogit * x.channel(k)[q];
          g[static_cast<std::size_t>(N) * N + c] += dlogit;
        }
        count += 1;
      }
    }
    for (auto& gv : g) gv /= count;
    adam_update(np, w.data(), g.data(), m.data(), v.data(), it, 0.1, 0.9, 0.999, 1e-8);
  }
  for (int c = 0; c < N; ++c) {
    for (int k = 0; k < N; ++k)
      model.head.weights[static_cast<std::size_t>(c) * N + k] =
          static_cast<float>(w[static_cast<std::size_t>(c) * N + k]);
    model.head.bias[c] = static_cast<float>(w[static_cast<std::size_t>(N) * N + c]);
  }
}

// ---------------------------------------------------------------------------
// Pretraining

std::vector<double> pretrain(Checkpoint& ck, const std::vector<SceneSequence>& data) {
  Model& model = ck.model;
  model.cfg.validate();
  if (data.empty()) throw std::invalid_argument("pretrain: empty dataset");
  if (ck.phase == "init") {
    fit_decode_head(model, data);
    ck.phase = "pretrain";
  }

  std::vector<std::pair<int, int>> pool;  // (sequence, frame)
  for (std::size_t s = 0; s < data.size(); ++s)
    for (std::size_t f = 0; f < data[s].frames.size(); ++f)
      pool.emplace_back(static_cast<int>(s), static_cast<int>(f));
  const int steps_per_epoch =
      std::max<int>(1, static_cast<int>(pool.size()) / model.cfg.batch_size);

  Adam adam(model.cfg.lr);
  model.denoiser.for_each_param(
      [&](const std::string&, std::vector<float>& w, std::vector<float>& g) {
        adam.add(w, g);
      });

  Rng rng(mix(model.cfg.seed, 0xA1));
  std::vector<double> step_losses;
  const double inv_elems = 1.0 / (model.spec.cells() * model.classes.size());

  for (int epoch = 0; epoch < model.cfg.pretrain_epochs; ++epoch) {
    adam.set_lr(lr_at_epoch(model.cfg, ck.epochs_completed));
    double epoch_loss = 0;
    for (int step = 0; step < steps_per_epoch; ++step) {
      model.denoiser.zero_grads();
      double loss = 0;
      for (int b = 0; b < model.cfg.batch_size; ++b) {
        const auto [s, f] = pool[rng.uniform_int(0, static_cast<int>(pool.size()) - 1)];
        const SemanticGrid& gt = data[s].frames[f].gt;
        // masked cells become 0 in latent space ("unknown"), distinct from
        // the -1 of confidently-empty cells; encoding the masked map directly
        // would make holes indistinguishable from real background and teach
        // the net to redraw everything from class marginals
        const std::uint64_t mask_seed = rng.next_u64();
        SemanticGrid ones(gt.spec, gt.classes, 1.0f);
        SemanticGrid keep =
            random_mask(ones, model.cfg.mask_ratio, model.cfg.mask_patch, mask_seed);
        FeatureGrid prompt = model.codec.encode(gt);
        const int dsc = model.codec.downscale;
        for (int c = 0; c < prompt.channels; ++c)
          for (int i = 0; i < prompt.spec.rows; ++i)
            for (int j = 0; j < prompt.spec.cols; ++j)
              if (keep.at(c, i * dsc, j * dsc) == 0.0f) prompt.at(c, i, j) = 0.0f;
        FeatureGrid z0 = model.codec.encode(gt);
        const int t = rng.uniform_int(0, model.sched.T - 1);
        FeatureGrid noise = sample_noise_like(z0, rng);
        FeatureGrid z_t = q_sample(z0, t, noise, model.sched);
        CenterlineGrid map_o = guidance_map(model, data[s], f);
        FeatureGrid eps = model.denoiser.forward_cached(z_t, t, prompt, map_o, model.sched);
        FeatureGrid grad(z0.spec, z0.channels);
        double mse = 0;
        for (std::size_t q = 0; q < eps.data.size(); ++q) {
          const double r = static_cast<double>(eps.data[q]) - noise.data[q];
          mse += r * r;
          grad.data[q] = static_cast<float>(2.0 * r * inv_elems / model.cfg.batch_size);
        }
        loss += mse * inv_elems / model.cfg.batch_size;
        model.denoiser.backward(grad);
      }
      adam.step();
      step_losses.push_back(loss);
      epoch_loss += loss;
    }
    ++ck.epochs_completed;
    json h{{"phase", "pretrain"},
           {"epoch", ck.epochs_completed},
           {"lr", lr_at_epoch(model.cfg, ck.epochs_completed - 1)},
           {"loss", epoch_loss / steps_per_epoch}};
    ck.history.push_back(h.dump());
  }
  return step_losses;
}

// ---------------------------------------------------------------------------
// Finetuning

std::vector<double> finetune(Checkpoint& ck, const std::vector<SceneSequence>& data) {
  Model& model = ck.model;
  model.cfg.validate();
  if (data.empty()) throw std::invalid_argument("finetune: empty dataset");
  if (ck.phase == "init")
    throw std::runtime_error("finetune: model has not been pretrained");
  ck.phase = "finetune";

  std::vector<std::pair<int, int>> pool;
  std::vector<std::vector<Observation>> obs(data.size());
  for (std::size_t s = 0; s < data.size(); ++s)
    for (std::size_t f = 0; f < data[s].frames.size(); ++f) {
      pool.emplace_back(static_cast<int>(s), static_cast<int>(f));
      obs[s].push_back(observe_clean(model, data[s].frames[f].gt));
    }

  // one corrupted observation variant per sequence, cycling through every
  // kind and severity, so the model also learns to repair damaged inputs
  std::vector<std::vector<Observation>> cobs(data.size());
  if (model.cfg.corrupt_augment > 0) {
    constexpr CorruptionKind kKinds[] = {
        CorruptionKind::Brightness, CorruptionKind::Dark,
        CorruptionKind::Fog,        CorruptionKind::Snow,
        CorruptionKind::MotionBlur, CorruptionKind::ColorQuant,
        CorruptionKind::CameraCrash, CorruptionKind::FrameLost};
    constexpr Severity kSevs[] = {Severity::Easy, Severity::Mid, Severity::Hard};
    for (std::size_t s = 0; s < data.size(); ++s) {
      SceneSequence tmp = data[s];
      ensure_images(tmp, model.rig);
      const CorruptionSpec spec{kKinds[s % 8], kSevs[(s / 8) % 3]};
      SceneSequence cor = corrupt(tmp, spec, mix(model.cfg.seed, 0xC700 + s));
      for (const SceneFrame& fr : cor.frames) cobs[s].push_back(observe(model, fr));
    }
  }
  const int steps_per_epoch =
      std::max<int>(1, static_cast<int>(pool.size()) / model.cfg.batch_size);

  FusionGrads fgrads(model.fusion);
  Adam adam(model.cfg.lr);
  model.denoiser.for_each_param(
      [&](const std::string&, std::vector<float>& w, std::vector<float>& g) {
        adam.add(w, g);
      });
  if (model.cfg.use_tsam) {
    adam.add(model.fusion.phi1.w, fgrads.g1w);
    adam.add(model.fusion.phi1.b, fgrads.g1b);
    adam.add(model.fusion.phi2.w, fgrads.g2w);
    adam.add(model.fusion.phi2.b, fgrads.g2b);
    adam.add(model.fusion.phi3.w, fgrads.g3w);
    adam.add(model.fusion.phi3.b, fgrads.g3b);
  }

  Rng rng(mix(model.cfg.seed, 0xF1));
  std::vector<double> step_losses;
  const double inv_elems = 1.0 / (model.spec.cells() * model.classes.size());
  const double gain = model.cfg.output_gain;

  for (int epoch = 0; epoch < model.cfg.finetune_epochs; ++epoch) {
    adam.set_lr(lr_at_epoch(model.cfg, ck.epochs_completed));
    double epoch_loss = 0;
    for (int step = 0; step < steps_per_epoch; ++step) {
      model.denoiser.zero_grads();
      fgrads.zero();
      double loss = 0;
      for (int b = 0; b < model.cfg.batch_size; ++b) {
        const auto [s, f] = pool[rng.uniform_int(0, static_cast<int>(pool.size()) - 1)];
        const SceneSequence& seq = data[s];
        const SemanticGrid& gt = seq.frames[f].gt;
        const bool corrupted =
            !cobs[s].empty() &&
            rng.uniform_int(0, 999) < static_cast<int>(1000 * model.cfg.corrupt_augment);
        const auto& frames_obs = corrupted ? cobs[s] : obs[s];
        const Observation& cur = frames_obs[f];

        PromptTape tape;
        FeatureGrid prompt;
        if (model.cfg.use_tsam) {
          if (f > 0) {
            // teacher forcing: the previous map is ground truth
            const Mat3 m_ego = pose_to_matrix(
                relative_pose(seq.frames[f - 1].global_pose, seq.frames[f].global_pose));
            prompt = fusion_forward(model, cur, &seq.frames[f - 1].gt,
                                    &frames_obs[f - 1].features, m_ego, &tape);
          } else {
            prompt = fusion_forward(model, cur, nullptr, nullptr, mat3_identity(), &tape);
          }
        } else {
          prompt = model.codec.encode(cur.map);
        }

        FeatureGrid z0 = model.codec.encode(gt);
        const int t = rng.uniform_int(0, model.sched.T - 1);
        FeatureGrid noise = sample_noise_like(z0, rng);
        FeatureGrid z_t = q_sample(z0, t, noise, model.sched);
        CenterlineGrid map_o = guidance_map(model, seq, f);
        FeatureGrid eps = model.denoiser.forward_cached(z_t, t, prompt, map_o, model.sched);

        // z0 estimate implied by the predicted noise
        const double ab = model.sched.alpha_bars[t];
        const double ia = 1.0 / std::sqrt(ab);
        const double ib = -std::sqrt(1.0 - ab) / std::sqrt(ab);
        FeatureGrid z0_est(z0.spec, z0.channels);
        kernels::axpby(z0_est.data.size(), static_cast<float>(ia), z_t.data.data(),
                       static_cast<float>(ib), eps.data.data(), z0_est.data.data());
        SemanticGrid p = latent_to_map(z0_est, model.codec, model.classes, model.spec, gain);
        const double focal = focal_loss(gt, p, model.cfg.loss);
        std::vector<double> gfocal = focal_loss_grad(gt, p, model.cfg.loss);

        FeatureGrid grad(z0.spec, z0.channels);
        double mse = 0;
        for (std::size_t q = 0; q < eps.data.size(); ++q) {
          const double r = static_cast<double>(eps.data[q]) - noise.data[q];
          mse += r * r;
          const double pp = p.data[q];
          const double dfocal = gfocal[q] * gain * pp * (1.0 - pp) * ib;
          grad.data[q] = static_cast<float>(
              (2.0 * r * inv_elems + model.cfg.focal_weight * dfocal) /
              model.cfg.batch_size);
        }
        loss += (mse * inv_elems + model.cfg.focal_weight * focal) / model.cfg.batch_size;
        FeatureGrid gprompt = model.denoiser.backward(grad);
        if (model.cfg.use_tsam) fusion_backward(model, tape, gprompt, fgrads);
      }
      adam.step();
      step_losses.push_back(loss);
      epoch_loss += loss;
    }
    ++ck.epochs_completed;
    json h{{"phase", "finetune"},
           {"epoch", ck.epochs_completed},
           {"lr", lr_at_epoch(model.cfg, ck.epochs_completed - 1)},
           {"loss", epoch_loss / steps_per_epoch}};
    ck.history.push_back(h.dump());
  }
  return step_losses;
}

// ---------------------------------------------------------------------------
// Evaluation

namespace {
struct RangeAcc {
  std::string label;
  double half_extent_m;  // cells with |x| <= half_extent kept; <0 means all
  std::vector<double> inter, uni;
};
}  // namespace

EvalResult evaluate(const Model& model, const std::vector<SceneSequence>& data,
                    const EvalOptions& opts) {
  if (data.empty()) throw std::invalid_argument("evaluate: empty dataset");
  if (opts.sampler != "ddim" && opts.sampler != "ddpm")
    throw std::invalid_argument("evaluate: sampler must be ddim or ddpm");
  const int N = model.classes.size();

  std::vector<RangeAcc> accs;
  accs.push_back({"full", -1.0, std::vector<double>(N, 0.0), std::vector<double>(N, 0.0)});
  for (double r : opts.ranges_m) {
    if (r <= 0) throw std::invalid_argument("evaluate: range must be positive");
    std::ostringstream os;
    os << r << "m";
    accs.push_back({os.str(), r / 2.0, std::vector<double>(N, 0.0),
                    std::vector<double>(N, 0.0)});
  }

  for (std::size_t s = 0; s < data.size(); ++s) {
    SceneSequence seq = data[s];
    ensure_images(seq, model.rig);
    if (opts.corruption) seq = corrupt(seq, *opts.corruption, mix(opts.seed, s));

    SemanticGrid prev_map;
    FeatureGrid prev_feat;
    bool have_prev = false;
    Pose2 prev_pose;
    for (std::size_t f = 0; f < seq.frames.size(); ++f) {
      const SceneFrame& frame = seq.frames[f];
      Observation cur = observe(model, frame);
      SemanticGrid pred;
      if (opts.observation_only) {
        pred = cur.map;
      } else {
        const Mat3 m_ego =
            have_prev ? pose_to_matrix(relative_pose(prev_pose, frame.global_pose))
                      : mat3_identity();
        FeatureGrid prompt =
            build_prompt(model, cur, have_prev ? &prev_map : nullptr,
                         have_prev ? &prev_feat : nullptr, m_ego);
        CenterlineGrid map_o = guidance_map(model, seq, static_cast<int>(f));
        const std::uint64_t fseed = mix(opts.seed, s * 4096 + f + 1);
        if (opts.sampler == "ddim")
          pred = ddim_sample(model.denoiser, model.sched, prompt, map_o, opts.steps,
                             fseed, model.codec, model.classes, model.cfg.output_gain);
        else
          pred = ddpm_sample(model.denoiser, model.sched, prompt, map_o, fseed,
                             model.codec, model.classes, model.cfg.output_gain);
      }

      const SemanticGrid& gt = frame.gt;
      for (RangeAcc& acc : accs)
        for (int c = 0; c < N; ++c)
          for (int i = 0; i < model.spec.rows; ++i) {
            if (acc.half_extent_m >= 0) {
              const double x = model.spec.cell_center(i, 0)[0];
              if (std::abs(x) > acc.half_extent_m) continue;
            }
            for (int j = 0; j < model.spec.cols; ++j) {
              const bool a = pred.at(c, i, j) > opts.threshold;
              const bool b = gt.at(c, i, j) > opts.threshold;
              acc.inter[c] += (a && b) ? 1.0 : 0.0;
              acc.uni[c] += (a || b) ? 1.0 : 0.0;
            }
          }

      // the rollout feeds on its own output, not on ground truth; the
      // fed-back map is thresholded because fine-tuning teacher-forces with
      // binary ground-truth history
      prev_map = pred;
      for (auto& v : prev_map.data) v = v > opts.threshold ? 1.0f : 0.0f;
      prev_feat = cur.features;
      prev_pose = frame.global_pose;
      have_prev = true;
    }
  }

  EvalResult res;
  if (opts.observation_only)
    res.label = "observation";
  else if (opts.sampler == "ddim")
    res.label = "DDIM/" + std::to_string(opts.steps);
  else
    res.label = "DDPM/" + std::to_string(model.sched.T);

  for (const RangeAcc& acc : accs) {
    EvalReport rep;
    rep.class_names = model.classes.names;
    rep.threshold = opts.threshold;
    rep.range_label = acc.label;
    double sum = 0;
    for (int c = 0; c < N; ++c) {
      const double v = acc.uni[c] > 0 ? acc.inter[c] / acc.uni[c] : 1.0;
      rep.class_iou.push_back(v);
      sum += v;
    }
    rep.miou = sum / N;
    res.reports.push_back(std::move(rep));
  }
  return res;
}

}  // namespace tscg
