#pragma once
// Training driver: Adam optimizer, masked-map denoiser pretraining,
// temporal-fusion finetuning, rollout evaluation and checkpoint IO.

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "tscg/cgdm.hpp"
#include "tscg/local_mapper.hpp"
#include "tscg/metrics.hpp"
#include "tscg/synth.hpp"
#include "tscg/tsam.hpp"

namespace tscg {

struct TrainConfig {
  std::uint64_t seed = 1;
  int batch_size = 8;
  double lr = 1e-4;
  double lr_decay = 0.5;        // multiplier applied every lr_step_epochs
  int lr_step_epochs = 10;
  int pretrain_epochs = 20;
  int finetune_epochs = 10;
  double mask_ratio = 0.5;
  int mask_patch = 8;
  int fusion_width = 32;        // hidden channels of phi1/phi2
  double focal_weight = 1.0;    // finetune map-loss weight
  double corrupt_augment = 0.5; // finetune share of corrupted observations
  double output_gain = 4.0;     // probability = sigmoid(gain * z0)
  LossConfig loss;
  DenoiserConfig denoiser;
  int T = 1000;
  double beta_min = 1e-4, beta_max = 0.02;
  int latent_downscale = 1;
  bool use_tsam = true;         // off: prompt is the current observation only
  bool use_centerline = true;   // off: the guidance channel is all zero

  void validate() const;
  bool operator==(const TrainConfig&) const = default;
  std::string to_json() const;
  static TrainConfig from_json(const std::string& text);
};

// Stepped decay: lr * lr_decay^floor(epoch / lr_step_epochs), computed by
// repeated multiplication so whole decay periods are exact.
double lr_at_epoch(const TrainConfig& cfg, int epoch);

// One Adam update, reference equations, double precision throughout.
// step is 1-based and shared by every element of the slot.
void adam_update(std::size_t n, double* w, const double* g, double* m, double* v,
                 int step, double lr, double beta1, double beta2, double eps);

// Optimizer over float tensors with double shadow state so repeated tiny
// updates are not lost to f32 rounding. Register every tensor once; the
// registered pointers must stay valid for the optimizer's lifetime.
class Adam {
 public:
  explicit Adam(double lr, double beta1 = 0.9, double beta2 = 0.999,
                double eps = 1e-8);
  void add(std::vector<float>& w, std::vector<float>& g);
  void set_lr(double lr) { lr_ = lr; }
  int steps_taken() const { return t_; }
  void step();  // consumes current grads; caller zeroes them afterwards

 private:
  struct Slot {
    float* w;
    const float* g;
    std::size_t n;
    std::vector<double> shadow, m, v;
  };
  std::vector<Slot> slots_;
  double lr_, b1_, b2_, eps_;
  int t_ = 0;
};

// Everything needed to run the pipeline on one grid geometry.
struct Model {
  TrainConfig cfg;
  GridSpec spec;
  ClassSet classes;
  Denoiser denoiser;
  FusionParams fusion;
  DecodeHead head;
  LatentCodec codec;
  NoiseSchedule sched;
  CameraRig rig;
};

CameraRig default_rig();

// Fresh model with seeded weight init (denoiser He-init, fusion seeded
// random, decode head zero until fitted).
Model make_model(const TrainConfig& cfg, const GridSpec& spec, const ClassSet& classes);

struct Observation {
  FeatureGrid features;  // IPM features, one channel per class
  SemanticGrid map;      // decoded per-class probabilities
};

// Runs the local mapper over the frame's rendered images.
Observation observe(const Model& model, const SceneFrame& frame);

// Conditioning input for the denoiser. prev_* may be null (first frame).
FeatureGrid build_prompt(const Model& model, const Observation& cur,
                         const SemanticGrid* prev_map, const FeatureGrid* prev_feat,
                         const Mat3& m_ego);

CenterlineGrid guidance_map(const Model& model, const SceneSequence& seq, int frame);

// Logistic-regression fit of the decode head on clean observations drawn
// from `data`. Called once during pretraining; the head is frozen after.
void fit_decode_head(Model& model, const std::vector<SceneSequence>& data,
                     int iterations = 200);

struct Checkpoint {
  Model model;
  std::string phase = "init";  // init | pretrain | finetune
  int epochs_completed = 0;
  std::vector<std::string> history;  // one JSON object per epoch
};

void save_checkpoint(const std::string& path, const Checkpoint& ck);
Checkpoint load_checkpoint(const std::string& path);

// Phase one: denoise the masked ground-truth map. Also fits the decode
// head before the first step. Returns per-step losses in order.
std::vector<double> pretrain(Checkpoint& ck, const std::vector<SceneSequence>& data);

// Phase two: temporal fusion prompt (teacher forcing from ground truth),
// noise MSE plus focal map loss, fusion and denoiser trained jointly.
std::vector<double> finetune(Checkpoint& ck, const std::vector<SceneSequence>& data);

struct EvalOptions {
  std::string sampler = "ddim";  // ddim | ddpm
  int steps = 3;                 // ddim step count
  double threshold = 0.5;
  std::optional<CorruptionSpec> corruption;
  std::uint64_t seed = 7;
  std::vector<double> ranges_m;  // forward extents to crop to; full grid always reported
  bool observation_only = false; // score the decoded observation, no diffusion
};

struct EvalResult {
  std::string label;                // e.g. "DDIM/3", "DDPM/1000", "observation"
  std::vector<EvalReport> reports;  // [full, ranges...]
};

// Closed-loop rollout: each frame conditions on the previous frame's own
// prediction (zero map before the first frame). IoU counts aggregate over
// all frames of all sequences.
EvalResult evaluate(const Model& model, const std::vector<SceneSequence>& data,
                    const EvalOptions& opts);

}  // namespace tscg
