// Command line front end: dataset generation, training, inference,
// evaluation, corruption inspection and report printing.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "tscg/kernels.hpp"
#include "tscg/png_io.hpp"
#include "tscg/trainer.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace tscg;

namespace {

constexpr const char* kVersion = "0.1.0";

void write_run_record(const std::string& dir, int argc, char** argv) {
  fs::create_directories(dir);
  json j;
  j["version"] = kVersion;
  j["backend"] = kernels::active().name;
  j["argv"] = json::array();
  for (int i = 0; i < argc; ++i) j["argv"].push_back(argv[i]);
  std::ofstream out(fs::path(dir) / "run.json");
  out << j.dump(2) << "\n";
}

ClassSet class_set_by_name(const std::string& name) {
  if (name == "hd3") return ClassSet::hd3();
  if (name == "sem6") return ClassSet::sem6();
  throw CLI::ValidationError("--classes", "unknown class set: " + name);
}

double image_mse(const std::vector<PerspectiveImage>& a,
                 const std::vector<PerspectiveImage>& b) {
  double acc = 0;
  std::size_t n = 0;
  for (std::size_t k = 0; k < a.size(); ++k) {
    for (std::size_t q = 0; q < a[k].data.size(); ++q) {
      const double d = static_cast<double>(a[k].data[q]) - b[k].data[q];
      acc += d * d;
    }
    n += a[k].data.size();
  }
  return n ? acc / n : 0.0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"tscg: temporal-fusion diffusion BEV mapping on synthetic scenes"};
  app.set_version_flag("--version", kVersion);
  app.require_subcommand(1);

  // ---- gen ----
  auto* gen = app.add_subcommand("gen", "Generate a synthetic dataset");
  std::string gen_out;
  int gen_sequences = 16, gen_frames = 8, gen_rows = 64, gen_cols = 32;
  double gen_res = 0.5, gen_curvature = 1.0;
  std::uint64_t gen_seed = 1;
  std::string gen_classes = "hd3";
  gen->add_option("--out", gen_out, "Output directory")->required();
  gen->add_option("--sequences", gen_sequences, "Number of sequences");
  gen->add_option("--frames", gen_frames, "Frames per sequence");
  gen->add_option("--rows", gen_rows, "Grid rows");
  gen->add_option("--cols", gen_cols, "Grid cols");
  gen->add_option("--res", gen_res, "Cell resolution in meters");
  gen->add_option("--curvature", gen_curvature, "Road curvature scale (0 = straight)");
  gen->add_option("--seed", gen_seed, "Master seed");
  gen->add_option("--classes", gen_classes, "Class set: hd3 or sem6");

  // ---- train ----
  auto* train = app.add_subcommand("train", "Pretrain and finetune a model");
  std::string train_data, train_out, train_config;
  TrainConfig tc;
  bool no_tsam = false, no_centerline = false, pretrain_only = false;
  train->add_option("--data", train_data, "Dataset directory")->required();
  train->add_option("--out", train_out, "Output directory")->required();
  train->add_option("--config", train_config, "JSON config file (defaults otherwise)");
  train->add_option("--seed", tc.seed, "Training seed");
  train->add_option("--pretrain-epochs", tc.pretrain_epochs, "Pretraining epochs");
  train->add_option("--finetune-epochs", tc.finetune_epochs, "Finetuning epochs");
  train->add_option("--batch", tc.batch_size, "Batch size");
  train->add_option("--lr", tc.lr, "Initial learning rate");
  train->add_option("--base-width", tc.denoiser.base_width, "Denoiser base width");
  train->add_option("--fusion-width", tc.fusion_width, "Fusion hidden width");
  train->add_flag("--no-tsam", no_tsam, "Ablation: prompt from the current frame only");
  train->add_flag("--no-centerline", no_centerline, "Ablation: zero guidance channel");
  train->add_flag("--pretrain-only", pretrain_only, "Stop after the pretraining phase");

  // ---- eval ----
  auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint on a dataset");
  std::string eval_data, eval_ckpt, eval_json_out;
  EvalOptions eo;
  std::string eval_corrupt;
  bool eval_baseline = false;
  eval->add_option("--data", eval_data, "Dataset directory")->required();
  eval->add_option("--ckpt", eval_ckpt, "Checkpoint file")->required();
  eval->add_option("--sampler", eo.sampler, "ddim or ddpm");
  eval->add_option("--steps", eo.steps, "DDIM step count");
  eval->add_option("--threshold", eo.threshold, "Binarization threshold");
  eval->add_option("--seed", eo.seed, "Sampling seed");
  eval->add_option("--range", eo.ranges_m, "Extra forward extents to report (meters)");
  eval->add_option("--corrupt", eval_corrupt, "Corruption as kind:severity, e.g. Fog:Hard");
  eval->add_flag("--baseline", eval_baseline, "Score the raw observation instead");
  eval->add_option("--json", eval_json_out, "Also write the report as JSON");

  // ---- infer ----
  auto* infer = app.add_subcommand("infer", "Run one frame and write PNGs");
  std::string infer_data, infer_ckpt, infer_out;
  int infer_seq = 0, infer_frame = 0, infer_steps = 3;
  std::uint64_t infer_seed = 7;
  infer->add_option("--data", infer_data, "Dataset directory")->required();
  infer->add_option("--ckpt", infer_ckpt, "Checkpoint file")->required();
  infer->add_option("--out", infer_out, "Output directory")->required();
  infer->add_option("--seq", infer_seq, "Sequence index");
  infer->add_option("--frame", infer_frame, "Frame index");
  infer->add_option("--steps", infer_steps, "DDIM step count");
  infer->add_option("--seed", infer_seed, "Sampling seed");

  // ---- corrupt ----
  auto* corr = app.add_subcommand("corrupt", "Print image distortion per severity");
  std::string corr_data, corr_kind;
  std::uint64_t corr_seed = 3;
  corr->add_option("--data", corr_data, "Dataset directory")->required();
  corr->add_option("--kind", corr_kind, "Corruption kind (omit for all)");
  corr->add_option("--seed", corr_seed, "Corruption seed");

  // ---- render ----
  auto* render = app.add_subcommand("render", "Write ground truth and camera views");
  std::string render_data, render_out;
  int render_seq = 0, render_frame = 0;
  render->add_option("--data", render_data, "Dataset directory")->required();
  render->add_option("--out", render_out, "Output directory")->required();
  render->add_option("--seq", render_seq, "Sequence index");
  render->add_option("--frame", render_frame, "Frame index");

  // ---- report ----
  auto* report = app.add_subcommand("report", "Print checkpoint config and history");
  std::string report_ckpt;
  report->add_option("--ckpt", report_ckpt, "Checkpoint file")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);  // --help / --version
    app.exit(e);
    return 2;
  }

  try {
    if (*gen) {
      SceneConfig sc;
      sc.frames = gen_frames;
      sc.spec = GridSpec{gen_rows, gen_cols, gen_res};
      sc.class_set = class_set_by_name(gen_classes);
      sc.curvature_scale = gen_curvature;
      std::vector<SceneSequence> seqs;
      for (int s = 0; s < gen_sequences; ++s)
        seqs.push_back(generate_scene(gen_seed + static_cast<std::uint64_t>(s), sc));
      save_dataset(gen_out, seqs);
      write_run_record(gen_out, argc, argv);
      std::cout << "wrote " << seqs.size() << " sequences to " << gen_out << "\n";
    } else if (*train) {
      if (!train_config.empty()) {
        std::ifstream in(train_config);
        if (!in) throw std::runtime_error("cannot open config " + train_config);
        std::string text((std::istreambuf_iterator<char>(in)),
                         std::istreambuf_iterator<char>());
        tc = TrainConfig::from_json(text);
      }
      tc.use_tsam = !no_tsam;
      tc.use_centerline = !no_centerline;
      auto data = load_dataset(train_data);
      if (data.empty()) throw std::runtime_error("dataset is empty: " + train_data);
      GridSpec spec = data.front().frames.front().gt.spec;
      ClassSet classes = data.front().frames.front().gt.classes;
      Checkpoint ck;
      ck.model = make_model(tc, spec, classes);
      auto pre_losses = pretrain(ck, data);
      if (!pretrain_only) finetune(ck, data);
      fs::create_directories(train_out);
      save_checkpoint((fs::path(train_out) / "checkpoint.tsck").string(), ck);
      {
        std::ofstream hist(fs::path(train_out) / "history.jsonl");
        for (const auto& line : ck.history) hist << line << "\n";
      }
      write_run_record(train_out, argc, argv);
      std::cout << "trained " << ck.epochs_completed << " epochs ("
                << pre_losses.size() << " pretrain steps); checkpoint in "
                << train_out << "\n";
    } else if (*eval) {
      Checkpoint ck = load_checkpoint(eval_ckpt);
      auto data = load_dataset(eval_data);
      if (!eval_corrupt.empty()) {
        const auto colon = eval_corrupt.find(':');
        if (colon == std::string::npos)
          throw std::runtime_error("--corrupt expects kind:severity");
        auto kind = corruption_from_string(eval_corrupt.substr(0, colon));
        auto sev = severity_from_string(eval_corrupt.substr(colon + 1));
        if (!kind || !sev)
          throw std::runtime_error("unknown corruption: " + eval_corrupt);
        eo.corruption = CorruptionSpec{*kind, *sev};
      }
      eo.observation_only = eval_baseline;
      EvalResult res = evaluate(ck.model, data, eo);
      std::vector<std::string> labels;
      for (const auto& r : res.reports) labels.push_back(res.label + " " + r.range_label);
      std::cout << report_table(res.reports, labels);
      if (!eval_json_out.empty()) {
        json j;
        j["label"] = res.label;
        j["reports"] = json::array();
        for (const auto& r : res.reports) j["reports"].push_back(json::parse(r.to_json()));
        std::ofstream out(eval_json_out);
        out << j.dump(2) << "\n";
      }
    } else if (*infer) {
      Checkpoint ck = load_checkpoint(infer_ckpt);
      auto data = load_dataset(infer_data);
      if (infer_seq < 0 || infer_seq >= static_cast<int>(data.size()))
        throw std::runtime_error("sequence index out of range");
      SceneSequence seq = data[infer_seq];
      if (infer_frame < 0 || infer_frame >= static_cast<int>(seq.frames.size()))
        throw std::runtime_error("frame index out of range");
      ensure_images(seq, ck.model.rig);

      // roll the model forward to the requested frame so the prompt carries
      // real temporal context
      SemanticGrid prev_map;
      FeatureGrid prev_feat;
      bool have_prev = false;
      Pose2 prev_pose;
      SemanticGrid pred;
      for (int f = 0; f <= infer_frame; ++f) {
        Observation cur = observe(ck.model, seq.frames[f]);
        const Mat3 m_ego =
            have_prev ? pose_to_matrix(relative_pose(prev_pose, seq.frames[f].global_pose))
                      : mat3_identity();
        FeatureGrid prompt = build_prompt(ck.model, cur, have_prev ? &prev_map : nullptr,
                                          have_prev ? &prev_feat : nullptr, m_ego);
        CenterlineGrid map_o = guidance_map(ck.model, seq, f);
        pred = ddim_sample(ck.model.denoiser, ck.model.sched, prompt, map_o, infer_steps,
                           infer_seed + static_cast<std::uint64_t>(f), ck.model.codec,
                           ck.model.classes, ck.model.cfg.output_gain);
        prev_map = pred;
        prev_feat = cur.features;
        prev_pose = seq.frames[f].global_pose;
        have_prev = true;
        if (f == infer_frame) {
          fs::create_directories(infer_out);
          write_semantic_png((fs::path(infer_out) / "pred.png").string(), pred);
          write_semantic_png((fs::path(infer_out) / "gt.png").string(), seq.frames[f].gt);
          write_semantic_png((fs::path(infer_out) / "obs.png").string(), cur.map);
        }
      }
      EvalReport rep = miou(pred, seq.frames[infer_frame].gt);
      std::cout << rep.to_table();
      write_run_record(infer_out, argc, argv);
    } else if (*corr) {
      auto data = load_dataset(corr_data);
      if (data.empty()) throw std::runtime_error("dataset is empty");
      SceneSequence seq = data.front();
      ensure_images(seq, default_rig());
      std::vector<CorruptionKind> kinds;
      if (corr_kind.empty()) {
        for (int k = 0; k < 8; ++k) kinds.push_back(static_cast<CorruptionKind>(k));
      } else {
        auto k = corruption_from_string(corr_kind);
        if (!k) throw std::runtime_error("unknown corruption kind: " + corr_kind);
        kinds.push_back(*k);
      }
      std::cout << "kind          easy        mid         hard\n";
      for (auto k : kinds) {
        std::cout << to_string(k);
        for (int pad = static_cast<int>(std::string(to_string(k)).size()); pad < 12; ++pad)
          std::cout << ' ';
        for (auto sev : {Severity::Easy, Severity::Mid, Severity::Hard}) {
          SceneSequence bad = corrupt(seq, {k, sev}, corr_seed);
          double acc = 0;
          for (std::size_t f = 0; f < seq.frames.size(); ++f)
            acc += image_mse(seq.frames[f].images, bad.frames[f].images);
          acc /= static_cast<double>(seq.frames.size());
          char buf[16];
          std::snprintf(buf, sizeof buf, "  %.6f", acc);
          std::cout << buf;
        }
        std::cout << "\n";
      }
    } else if (*render) {
      auto data = load_dataset(render_data);
      if (render_seq < 0 || render_seq >= static_cast<int>(data.size()))
        throw std::runtime_error("sequence index out of range");
      SceneSequence seq = data[render_seq];
      if (render_frame < 0 || render_frame >= static_cast<int>(seq.frames.size()))
        throw std::runtime_error("frame index out of range");
      ensure_images(seq, default_rig());
      fs::create_directories(render_out);
      const SceneFrame& fr = seq.frames[render_frame];
      write_semantic_png((fs::path(render_out) / "gt.png").string(), fr.gt);
      for (std::size_t c = 0; c < fr.images.size(); ++c)
        for (int ch = 0; ch < fr.images[c].channels; ++ch)
          write_pgm((fs::path(render_out) /
                     ("cam" + std::to_string(c) + "_c" + std::to_string(ch) + ".pgm"))
                        .string(),
                    fr.images[c], ch);
      write_run_record(render_out, argc, argv);
      std::cout << "wrote frame " << render_frame << " of sequence " << render_seq
                << " to " << render_out << "\n";
    } else if (*report) {
      Checkpoint ck = load_checkpoint(report_ckpt);
      std::cout << "phase: " << ck.phase << "\nepochs: " << ck.epochs_completed
                << "\nparameters: " << ck.model.denoiser.param_count() << " (denoiser)"
                << "\nconfig:\n"
                << ck.model.cfg.to_json() << "\n";
      for (const auto& line : ck.history) std::cout << line << "\n";
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
