#include "tscg/synth.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <stdexcept>

#include "json.hpp"

namespace fs = std::filesystem;

namespace tscg {

namespace {

struct Polyline {
  std::vector<std::array<double, 2>> pts;
  std::vector<double> arc;  // cumulative arc length at each point
};

Polyline build_centerline(Rng& rng, const SceneConfig& cfg, double total_len) {
  Polyline pl;
  const double ds = 0.25;
  double x = 0, y = 0, heading = 0;
  double seg_left = 0, kappa = 0;
  pl.pts.push_back({x, y});
  pl.arc.push_back(0);
  double s = 0;
  while (s < total_len) {
    if (seg_left <= 0) {
      seg_left = 10.0 + 8.0 * rng.uniform();
      kappa = (rng.uniform() * 2.0 - 1.0) * 0.04 * cfg.curvature_scale;
    }
    heading += kappa * ds;
    x += ds * std::cos(heading);
    y += ds * std::sin(heading);
    s += ds;
    seg_left -= ds;
    pl.pts.push_back({x, y});
    pl.arc.push_back(s);
  }
  return pl;
}

Polyline polyline_from_points(const std::vector<std::array<double, 2>>& pts) {
  Polyline pl;
  pl.pts = pts;
  pl.arc.resize(pts.size());
  double s = 0;
  for (std::size_t k = 1; k < pts.size(); ++k) {
    s += std::hypot(pts[k][0] - pts[k - 1][0], pts[k][1] - pts[k - 1][1]);
    pl.arc[k] = s;
  }
  return pl;
}

Pose2 pose_at(const Polyline& pl, double s) {
  auto it = std::lower_bound(pl.arc.begin(), pl.arc.end(), s);
  std::size_t k = std::min<std::size_t>(std::distance(pl.arc.begin(), it), pl.arc.size() - 1);
  if (k == 0) k = 1;
  const auto& a = pl.pts[k - 1];
  const auto& b = pl.pts[k];
  const double seg = pl.arc[k] - pl.arc[k - 1];
  const double f = seg > 0 ? std::clamp((s - pl.arc[k - 1]) / seg, 0.0, 1.0) : 0.0;
  const double hx = b[0] - a[0], hy = b[1] - a[1];
  return Pose2(a[0] + f * hx, a[1] + f * hy, std::atan2(hy, hx));
}

std::array<double, 2> world_to_ego(const Pose2& pose, double px, double py) {
  const double dx = px - pose.x_m, dy = py - pose.y_m;
  const double c = std::cos(pose.yaw_rad), s = std::sin(pose.yaw_rad);
  return {c * dx + s * dy, -s * dx + c * dy};
}

std::vector<std::array<double, 2>> polyline_in_ego(const Polyline& pl, const Pose2& pose,
                                                   double lateral_offset) {
  std::vector<std::array<double, 2>> out;
  out.reserve(pl.pts.size());
  for (std::size_t k = 0; k < pl.pts.size(); ++k) {
    double px = pl.pts[k][0], py = pl.pts[k][1];
    if (lateral_offset != 0.0) {
      const std::size_t k2 = std::min(k + 1, pl.pts.size() - 1);
      const std::size_t k1 = k2 == k ? k - 1 : k;
      const double ex = pl.pts[k2][0] - pl.pts[k1][0];
      const double ey = pl.pts[k2][1] - pl.pts[k1][1];
      const double n = std::hypot(ex, ey);
      if (n > 0) {
        px += -ey / n * lateral_offset;
        py += ex / n * lateral_offset;
      }
    }
    out.push_back(world_to_ego(pose, px, py));
  }
  return out;
}

// Mark the cell nearest to each sampled (s, d) point of a frenet-space
// rectangle. Half-cell sampling pitch leaves no holes, and the sample
// lattice is anchored in the global frame so consecutive frames agree.
void mark_region(const Polyline& pl, const Pose2& pose, const GridSpec& spec,
                 double s0, double s1, double d0, double d1, float* out) {
  const double step = spec.resolution_m * 0.45;
  for (double s = s0; s <= s1 + 1e-9; s += step) {
    const Pose2 c = pose_at(pl, s);
    const double nx = -std::sin(c.yaw_rad), ny = std::cos(c.yaw_rad);
    for (double d = d0; d <= d1 + 1e-9; d += step) {
      const auto e = world_to_ego(pose, c.x_m + nx * d, c.y_m + ny * d);
      const auto fij = spec.metric_to_cell(e[0], e[1]);
      const int i = static_cast<int>(std::lround(fij[0]));
      const int j = static_cast<int>(std::lround(fij[1]));
      if (i >= 0 && i < spec.rows && j >= 0 && j < spec.cols)
        out[static_cast<std::size_t>(i) * spec.cols + j] = 1.0f;
    }
  }
}

std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t salt) {
  std::uint64_t x = seed ^ (salt * 0x9e3779b97f4a7c15ULL);
  x ^= x >> 30;
  x *= 0xbf58476d1ce4e5b9ULL;
  x ^= x >> 27;
  x *= 0x94d049bb133111ebULL;
  x ^= x >> 31;
  return x;
}

}  // namespace

void raster_polyline(const std::vector<std::array<double, 2>>& pts_ego,
                     const GridSpec& spec, float* out, float value) {
  for (std::size_t k = 1; k < pts_ego.size(); ++k) {
    auto a = spec.metric_to_cell(pts_ego[k - 1][0], pts_ego[k - 1][1]);
    auto b = spec.metric_to_cell(pts_ego[k][0], pts_ego[k][1]);
    // Liang-Barsky clip to the cell-coordinate box [-0.5, rows-0.5] x [-0.5, cols-0.5]
    double t0 = 0, t1 = 1;
    const double di = b[0] - a[0], dj = b[1] - a[1];
    bool reject = false;
    auto clip = [&](double p, double q) {
      if (reject) return;
      if (p == 0) {
        if (q < 0) reject = true;
      } else {
        const double r = q / p;
        if (p < 0) {
          if (r > t1) reject = true;
          else if (r > t0) t0 = r;
        } else {
          if (r < t0) reject = true;
          else if (r < t1) t1 = r;
        }
      }
    };
    clip(-di, a[0] + 0.5);
    clip(di, spec.rows - 0.5 - a[0]);
    clip(-dj, a[1] + 0.5);
    clip(dj, spec.cols - 0.5 - a[1]);
    if (reject || t0 > t1) continue;
    const double i0 = a[0] + t0 * di, j0 = a[1] + t0 * dj;
    const double i1 = a[0] + t1 * di, j1 = a[1] + t1 * dj;
    int ci = std::clamp(static_cast<int>(std::lround(i0)), 0, spec.rows - 1);
    int cj = std::clamp(static_cast<int>(std::lround(j0)), 0, spec.cols - 1);
    const int ei = std::clamp(static_cast<int>(std::lround(i1)), 0, spec.rows - 1);
    const int ej = std::clamp(static_cast<int>(std::lround(j1)), 0, spec.cols - 1);
    const double ddi = i1 - i0, ddj = j1 - j0;
    const int si = ddi > 0 ? 1 : -1, sj = ddj > 0 ? 1 : -1;
    double tmax_i = ddi != 0 ? ((ci + si * 0.5) - i0) / ddi : 1e300;
    double tmax_j = ddj != 0 ? ((cj + sj * 0.5) - j0) / ddj : 1e300;
    const double tdelta_i = ddi != 0 ? std::abs(1.0 / ddi) : 1e300;
    const double tdelta_j = ddj != 0 ? std::abs(1.0 / ddj) : 1e300;
    for (int guard = 0; guard < 4 * (spec.rows + spec.cols); ++guard) {
      out[static_cast<std::size_t>(ci) * spec.cols + cj] = value;
      if (ci == ei && cj == ej) break;
      if (tmax_i < tmax_j) {
        ci += si;
        tmax_i += tdelta_i;
        if (ci < 0 || ci >= spec.rows) break;
      } else {
        cj += sj;
        tmax_j += tdelta_j;
        if (cj < 0 || cj >= spec.cols) break;
      }
    }
  }
}

SceneSequence generate_scene(std::uint64_t seed, const SceneConfig& cfg) {
  cfg.spec.validate();
  if (cfg.frames < 2) throw std::invalid_argument("generate_scene: frames must be >= 2");
  const double extent_cols = cfg.spec.cols * cfg.spec.resolution_m;
  if (2.0 * cfg.road_half_width_m >= extent_cols)
    throw std::invalid_argument("generate_scene: road wider than the grid extent");

  Rng rng(seed);
  const double margin = std::hypot(cfg.spec.rows * cfg.spec.resolution_m, extent_cols);
  const double total = margin * 2 + cfg.frames * cfg.step_m;
  Polyline pl = build_centerline(rng, cfg, total);

  std::vector<double> crossings;
  for (double s = cfg.crossing_every_m * 0.6; s < total;
       s += cfg.crossing_every_m * (0.8 + 0.4 * rng.uniform()))
    crossings.push_back(s);

  const bool sem6 = cfg.class_set.size() == 6;
  std::vector<double> parking;
  if (sem6)
    for (double s = 9.0 + 10.0 * rng.uniform(); s < total; s += 22.0 + 8.0 * rng.uniform())
      parking.push_back(s);

  SceneSequence seq;
  seq.seed = seed;
  seq.config = cfg;
  seq.centerline = pl.pts;

  auto chan_index = [&](const char* name) {
    for (int k = 0; k < cfg.class_set.size(); ++k)
      if (cfg.class_set.names[k] == name) return k;
    return -1;
  };
  const int ch_div = chan_index("Divider");
  const int ch_ped = chan_index("PedCrossing");
  const int ch_bound = chan_index("Boundary");
  const int ch_driv = chan_index("Drivable");
  const int ch_walk = chan_index("Walkway");
  const int ch_stop = chan_index("StopLine");
  const int ch_park = chan_index("CarParking");

  const double hw = cfg.road_half_width_m;
  for (int f = 0; f < cfg.frames; ++f) {
    const double s_ego = margin + f * cfg.step_m;
    const Pose2 on_line = pose_at(pl, s_ego);
    const double nlat = rng.normal() * cfg.traj_noise_m;
    const double nlon = rng.normal() * cfg.traj_noise_m;
    const double nyaw = rng.normal() * cfg.yaw_noise_rad;
    const double c = std::cos(on_line.yaw_rad), sn = std::sin(on_line.yaw_rad);
    const Pose2 pose(on_line.x_m + c * nlon - sn * nlat, on_line.y_m + sn * nlon + c * nlat,
                     on_line.yaw_rad + nyaw);

    SemanticGrid gt(cfg.spec, cfg.class_set);
    const double s_lo = std::max(0.0, s_ego - margin), s_hi = std::min(total, s_ego + margin);

    if (ch_driv >= 0)
      mark_region(pl, pose, cfg.spec, s_lo, s_hi, -hw, hw, gt.channel(ch_driv));
    if (ch_walk >= 0) {
      mark_region(pl, pose, cfg.spec, s_lo, s_hi, hw + 0.2, hw + 1.6, gt.channel(ch_walk));
      mark_region(pl, pose, cfg.spec, s_lo, s_hi, -hw - 1.6, -hw - 0.2, gt.channel(ch_walk));
    }
    if (ch_park >= 0)
      for (double p : parking) {
        if (p + 6.0 < s_lo || p > s_hi) continue;
        mark_region(pl, pose, cfg.spec, p, p + 6.0, -hw - 2.6, -hw - 0.4, gt.channel(ch_park));
      }
    if (ch_ped >= 0)
      for (double x : crossings) {
        if (x + 1.0 < s_lo || x - 1.0 > s_hi) continue;
        mark_region(pl, pose, cfg.spec, x - 1.0, x + 1.0, -hw, hw, gt.channel(ch_ped));
      }
    if (ch_stop >= 0)
      for (double x : crossings) {
        if (x < s_lo || x > s_hi) continue;
        mark_region(pl, pose, cfg.spec, x - 2.4, x - 1.8, -hw, hw, gt.channel(ch_stop));
      }
    if (ch_bound >= 0) {
      raster_polyline(polyline_in_ego(pl, pose, hw), cfg.spec, gt.channel(ch_bound));
      raster_polyline(polyline_in_ego(pl, pose, -hw), cfg.spec, gt.channel(ch_bound));
    }
    if (ch_div >= 0)
      raster_polyline(polyline_in_ego(pl, pose, 0.0), cfg.spec, gt.channel(ch_div));

    seq.frames.push_back(SceneFrame{std::move(gt), pose, {}});
  }
  return seq;
}

CenterlineGrid rasterize_centerline(const SceneSequence& seq, int frame_index) {
  if (frame_index < 0 || frame_index >= static_cast<int>(seq.frames.size()))
    throw std::invalid_argument("rasterize_centerline: bad frame index");
  const GridSpec& spec = seq.config.spec;
  CenterlineGrid out(spec);
  Polyline pl = polyline_from_points(seq.centerline);
  raster_polyline(polyline_in_ego(pl, seq.frames[frame_index].global_pose, 0.0), spec,
                  out.data.data());
  return out;
}

SemanticGrid random_mask(const SemanticGrid& grid, double ratio, int patch,
                         std::uint64_t seed) {
  if (!(ratio >= 0.0 && ratio <= 1.0)) throw std::invalid_argument("random_mask: ratio in [0,1]");
  if (patch < 1) throw std::invalid_argument("random_mask: patch must be >= 1");
  if (ratio == 0.0) return grid;
  const GridSpec& spec = grid.spec;
  const int bi = (spec.rows + patch - 1) / patch;
  const int bj = (spec.cols + patch - 1) / patch;
  std::vector<int> order(static_cast<std::size_t>(bi) * bj);
  for (std::size_t k = 0; k < order.size(); ++k) order[k] = static_cast<int>(k);
  Rng rng(seed);
  for (std::size_t k = order.size(); k > 1; --k)
    std::swap(order[k - 1], order[rng.next_u64() % k]);

  auto block_cells = [&](int b) {
    const int r0 = (b / bj) * patch, c0 = (b % bj) * patch;
    return static_cast<std::size_t>(std::min(patch, spec.rows - r0)) *
           std::min(patch, spec.cols - c0);
  };
  const double target = ratio * static_cast<double>(spec.cells());
  std::size_t masked = 0;
  std::size_t take = 0;
  while (take < order.size() && masked < target) {
    const std::size_t nb = block_cells(order[take]);
    // stop before overshooting if staying closer to the target
    if (masked + nb > target && (masked + nb - target) > (target - masked)) break;
    masked += nb;
    ++take;
  }
  if (ratio == 1.0) take = order.size();

  SemanticGrid out = grid;
  const std::size_t cells = spec.cells();
  for (std::size_t k = 0; k < take; ++k) {
    const int b = order[k];
    const int r0 = (b / bj) * patch, c0 = (b % bj) * patch;
    for (int c = 0; c < grid.classes.size(); ++c)
      for (int i = r0; i < std::min(r0 + patch, spec.rows); ++i)
        for (int j = c0; j < std::min(c0 + patch, spec.cols); ++j)
          out.data[c * cells + static_cast<std::size_t>(i) * spec.cols + j] = 0.0f;
  }
  return out;
}

const char* to_string(CorruptionKind k) {
  switch (k) {
    case CorruptionKind::Brightness: return "Brightness";
    case CorruptionKind::CameraCrash: return "CameraCrash";
    case CorruptionKind::ColorQuant: return "ColorQuant";
    case CorruptionKind::Dark: return "Dark";
    case CorruptionKind::Fog: return "Fog";
    case CorruptionKind::FrameLost: return "FrameLost";
    case CorruptionKind::MotionBlur: return "MotionBlur";
    case CorruptionKind::Snow: return "Snow";
  }
  return "?";
}

const char* to_string(Severity s) {
  switch (s) {
    case Severity::Easy: return "Easy";
    case Severity::Mid: return "Mid";
    case Severity::Hard: return "Hard";
  }
  return "?";
}

std::optional<CorruptionKind> corruption_from_string(const std::string& s) {
  for (auto k : {CorruptionKind::Brightness, CorruptionKind::CameraCrash,
                 CorruptionKind::ColorQuant, CorruptionKind::Dark, CorruptionKind::Fog,
                 CorruptionKind::FrameLost, CorruptionKind::MotionBlur, CorruptionKind::Snow})
    if (s == to_string(k)) return k;
  return std::nullopt;
}

std::optional<Severity> severity_from_string(const std::string& s) {
  for (auto v : {Severity::Easy, Severity::Mid, Severity::Hard})
    if (s == to_string(v)) return v;
  return std::nullopt;
}

namespace {
struct SeverityParams {
  double brightness[3] = {0.1, 0.2, 0.3};
  double dark_gain[3] = {0.7, 0.5, 0.3};
  double dark_sigma[3] = {0.02, 0.05, 0.08};
  double fog_blend[3] = {0.4, 0.65, 0.9};
  double snow_coverage[3] = {0.02, 0.05, 0.10};
  int blur_width[3] = {3, 5, 9};
  int quant_levels[3] = {16, 8, 2};
  int crash_cameras[3] = {1, 2, 3};
  double frame_lost[3] = {0.25, 0.5, 0.75};
};
const SeverityParams kSeverity;
}  // namespace

std::string severity_table_json() {
  nlohmann::json j;
  j["version"] = 1;
  j["Brightness"] = {{"offset", {0.1, 0.2, 0.3}}};
  j["Dark"] = {{"gain", {0.7, 0.5, 0.3}}, {"noise_sigma", {0.02, 0.05, 0.08}}};
  j["Fog"] = {{"max_blend", {0.4, 0.65, 0.9}}};
  j["Snow"] = {{"coverage", {0.02, 0.05, 0.10}}};
  j["MotionBlur"] = {{"width_px", {3, 5, 9}}};
  j["ColorQuant"] = {{"levels", {16, 8, 2}}};
  j["CameraCrash"] = {{"cameras", {1, 2, 3}}};
  j["FrameLost"] = {{"fraction", {0.25, 0.5, 0.75}}};
  j["severities"] = {"Easy", "Mid", "Hard"};
  return j.dump(2);
}

SceneSequence corrupt(const SceneSequence& seq, const CorruptionSpec& spec,
                      std::uint64_t seed) {
  for (const auto& f : seq.frames)
    if (f.images.empty())
      throw std::invalid_argument("corrupt: sequence has no rendered images");

  SceneSequence out = seq;
  const int sv = static_cast<int>(spec.severity);
  // Randomness keyed by (seed, kind) only, so harder severities extend
  // the easier ones and distortion is monotone.
  Rng rng(mix_seed(seed, static_cast<std::uint64_t>(spec.kind) + 1));

  auto clamp01 = [](float v) { return std::clamp(v, 0.0f, 1.0f); };

  switch (spec.kind) {
    case CorruptionKind::Brightness: {
      const float b = static_cast<float>(kSeverity.brightness[sv]);
      for (auto& fr : out.frames)
        for (auto& im : fr.images)
          for (auto& v : im.data) v = clamp01(v + b);
      break;
    }
    case CorruptionKind::Dark: {
      const float g = static_cast<float>(kSeverity.dark_gain[sv]);
      const float s = static_cast<float>(kSeverity.dark_sigma[sv]);
      for (auto& fr : out.frames)
        for (auto& im : fr.images)
          for (auto& v : im.data)
            v = clamp01(v * g + s * static_cast<float>(rng.normal()));
      break;
    }
    case CorruptionKind::Fog: {
      const float maxb = static_cast<float>(kSeverity.fog_blend[sv]);
      for (auto& fr : out.frames)
        for (auto& im : fr.images) {
          const int horizon = im.height / 2;
          for (int c = 0; c < im.channels; ++c)
            for (int v = 0; v < im.height; ++v) {
              const float w =
                  v <= horizon ? 0.0f
                               : maxb * static_cast<float>(v - horizon) /
                                     static_cast<float>(im.height - 1 - horizon);
              for (int u = 0; u < im.width; ++u)
                im.at(c, v, u) = (1.0f - w) * im.at(c, v, u) + w * 0.5f;
            }
        }
      break;
    }
    case CorruptionKind::Snow: {
      const double radius = 1.5;
      for (auto& fr : out.frames)
        for (auto& im : fr.images) {
          const double area = M_PI * radius * radius;
          const int n_hard = static_cast<int>(
              kSeverity.snow_coverage[2] * im.height * im.width / area + 0.5);
          const int n_use = static_cast<int>(
              kSeverity.snow_coverage[sv] * im.height * im.width / area + 0.5);
          for (int b = 0; b < n_hard; ++b) {
            const int cu = rng.uniform_int(0, im.width - 1);
            const int cv = rng.uniform_int(0, im.height - 1);
            if (b >= n_use) continue;  // keep the stream aligned across severities
            for (int v = std::max(0, cv - 2); v <= std::min(im.height - 1, cv + 2); ++v)
              for (int u = std::max(0, cu - 2); u <= std::min(im.width - 1, cu + 2); ++u)
                if ((v - cv) * (v - cv) + (u - cu) * (u - cu) <= radius * radius)
                  for (int c = 0; c < im.channels; ++c) im.at(c, v, u) = 1.0f;
          }
        }
      break;
    }
    case CorruptionKind::MotionBlur: {
      const int w = kSeverity.blur_width[sv];
      const int half = w / 2;
      for (auto& fr : out.frames)
        for (auto& im : fr.images) {
          std::vector<float> row(im.width);
          for (int c = 0; c < im.channels; ++c)
            for (int v = 0; v < im.height; ++v) {
              for (int u = 0; u < im.width; ++u) {
                double acc = 0;
                int cnt = 0;
                for (int k = -half; k <= half; ++k) {
                  const int uu = u + k;
                  if (uu < 0 || uu >= im.width) continue;
                  acc += im.at(c, v, uu);
                  ++cnt;
                }
                row[u] = static_cast<float>(acc / cnt);
              }
              for (int u = 0; u < im.width; ++u) im.at(c, v, u) = row[u];
            }
        }
      break;
    }
    case CorruptionKind::ColorQuant: {
      // mid-rise: level centers exclude 0 and 1, so even binary images move
      const float q = static_cast<float>(kSeverity.quant_levels[sv]);
      for (auto& fr : out.frames)
        for (auto& im : fr.images)
          for (auto& v : im.data)
            v = (std::min(std::floor(v * q), q - 1.0f) + 0.5f) / q;
      break;
    }
    case CorruptionKind::CameraCrash: {
      const int k = kSeverity.crash_cameras[sv];
      for (auto& fr : out.frames) {
        std::vector<int> order(fr.images.size());
        for (std::size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
        for (std::size_t i = order.size(); i > 1; --i)
          std::swap(order[i - 1], order[rng.next_u64() % i]);
        for (int c = 0; c < std::min<int>(k, order.size()); ++c)
          std::fill(fr.images[order[c]].data.begin(), fr.images[order[c]].data.end(), 0.0f);
      }
      break;
    }
    case CorruptionKind::FrameLost: {
      const int n = static_cast<int>(out.frames.size());
      std::vector<int> order(n);
      for (int i = 0; i < n; ++i) order[i] = i;
      for (std::size_t i = order.size(); i > 1; --i)
        std::swap(order[i - 1], order[rng.next_u64() % i]);
      const int drop = static_cast<int>(std::lround(kSeverity.frame_lost[sv] * n));
      for (int d = 0; d < drop; ++d)
        for (auto& im : out.frames[order[d]].images)
          std::fill(im.data.begin(), im.data.end(), 0.0f);
      break;
    }
  }
  return out;
}

void ensure_images(SceneSequence& seq, const CameraRig& rig) {
  for (auto& fr : seq.frames)
    if (fr.images.empty()) fr.images = render_rig(fr.gt, rig);
}

namespace {
nlohmann::json config_to_json(const SceneConfig& c) {
  nlohmann::json j;
  j["frames"] = c.frames;
  j["rows"] = c.spec.rows;
  j["cols"] = c.spec.cols;
  j["resolution_m"] = c.spec.resolution_m;
  j["classes"] = c.class_set.names;
  j["step_m"] = c.step_m;
  j["traj_noise_m"] = c.traj_noise_m;
  j["yaw_noise_rad"] = c.yaw_noise_rad;
  j["road_half_width_m"] = c.road_half_width_m;
  j["curvature_scale"] = c.curvature_scale;
  j["crossing_every_m"] = c.crossing_every_m;
  return j;
}

SceneConfig config_from_json(const nlohmann::json& j) {
  SceneConfig c;
  c.frames = j.at("frames").get<int>();
  c.spec = {j.at("rows").get<int>(), j.at("cols").get<int>(), j.at("resolution_m").get<double>()};
  c.class_set = ClassSet{j.at("classes").get<std::vector<std::string>>()};
  c.step_m = j.at("step_m").get<double>();
  c.traj_noise_m = j.at("traj_noise_m").get<double>();
  c.yaw_noise_rad = j.at("yaw_noise_rad").get<double>();
  c.road_half_width_m = j.at("road_half_width_m").get<double>();
  c.curvature_scale = j.at("curvature_scale").get<double>();
  c.crossing_every_m = j.at("crossing_every_m").get<double>();
  return c;
}
}  // namespace

void save_dataset(const std::string& dir, const std::vector<SceneSequence>& sequences) {
  fs::create_directories(dir);
  nlohmann::json manifest;
  manifest["version"] = 1;
  manifest["sequences"] = nlohmann::json::array();
  char name[64];
  for (std::size_t s = 0; s < sequences.size(); ++s) {
    const auto& seq = sequences[s];
    std::snprintf(name, sizeof(name), "seq%04zu", s);
    fs::create_directories(fs::path(dir) / name);
    nlohmann::json js;
    js["seed"] = seq.seed;
    js["config"] = config_to_json(seq.config);
    js["dir"] = name;
    nlohmann::json cl = nlohmann::json::array();
    for (const auto& p : seq.centerline) cl.push_back({p[0], p[1]});
    js["centerline"] = cl;
    nlohmann::json frames = nlohmann::json::array();
    for (std::size_t f = 0; f < seq.frames.size(); ++f) {
      char fname[64];
      std::snprintf(fname, sizeof(fname), "frame%03zu.bgf", f);
      const auto& fr = seq.frames[f];
      write_grid((fs::path(dir) / name / fname).string(), fr.gt);
      frames.push_back({{"gt", fname},
                        {"pose", {fr.global_pose.x_m, fr.global_pose.y_m, fr.global_pose.yaw_rad}}});
    }
    js["frames"] = frames;
    manifest["sequences"].push_back(js);
  }
  std::ofstream f(fs::path(dir) / "manifest.json", std::ios::trunc);
  if (!f) throw std::runtime_error("save_dataset: cannot write manifest");
  f << manifest.dump(1) << "\n";
}

std::vector<SceneSequence> load_dataset(const std::string& dir) {
  std::ifstream f(fs::path(dir) / "manifest.json");
  if (!f) throw std::runtime_error("load_dataset: missing manifest.json in " + dir);
  nlohmann::json manifest;
  f >> manifest;
  std::vector<SceneSequence> out;
  for (const auto& js : manifest.at("sequences")) {
    SceneSequence seq;
    seq.seed = js.at("seed").get<std::uint64_t>();
    seq.config = config_from_json(js.at("config"));
    for (const auto& p : js.at("centerline"))
      seq.centerline.push_back({p[0].get<double>(), p[1].get<double>()});
    const std::string sdir = js.at("dir").get<std::string>();
    for (const auto& jf : js.at("frames")) {
      SceneFrame fr;
      fr.gt = read_grid((fs::path(dir) / sdir / jf.at("gt").get<std::string>()).string())
                  .as_semantic();
      const auto& p = jf.at("pose");
      fr.global_pose = Pose2(p[0].get<double>(), p[1].get<double>(), p[2].get<double>());
      seq.frames.push_back(std::move(fr));
    }
    out.push_back(std::move(seq));
  }
  return out;
}

}  // namespace tscg
