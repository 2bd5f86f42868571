#include "tscg/local_mapper.hpp"

#include <cmath>
#include <fstream>
#include <stdexcept>

namespace tscg {

void CameraModel::validate() const {
  if (!(focal_px > 0)) throw std::invalid_argument("CameraModel: focal_px must be > 0");
  if (height_px < 8 || width_px < 8)
    throw std::invalid_argument("CameraModel: image dimensions must be >= 8");
  if (!(mount_z > 0)) throw std::invalid_argument("CameraModel: camera must sit above ground");
}

void CameraRig::validate() const {
  if (cameras.empty()) throw std::invalid_argument("CameraRig: needs at least one camera");
  for (const auto& c : cameras) c.validate();
}

CameraRig CameraRig::surround(int h, int w, double hfov, double mount_z, double pitch) {
  CameraRig rig;
  const double f = (w / 2.0) / std::tan(hfov / 2.0);
  for (int k = 0; k < 6; ++k) {
    CameraModel c;
    c.focal_px = f;
    c.u0 = w / 2.0;
    c.v0 = h / 2.0;
    c.height_px = h;
    c.width_px = w;
    c.mount_z = mount_z;
    c.mount_yaw = k * (2.0 * M_PI / 6.0);
    c.mount_pitch = pitch;
    rig.cameras.push_back(c);
  }
  rig.validate();
  return rig;
}

PerspectiveImage::PerspectiveImage(int cam, int ch, int h, int w)
    : camera_index(cam), channels(ch), height(h), width(w),
      data(static_cast<std::size_t>(ch) * h * w, 0.0f) {}

namespace {

struct CamFrame {
  // Orthonormal camera axes expressed in the ego frame (x right, y down,
  // z forward) plus the optical center.
  double xr[3], yd[3], zf[3], o[3];
};

CamFrame cam_frame(const CameraModel& cam) {
  const double cp = std::cos(cam.mount_pitch), sp = std::sin(cam.mount_pitch);
  const double cy = std::cos(cam.mount_yaw), sy = std::sin(cam.mount_yaw);
  // Pre-yaw axes: forward pitched down, right = -y_ego, down = z x x.
  const double zf0[3] = {cp, 0, -sp};
  const double xr0[3] = {0, -1, 0};
  const double yd0[3] = {-sp, 0, -cp};
  CamFrame f;
  auto rotz = [&](const double* v, double* out) {
    out[0] = cy * v[0] - sy * v[1];
    out[1] = sy * v[0] + cy * v[1];
    out[2] = v[2];
  };
  rotz(zf0, f.zf);
  rotz(xr0, f.xr);
  rotz(yd0, f.yd);
  f.o[0] = cam.mount_x;
  f.o[1] = cam.mount_y;
  f.o[2] = cam.mount_z;
  return f;
}

}  // namespace

PerspectiveImage render_perspective(const SemanticGrid& gt, const CameraModel& cam,
                                    int camera_index) {
  cam.validate();
  const CamFrame fr = cam_frame(cam);
  PerspectiveImage img(camera_index, gt.classes.size(), cam.height_px, cam.width_px);
  for (int v = 0; v < cam.height_px; ++v) {
    for (int u = 0; u < cam.width_px; ++u) {
      const double dx = (u - cam.u0) / cam.focal_px;
      const double dy = (v - cam.v0) / cam.focal_px;
      double dir[3];
      for (int a = 0; a < 3; ++a) dir[a] = dx * fr.xr[a] + dy * fr.yd[a] + fr.zf[a];
      if (dir[2] >= -1e-9) continue;  // at or above the horizon
      const double t = -fr.o[2] / dir[2];
      const double gx = fr.o[0] + t * dir[0];
      const double gy = fr.o[1] + t * dir[1];
      const auto ij = gt.spec.metric_to_cell(gx, gy);
      const int i = static_cast<int>(std::floor(ij[0] + 0.5));
      const int j = static_cast<int>(std::floor(ij[1] + 0.5));
      if (i < 0 || i >= gt.spec.rows || j < 0 || j >= gt.spec.cols) continue;
      for (int c = 0; c < img.channels; ++c) img.at(c, v, u) = gt.at(c, i, j);
    }
  }
  return img;
}

std::vector<PerspectiveImage> render_rig(const SemanticGrid& gt, const CameraRig& rig) {
  rig.validate();
  std::vector<PerspectiveImage> out;
  for (std::size_t k = 0; k < rig.cameras.size(); ++k)
    out.push_back(render_perspective(gt, rig.cameras[k], static_cast<int>(k)));
  return out;
}

FeatureGrid ipm_warp(const std::vector<PerspectiveImage>& images, const CameraRig& rig,
                     const GridSpec& spec) {
  rig.validate();
  spec.validate();
  if (images.empty()) throw std::invalid_argument("ipm_warp: empty image list");
  if (images.size() != rig.cameras.size())
    throw std::invalid_argument("ipm_warp: image count does not match rig");
  const int channels = images[0].channels;
  for (const auto& im : images)
    if (im.channels != channels) throw std::invalid_argument("ipm_warp: channel count mismatch");

  std::vector<CamFrame> frames;
  for (const auto& c : rig.cameras) frames.push_back(cam_frame(c));

  FeatureGrid out(spec, channels);
  std::vector<double> acc(channels);
  for (int i = 0; i < spec.rows; ++i) {
    for (int j = 0; j < spec.cols; ++j) {
      const auto xy = spec.cell_center(i, j);
      int hits = 0;
      std::fill(acc.begin(), acc.end(), 0.0);
      for (std::size_t k = 0; k < images.size(); ++k) {
        const CamFrame& f = frames[k];
        const CameraModel& cam = rig.cameras[k];
        const double p[3] = {xy[0] - f.o[0], xy[1] - f.o[1], -f.o[2]};
        const double zc = p[0] * f.zf[0] + p[1] * f.zf[1] + p[2] * f.zf[2];
        if (zc < 0.25) continue;  // behind or grazing
        const double xc = p[0] * f.xr[0] + p[1] * f.xr[1] + p[2] * f.xr[2];
        const double yc = p[0] * f.yd[0] + p[1] * f.yd[1] + p[2] * f.yd[2];
        const double u = cam.focal_px * xc / zc + cam.u0;
        const double v = cam.focal_px * yc / zc + cam.v0;
        if (u < 0 || u > cam.width_px - 1 || v < 0 || v > cam.height_px - 1) continue;
        const int u0i = std::min(static_cast<int>(u), cam.width_px - 2);
        const int v0i = std::min(static_cast<int>(v), cam.height_px - 2);
        const double fu = u - u0i, fv = v - v0i;
        const PerspectiveImage& im = images[k];
        for (int c = 0; c < channels; ++c) {
          const double s =
              (1 - fv) * ((1 - fu) * im.at(c, v0i, u0i) + fu * im.at(c, v0i, u0i + 1)) +
              fv * ((1 - fu) * im.at(c, v0i + 1, u0i) + fu * im.at(c, v0i + 1, u0i + 1));
          acc[c] += s;
        }
        ++hits;
      }
      if (hits > 0)
        for (int c = 0; c < channels; ++c)
          out.at(c, i, j) = static_cast<float>(acc[c] / hits);
    }
  }
  return out;
}

DecodeHead::DecodeHead(int ch, int classes)
    : channels(ch), n_classes(classes),
      weights(static_cast<std::size_t>(classes) * ch, 0.0f), bias(classes, 0.0f) {}

SemanticGrid decode_map(const FeatureGrid& features, const DecodeHead& head,
                        const ClassSet& classes) {
  if (head.channels != features.channels)
    throw std::invalid_argument("decode_map: head/feature channel mismatch");
  if (head.n_classes != classes.size())
    throw std::invalid_argument("decode_map: head/class count mismatch");
  const std::size_t cells = features.spec.cells();
  std::vector<float> vals(static_cast<std::size_t>(head.n_classes) * cells);
  for (int c = 0; c < head.n_classes; ++c) {
    for (std::size_t k = 0; k < cells; ++k) {
      double z = head.bias[c];
      for (int ch = 0; ch < head.channels; ++ch)
        z += head.weights[c * head.channels + ch] * features.data[ch * cells + k];
      vals[c * cells + k] = static_cast<float>(1.0 / (1.0 + std::exp(-z)));
    }
  }
  return SemanticGrid::from_values(features.spec, classes, std::move(vals));
}

void write_pgm(const std::string& path, const PerspectiveImage& img, int channel) {
  if (channel < 0 || channel >= img.channels)
    throw std::invalid_argument("write_pgm: bad channel");
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error("write_pgm: cannot open " + path);
  f << "P5\n" << img.width << " " << img.height << "\n255\n";
  for (int v = 0; v < img.height; ++v)
    for (int u = 0; u < img.width; ++u) {
      const float x = img.at(channel, v, u);
      f.put(static_cast<char>(static_cast<int>(std::clamp(x, 0.0f, 1.0f) * 255.0f + 0.5f)));
    }
}

}  // namespace tscg
