#include "tscg/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include "json.hpp"

namespace tscg {

void LossConfig::validate() const {
  if (!(gamma >= 0) || !std::isfinite(gamma))
    throw std::invalid_argument("LossConfig: gamma must be finite and >= 0");
  if (!(epsilon > 0 && epsilon < 0.5))
    throw std::invalid_argument("LossConfig: epsilon must be in (0, 0.5)");
}

namespace {

void check_pair(const SemanticGrid& y, const SemanticGrid& y_hat) {
  if (y.spec != y_hat.spec || !(y.classes == y_hat.classes))
    throw std::invalid_argument("focal_loss: spec/class mismatch");
  for (float v : y.data)
    if (v != 0.0f && v != 1.0f) throw std::invalid_argument("focal_loss: ground truth must be binary");
}

}  // namespace

double focal_loss(const SemanticGrid& y, const SemanticGrid& y_hat, const LossConfig& cfg) {
  cfg.validate();
  check_pair(y, y_hat);
  const int n_classes = y.classes.size();
  const std::size_t cells = y.spec.cells();
  double total = 0.0;
  for (int c = 0; c < n_classes; ++c) {
    const float* yt = y.channel(c);
    const float* yp = y_hat.channel(c);
    double class_sum = 0.0;
    for (std::size_t k = 0; k < cells; ++k) {
      const double p = std::clamp<double>(yp[k], cfg.epsilon, 1.0 - cfg.epsilon);
      const double t = yt[k];
      const double pt = t * p + (1.0 - t) * (1.0 - p);
      class_sum += -std::log(pt) * std::pow(1.0 - pt, cfg.gamma);
    }
    total += class_sum / static_cast<double>(cells);
  }
  return total / n_classes;
}

std::vector<double> focal_loss_grad(const SemanticGrid& y, const SemanticGrid& y_hat,
                                    const LossConfig& cfg) {
  cfg.validate();
  check_pair(y, y_hat);
  const int n_classes = y.classes.size();
  const std::size_t cells = y.spec.cells();
  const double wred = 1.0 / (static_cast<double>(cells) * n_classes);
  std::vector<double> grad(y_hat.data.size(), 0.0);
  for (int c = 0; c < n_classes; ++c) {
    const float* yt = y.channel(c);
    const float* yp = y_hat.channel(c);
    double* g = grad.data() + static_cast<std::size_t>(c) * cells;
    for (std::size_t k = 0; k < cells; ++k) {
      const double raw = yp[k];
      if (raw <= cfg.epsilon || raw >= 1.0 - cfg.epsilon) continue;  // clamped: flat
      const double t = yt[k];
      const double pt = t * raw + (1.0 - t) * (1.0 - raw);
      const double one_m = 1.0 - pt;
      double dl_dpt = -std::pow(one_m, cfg.gamma) / pt;
      if (cfg.gamma > 0)
        dl_dpt += cfg.gamma * std::log(pt) * std::pow(one_m, cfg.gamma - 1.0);
      g[k] = dl_dpt * (2.0 * t - 1.0) * wred;
    }
  }
  return grad;
}

double iou(const SemanticGrid& pred, const SemanticGrid& gt, int class_index,
           double threshold) {
  if (pred.spec != gt.spec) throw std::invalid_argument("iou: spec mismatch");
  if (class_index < 0 || class_index >= pred.classes.size() || class_index >= gt.classes.size())
    throw std::invalid_argument("iou: invalid class index");
  if (!(threshold > 0 && threshold < 1)) throw std::invalid_argument("iou: threshold must be in (0,1)");
  const std::size_t cells = pred.spec.cells();
  const float* p = pred.channel(class_index);
  const float* g = gt.channel(class_index);
  std::size_t inter = 0, uni = 0;
  for (std::size_t k = 0; k < cells; ++k) {
    const bool a = p[k] > threshold;
    const bool b = g[k] > threshold;
    inter += (a && b);
    uni += (a || b);
  }
  if (uni == 0) return 1.0;  // both empty: correct negative
  return static_cast<double>(inter) / static_cast<double>(uni);
}

EvalReport miou(const SemanticGrid& pred, const SemanticGrid& gt, double threshold) {
  if (!(pred.classes == gt.classes)) throw std::invalid_argument("miou: class set mismatch");
  EvalReport r;
  r.class_names = pred.classes.names;
  r.threshold = threshold;
  for (int c = 0; c < pred.classes.size(); ++c) r.class_iou.push_back(iou(pred, gt, c, threshold));
  r.miou = std::accumulate(r.class_iou.begin(), r.class_iou.end(), 0.0) / r.class_iou.size();
  return r;
}

std::string EvalReport::to_json() const {
  nlohmann::json j;
  j["classes"] = class_names;
  j["iou"] = class_iou;
  j["miou"] = miou;
  j["threshold"] = threshold;
  j["range"] = range_label;
  return j.dump(2);
}

namespace {
std::string fmt_pct(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%6.2f", v * 100.0);
  return buf;
}
}  // namespace

std::string EvalReport::to_table() const {
  return report_table({*this}, {range_label.empty() ? std::string("-") : range_label});
}

std::string report_table(const std::vector<EvalReport>& rows,
                         const std::vector<std::string>& row_labels) {
  if (rows.empty()) return "";
  std::size_t lw = 5;
  for (const auto& l : row_labels) lw = std::max(lw, l.size());
  std::ostringstream os;
  os << std::string(lw, ' ');
  for (const auto& n : rows[0].class_names) os << "  " << n.substr(0, 6);
  os << "  mIoU(%)\n";
  for (std::size_t r = 0; r < rows.size(); ++r) {
    std::string label = r < row_labels.size() ? row_labels[r] : "";
    os << label << std::string(lw - label.size(), ' ');
    for (std::size_t c = 0; c < rows[r].class_iou.size(); ++c) {
      const auto& name = rows[r].class_names[c];
      const std::size_t w = std::min<std::size_t>(name.size(), 6) + 2;
      std::string v = fmt_pct(rows[r].class_iou[c]);
      if (v.size() < w) v = std::string(w - v.size(), ' ') + v;
      os << v.substr(v.size() - w);
    }
    os << "  " << fmt_pct(rows[r].miou) << "\n";
  }
  return os.str();
}

}  // namespace tscg
