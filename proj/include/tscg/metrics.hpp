#pragma once
// Focal-loss training objective (with analytic gradient) and IoU/mIoU
// evaluation metrics.

#include <string>
#include <vector>

#include "tscg/grid.hpp"

namespace tscg {

struct LossConfig {
  double gamma = 2.0;     // focusing exponent, >= 0
  double epsilon = 1e-7;  // probability clamp

  void validate() const;
  bool operator==(const LossConfig&) const = default;
};

// Mean focal loss: per element BCE(y,p) * (1 - p_t)^gamma with
// p_t = y*p + (1-y)*(1-p); mean over cells within each class, then mean
// over classes. y must be binary {0,1}.
double focal_loss(const SemanticGrid& y, const SemanticGrid& y_hat, const LossConfig& cfg);

// d focal_loss / d y_hat, same layout as y_hat. Zero where y_hat hit the
// epsilon clamp.
std::vector<double> focal_loss_grad(const SemanticGrid& y, const SemanticGrid& y_hat,
                                    const LossConfig& cfg);

// IoU of one class after binarizing both grids at `threshold` (value >
// threshold counts as occupied). Both-empty returns 1.0.
double iou(const SemanticGrid& pred, const SemanticGrid& gt, int class_index,
           double threshold = 0.5);

struct EvalReport {
  std::vector<std::string> class_names;
  std::vector<double> class_iou;
  double miou = 0;
  double threshold = 0.5;
  std::string range_label;

  std::string to_json() const;
  std::string to_table() const;  // aligned class columns then mIoU
};

EvalReport miou(const SemanticGrid& pred, const SemanticGrid& gt, double threshold = 0.5);

// Text table over several reports (one row each), shared class columns.
std::string report_table(const std::vector<EvalReport>& rows,
                         const std::vector<std::string>& row_labels);

}  // namespace tscg
