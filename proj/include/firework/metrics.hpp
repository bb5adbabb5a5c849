// Overlap and surface-distance measures for registered label maps.

#pragma once

#include "firework/result.hpp"
#include "firework/types.hpp"

#include <iosfwd>
#include <map>
#include <set>
#include <vector>

namespace firework {

struct Mask {
  Shape3 shape;
  Eigen::Array<bool, Eigen::Dynamic, 1> data;

  Mask() = default;
  explicit Mask(const Shape3& s) : shape(s), data(Eigen::Array<bool, Eigen::Dynamic, 1>::Constant(s.size(), false)) {}
  static Mask of_label(const LabelVolume& labels, int roi);
  Index count() const { return data.count(); }
};

struct DiceScores {
  std::map<int, double> per_roi;
  // Mean over ROIs present in at least one volume; NaN if there are none.
  double mean = 0;
};

// 2|A_r n B_r| / (|A_r| + |B_r|) per ROI. A ROI missing from both volumes
// is left out; a ROI missing from exactly one scores 0.
DiceScores dice(const LabelVolume& a, const LabelVolume& b, const std::set<int>& rois);

// Voxels of the mask with at least one 6-connected neighbour outside the
// mask. Neighbours beyond the grid count as outside.
Mask surface(const Mask& mask);

// Average symmetric surface distance in mm. Throws std::invalid_argument if
// either mask is empty.
double assd(const Mask& a, const Mask& b, const Spacing& spacing);

struct MetricsRecord {
  int step = 0;
  double dsc_mean = 0;
  std::map<int, double> dsc_per_roi;
  // Mean over ROIs present in both volumes; NaN if there are none.
  double assd_mean_mm = 0;
  double folding_ratio = 0;
};

// One record per step of `result`. Every step must carry warped labels.
template <typename Scalar>
std::vector<MetricsRecord> evaluate(const RegistrationResult<Scalar>& result, const LabelVolume& fixed_labels,
                                    const std::set<int>& rois, const Spacing& spacing);

// Columns: step, dsc_mean, assd_mean_mm, folding_ratio, dsc_<roi>...
void write_metrics_csv(std::ostream& os, const std::vector<MetricsRecord>& records, const std::set<int>& rois);

}  // namespace firework
