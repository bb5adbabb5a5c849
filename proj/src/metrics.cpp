#include "firework/metrics.hpp"

#include "firework/fieldops.hpp"

#include <cmath>
#include <cstdio>
#include <limits>
#include <ostream>
#include <stdexcept>

namespace firework {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

// Squared distance transform along one line (lower envelope of parabolas).
void edt_line(const double* f, Index n, Index stride, double sp, double* out, std::vector<Index>& v,
              std::vector<double>& z) {
  v.assign(std::size_t(n), 0);
  z.assign(std::size_t(n + 1), 0.0);
  const double sp2 = sp * sp;
  auto intersect = [&](Index q, Index p) {
    return ((f[q * stride] + double(q * q) * sp2) - (f[p * stride] + double(p * p) * sp2)) / (2.0 * sp2 * double(q - p));
  };
  Index k = -1;
  for (Index q = 0; q < n; ++q) {
    if (f[q * stride] == kInf) continue;
    if (k < 0) {
      k = 0;
      v[0] = q;
      z[0] = -kInf;
      z[1] = kInf;
      continue;
    }
    double s = intersect(q, v[k]);
    while (s <= z[k]) {
      --k;
      s = intersect(q, v[k]);
    }
    ++k;
    v[k] = q;
    z[k] = s;
    z[k + 1] = kInf;
  }
  std::vector<double> line(std::size_t(n), kInf);
  if (k >= 0) {
    Index j = 0;
    for (Index q = 0; q < n; ++q) {
      while (z[j + 1] < double(q)) ++j;
      const double d = double(q - v[j]) * sp;
      line[q] = d * d + f[v[j] * stride];
    }
  }
  for (Index q = 0; q < n; ++q) out[q * stride] = line[q];
}

// Squared Euclidean distance (mm^2) from every voxel to the nearest seed.
Eigen::ArrayXd squared_distance_to(const Mask& seeds, const Spacing& spacing) {
  const Shape3& s = seeds.shape;
  Eigen::ArrayXd f = seeds.data.select(Eigen::ArrayXd::Zero(s.size()), Eigen::ArrayXd::Constant(s.size(), kInf));
  std::vector<Index> v;
  std::vector<double> z;
  for (int a = 2; a >= 0; --a) {
    const Index st = s.stride(a);
    const Index len = s[a];
    for (Index n = 0; n < s.size(); ++n) {
      if ((n / st) % len != 0) continue;
      edt_line(f.data() + n, len, st, spacing[a], f.data() + n, v, z);
    }
  }
  return f;
}

}  // namespace

Mask Mask::of_label(const LabelVolume& labels, int roi) {
  Mask m(labels.shape);
  m.data = labels.data == roi;
  return m;
}

DiceScores dice(const LabelVolume& a, const LabelVolume& b, const std::set<int>& rois) {
  require_same_shape(a.shape, b.shape, "dice");
  DiceScores out;
  double sum = 0;
  int counted = 0;
  for (int roi : rois) {
    const auto in_a = a.data == roi;
    const auto in_b = b.data == roi;
    const Index na = in_a.count();
    const Index nb = in_b.count();
    if (na == 0 && nb == 0) continue;
    const Index both = (in_a && in_b).count();
    const double score = 2.0 * double(both) / double(na + nb);
    out.per_roi[roi] = score;
    sum += score;
    ++counted;
  }
  out.mean = counted > 0 ? sum / counted : std::numeric_limits<double>::quiet_NaN();
  return out;
}

Mask surface(const Mask& mask) {
  const Shape3& s = mask.shape;
  Mask out(s);
  Index n = 0;
  for (Index i = 0; i < s.d; ++i)
    for (Index j = 0; j < s.h; ++j)
      for (Index k = 0; k < s.w; ++k, ++n) {
        if (!mask.data[n]) continue;
        const bool border = i == 0 || j == 0 || k == 0 || i == s.d - 1 || j == s.h - 1 || k == s.w - 1;
        out.data[n] = border || !mask.data[n - s.stride(0)] || !mask.data[n + s.stride(0)] ||
                      !mask.data[n - s.stride(1)] || !mask.data[n + s.stride(1)] || !mask.data[n - 1] ||
                      !mask.data[n + 1];
      }
  return out;
}

double assd(const Mask& a, const Mask& b, const Spacing& spacing) {
  require_same_shape(a.shape, b.shape, "assd");
  if (a.count() == 0 || b.count() == 0) throw std::invalid_argument("assd: both masks must be non-empty");
  const Mask sa = surface(a);
  const Mask sb = surface(b);
  const Eigen::ArrayXd to_b = squared_distance_to(sb, spacing);
  const Eigen::ArrayXd to_a = squared_distance_to(sa, spacing);
  double sum = 0;
  for (Index n = 0; n < sa.data.size(); ++n)
    if (sa.data[n]) sum += std::sqrt(to_b[n]);
  for (Index n = 0; n < sb.data.size(); ++n)
    if (sb.data[n]) sum += std::sqrt(to_a[n]);
  return sum / double(sa.count() + sb.count());
}

template <typename Scalar>
std::vector<MetricsRecord> evaluate(const RegistrationResult<Scalar>& result, const LabelVolume& fixed_labels,
                                    const std::set<int>& rois, const Spacing& spacing) {
  std::vector<MetricsRecord> records;
  for (int t = 0; t < result.step_count(); ++t) {
    const RegistrationStep<Scalar>& step = result.steps[t];
    if (!step.warped_labels) throw std::invalid_argument("evaluate: step " + std::to_string(t + 1) + " has no warped labels");
    const LabelVolume& warped = *step.warped_labels;
    MetricsRecord rec;
    rec.step = t + 1;
    const DiceScores d = dice(warped, fixed_labels, rois);
    rec.dsc_mean = d.mean;
    rec.dsc_per_roi = d.per_roi;
    double sum = 0;
    int counted = 0;
    for (int roi : rois) {
      const Mask a = Mask::of_label(warped, roi);
      const Mask b = Mask::of_label(fixed_labels, roi);
      if (a.count() == 0 || b.count() == 0) continue;
      sum += assd(a, b, spacing);
      ++counted;
    }
    rec.assd_mean_mm = counted > 0 ? sum / counted : std::numeric_limits<double>::quiet_NaN();
    rec.folding_ratio = folding_ratio(step.field);
    records.push_back(std::move(rec));
  }
  return records;
}

void write_metrics_csv(std::ostream& os, const std::vector<MetricsRecord>& records, const std::set<int>& rois) {
  os << "step,dsc_mean,assd_mean_mm,folding_ratio";
  for (int roi : rois) os << ",dsc_" << roi;
  os << "\n";
  char buf[64];
  auto num = [&buf](double v) -> const char* {
    std::snprintf(buf, sizeof(buf), "%.8f", v);
    return buf;
  };
  for (const MetricsRecord& r : records) {
    os << r.step << "," << num(r.dsc_mean);
    os << "," << num(r.assd_mean_mm);
    os << "," << num(r.folding_ratio);
    for (int roi : rois) {
      const auto it = r.dsc_per_roi.find(roi);
      os << "," << (it == r.dsc_per_roi.end() ? "nan" : num(it->second));
    }
    os << "\n";
  }
}

template std::vector<MetricsRecord> evaluate(const RegistrationResult<float>&, const LabelVolume&, const std::set<int>&,
                                             const Spacing&);
template std::vector<MetricsRecord> evaluate(const RegistrationResult<double>&, const LabelVolume&,
                                             const std::set<int>&, const Spacing&);

}  // namespace firework
