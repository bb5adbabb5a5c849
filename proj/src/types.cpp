#include "firework/types.hpp"

#include <sstream>
#include <stdexcept>

namespace firework {

std::string Shape3::str() const {
  std::ostringstream os;
  os << "(" << d << "," << h << "," << w << ")";
  return os.str();
}

void require_same_shape(const Shape3& a, const Shape3& b, const char* what) {
  if (!(a == b)) {
    throw std::invalid_argument(std::string(what) + ": shape mismatch " + a.str() + " vs " + b.str());
  }
}

void require_min_dims(const Shape3& s, Index min_dim, const char* what) {
  if (s.d < min_dim || s.h < min_dim || s.w < min_dim) {
    throw std::invalid_argument(std::string(what) + ": every dimension must be >= " +
                                std::to_string(min_dim) + ", got " + s.str());
  }
}

template <typename Scalar>
Volume<Scalar>::Volume(const Shape3& s, Array values, const Spacing& sp)
    : shape(s), data(std::move(values)), spacing(sp) {
  if (data.size() != s.size()) {
    throw std::invalid_argument("Volume: payload size does not match shape " + s.str());
  }
}

LabelVolume::LabelVolume(const Shape3& s, Array values, const Spacing& sp)
    : shape(s), data(std::move(values)), spacing(sp) {
  if (data.size() != s.size()) {
    throw std::invalid_argument("LabelVolume: payload size does not match shape " + s.str());
  }
}

std::set<int> LabelVolume::roi_ids() const {
  std::set<int> ids;
  for (Index n = 0; n < data.size(); ++n) {
    if (data[n] > 0) ids.insert(data[n]);
  }
  return ids;
}

template <typename Scalar>
DisplacementField<Scalar>::DisplacementField(const Shape3& s, Array values)
    : shape(s), data(std::move(values)) {
  if (data.rows() != s.size()) {
    throw std::invalid_argument("DisplacementField: payload size does not match shape " + s.str());
  }
}

template struct Volume<float>;
template struct Volume<double>;
template struct DisplacementField<float>;
template struct DisplacementField<double>;

}  // namespace firework
