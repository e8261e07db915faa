#include "ultraad/tensor.hpp"

#include "ultraad/error.hpp"

namespace ultraad {

Matrix normalized_rows(const Matrix& m) {
  Matrix out(m.rows(), m.cols());
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    const double n = m.row(r).norm();
    if (!(n > 0.0)) throw ValidationError("cannot normalize a zero vector");
    out.row(r) = m.row(r) / n;
  }
  return out;
}

RowVector normalized(const RowVector& v) {
  const double n = v.norm();
  if (!(n > 0.0)) throw ValidationError("cannot normalize a zero vector");
  return v / n;
}

bool all_finite(const Matrix& m) { return m.allFinite(); }

}  // namespace ultraad
