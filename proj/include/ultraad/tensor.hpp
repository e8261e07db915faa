#pragma once

#include <Eigen/Dense>

#include <cstddef>

namespace ultraad {

// All computation runs in double precision. Row-major so that a patch grid
// stored as (h*w) x D keeps each token contiguous.
using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using RowVector = Eigen::RowVectorXd;

// Scales every row to unit L2 norm. Throws ValidationError on a zero row.
Matrix normalized_rows(const Matrix& m);
RowVector normalized(const RowVector& v);

bool all_finite(const Matrix& m);

}  // namespace ultraad
