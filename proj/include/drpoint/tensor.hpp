#pragma once

#include <Eigen/Dense>

namespace drpoint {

/// Row-major dense matrix used for images, token sequences and parameters.
using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using RowVec = Eigen::Matrix<double, 1, Eigen::Dynamic>;
using Index = Eigen::Index;

}  // namespace drpoint
