#pragma once

#include <Eigen/Dense>

namespace cnd {

using Mat = Eigen::MatrixXd;
using Vec = Eigen::VectorXd;

}  // namespace cnd
