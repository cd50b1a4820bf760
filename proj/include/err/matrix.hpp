#pragma once

#include <Eigen/Dense>

namespace err {

using Mat = Eigen::MatrixXd;
using Vec = Eigen::VectorXd;

}  // namespace err
