#pragma once

/**
 * \file core.hpp
 * \brief Common aliases and the exception hierarchy used across discgauge.
 */

#include <Eigen/Core>
#include <Eigen/Geometry>
#include <Eigen/SparseCore>

#include <numbers>
#include <stdexcept>
#include <string>

namespace discgauge {

using Vec2 = Eigen::Vector2d;
using Vec3 = Eigen::Vector3d;
using Mat2 = Eigen::Matrix2d;
using Mat3 = Eigen::Matrix3d;

/// One scalar per grid node, node-major order.
using ScalarField = Eigen::VectorXd;
/// One R^3 vector per grid node (rows), node-major order.
using VectorField = Eigen::Matrix<double, Eigen::Dynamic, 3>;

using SparseMatrix = Eigen::SparseMatrix<double>;
using Triplet      = Eigen::Triplet<double>;

inline constexpr double pi = std::numbers::pi;

/// Base class of all library errors.
class Error : public std::runtime_error
{
public:
  using std::runtime_error::runtime_error;
};

/// det g <= 0 somewhere, or a metric that is not positive definite.
class DegenerateMetricError : public Error
{
public:
  DegenerateMetricError(const std::string& what, Eigen::Index node)
      : Error(what + " (node " + std::to_string(node) + ")"),
        node_{node} {}
  Eigen::Index node() const noexcept { return node_; }

private:
  Eigen::Index node_;
};

/// Fields defined on different grids, wrong sizes, and similar caller mistakes.
class ShapeMismatchError : public Error
{
public:
  using Error::Error;
};

/// An iterative or direct solve did not reach its tolerance.
class SolverError : public Error
{
public:
  SolverError(const std::string& what, double residual, int iterations = 0)
      : Error(what + " (residual " + std::to_string(residual) + ", iterations " + std::to_string(iterations) + ")"),
        residual_{residual},
        iterations_{iterations} {}
  double residual() const noexcept { return residual_; }
  int iterations() const noexcept { return iterations_; }

private:
  double residual_;
  int iterations_;
};

} // namespace discgauge
