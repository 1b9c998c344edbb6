#pragma once
//
// Shared aliases, error types, and small numeric helpers.
//
// Conventions used throughout the library:
//   - Cartesian coordinates x in R^n, n = 2 or 3; the wave speed v(x) > 0
//     defines the metric g = v^-2 * (euclidean), so g-arclength along a ray
//     equals travel time.
//   - A matrix M stores the component with the contravariant (upper) index as
//     the row and the covariant (lower) index as the column.  Frame matrices
//     keep the frame vectors' Cartesian components in their columns.
//   - Transverse blocks (tangent to wavefronts) are (n-1)x(n-1); the radial
//     direction, when carried, sits in the last row/column.

#include <Eigen/Dense>
#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

namespace dixlab {

using Vec = Eigen::VectorXd;
using Mat = Eigen::MatrixXd;

// Thrown when an integration or linear solve leaves its validity envelope
// (step underflow, singular data, conjugate-point conditioning).  The CLI
// maps this to exit code 3.
class NumericsError : public std::runtime_error {
public:
    explicit NumericsError(const std::string& what) : std::runtime_error(what) {}
};

// Thrown when a regularized solve cannot meet its residual target (the 2D
// boundary-data problem is exponentially ill-posed with depth).  CLI exit 4.
class InstabilityError : public std::runtime_error {
public:
    explicit InstabilityError(const std::string& what) : std::runtime_error(what) {}
};

// Bad user input (CLI exit 2).
class UsageError : public std::runtime_error {
public:
    explicit UsageError(const std::string& what) : std::runtime_error(what) {}
};

inline double sqr(double x) { return x * x; }

// 2-norm condition number of a small dense matrix.
inline double cond2(const Mat& m) {
    Eigen::JacobiSVD<Mat> svd(m);
    const auto& sv = svd.singularValues();
    if (sv.size() == 0 || sv(sv.size() - 1) <= 0.0) return std::numeric_limits<double>::infinity();
    return sv(0) / sv(sv.size() - 1);
}

inline double median(std::vector<double> v) {
    if (v.empty()) return std::numeric_limits<double>::quiet_NaN();
    std::sort(v.begin(), v.end());
    size_t m = v.size() / 2;
    return (v.size() % 2 == 1) ? v[m] : 0.5 * (v[m - 1] + v[m]);
}

// Flatten / unflatten helpers for packing matrices into ODE state vectors.
inline void pack(const Mat& m, Vec& y, int& at) {
    for (int j = 0; j < m.cols(); ++j)
        for (int i = 0; i < m.rows(); ++i) y(at++) = m(i, j);
}
inline void unpack(const Vec& y, int& at, Mat& m) {
    for (int j = 0; j < m.cols(); ++j)
        for (int i = 0; i < m.rows(); ++i) m(i, j) = y(at++);
}

}  // namespace dixlab
