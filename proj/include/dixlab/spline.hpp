#pragma once
//
// 1D cubic spline (not-a-knot ends) and a local tensor-product cubic
// interpolant for gridded fields in 1 to 3 axes.
//
// The global spline is used where smooth differentiation of tabulated data
// matters (travel-time surfaces, boundary frames across the transverse grid,
// curvature profiles along rays).  The grid interpolant is used for chart
// fields sampled on a structured (transverse x depth) grid, where a local
// 4-point Lagrange stencil per axis is accurate to O(h^4) and cheap to
// evaluate with derivatives.

#include "dixlab/common.hpp"

namespace dixlab {

class CubicSpline {
public:
    CubicSpline() = default;
    // x strictly increasing, sizes equal, at least 2 points.  With 2 or 3
    // points degrades to the interpolating line/parabola.
    CubicSpline(std::vector<double> x, std::vector<double> y);

    double value(double t) const;
    double deriv(double t) const;
    double deriv2(double t) const;

    double x_front() const { return x_.front(); }
    double x_back() const { return x_.back(); }
    bool empty() const { return x_.empty(); }

private:
    int find_interval(double t) const;
    std::vector<double> x_;
    // Per-interval cubic coefficients: y = a + b*dt + c*dt^2 + d*dt^3.
    std::vector<double> a_, b_, c_, d_;
};

// Structured-grid interpolant, values stored row-major with the *last* axis
// fastest.  Queries slightly outside the grid use the edge stencil's
// polynomial (needed at chart edges where one-sided evaluation is expected).
class GridInterp {
public:
    GridInterp() = default;
    GridInterp(std::vector<std::vector<double>> axes, std::vector<double> values);

    int dims() const { return static_cast<int>(axes_.size()); }
    double value(const Vec& q) const;
    double deriv(const Vec& q, int axis) const;
    double deriv2(const Vec& q, int axis_a, int axis_b) const;

private:
    struct AxisWeights {
        int base = 0;       // first index of the stencil
        int count = 0;      // stencil width (<=4)
        double w[4], dw[4], d2w[4];
    };
    AxisWeights weights(int axis, double t) const;
    double contract(const Vec& q, const int* dorder) const;

    std::vector<std::vector<double>> axes_;
    std::vector<double> values_;
    std::vector<long> stride_;
};

}  // namespace dixlab
