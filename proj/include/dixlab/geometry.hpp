#pragma once
//
// Pointwise geometry of g = v^-2 * euclidean: Christoffel symbols, curvature
// tensors, directional curvature along a ray frame, and the solve that turns
// a Ricci tensor back into the Hessian of log v (n >= 3).
//
// All index juggling happens in Cartesian coordinates where g^ij = v^2 d^ij,
// so raising an index costs a factor v^2 and nothing else.

#include "dixlab/common.hpp"
#include "dixlab/field.hpp"

namespace dixlab {

// Dense (1,3) tensor R^p_{jkl}, row-major in (p, j, k, l).
class Tensor4 {
public:
    Tensor4() = default;
    explicit Tensor4(int n) : n_(n), a_(static_cast<size_t>(n) * n * n * n, 0.0) {}
    int n() const { return n_; }
    double& operator()(int p, int j, int k, int l) {
        return a_[((static_cast<size_t>(p) * n_ + j) * n_ + k) * n_ + l];
    }
    double operator()(int p, int j, int k, int l) const {
        return a_[((static_cast<size_t>(p) * n_ + j) * n_ + k) * n_ + l];
    }

private:
    int n_ = 0;
    std::vector<double> a_;
};

// Gamma^l_{qm} assembled from u = grad log v.  Gamma(l) is the matrix in
// (q, m); symmetric in its lower pair.
std::vector<Mat> christoffel(const Vec& u);

// Parallel transport contraction along a g-geodesic whose g-unit velocity is
// the last column A_n of A: columns are A_n (w.B_j) + (w.A_n) B_j -
// (A_n.B_j) w.  With A = B = F and w = grad log v this is dF/dr for a
// parallel frame F; differentiating F in a transverse direction makes the
// same contraction appear with one argument replaced by the derivative.
Mat transport_term(const Mat& A, const Mat& B, const Vec& w);

struct CurvaturePack {
    double v = 0.0;       // wave speed at the point
    Vec u;                // grad log v
    Mat hess_f;           // hess log v
    Tensor4 riemann;      // R^p_{jkl}, coordinate components
    Mat ricci;            // Ric_{ij} = R^k_{kij}
    double scal = 0.0;    // g^ij Ric_ij = v^2 tr(Ric)
};

CurvaturePack curvature_pack(const WaveSpeedField& field, const Vec& x);

// Columns of W are the Cartesian components of R(F_j, gdot) gdot where gdot
// is the last frame column; the returned matrix is F^-1 W, the curvature
// operator in the frame.  Its last row and column vanish identically.
Mat directional_curvature(const CurvaturePack& c, const Mat& frame);

// Inverts the conformal Ricci identity for hess log v given Ric and
// u = grad log v, valid only for n >= 3 (in 2D the Ricci tensor carries a
// single scalar and the pointwise inversion does not exist).
Mat hessian_from_ricci(const Mat& ricci, const Vec& u);

// Lowered Riemann R_{pjkl} = g_{pi} R^i_{jkl}, for symmetry checks.
Tensor4 lower_riemann(const CurvaturePack& c);

}  // namespace dixlab
