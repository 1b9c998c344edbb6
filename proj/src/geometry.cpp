#include "dixlab/geometry.hpp"

namespace dixlab {

std::vector<Mat> christoffel(const Vec& u) {
    int n = static_cast<int>(u.size());
    // Gamma^l_{qm} = -(d^l_q u_m + d^l_m u_q - d_{qm} u_l).
    std::vector<Mat> G(n, Mat::Zero(n, n));
    for (int l = 0; l < n; ++l) {
        for (int q = 0; q < n; ++q)
            for (int m = 0; m < n; ++m) {
                double s = 0.0;
                if (l == q) s += u(m);
                if (l == m) s += u(q);
                if (q == m) s -= u(l);
                G[l](q, m) = -s;
            }
    }
    return G;
}

Mat transport_term(const Mat& A, const Mat& B, const Vec& w) {
    int n = static_cast<int>(A.rows());
    Vec an = A.col(n - 1);
    return an * (w.transpose() * B) + (w.dot(an)) * B - w * (an.transpose() * B);
}

CurvaturePack curvature_pack(const WaveSpeedField& field, const Vec& x) {
    int n = field.dim();
    CurvaturePack c;
    c.v = field.value(x);
    if (!(c.v > 0.0)) throw NumericsError("wave speed not positive");
    c.u = field.grad(x) / c.v;
    c.hess_f = field.hess(x) / c.v - c.u * c.u.transpose();

    std::vector<Mat> G = christoffel(c.u);
    // dG[j] is the matrix l -> (k,l)... stored as dGamma(l)(k, j)?  Keep it
    // explicit: dGamma^p_{kl} / dx^j = -(d^p_k H_{lj} + d^p_l H_{kj} - d_{kl} H_{pj})
    // with H = hess_f; evaluate inline below.
    const Mat& H = c.hess_f;
    auto dG = [&](int p, int k, int l, int j) {
        double s = 0.0;
        if (p == k) s += H(l, j);
        if (p == l) s += H(k, j);
        if (k == l) s -= H(p, j);
        return -s;
    };

    c.riemann = Tensor4(n);
    for (int p = 0; p < n; ++p)
        for (int j = 0; j < n; ++j)
            for (int k = 0; k < n; ++k)
                for (int l = 0; l < n; ++l) {
                    double r = dG(p, k, l, j) - dG(p, j, l, k);
                    for (int i = 0; i < n; ++i)
                        r += G[i](k, l) * G[p](j, i) - G[i](j, l) * G[p](k, i);
                    c.riemann(p, j, k, l) = r;
                }

    c.ricci = Mat::Zero(n, n);
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j) {
            double s = 0.0;
            for (int k = 0; k < n; ++k) s += c.riemann(k, k, i, j);
            c.ricci(i, j) = s;
        }
    c.scal = c.v * c.v * c.ricci.trace();
    return c;
}

Mat directional_curvature(const CurvaturePack& c, const Mat& frame) {
    int n = frame.rows();
    Vec gd = frame.col(n - 1);
    Mat W(n, n);
    for (int j = 0; j < n; ++j) {
        Vec w = Vec::Zero(n);
        for (int p = 0; p < n; ++p) {
            double s = 0.0;
            for (int q = 0; q < n; ++q)
                for (int k = 0; k < n; ++k)
                    for (int l = 0; l < n; ++l)
                        s += c.riemann(p, q, k, l) * frame(q, j) * gd(k) * gd(l);
            w(p) = s;
        }
        W.col(j) = w;
    }
    return frame.partialPivLu().solve(W);
}

Mat hessian_from_ricci(const Mat& ricci, const Vec& u) {
    int n = static_cast<int>(u.size());
    if (n < 3) throw UsageError("pointwise Hessian recovery needs n >= 3");
    Mat G = ricci - (n - 2) * (u * u.transpose() - u.squaredNorm() * Mat::Identity(n, n));
    double tr = G.trace();
    return (G - (tr / (2.0 * (n - 1))) * Mat::Identity(n, n)) / double(n - 2);
}

Tensor4 lower_riemann(const CurvaturePack& c) {
    int n = c.ricci.rows();
    double g = 1.0 / (c.v * c.v);
    Tensor4 out(n);
    for (int p = 0; p < n; ++p)
        for (int j = 0; j < n; ++j)
            for (int k = 0; k < n; ++k)
                for (int l = 0; l < n; ++l) out(p, j, k, l) = g * c.riemann(p, j, k, l);
    return out;
}

}  // namespace dixlab
