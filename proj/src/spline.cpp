#include "dixlab/spline.hpp"

#include <algorithm>

namespace dixlab {

CubicSpline::CubicSpline(std::vector<double> x, std::vector<double> y) : x_(std::move(x)) {
    const int n = static_cast<int>(x_.size());
    if (n < 2 || y.size() != x_.size())
        throw UsageError("CubicSpline: need >= 2 matching points");
    for (int i = 0; i + 1 < n; ++i)
        if (!(x_[i + 1] > x_[i])) throw UsageError("CubicSpline: x must be strictly increasing");

    a_.assign(n - 1, 0.0);
    b_.assign(n - 1, 0.0);
    c_.assign(n - 1, 0.0);
    d_.assign(n - 1, 0.0);

    if (n == 2) {
        a_[0] = y[0];
        b_[0] = (y[1] - y[0]) / (x_[1] - x_[0]);
        return;
    }
    if (n == 3) {
        // Single interpolating parabola over both intervals.
        double h0 = x_[1] - x_[0], h1 = x_[2] - x_[1];
        double s0 = (y[1] - y[0]) / h0, s1 = (y[2] - y[1]) / h1;
        double c = (s1 - s0) / (h0 + h1);  // half the second derivative
        a_[0] = y[0];
        b_[0] = s0 - c * h0;
        c_[0] = c;
        a_[1] = y[1];
        b_[1] = b_[0] + 2.0 * c * h0;
        c_[1] = c;
        return;
    }

    // Moment (second-derivative) formulation with not-a-knot end conditions:
    // the first two and last two intervals each share one cubic, which keeps
    // full O(h^4) accuracy at the ends without needing derivative data.
    std::vector<double> h(n - 1);
    for (int i = 0; i < n - 1; ++i) h[i] = x_[i + 1] - x_[i];

    const int m = n - 2;  // unknowns M_1..M_{n-2}
    std::vector<double> dl(m, 0.0), dg(m, 0.0), du(m, 0.0), rhs(m, 0.0), M(n, 0.0);
    for (int i = 1; i <= n - 2; ++i) {
        int k = i - 1;
        dl[k] = h[i - 1];
        dg[k] = 2.0 * (h[i - 1] + h[i]);
        du[k] = h[i];
        rhs[k] = 6.0 * ((y[i + 1] - y[i]) / h[i] - (y[i] - y[i - 1]) / h[i - 1]);
    }
    // Fold the corner conditions into the first/last rows.
    dg[0] += h[0] * (h[0] + h[1]) / h[1];
    du[0] -= h[0] * h[0] / h[1];
    dl[0] = 0.0;
    dg[m - 1] += h[n - 2] * (h[n - 3] + h[n - 2]) / h[n - 3];
    dl[m - 1] -= h[n - 2] * h[n - 2] / h[n - 3];
    du[m - 1] = 0.0;

    for (int k = 1; k < m; ++k) {  // Thomas elimination
        double w = dl[k] / dg[k - 1];
        dg[k] -= w * du[k - 1];
        rhs[k] -= w * rhs[k - 1];
    }
    std::vector<double> sol(m);
    sol[m - 1] = rhs[m - 1] / dg[m - 1];
    for (int k = m - 2; k >= 0; --k) sol[k] = (rhs[k] - du[k] * sol[k + 1]) / dg[k];
    for (int i = 1; i <= n - 2; ++i) M[i] = sol[i - 1];
    M[0] = ((h[0] + h[1]) * M[1] - h[0] * M[2]) / h[1];
    M[n - 1] = ((h[n - 3] + h[n - 2]) * M[n - 2] - h[n - 2] * M[n - 3]) / h[n - 3];

    for (int i = 0; i < n - 1; ++i) {
        a_[i] = y[i];
        c_[i] = 0.5 * M[i];
        d_[i] = (M[i + 1] - M[i]) / (6.0 * h[i]);
        b_[i] = (y[i + 1] - y[i]) / h[i] - h[i] * (2.0 * M[i] + M[i + 1]) / 6.0;
    }
}

int CubicSpline::find_interval(double t) const {
    int n = static_cast<int>(x_.size());
    auto it = std::upper_bound(x_.begin(), x_.end(), t);
    int i = static_cast<int>(it - x_.begin()) - 1;
    return std::clamp(i, 0, n - 2);
}

double CubicSpline::value(double t) const {
    int i = find_interval(t);
    double dt = t - x_[i];
    return a_[i] + dt * (b_[i] + dt * (c_[i] + dt * d_[i]));
}

double CubicSpline::deriv(double t) const {
    int i = find_interval(t);
    double dt = t - x_[i];
    return b_[i] + dt * (2.0 * c_[i] + dt * 3.0 * d_[i]);
}

double CubicSpline::deriv2(double t) const {
    int i = find_interval(t);
    double dt = t - x_[i];
    return 2.0 * c_[i] + 6.0 * d_[i] * dt;
}

GridInterp::GridInterp(std::vector<std::vector<double>> axes, std::vector<double> values)
    : axes_(std::move(axes)), values_(std::move(values)) {
    if (axes_.empty() || axes_.size() > 3) throw UsageError("GridInterp: 1 to 3 axes");
    long total = 1;
    stride_.assign(axes_.size(), 0);
    for (int a = static_cast<int>(axes_.size()) - 1; a >= 0; --a) {
        if (axes_[a].size() < 2) throw UsageError("GridInterp: axis needs >= 2 points");
        stride_[a] = total;
        total *= static_cast<long>(axes_[a].size());
    }
    if (static_cast<long>(values_.size()) != total)
        throw UsageError("GridInterp: value count does not match grid");
}

GridInterp::AxisWeights GridInterp::weights(int axis, double t) const {
    const auto& ax = axes_[axis];
    const int n = static_cast<int>(ax.size());
    AxisWeights aw;
    aw.count = std::min(4, n);
    auto it = std::upper_bound(ax.begin(), ax.end(), t);
    int i = std::clamp(static_cast<int>(it - ax.begin()) - 1, 0, n - 2);
    aw.base = std::clamp(i - 1, 0, n - aw.count);

    // Expand each Lagrange basis polynomial of the stencil so value and
    // derivatives at t are exact for the local interpolant.
    for (int j = 0; j < aw.count; ++j) {
        double coef[5] = {1.0, 0.0, 0.0, 0.0, 0.0};
        int deg = 0;
        double denom = 1.0;
        for (int k = 0; k < aw.count; ++k) {
            if (k == j) continue;
            double root = ax[aw.base + k];
            denom *= ax[aw.base + j] - root;
            for (int p = deg + 1; p >= 1; --p) coef[p] = coef[p - 1] - root * coef[p];
            coef[0] *= -root;
            ++deg;
        }
        double v = 0.0, dv = 0.0, d2v = 0.0;
        for (int p = deg; p >= 0; --p) {
            d2v = d2v * t + 2.0 * dv;
            dv = dv * t + v;
            v = v * t + coef[p];
        }
        aw.w[j] = v / denom;
        aw.dw[j] = dv / denom;
        aw.d2w[j] = d2v / denom;
    }
    return aw;
}

double GridInterp::contract(const Vec& q, const int* dorder) const {
    const int nd = dims();
    AxisWeights aw[3];
    for (int a = 0; a < nd; ++a) aw[a] = weights(a, q(a));
    auto pick = [&](int a, int j) {
        switch (dorder[a]) {
            case 0: return aw[a].w[j];
            case 1: return aw[a].dw[j];
            default: return aw[a].d2w[j];
        }
    };
    double acc = 0.0;
    int cnt[3] = {1, 1, 1};
    for (int a = 0; a < nd; ++a) cnt[a] = aw[a].count;
    for (int i = 0; i < cnt[0]; ++i)
        for (int j = 0; j < cnt[1]; ++j)
            for (int k = 0; k < cnt[2]; ++k) {
                long idx = (aw[0].base + i) * stride_[0];
                double w = pick(0, i);
                if (nd > 1) {
                    idx += (aw[1].base + j) * stride_[1];
                    w *= pick(1, j);
                }
                if (nd > 2) {
                    idx += (aw[2].base + k) * stride_[2];
                    w *= pick(2, k);
                }
                acc += w * values_[idx];
            }
    return acc;
}

double GridInterp::value(const Vec& q) const {
    int d[3] = {0, 0, 0};
    return contract(q, d);
}

double GridInterp::deriv(const Vec& q, int axis) const {
    int d[3] = {0, 0, 0};
    d[axis] = 1;
    return contract(q, d);
}

double GridInterp::deriv2(const Vec& q, int axis_a, int axis_b) const {
    int d[3] = {0, 0, 0};
    d[axis_a] += 1;
    d[axis_b] += 1;
    return contract(q, d);
}

}  // namespace dixlab
