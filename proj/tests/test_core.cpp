// Integrator and interpolation oracles: closed-form solutions the adaptive
// stepper and the splines must reproduce to tight tolerance.

#include "dixlab/ode.hpp"
#include "dixlab/spline.hpp"

#include "checks.hpp"

using namespace dixlab;

static void test_ode_exponential() {
    // y' = -y from 1: y(t) = e^-t.
    auto rhs = [](double, const Vec& y, Vec& dy) { dy = -y; };
    Vec y0(1);
    y0 << 1.0;
    OdeResult res = integrate_adaptive(rhs, 0.0, 5.0, y0);
    CHECK(res.completed);
    CHECK_CLOSE(res.y(0), std::exp(-5.0), 1e-9);
    PASS_NOTE("ode exponential decay");
}

static void test_ode_oscillator() {
    // Harmonic oscillator over many periods; also checks backward time.
    auto rhs = [](double, const Vec& y, Vec& dy) {
        dy.resize(2);
        dy(0) = y(1);
        dy(1) = -y(0);
    };
    Vec y0(2);
    y0 << 1.0, 0.0;
    double T = 20.0 * M_PI;
    OdeResult fwd = integrate_adaptive(rhs, 0.0, T, y0);
    CHECK(fwd.completed);
    CHECK_CLOSE(fwd.y(0), 1.0, 1e-7);
    CHECK_CLOSE(fwd.y(1), 0.0, 1e-7);

    OdeResult bwd = integrate_adaptive(rhs, 0.0, -0.5 * M_PI, y0);
    CHECK(bwd.completed);
    CHECK_CLOSE(bwd.y(0), 0.0, 1e-9);
    CHECK_CLOSE(bwd.y(1), 1.0, 1e-9);
    PASS_NOTE("ode oscillator forward and backward");
}

static void test_ode_observer_halt() {
    auto rhs = [](double, const Vec& y, Vec& dy) { dy = y; };
    Vec y0(1);
    y0 << 1.0;
    OdeResult res = integrate_adaptive(
        rhs, 0.0, 50.0, y0, {},
        [](double, const Vec& y, double) {
            return y(0) > 100.0 ? StepVerdict::halt : StepVerdict::proceed;
        });
    CHECK(!res.completed);
    CHECK(res.halted);
    CHECK(res.y(0) > 100.0);
    CHECK(res.y(0) < 1e4);  // halted soon after the threshold
    PASS_NOTE("ode observer halt");
}

static void test_ode_sampled() {
    auto rhs = [](double t, const Vec&, Vec& dy) {
        dy.resize(1);
        dy(0) = std::cos(t);
    };
    Vec y0(1);
    y0 << 0.0;
    std::vector<double> ts;
    for (int i = 0; i <= 40; ++i) ts.push_back(0.1 * i);
    int seen = 0;
    integrate_sampled(rhs, 0.0, ts, y0, {}, [&](int idx, double t, const Vec& y) {
        CHECK_CLOSE(t, ts[idx], 1e-14);
        CHECK_CLOSE(y(0), std::sin(t), 1e-10);
        ++seen;
    });
    CHECK(seen == 41);
    PASS_NOTE("ode sampled landing points");
}

static void test_spline_cubic_exact() {
    // A global cubic is reproduced exactly (up to roundoff) by a cubic spline
    // with not-a-knot ends, including both derivatives.
    auto f = [](double x) { return ((2.0 * x - 1.0) * x + 3.0) * x - 0.5; };
    auto f1 = [](double x) { return (6.0 * x - 2.0) * x + 3.0; };
    auto f2 = [](double x) { return 12.0 * x - 2.0; };
    std::vector<double> xs, ys;
    for (int i = 0; i <= 12; ++i) {
        double x = -1.0 + i * (2.5 / 12.0);
        xs.push_back(x);
        ys.push_back(f(x));
    }
    CubicSpline s(xs, ys);
    for (double q : {-0.95, -0.3, 0.0, 0.77, 1.2, 1.49}) {
        CHECK_CLOSE(s.value(q), f(q), 1e-12);
        CHECK_CLOSE(s.deriv(q), f1(q), 1e-11);
        CHECK_CLOSE(s.deriv2(q), f2(q), 1e-10);
    }
    PASS_NOTE("spline cubic reproduction");
}

static void test_spline_convergence() {
    // Fourth-order convergence on a smooth function.
    auto err_for = [](int npts) {
        std::vector<double> xs, ys;
        for (int i = 0; i < npts; ++i) {
            double x = double(i) / (npts - 1);
            xs.push_back(x);
            ys.push_back(std::sin(3.0 * x));
        }
        CubicSpline s(xs, ys);
        double e = 0.0;
        for (int i = 0; i <= 1000; ++i) {
            double q = double(i) / 1000.0;
            e = std::max(e, std::fabs(s.value(q) - std::sin(3.0 * q)));
        }
        return e;
    };
    double e1 = err_for(21), e2 = err_for(41);
    CHECK(e1 < 2e-5);
    CHECK(e2 < e1 / 10.0);  // roughly h^4
    PASS_NOTE("spline convergence order");
}

static void test_grid_interp() {
    // 2-axis interpolant on a bicubic polynomial: exact values and derivatives.
    auto f = [](double x, double y) { return x * x * x - 2.0 * x * y + y * y + 0.3 * x * x * y; };
    auto fx = [](double x, double y) { return 3.0 * x * x - 2.0 * y + 0.6 * x * y; };
    auto fyy = [](double, double) { return 2.0; };
    auto fxy = [](double x, double) { return -2.0 + 0.6 * x; };
    std::vector<double> ax, ay;
    for (int i = 0; i <= 10; ++i) ax.push_back(-1.0 + 0.2 * i);
    for (int j = 0; j <= 8; ++j) ay.push_back(0.5 + 0.25 * j);
    std::vector<double> vals;
    for (double x : ax)
        for (double y : ay) vals.push_back(f(x, y));
    GridInterp gi({ax, ay}, vals);
    Vec q(2);
    q << 0.37, 1.23;
    CHECK_CLOSE(gi.value(q), f(q(0), q(1)), 1e-12);
    CHECK_CLOSE(gi.deriv(q, 0), fx(q(0), q(1)), 1e-11);
    CHECK_CLOSE(gi.deriv2(q, 1, 1), fyy(q(0), q(1)), 1e-10);
    CHECK_CLOSE(gi.deriv2(q, 0, 1), fxy(q(0), q(1)), 1e-10);
    // Slight extrapolation stays on the edge polynomial.
    q << -1.04, 2.52;
    CHECK_CLOSE(gi.value(q), f(q(0), q(1)), 1e-9);
    PASS_NOTE("grid interpolant");
}

static void test_grid_interp_3d() {
    auto f = [](double x, double y, double z) { return x * y * z + x * x - z * z * y; };
    std::vector<double> ax, ay, az;
    for (int i = 0; i <= 6; ++i) ax.push_back(i * 0.5);
    for (int i = 0; i <= 5; ++i) ay.push_back(-1.0 + i * 0.4);
    for (int i = 0; i <= 7; ++i) az.push_back(i * 0.3);
    std::vector<double> vals;
    for (double x : ax)
        for (double y : ay)
            for (double z : az) vals.push_back(f(x, y, z));
    GridInterp gi({ax, ay, az}, vals);
    Vec q(3);
    q << 1.27, 0.33, 1.91;
    CHECK_CLOSE(gi.value(q), f(q(0), q(1), q(2)), 1e-11);
    CHECK_CLOSE(gi.deriv(q, 2), q(0) * q(1) - 2.0 * q(2) * q(1), 1e-10);
    CHECK_CLOSE(gi.deriv2(q, 0, 0), 2.0, 1e-9);
    PASS_NOTE("grid interpolant 3d");
}

int main() {
    test_ode_exponential();
    test_ode_oscillator();
    test_ode_observer_halt();
    test_ode_sampled();
    test_spline_cubic_exact();
    test_spline_convergence();
    test_grid_interp();
    test_grid_interp_3d();
    std::printf("test_core: all checks passed\n");
    return 0;
}
