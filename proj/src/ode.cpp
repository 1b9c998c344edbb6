#include "dixlab/ode.hpp"

#include <algorithm>
#include <limits>

namespace dixlab {

namespace {

// Dormand-Prince coefficients.  b5 is the FSAL 5th-order row; e = b5 - b4
// gives the embedded error weights directly.
constexpr double c2 = 1.0 / 5, c3 = 3.0 / 10, c4 = 4.0 / 5, c5 = 8.0 / 9;

constexpr double a21 = 1.0 / 5;
constexpr double a31 = 3.0 / 40, a32 = 9.0 / 40;
constexpr double a41 = 44.0 / 45, a42 = -56.0 / 15, a43 = 32.0 / 9;
constexpr double a51 = 19372.0 / 6561, a52 = -25360.0 / 2187, a53 = 64448.0 / 6561,
                 a54 = -212.0 / 729;
constexpr double a61 = 9017.0 / 3168, a62 = -355.0 / 33, a63 = 46732.0 / 5247,
                 a64 = 49.0 / 176, a65 = -5103.0 / 18656;
constexpr double b1 = 35.0 / 384, b3 = 500.0 / 1113, b4 = 125.0 / 192,
                 b5 = -2187.0 / 6784, b6 = 11.0 / 84;
constexpr double e1 = b1 - 5179.0 / 57600, e3 = b3 - 7571.0 / 16695,
                 e4 = b4 - 393.0 / 640, e5 = b5 + 92097.0 / 339200,
                 e6 = b6 - 187.0 / 2100, e7 = -1.0 / 40;

}  // namespace

OdeResult integrate_adaptive(const OdeRhs& rhs, double t0, double t1, Vec y0,
                             const OdeOptions& opts, const StepObserver& observer) {
    OdeResult res;
    res.t = t0;
    res.y = std::move(y0);
    const double span = t1 - t0;
    if (span == 0.0) {
        res.completed = true;
        return res;
    }
    const double dir = span > 0 ? 1.0 : -1.0;
    const double hmax = opts.h_max > 0 ? opts.h_max : std::abs(span);
    const double hmin = opts.h_min > 0
                            ? opts.h_min
                            : 16.0 * std::numeric_limits<double>::epsilon() * std::abs(span);

    const int dim = static_cast<int>(res.y.size());
    Vec k1(dim), k2(dim), k3(dim), k4(dim), k5(dim), k6(dim), k7(dim), ytmp(dim), ynew(dim);

    rhs(res.t, res.y, k1);

    double h;
    if (opts.h_init > 0) {
        h = std::min(opts.h_init, hmax);
    } else {
        // Crude initial step from the RHS scale; the controller fixes it fast.
        double ynorm = res.y.norm() + opts.atol;
        double fnorm = k1.norm() + 1e-30;
        h = std::min(hmax, std::max(1e-6 * std::abs(span), 1e-2 * ynorm / fnorm));
    }
    h *= dir;

    bool just_rejected = false;
    int forced = 0;
    for (long step = 0; step < opts.max_steps; ++step) {
        double remaining = t1 - res.t;
        if (remaining * dir <= 0.0) {
            res.t = t1;
            res.completed = true;
            res.h_next = h;
            return res;
        }
        // Snap to the endpoint when the leftover is below the minimum step;
        // advancing by Euler over < hmin is beneath the error floor.
        if (std::abs(remaining) < hmin) {
            res.y += remaining * k1;
            res.t = t1;
            res.completed = true;
            res.h_next = h;
            return res;
        }
        double h_try = h;
        if ((res.t + h_try - t1) * dir > 0.0) h_try = remaining;
        bool forced_step = false;
        if (std::abs(h_try) < hmin) {
            if (opts.h_min_forced > 0 && forced < opts.h_min_forced) {
                h_try = dir * hmin;
                forced_step = true;
            } else {
                res.step_underflow = true;
                res.h_next = h;
                return res;
            }
        }

        ytmp = res.y + h_try * (a21 * k1);
        rhs(res.t + c2 * h_try, ytmp, k2);
        ytmp = res.y + h_try * (a31 * k1 + a32 * k2);
        rhs(res.t + c3 * h_try, ytmp, k3);
        ytmp = res.y + h_try * (a41 * k1 + a42 * k2 + a43 * k3);
        rhs(res.t + c4 * h_try, ytmp, k4);
        ytmp = res.y + h_try * (a51 * k1 + a52 * k2 + a53 * k3 + a54 * k4);
        rhs(res.t + c5 * h_try, ytmp, k5);
        ytmp = res.y + h_try * (a61 * k1 + a62 * k2 + a63 * k3 + a64 * k4 + a65 * k5);
        rhs(res.t + h_try, ytmp, k6);
        ynew = res.y + h_try * (b1 * k1 + b3 * k3 + b4 * k4 + b5 * k5 + b6 * k6);
        rhs(res.t + h_try, ynew, k7);

        double errsq = 0.0;
        for (int i = 0; i < dim; ++i) {
            double err = h_try * (e1 * k1(i) + e3 * k3(i) + e4 * k4(i) + e5 * k5(i) +
                                  e6 * k6(i) + e7 * k7(i));
            double sc = opts.atol + opts.rtol * std::max(std::abs(res.y(i)), std::abs(ynew(i)));
            errsq += sqr(err / sc);
        }
        double errnorm = std::sqrt(errsq / dim);
        if (!std::isfinite(errnorm)) errnorm = 1e10;

        if (errnorm <= 1.0 || forced_step) {
            if (errnorm > 1.0) ++forced;
            res.t += h_try;
            res.y.swap(ynew);
            k1.swap(k7);  // FSAL
            res.h_last = h_try;
            ++res.n_accepted;
            double fac = 0.9 * std::pow(std::max(errnorm, 1e-10), -0.2);
            fac = std::min(fac, just_rejected ? 1.0 : 5.0);
            just_rejected = false;
            h = h_try * std::max(fac, 0.2);
            if (std::abs(h) > hmax) h = dir * hmax;
            if (observer && observer(res.t, res.y, h_try) == StepVerdict::halt) {
                res.halted = true;
                res.h_next = h;
                return res;
            }
        } else {
            ++res.n_rejected;
            just_rejected = true;
            double fac = std::max(0.9 * std::pow(errnorm, -0.2), 0.1);
            h = h_try * fac;
        }
    }
    throw NumericsError("integrate_adaptive: max_steps exceeded");
}

void integrate_sampled(const OdeRhs& rhs, double t0, const std::vector<double>& tsample,
                       Vec y0, const OdeOptions& opts,
                       const std::function<void(int idx, double t, const Vec& y)>& sink) {
    double t = t0;
    Vec y = std::move(y0);
    OdeOptions seg = opts;
    for (size_t i = 0; i < tsample.size(); ++i) {
        double tt = tsample[i];
        if (tt != t) {
            OdeResult r = integrate_adaptive(rhs, t, tt, std::move(y), seg);
            if (!r.completed)
                throw NumericsError("integrate_sampled: step underflow at t=" + std::to_string(r.t));
            t = r.t;
            y = std::move(r.y);
            // Carry the controller's proposal, not the endpoint-clamped step.
            if (r.h_next != 0.0) seg.h_init = std::abs(r.h_next);
        }
        sink(static_cast<int>(i), t, y);
    }
}

}  // namespace dixlab
