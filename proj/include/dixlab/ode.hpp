#pragma once
//
// Embedded Dormand-Prince 5(4) integrator with adaptive step control.
//
// Everything integrated in this project is smooth and non-stiff (geodesic
// flows, parallel transport, Jacobi/Riccati systems), so a single explicit
// pair with PI-style step adaptation covers all uses.  Backward integration
// (t1 < t0) is supported; several wavefront solves run from the source point
// back to the measurement surface.

#include "dixlab/common.hpp"

#include <functional>

namespace dixlab {

struct OdeOptions {
    double rtol = 1e-10;
    double atol = 1e-12;
    double h_init = 0.0;   // 0 = choose from the first RHS evaluation
    double h_min = 0.0;    // 0 = 16*eps*|span|; underflow below this aborts
    double h_max = 0.0;    // 0 = full span
    long max_steps = 4000000;
    // When positive, a step the controller would shrink below h_min is taken
    // at h_min and accepted despite its error estimate, up to this many times
    // per call.  Lets the integrator cross isolated rough spots in tabulated
    // right-hand sides; a budget overrun still aborts with step_underflow.
    int h_min_forced = 0;
};

enum class StepVerdict { proceed, halt };

using OdeRhs = std::function<void(double t, const Vec& y, Vec& dydt)>;

// Called after every accepted step.  Returning halt stops the integration
// with result.halted set; the state at the halt point is preserved.
using StepObserver = std::function<StepVerdict(double t, const Vec& y, double h_used)>;

struct OdeResult {
    bool completed = false;       // reached the requested endpoint
    bool halted = false;          // observer asked to stop
    bool step_underflow = false;  // |h| fell below h_min
    double t = 0.0;
    Vec y;
    double h_last = 0.0;          // last accepted step (signed)
    double h_next = 0.0;          // controller proposal for a continuation
    long n_accepted = 0;
    long n_rejected = 0;
};

OdeResult integrate_adaptive(const OdeRhs& rhs, double t0, double t1, Vec y0,
                             const OdeOptions& opts = {},
                             const StepObserver& observer = {});

// Integrates from t0 through a monotone list of sample points, landing on each
// exactly, and hands (index, t, y) to the sink.  Throws NumericsError on step
// underflow.  The sample list may start at t0 itself.
void integrate_sampled(const OdeRhs& rhs, double t0, const std::vector<double>& tsample,
                       Vec y0, const OdeOptions& opts,
                       const std::function<void(int idx, double t, const Vec& y)>& sink);

}  // namespace dixlab
