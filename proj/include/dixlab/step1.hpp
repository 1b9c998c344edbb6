#pragma once
//
// Step 1 of the inversion: recover the directional curvature profile r(r)
// along each chart geodesic from shape-operator samples taken on Sigma.
//
// The working unknowns are V^m(r, t) = d^m/dt^m s(r, t)^-1 for m = 0..3.
// Their r-evolution closes through the diagonal value V^3(r, r), which equals
// twice the curvature block: integrating the family over a grid of t values
// jointly in r and interpolating the diagonal turns the data at r = 0 into
// the curvature along the ray.  Members of the family blow up in finite r
// (the front centered at gamma(t) focuses somewhere along the ray), so nodes
// are killed individually and the whole family is re-initialized from
// Jacobi-propagated data once the diagonal loses its stencil; the propagation
// only needs the curvature already recovered below the restart radius.

#include "dixlab/common.hpp"
#include "dixlab/forward.hpp"
#include "dixlab/ode.hpp"
#include "dixlab/spline.hpp"

namespace dixlab {

struct Step1Options {
    OdeOptions ode;
    double blowup_norm = 1e8;      // kill a node when ||V3|| passes this
    double step_frac_min = 1e-8;   // minimum step, relative to t0
    double pullback_steps = 10.0;  // restart offset in units of the last step
    double cond_max = 1e10;        // reject re-initialized nodes above this
    double stencil_reach = 2.5;    // diagonal stencil radius, in median dt
    double subdiag_margin = 2.0;   // keep nodes until r > t + margin * dt
    int max_restarts = 8;
};

struct Step1Interval {
    double r_begin = 0.0, r_end = 0.0;
    int nodes_alive = 0;  // at interval start
};

struct Step1Result {
    std::vector<double> rgrid;
    std::vector<Mat> curv;        // recovered blocks, one per rgrid point
    std::vector<char> covered;
    std::vector<Step1Interval> intervals;
    int restarts = 0;

    bool fully_covered() const {
        for (char c : covered)
            if (!c) return false;
        return !covered.empty();
    }
};

// V^0..V^3 at one t node from s and its first three t-derivatives
// (derivatives of the matrix inverse).
void inverse_derivatives(const Mat& s, const Mat& ds, const Mat& d2s, const Mat& d3s,
                         Mat* V0, Mat* V1, Mat* V2, Mat* V3);

// Recovers the curvature profile for one chart node.  data is the node's row
// of shape samples (increasing t, must reach t0); rgrid spans [0, t0].
Step1Result step1_recover_profile(const std::vector<ShapeSample>& data, double t0,
                                  const std::vector<double>& rgrid,
                                  const Step1Options& opts = {});

// Assembled normal-coordinate chart: recovered curvature, the Jacobi matrix
// propagated from the boundary data, and the transverse metric
// ghat = j^T gring j with gring the boundary Gram matrix v0^-2 F^T F.
struct ChartField {
    int dim = 0;
    double t0 = 0.0;
    ChartGeometry geom;
    std::vector<double> rgrid;
    std::vector<std::vector<Mat>> curv;    // [node][ir], (n-1)^2
    std::vector<std::vector<Mat>> jacobi;  // [node][ir]
    std::vector<std::vector<Mat>> ghat;    // [node][ir]
    std::vector<std::vector<double>> conjugate_radii;  // per node, interior zeros of det j
    std::vector<Mat> s_t0;                 // s(xhat, t0; 0, t0) from the data
    std::vector<Step1Result> profiles;

    long node_count() const { return geom.node_count(); }
};

struct AssembleOptions {
    Step1Options step1;
    int threads = 1;
};

// Runs step 1 on every node and propagates the chart Jacobi.  Throws
// NumericsError if any node's profile has gaps.
ChartField assemble_chart(const SampleSet& data, const std::vector<double>& rgrid,
                          const AssembleOptions& opts = {});

}  // namespace dixlab
