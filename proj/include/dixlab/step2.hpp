#pragma once
//
// Step 2 of the inversion: carry the chart reconstruction back to Cartesian
// coordinates and recover the wave speed along every chart geodesic.
//
// For n >= 3 the chart output closes into one ODE system per geodesic.  The
// state holds the position, the transverse Jacobi matrix with its
// r-derivative, the parallel frame in Cartesian components, the frame's
// derivatives along all chart directions (the radial slice included: its
// transport expression alone is circular, the trace identity
// tr(F^-1 dF/dr) = n u.gdot holds for any candidate gradient, so the radial
// derivative must be carried as state seeded from the boundary), and log v.
// At each state, grad log v comes out of the determinant relation
// n f = sigma(xhat) + log|det F| differentiated along the chart, and
// hess log v out of the chart Ricci curvature; both feed the transport of
// the frame derivatives, which closes the system.
//
// The system degenerates at radii conjugate to the chart label t0 (the
// Jacobi matrix loses rank there, and every chart focuses at r = t0).  A
// companion chart with a different label covers past them: its geodesics are
// pushed through the degenerate zone using the gradient of the already
// reconstructed region, then re-seeded and integrated on its own clear
// window.
//
// In two dimensions the curvature determines only the trace of the Hessian,
// so log v is first continued from the boundary Cauchy data through the
// scalar-curvature equation on a shallow strip (regularized least squares,
// reported as unstable when the residual target fails) and a reduced ODE
// system places the strip in Cartesian coordinates.

#include "dixlab/common.hpp"
#include "dixlab/forward.hpp"
#include "dixlab/ode.hpp"
#include "dixlab/spline.hpp"
#include "dixlab/step1.hpp"

namespace dixlab {

// Ricci tensor of the chart metric blockdiag(ghat, 1) in chart coordinates
// (transverse axes first, radial last), tabulated on the chart grid with
// second-order finite differences (one-sided at the grid edges) and read
// back through the local interpolant.
class ChartRicci {
public:
    ChartRicci() = default;
    explicit ChartRicci(const ChartField& chart);

    Mat at(const Vec& xhat, double r) const;       // full n x n, chart components
    double scal(const Vec& xhat, double r) const;  // ghat^{pq} Ric_pq

private:
    void eval(const Vec& q, Mat* ric, Mat* ginv) const;

    int n_ = 0;
    std::vector<GridInterp> gh_;  // upper triangle of ghat over (xhat axes, r)
};

struct Step2Options {
    OdeOptions ode;
    double cond_max = 1e12;  // halt a ray when cond(j) or cond(F) passes this
    int threads = 1;
};

// State of one chart geodesic at radius r (n >= 3 closed system).
struct Step2State {
    Vec gamma;                // position, n
    Mat jacobi, djacobi;      // transverse (n-1) x (n-1)
    Mat frame;                // parallel frame, n x n, last column = velocity
    std::vector<Mat> dframe;  // d frame / d chart coordinate, radial slice last
    double f = 0.0;           // log v carried alongside (drift diagnostic)
};

// Derivative of the state plus the pointwise quantities recovered on the way.
struct Step2Derivs {
    Step2State dot;
    Vec grad_f;   // recovered grad log v at gamma
    Mat hess_f;   // recovered hess log v at gamma
    Mat ricci;    // Cartesian Ricci tensor at gamma
};

struct Step2Result;

// Immutable per-chart evaluation context: curvature splines per node, the
// boundary seeds with their transverse-grid derivatives, and the chart Ricci
// tables.  Construction is the expensive part; rhs evaluation is cheap.
class ChartContext {
public:
    explicit ChartContext(const ChartField& chart);

    int dim() const { return n_; }
    double t0() const { return t0_; }
    long node_count() const { return static_cast<long>(xhat_.size()); }
    const std::vector<double>& rgrid() const { return rgrid_; }
    const Vec& node_xhat(long k) const { return xhat_[k]; }

    // Boundary state at r = 0 assembled from the measurement-side data.
    Step2State boundary_state(long node) const;

    // Closed-system derivative at (node, r); throws NumericsError when the
    // state sits too close to a conjugate point (cond above cond_max).
    Step2Derivs rhs(long node, double r, const Step2State& s, double cond_max = 1e12) const;

    // Context for a run resumed in a changed parallel frame: frame_change[k]
    // is the transverse column map old -> new at node k.  Curvature splines
    // are conjugated accordingly and the boundary sigma derivatives drop out
    // (the resumed frames are orthonormal in the recovered metric).
    ChartContext resumed(const std::vector<Mat>& frame_change) const;

    Mat curv_at(long node, double r) const;  // transverse curvature spline value

private:
    friend Step2Result step2_integrate_stepping(const ChartField&, double, const Step2Options&);
    ChartContext() = default;

    int n_ = 0;
    double t0_ = 0.0;
    std::vector<std::vector<double>> axes_;
    std::vector<double> rgrid_;
    std::vector<Vec> xhat_;
    std::vector<Vec> point_;
    std::vector<Mat> frame0_;
    std::vector<double> v0_;
    std::vector<Vec> u0_;
    std::vector<double> sigma_;
    std::vector<Mat> st0_;
    std::vector<std::vector<Mat>> curv_;     // [node][ir] raw values
    std::vector<std::vector<CubicSpline>> curv_spl_;  // [node][component]
    std::vector<Vec> dsigma_;                // [node], size n-1
    std::vector<std::vector<Mat>> dframe0_;  // [node][transverse axis]
    ChartRicci ricci_;

    long grid_index(int i, int j) const {
        return axes_.size() == 1 ? i : static_cast<long>(i) * axes_[1].size() + j;
    }
    void build_splines();
    friend class Step2Runner;
};

// One reconstructed chart geodesic, sampled on the chart r grid.
struct RayReconstruction {
    std::vector<double> r;
    std::vector<Vec> gamma;
    std::vector<double> v;      // determinant route: v0 |det F(r)/det F(0)|^(1/n)
    std::vector<double> f_ode;  // independently integrated log v
    std::vector<Mat> frame;
    std::vector<Mat> jacobi, djacobi;
    std::vector<Vec> grad_f;
    bool hit_conjugate = false;
    double reach = 0.0;
    double drift = 0.0;  // max |f_ode - log v_det|, the internal consistency check
};

struct Step2Result {
    int dim = 0;
    double t0 = 0.0;
    double r_begin = 0.0;
    std::vector<std::vector<double>> axes;
    std::vector<Vec> xhat;                // per node
    std::vector<RayReconstruction> rays;  // node order of the chart
    double cauchy_lambda = 0.0;           // 2D route diagnostics, else zero
    double cauchy_residual = 0.0;

    // Smallest reach over the rays (the rectangular part of the result).
    double common_reach() const;
    double max_drift() const;
};

// Integrates the closed system from the boundary on every chart node
// (n >= 3).  Rays stop early at conjugate points; nothing else truncates.
Step2Result step2_integrate(const ChartField& chart, const Step2Options& opts = {});

// Reconstruction read back as a field: chart coordinates located by Newton
// iteration on the tabulated positions, then log v and its gradient from the
// tables.  Queries keep a running coordinate hint to stay warm along a ray.
class ReconstructedField {
public:
    explicit ReconstructedField(const Step2Result& run);

    // q is the chart-coordinate hint on entry (empty = table center) and the
    // located coordinates on exit.  False when x falls off the table.
    bool eval(const Vec& x, Vec* q, double* f, Vec* u) const;

    double r_lo() const { return axes_.back().front(); }
    double r_hi() const { return axes_.back().back(); }

private:
    int n_ = 0;
    std::vector<std::vector<double>> axes_;  // transverse axes + r
    std::vector<GridInterp> pos_;
    std::vector<GridInterp> jac_;  // full chart Jacobian, column-major
    GridInterp fval_;
    std::vector<GridInterp> grad_;
};

struct CoverOptions {
    Step2Options step2;
    double margin_steps = 3.0;   // conjugate exclusion half-width, in r steps
    double seed_frac = 0.1;      // re-seed offset into a clear window
    double overlap_steps = 5.0;  // minimum overlap kept for agreement checks
    int max_runs = 16;
};

struct CoverRun {
    int chart = 0;  // index into the charts argument
    double t0 = 0.0;
    Step2Result result;
    double overlap_max_rel = 0.0;  // v disagreement against earlier runs
};

struct CoverResult {
    double r_max = 0.0;
    std::vector<CoverRun> runs;
    double overlap_worst = 0.0;
};

// Covers [0, r_max] past conjugate points by alternating between charts of
// the same central geodesic with different labels t0.  Charts must not share
// conjugate radii; each resumed run is seeded inside the region the earlier
// runs reconstructed.  Throws UsageError for inconsistent charts and
// NumericsError when no chart can continue (empty overlap).
CoverResult step2_conjugate_cover(const std::vector<const ChartField*>& charts, double r_max,
                                  const CoverOptions& opts = {});

// ---- two-dimensional route ----

struct CauchyOptions {
    double depth_frac = 0.3;      // continued strip depth, fraction of t0
    std::vector<double> lambdas;  // tested descending; default 1e-2 .. 1e-12
    double residual_tol = 1e-4;   // rms residual of the curvature equation
};

struct CauchySolution {
    std::vector<double> rsub;            // strip radii (prefix of the chart grid)
    std::vector<std::vector<double>> f;  // [node][ir]
    double lambda = 0.0;
    double residual_rms = 0.0;
};

// Continues log v from the r = 0 Cauchy data (values and radial derivative
// per node) into the strip using the scalar-curvature equation of the chart
// metric, discretized as a regularized least-squares problem.  The data rows
// are eliminated exactly; lambda weighs a Hessian penalty and is chosen as
// the largest tested value whose equation residual meets residual_tol.
// Throws InstabilityError when no tested lambda reaches the target.
CauchySolution solve_curvature_cauchy(const ChartField& chart, const std::vector<double>& f_sigma,
                                      const std::vector<double>& df_sigma,
                                      const CauchyOptions& opts = {});

// n = 2 reconstruction: Cauchy continuation for log v on the strip, then the
// reduced per-ray system (no frame derivatives in the state; the gradient is
// read from the continued strip) places the result in Cartesian coordinates.
// The Cauchy data defaults to the chart's boundary nodes.
Step2Result step2_2d(const ChartField& chart, const CauchyOptions& copts = {},
                     const Step2Options& opts = {});
Step2Result step2_2d(const ChartField& chart, const std::vector<double>& f_sigma,
                     const std::vector<double>& df_sigma, const CauchyOptions& copts = {},
                     const Step2Options& opts = {});

// Low-order cross-check of the closed system: forward-Euler stepping that
// re-estimates the chart derivatives of log v across the node grid at every
// step instead of carrying frame derivatives as state.  step <= 0 uses the
// chart r spacing.
Step2Result step2_integrate_stepping(const ChartField& chart, double step = 0.0,
                                     const Step2Options& opts = {});

}  // namespace dixlab
