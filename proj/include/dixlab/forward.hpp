#pragma once
//
// Forward modeling: geodesic + parallel frame + Jacobi integration, chart
// construction (fan charts and externally parametrized boundaries), and
// synthesis of wavefront shape-operator samples with t-derivatives.
//
// A chart is labeled by a source point y and a radius t0.  The boundary
// surface Sigma is the set of points at g-distance t0 from y; chart geodesics
// run from Sigma back toward y, parametrized by arclength r in [0, t0] with
// r = 0 on Sigma.  The shape operator s(r, t) describes, in the parallel
// frame of that geodesic, the wavefront of the sphere of radius t - r
// centered at gamma(t).

#include "dixlab/common.hpp"
#include "dixlab/field.hpp"
#include "dixlab/geometry.hpp"
#include "dixlab/ode.hpp"
#include "dixlab/spline.hpp"

#include <optional>

namespace dixlab {

struct GeodesicOptions {
    OdeOptions ode;                 // rtol 1e-10 default
    int nsamples = 401;
    bool with_jacobi = true;
    bool find_conjugate = false;
    std::optional<Mat> frame0;      // default: g-orthonormal completion of the tangent
    std::optional<Mat> jacobi0;     // default: 0
    std::optional<Mat> djacobi0;    // default: identity
};

struct GeodesicRecord {
    int dim = 0;
    std::vector<double> r;            // sample radii, r[0] = 0
    std::vector<Vec> x;               // positions
    std::vector<Mat> frame;           // parallel frame, last column = velocity
    std::vector<Mat> curv;            // transverse directional curvature block
    std::vector<Mat> jacobi;          // transverse Jacobi matrix
    std::vector<Mat> djacobi;         // its r-derivative
    std::vector<double> det_jacobi;
    std::vector<double> speed_err;    // | |gdot|_g - 1 | per sample
    std::vector<double> conjugate_radii;

    double r_back() const { return r.empty() ? 0.0 : r.back(); }
};

// g-orthonormal frame completion: columns orthogonal in g with the given
// g-unit tangent last.  v0 is the wave speed at the base point.
Mat complete_gframe(double v0, const Vec& tangent);

// Integrates the geodesic from x0 with initial direction eta0 (normalized to
// g-unit internally) up to radius r_max.
GeodesicRecord trace_geodesic(const WaveSpeedField& field, const Vec& x0, const Vec& eta0,
                              double r_max, const GeodesicOptions& opts = {});

// Boundary data of one chart geodesic at r = 0.
struct BoundaryNode {
    Vec xhat;        // transverse chart label, size n-1
    Vec point;       // Cartesian position on Sigma
    Vec inward;      // gamma'(0), g-unit, pointing toward the source point
    Mat frame;       // F(xhat, 0): columns 1..n-1 = coordinate vectors of the
                     // Sigma parametrization, column n = inward
    double v0 = 0.0;     // wave speed at point (known on the measurement side)
    Vec grad_v0;         // its gradient (known on the measurement side)
    double sigma = 0.0;  // log(v0^n / |det frame|)
};

struct ChartGeometry {
    int dim = 0;
    double t0 = 0.0;
    std::vector<std::vector<double>> axes;  // transverse grid, 1 or 2 axes
    std::vector<BoundaryNode> nodes;        // row-major, last axis fastest
    Vec center;                             // source point when known (fan charts)

    long node_count() const { return static_cast<long>(nodes.size()); }
    long node_index(int i, int j) const {
        return axes.size() == 1 ? i : static_cast<long>(i) * axes[1].size() + j;
    }
    // Node spacing of the first axis (used for default smoothing lengths).
    double axis_step(int a) const;
};

// Builds a chart by shooting a fan of geodesics from the source point.  The
// source is found by tracing distance t0 into the medium from surface_point
// along surface_dir.  xhat spans direction offsets: xi(xhat) is the g-unit
// combination of the return direction and an orthonormal transverse basis at
// the source, so the chart is exactly a normal-coordinate fan.  counts are
// per-axis grid sizes (odd keeps the central ray on-grid).
ChartGeometry fan_chart(const WaveSpeedField& field, const Vec& surface_point,
                        const Vec& surface_dir, double t0, double halfwidth,
                        const std::vector<int>& counts, const GeodesicOptions& opts = {});

// One shape-operator sample: s and its first three t-derivatives, transverse
// (n-1)x(n-1) blocks in the parallel frame.
struct ShapeSample {
    double t = 0.0;
    Mat s, ds, d2s, d3s;
    bool valid = false;
};

struct SampleSet {
    ChartGeometry geom;
    std::vector<double> tgrid;
    std::vector<std::vector<ShapeSample>> samples;  // [node][tgrid index]

    int t_index(double t, double tol = 1e-9) const;  // -1 if absent
};

struct SynthOptions {
    OdeOptions ode;
    int nprofile = 601;         // curvature samples along each ray
    double det_tol = 1e-9;      // |det j| (relative) below this marks invalid
    double cond_max = 1e10;     // cond(s) above this marks invalid
    double noise_sigma = 0.0;   // relative noise on s and derivatives
    unsigned long long seed = 0;
    int threads = 1;
};

// Deterministic synthesis of shape samples on tgrid for every chart node.
// tgrid must contain t0 (the inversion anchors its Jacobi propagation there).
SampleSet synthesize_shape_data(const WaveSpeedField& field, const ChartGeometry& geom,
                                const std::vector<double>& tgrid, const SynthOptions& opts = {});

// Per-ray synthesis machinery, exposed for cross-checks that need shape
// operators at interior radii r > 0 rather than on Sigma.
class RaySynthesizer {
public:
    RaySynthesizer(const WaveSpeedField& field, const BoundaryNode& node, double t0,
                   const SynthOptions& opts = {});
    // Shape operator block and t-derivatives of the front centered at
    // gamma(t), evaluated at radius r (r <= t <= t0).
    ShapeSample shape(double r, double t) const;
    const GeodesicRecord& ray() const { return ray_; }
    Mat curv_at(double r) const;

private:
    int nt_;  // n - 1
    SynthOptions opts_;
    GeodesicRecord ray_;
    std::vector<CubicSpline> curv_spl_;  // per transverse component
};

// Shared derivative algebra: given the Jacobi-type solution B = j, A = -dj/dr
// and their first three t-derivatives at a point, produce s = A B^-1 and its
// t-derivatives.  Returns false (sample invalid) when B is near singular or
// cond(s) exceeds cond_max.
struct JacobiTDerivs {
    Mat B, Bt, Btt, Bttt;   // j and t-derivatives
    Mat A, At, Att, Attt;   // -j_r and t-derivatives
};
bool shape_from_jacobi(const JacobiTDerivs& jd, double det_tol, double cond_max,
                       ShapeSample* out);

// Points of the generalized sphere of radius t0 around center (a fan of
// endpoints), mostly for plotting and geometry checks.
std::vector<Vec> sphere_points(const WaveSpeedField& field, const Vec& center, double t0,
                               int count_per_axis, const GeodesicOptions& opts = {});

}  // namespace dixlab
