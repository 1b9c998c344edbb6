// Tests for the chart-to-Cartesian reconstruction: the pointwise chart Ricci
// evaluator, the closed transport system and its gradient/Hessian chain, flat
// and constant-curvature round trips, conjugate-point truncation, the
// two-chart cover, the planar Cauchy route, and the explicit stepping mode.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <vector>

#include "checks.hpp"
#include "truth_chart.hpp"

#include "dixlab/field.hpp"
#include "dixlab/forward.hpp"
#include "dixlab/geometry.hpp"
#include "dixlab/step1.hpp"
#include "dixlab/step2.hpp"

using namespace dixlab;

namespace {

const double kPi = 3.14159265358979323846;

std::vector<double> linspace(double lo, double hi, int n) {
    std::vector<double> x(n);
    for (int i = 0; i < n; ++i) x[i] = lo + (hi - lo) * i / (n - 1);
    return x;
}

// Direction-sphere metric pulled back to the gnomonic offsets used by fan
// charts.
Mat gnomonic_metric(const Vec& xhat) {
    int m = static_cast<int>(xhat.size());
    double s = 1.0 + xhat.squaredNorm();
    return (s * Mat::Identity(m, m) - xhat * xhat.transpose()) / (s * s);
}

// In a constant-curvature medium the chart Jacobi is an isotropic factor
// times the identity.
double model_jfac(double K, double t0, double r) {
    if (K > 0.0) return std::sin(t0 - r) / std::sin(t0);
    if (K < 0.0) return std::sinh(t0 - r) / std::sinh(t0);
    return (t0 - r) / t0;
}

double model_shape(double K, double t0) {
    if (K > 0.0) return std::cos(t0) / std::sin(t0);
    if (K < 0.0) return std::cosh(t0) / std::sinh(t0);
    return 1.0 / t0;
}

// Chart tables of a curvature-K medium in closed form on top of an existing
// fan geometry.  Closed-form tables keep the finite differencing of the
// transverse metric free of tracer noise, which matters at the tightest
// tolerances below.
void fill_model_tables(ChartField& cf, double K, int nr) {
    int nt = cf.dim - 1;
    double t0 = cf.t0;
    cf.rgrid = linspace(0.0, t0, nr);
    long count = cf.geom.node_count();
    cf.curv.assign(count, {});
    cf.jacobi.assign(count, {});
    cf.ghat.assign(count, {});
    cf.conjugate_radii.assign(count, {});
    cf.s_t0.assign(count, model_shape(K, t0) * Mat::Identity(nt, nt));
    for (long k = 0; k < count; ++k) {
        Mat sg = gnomonic_metric(cf.geom.nodes[k].xhat);
        for (int i = 0; i < nr; ++i) {
            double r = cf.rgrid[i];
            double rho = t0 - r;
            double scale = K > 0.0 ? std::sin(rho) : (K < 0.0 ? std::sinh(rho) : rho);
            cf.curv[k].push_back(K * Mat::Identity(nt, nt));
            cf.jacobi[k].push_back(model_jfac(K, t0, r) * Mat::Identity(nt, nt));
            cf.ghat[k].push_back(scale * scale * sg);
        }
        if (K > 0.0 && t0 > kPi) cf.conjugate_radii[k].push_back(t0 - kPi);
    }
}

// Fan along the unit circle of the stereographic sphere medium, with
// closed-form curvature +1 tables.  The circle is a geodesic with v = 1, so
// chart radius along the central ray equals arclength from (1, 0, 0).
ChartField sphere_model_chart(const WaveSpeedField& field, double t0, double hw, int count,
                              int nr) {
    GeodesicOptions go;
    go.ode.rtol = 1e-12;
    go.ode.atol = 1e-14;
    Vec x0(3), dir(3);
    x0 << 1.0, 0.0, 0.0;
    dir << 0.0, 1.0, 0.0;
    ChartField cf;
    cf.dim = 3;
    cf.t0 = t0;
    cf.geom = fan_chart(field, x0, dir, t0, hw, {count, count}, go);
    fill_model_tables(cf, 1.0, nr);
    return cf;
}

// Cuts the radial tables short of the chart focus, where the transverse
// metric degenerates and amplified table noise throttles the integrator.
void trim_chart(ChartField& cf, double r_cut) {
    size_t m = 0;
    while (m < cf.rgrid.size() && cf.rgrid[m] <= r_cut + 1e-12) ++m;
    cf.rgrid.resize(m);
    for (auto& v : cf.curv) v.resize(m);
    for (auto& v : cf.jacobi) v.resize(m);
    for (auto& v : cf.ghat) v.resize(m);
}

template <typename Fn>
bool throws_usage(Fn&& fn) {
    try {
        fn();
    } catch (const UsageError&) {
        return true;
    }
    return false;
}

// Largest relative gap between the recorded speed and the field evaluated at
// the recorded position, over samples with r <= r_cut.
double field_consistency(const WaveSpeedField& field, const Step2Result& res, double r_cut) {
    double worst = 0.0;
    for (const auto& ray : res.rays)
        for (size_t i = 0; i < ray.r.size(); ++i) {
            if (ray.r[i] > r_cut) break;
            double vt = field.value(ray.gamma[i]);
            worst = std::max(worst, std::fabs(ray.v[i] - vt) / vt);
        }
    return worst;
}

void test_chart_ricci_flat() {
    // Bare chart with closed-form tables: flat medium, transverse metric
    // rho^2 times the gnomonic direction metric.  The chart Ricci must
    // vanish identically.
    for (int dim : {2, 3}) {
        ChartField cf;
        cf.dim = dim;
        cf.t0 = 1.2;
        cf.geom.dim = dim;
        cf.geom.t0 = cf.t0;
        std::vector<double> ax = linspace(-6e-4, 6e-4, 9);
        cf.geom.axes.assign(dim - 1, ax);
        int nt = dim - 1;
        if (nt == 1) {
            for (double a : ax) {
                BoundaryNode nd;
                nd.xhat = Vec::Constant(1, a);
                cf.geom.nodes.push_back(nd);
            }
        } else {
            for (double a : ax)
                for (double b : ax) {
                    BoundaryNode nd;
                    nd.xhat = Vec(2);
                    nd.xhat << a, b;
                    cf.geom.nodes.push_back(nd);
                }
        }
        cf.rgrid = linspace(0.0, cf.t0, 1201);
        long count = cf.geom.node_count();
        long nr = static_cast<long>(cf.rgrid.size());
        cf.ghat.resize(count);
        for (long k = 0; k < count; ++k) {
            Mat sg = gnomonic_metric(cf.geom.nodes[k].xhat);
            for (long i = 0; i < nr; ++i) {
                double rho = cf.t0 - cf.rgrid[i];
                cf.ghat[k].push_back(rho * rho * sg);
            }
        }
        ChartRicci ric(cf);
        for (double rfrac : {0.08, 0.46, 0.79}) {
            double r = rfrac * cf.t0;
            // The interpolation floor steepens as ghat degenerates toward
            // the focus; the deep probe gets a wider band.
            double tol = rfrac > 0.7 ? 1e-5 : 1e-6;
            Vec q0 = Vec::Zero(nt);
            Vec q1 = Vec::Constant(nt, 1.7e-4);
            if (nt == 2) q1(1) = -2.3e-4;
            CHECK(ric.at(q0, r).norm() <= tol);
            CHECK(ric.at(q1, r).norm() <= tol);
            CHECK(std::fabs(ric.scal(q1, r)) <= 1e-4);
        }
    }
    PASS_NOTE("chart Ricci vanishes on flat-medium tables");
}

void test_chart_ricci_curved() {
    // Curvature +1 in three dimensions: Ric = 2 g in chart components and
    // scal = 6.
    {
        double t0 = 0.45 * kPi;
        ChartField cf;
        cf.dim = 3;
        cf.t0 = t0;
        cf.geom.dim = 3;
        cf.geom.t0 = t0;
        std::vector<double> ax = linspace(-6e-4, 6e-4, 9);
        cf.geom.axes = {ax, ax};
        for (double a : ax)
            for (double b : ax) {
                BoundaryNode nd;
                nd.xhat = Vec(2);
                nd.xhat << a, b;
                cf.geom.nodes.push_back(nd);
            }
        cf.rgrid = linspace(0.0, t0, 2001);
        for (long k = 0; k < cf.geom.node_count(); ++k) {
            Mat sg = gnomonic_metric(cf.geom.nodes[k].xhat);
            cf.ghat.emplace_back();
            for (double r : cf.rgrid) {
                double s = std::sin(t0 - r);
                cf.ghat.back().push_back(s * s * sg);
            }
        }
        ChartRicci ric(cf);
        struct Probe {
            double x0, x1, rfrac, tol, stol;
        };
        for (Probe p : {Probe{0.0, 0.0, 0.3, 2e-6, 1e-5}, Probe{2e-4, -1.3e-4, 0.62, 2e-5, 3e-5}}) {
            Vec q(2);
            q << p.x0, p.x1;
            double r = p.rfrac * t0;
            double s = std::sin(t0 - r);
            Mat G = Mat::Identity(3, 3);
            G.topLeftCorner(2, 2) = s * s * gnomonic_metric(q);
            CHECK((ric.at(q, r) - 2.0 * G).norm() <= p.tol);
            CHECK(std::fabs(ric.scal(q, r) - 6.0) <= p.stol);
        }
    }
    // Curvature -1 in two dimensions: Ric = -g, scal = -2.
    {
        double t0 = 1.0;
        ChartField cf;
        cf.dim = 2;
        cf.t0 = t0;
        cf.geom.dim = 2;
        cf.geom.t0 = t0;
        std::vector<double> ax = linspace(-6e-4, 6e-4, 9);
        cf.geom.axes = {ax};
        for (double a : ax) {
            BoundaryNode nd;
            nd.xhat = Vec::Constant(1, a);
            cf.geom.nodes.push_back(nd);
        }
        cf.rgrid = linspace(0.0, t0, 1501);
        for (long k = 0; k < cf.geom.node_count(); ++k) {
            Mat sg = gnomonic_metric(cf.geom.nodes[k].xhat);
            cf.ghat.emplace_back();
            for (double r : cf.rgrid) {
                double s = std::sinh(t0 - r);
                cf.ghat.back().push_back(s * s * sg);
            }
        }
        ChartRicci ric(cf);
        Vec q = Vec::Constant(1, 1.4e-4);
        for (double rfrac : {0.2, 0.55}) {
            double r = rfrac * t0;
            double s = std::sinh(t0 - r);
            Mat G = Mat::Identity(2, 2);
            G(0, 0) = s * s * gnomonic_metric(q)(0, 0);
            CHECK((ric.at(q, r) + G).norm() <= 2e-6);
            CHECK(std::fabs(ric.scal(q, r) + 2.0) <= 1e-5);
        }
    }
    PASS_NOTE("chart Ricci matches both constant-curvature models");
}

void test_rhs_gradient_and_hessian() {
    FieldPtr field = make_field("spherical", 3, {});
    double t0 = 0.45 * kPi;
    ChartField cf = sphere_model_chart(*field, t0, 9e-4, 7, 3001);
    ChartContext ctx(cf);
    double h = cf.geom.axes[0][1] - cf.geom.axes[0][0];

    struct Probe {
        int i, j;
        double frac;
    };
    for (Probe p : {Probe{3, 3, 0.30}, Probe{2, 4, 0.55}}) {
        long k = cf.geom.node_index(p.i, p.j);
        double rs = p.frac * t0;
        auto ray_state = [&](long node) {
            const BoundaryNode& nd = cf.geom.nodes[node];
            GeodesicOptions go;
            go.ode.rtol = 1e-12;
            go.ode.atol = 1e-14;
            go.nsamples = 2;
            go.frame0 = nd.frame;
            return trace_geodesic(*field, nd.point, nd.inward, rs, go);
        };
        GeodesicRecord rc = ray_state(k);
        Vec gam = rc.x.back();
        Mat F = rc.frame.back();
        double v = field->value(gam);
        Vec u_true = field->grad(gam) / v;

        // Oracle state: traced position and frame, closed-form Jacobi, frame
        // slices from neighboring rays, radial slice from the known gradient.
        Step2State st;
        st.gamma = gam;
        st.frame = F;
        st.jacobi = model_jfac(1.0, t0, rs) * Mat::Identity(2, 2);
        st.djacobi = -std::cos(t0 - rs) / std::sin(t0) * Mat::Identity(2, 2);
        st.f = std::log(v);
        st.dframe.assign(3, Mat());
        st.dframe[0] = (ray_state(cf.geom.node_index(p.i + 1, p.j)).frame.back() -
                        ray_state(cf.geom.node_index(p.i - 1, p.j)).frame.back()) /
                       (2.0 * h);
        st.dframe[1] = (ray_state(cf.geom.node_index(p.i, p.j + 1)).frame.back() -
                        ray_state(cf.geom.node_index(p.i, p.j - 1)).frame.back()) /
                       (2.0 * h);
        st.dframe[2] = transport_term(F, F, u_true);

        Step2Derivs d = ctx.rhs(k, rs, st);

        Mat hess_true = field->hess(gam) / v - u_true * u_true.transpose();
        Mat ric_true = 2.0 / (v * v) * Mat::Identity(3, 3);
        CHECK_MSG((d.grad_f - u_true).norm() <= 1e-7, "grad gap %.3e",
                  (d.grad_f - u_true).norm());
        CHECK_MSG((d.hess_f - hess_true).norm() <= 1e-6, "hess gap %.3e",
                  (d.hess_f - hess_true).norm());
        CHECK_MSG((d.ricci - ric_true).norm() <= 5e-6, "ricci gap %.3e",
                  (d.ricci - ric_true).norm());
        CHECK((d.dot.gamma - F.col(2)).norm() <= 1e-12);
        CHECK(std::fabs(d.dot.f - u_true.dot(F.col(2))) <= 1e-6);
    }
    PASS_NOTE("transport rhs reproduces the gradient and Hessian of log v");
}

void test_usage_guards() {
    FieldPtr f3 = make_field("spherical", 3, {});
    ChartField c3 = sphere_model_chart(*f3, 0.3 * kPi, 1e-3, 3, 12);

    FieldPtr f2 = make_field("euclidean", 2, {{"c", 1.0}});
    Vec x0 = Vec::Zero(2), dir(2);
    dir << 0.0, 1.0;
    ChartGeometry g2 = fan_chart(*f2, x0, dir, 0.5, 1e-3, {5});
    ChartField c2 = traced_chart(*f2, g2, 12);

    CHECK(throws_usage([&] { step2_integrate(c2); }));
    CHECK(throws_usage([&] { step2_2d(c3); }));
    CHECK(throws_usage([&] { step2_conjugate_cover({}, 1.0); }));
    CHECK(throws_usage([&] { step2_conjugate_cover({&c2}, 0.3); }));
    CHECK(throws_usage([&] {
        solve_curvature_cauchy(c2, {0.0, 0.0}, {0.0, 0.0});
    }));
    PASS_NOTE("dimension and size guards reject misuse");
}

void test_flat_chart_reconstruction() {
    FieldPtr field = make_field("euclidean", 3, {{"c", 2.0}});
    Vec x0 = Vec::Zero(3), dir(3);
    dir << 0.0, 0.0, 1.0;
    GeodesicOptions go;
    go.ode.rtol = 1e-12;
    go.ode.atol = 1e-14;
    double t0 = 0.8;
    ChartGeometry geom = fan_chart(*field, x0, dir, t0, 1.5e-3, {5, 5}, go);
    ChartField cf = traced_chart(*field, geom, 401);
    trim_chart(cf, 0.9 * t0);
    double r_top = cf.rgrid.back();

    Step2Options so;
    so.threads = 2;
    Step2Result res = step2_integrate(cf, so);

    double verr = 0.0, vall = 0.0, gerr = 0.0, drift = 0.0;
    for (size_t k = 0; k < res.rays.size(); ++k) {
        const RayReconstruction& ray = res.rays[k];
        const BoundaryNode& nd = cf.geom.nodes[k];
        CHECK(std::fabs(ray.v.front() - nd.v0) <= 1e-12);
        CHECK(ray.reach >= r_top - 1e-12);
        drift = std::max(drift, ray.drift);
        for (size_t i = 0; i < ray.r.size(); ++i) {
            double rel = std::fabs(ray.v[i] - 2.0) / 2.0;
            vall = std::max(vall, rel);
            if (ray.r[i] > 0.85 * t0) continue;
            verr = std::max(verr, rel);
            Vec straight = nd.point + ray.r[i] * nd.inward;
            gerr = std::max(gerr, (ray.gamma[i] - straight).norm());
        }
    }
    std::printf("  [measure] flat: verr %.3e vall %.3e gerr %.3e drift %.3e\n", verr, vall,
                gerr, drift);
    CHECK_MSG(verr <= 1e-5, "flat speed err %.3e", verr);
    CHECK_MSG(vall <= 2e-5, "flat speed err near focus %.3e", vall);
    CHECK_MSG(gerr <= 1e-5, "flat ray position err %.3e", gerr);
    CHECK_MSG(drift <= 1e-9, "determinant drift %.3e", drift);
    PASS_NOTE("constant-speed chart closes back to the flat medium");
}

void test_sphere_chart_reconstruction() {
    FieldPtr field = make_field("spherical", 3, {});
    double t0 = 0.45 * kPi;
    ChartField cf = sphere_model_chart(*field, t0, 1.2e-3, 9, 601);
    trim_chart(cf, 0.97 * t0);

    Step2Options so;
    so.threads = 2;
    Step2Result res = step2_integrate(cf, so);

    long kc = cf.geom.node_index(4, 4);
    double v08 = 0.0, vall = 0.0, drift = 0.0, gerr = 0.0;
    for (size_t k = 0; k < res.rays.size(); ++k) {
        const RayReconstruction& ray = res.rays[k];
        CHECK(ray.reach >= 0.95 * t0);
        drift = std::max(drift, ray.drift);
        for (size_t i = 0; i < ray.r.size(); ++i) {
            double vt = field->value(ray.gamma[i]);
            double rel = std::fabs(ray.v[i] - vt) / vt;
            vall = std::max(vall, rel);
            if (ray.r[i] > 0.8 * t0) continue;
            v08 = std::max(v08, rel);
            if (static_cast<long>(k) == kc) {
                Vec truth(3);
                truth << std::cos(ray.r[i]), std::sin(ray.r[i]), 0.0;
                gerr = std::max(gerr, (ray.gamma[i] - truth).norm());
            }
        }
    }
    std::printf("  [measure] sphere: v08 %.3e vall %.3e gerr %.3e drift %.3e reach %.4f/%.4f\n",
                v08, vall, gerr, drift, res.common_reach(), t0);
    CHECK_MSG(v08 <= 3e-6, "sphere speed err %.3e", v08);
    CHECK_MSG(vall <= 1e-4, "sphere speed err near focus %.3e", vall);
    CHECK_MSG(drift <= 1e-8, "determinant drift %.3e", drift);
    CHECK_MSG(gerr <= 2e-5, "central ray position err %.3e", gerr);
    CHECK(res.common_reach() >= 0.95 * t0);

    // The tabulated reconstruction inverts back to chart coordinates.
    ReconstructedField rec(res);
    CHECK(rec.r_lo() <= 1e-12);
    CHECK(rec.r_hi() >= 0.99 * res.common_reach());
    long ko = cf.geom.node_index(2, 6);
    const RayReconstruction& ray = res.rays[ko];
    size_t mid = ray.r.size() / 3;
    double fv;
    Vec uv;
    CHECK(rec.eval(ray.gamma[mid], nullptr, &fv, &uv));
    CHECK(std::fabs(fv - std::log(ray.v[mid])) <= 1e-8);
    CHECK((uv - ray.grad_f[mid]).norm() <= 1e-8);
    // Off-lattice point: halfway between two adjacent rays.
    long kn = cf.geom.node_index(3, 6);
    Vec xq = 0.5 * (ray.gamma[mid] + res.rays[kn].gamma[mid]);
    CHECK(rec.eval(xq, nullptr, &fv, nullptr));
    CHECK(std::fabs(fv - std::log(field->value(xq))) <= 1e-5);
    // Far outside the fan tube.
    Vec far = ray.gamma[mid];
    far(2) += 0.5;
    CHECK(!rec.eval(far, nullptr, &fv, nullptr));
    PASS_NOTE("curvature +1 chart closes back to the sphere medium");
}

void test_conjugate_truncation() {
    FieldPtr field = make_field("spherical", 3, {});
    double t0 = 1.3 * kPi;
    ChartField cf = sphere_model_chart(*field, t0, 1.2e-3, 7, 651);
    double dr = cf.rgrid[1] - cf.rgrid[0];
    double rconj = t0 - kPi;

    Step2Options so;
    so.threads = 2;
    Step2Result res = step2_integrate(cf, so);
    double verr = field_consistency(*field, res, 0.25 * kPi);
    std::printf("  [measure] conjugate: reach %.4f (rconj %.4f, dr %.2e) verr %.3e\n",
                res.common_reach(), rconj, dr, verr);
    for (const auto& ray : res.rays) {
        CHECK(ray.hit_conjugate);
        CHECK(ray.reach < rconj);
        CHECK(ray.reach > rconj - 2.1 * dr);
        CHECK(ray.r.back() == ray.reach);
    }
    CHECK(res.common_reach() < rconj);
    CHECK_MSG(verr <= 3e-4, "pre-conjugate speed err %.3e", verr);
    PASS_NOTE("isotropic focusing truncates every geodesic before the caustic");
}

void test_gausslens_roundtrip() {
    FieldPtr field = make_field("gausslens", 3,
                                {{"amp", 0.3},
                                 {"width", 1.0},
                                 {"cx", 0.15},
                                 {"cy", -0.1},
                                 {"cz", 0.6}});
    Vec x0(3), dir(3);
    x0 << 0.15, -0.1, 0.0;
    dir << 0.0, 0.0, 1.0;
    double t0 = 1.2;
    ChartGeometry geom = fan_chart(*field, x0, dir, t0, 0.02, {7, 7});

    SynthOptions syn;
    syn.threads = 2;
    SampleSet data = synthesize_shape_data(*field, geom, linspace(0.01, t0, 240), syn);

    AssembleOptions ao;
    ao.threads = 2;
    ChartField cf = assemble_chart(data, linspace(0.0, t0, 321), ao);
    double dr = cf.rgrid[1] - cf.rgrid[0];

    Step2Options so;
    so.threads = 2;
    Step2Result res = step2_integrate(cf, so);

    std::vector<double> rels;
    double drift = 0.0, rmin = t0;
    for (const auto& ray : res.rays) {
        rmin = std::min(rmin, ray.reach);
        drift = std::max(drift, ray.drift);
        for (size_t i = 0; i < ray.r.size(); ++i) {
            double vt = field->value(ray.gamma[i]);
            rels.push_back(std::fabs(ray.v[i] - vt) / vt);
        }
    }
    std::printf("  [measure] lens: min reach %.4f of %.4f\n", rmin, t0);
    CHECK(rmin >= 0.9 * t0);
    std::sort(rels.begin(), rels.end());
    double vmax = rels.back();
    double vmed = rels[rels.size() / 2];
    std::printf("  [measure] lens: vmax %.3e vmed %.3e drift %.3e\n", vmax, vmed, drift);
    CHECK_MSG(vmax <= 1e-3, "lens speed err %.3e", vmax);
    CHECK_MSG(vmed <= 1e-4, "lens speed median err %.3e", vmed);
    CHECK_MSG(drift <= 1e-8, "determinant drift %.3e", drift);

    // Central ray placement against a direct trace.
    long kc = cf.geom.node_index(3, 3);
    GeodesicOptions go;
    go.ode.rtol = 1e-12;
    go.ode.atol = 1e-14;
    go.nsamples = 321;
    const BoundaryNode& nd = cf.geom.nodes[kc];
    GeodesicRecord truth = trace_geodesic(*field, nd.point, nd.inward, t0, go);
    const RayReconstruction& ray = res.rays[kc];
    double gerr = 0.0;
    for (size_t i = 0; i < ray.r.size(); ++i) {
        size_t ir = static_cast<size_t>(std::lround(ray.r[i] / dr));
        gerr = std::max(gerr, (ray.gamma[i] - truth.x[ir]).norm());
    }
    CHECK_MSG(gerr <= 3e-4, "central ray position err %.3e", gerr);
    PASS_NOTE("synthesized lens data round-trips through both inversion steps");
}

void test_cover_two_charts() {
    FieldPtr field = make_field("spherical", 3, {});
    ChartField A = sphere_model_chart(*field, 1.6 * kPi, 1.2e-2, 7, 601);
    ChartField B = sphere_model_chart(*field, 1.1 * kPi, 7.0e-3, 7, 451);

    CoverOptions co;
    co.step2.threads = 2;
    co.seed_frac = 0.05;
    double r_max = 1.5 * kPi;
    CoverResult cov = step2_conjugate_cover({&A, &B}, r_max, co);

    CHECK(cov.runs.size() == 3);
    CHECK(cov.runs[0].chart == 0);
    CHECK(cov.runs[1].chart == 1);
    CHECK(cov.runs[2].chart == 0);
    // The opening run is boxed in by the first caustic of the longer chart,
    // well before the requested range; the relay hands over twice.
    double reach1 = cov.runs[0].result.common_reach();
    CHECK(reach1 < 0.6 * kPi);
    CHECK(reach1 > 0.5 * kPi);
    CHECK(cov.runs.back().result.common_reach() >= r_max - 1e-9);

    for (const auto& run : cov.runs) {
        double verr = field_consistency(*field, run.result, r_max);
        std::printf("  [measure] cover run chart %d: verr %.3e drift %.3e reach %.4f overlap %.3e\n",
                    run.chart, verr, run.result.max_drift(), run.result.common_reach(),
                    run.overlap_max_rel);
        CHECK_MSG(verr <= 1e-3, "cover speed err %.3e (chart %d)", verr, run.chart);
        CHECK_MSG(run.result.max_drift() <= 1e-6, "cover drift %.3e", run.result.max_drift());
    }
    CHECK(cov.runs[1].overlap_max_rel > 0.0);
    CHECK_MSG(cov.overlap_worst <= 2e-3, "overlap disagreement %.3e", cov.overlap_worst);
    PASS_NOTE("two-chart relay reconstructs past both caustics");
}

void test_cover_guards() {
    FieldPtr field = make_field("spherical", 3, {});
    ChartField C = sphere_model_chart(*field, 0.45 * kPi, 1.2e-3, 7, 401);

    CoverOptions co;
    co.step2.threads = 2;
    double r_max = 0.35 * kPi;
    CoverResult cov = step2_conjugate_cover({&C}, r_max, co);
    CHECK(cov.runs.size() == 1);
    CHECK(cov.runs[0].chart == 0);
    CHECK(cov.runs[0].result.common_reach() >= r_max - 1e-9);
    CHECK(cov.overlap_worst == 0.0);

    // A caustic-free cover is the plain integration, cut at the range.
    Step2Result direct = step2_integrate(C, co.step2);
    const RayReconstruction& ra = cov.runs[0].result.rays[24];
    const RayReconstruction& rb = direct.rays[24];
    CHECK(ra.r.size() <= rb.r.size());
    double dmax = 0.0;
    for (size_t i = 0; i < ra.r.size(); ++i)
        dmax = std::max(dmax, std::fabs(ra.v[i] - rb.v[i]));
    CHECK(dmax <= 1e-13);

    // Equal radii share every conjugate point.
    ChartField C2 = C;
    CHECK(throws_usage([&] { step2_conjugate_cover({&C, &C2}, r_max, co); }));

    // Companion charts must continue the same central geodesic.  The copy is
    // doctored on purpose; validation fires before any table is touched.
    C2.t0 += 0.05;
    C2.geom.nodes[24].point(0) += 0.1;
    CHECK(throws_usage([&] { step2_conjugate_cover({&C, &C2}, r_max, co); }));
    PASS_NOTE("cover planning reduces and rejects as intended");
}

void test_2d_flat_strip() {
    FieldPtr field = make_field("euclidean", 2, {{"c", 1.5}});
    Vec x0 = Vec::Zero(2), dir(2);
    dir << 0.0, 1.0;
    GeodesicOptions go;
    go.ode.rtol = 1e-12;
    go.ode.atol = 1e-14;
    ChartGeometry geom = fan_chart(*field, x0, dir, 1.0, 4e-3, {9}, go);
    ChartField cf = traced_chart(*field, geom, 501);

    Step2Options so;
    so.threads = 2;
    Step2Result res = step2_2d(cf, CauchyOptions{}, so);

    CHECK(std::fabs(res.cauchy_lambda - 1e-2) <= 1e-15);
    double verr = 0.0, gerr = 0.0, drift = 0.0;
    for (size_t k = 0; k < res.rays.size(); ++k) {
        const RayReconstruction& ray = res.rays[k];
        const BoundaryNode& nd = cf.geom.nodes[k];
        CHECK(ray.reach >= 0.3 - 1e-12);
        drift = std::max(drift, ray.drift);
        for (size_t i = 0; i < ray.r.size(); ++i) {
            verr = std::max(verr, std::fabs(ray.v[i] - 1.5) / 1.5);
            Vec straight = nd.point + ray.r[i] * nd.inward;
            gerr = std::max(gerr, (ray.gamma[i] - straight).norm());
        }
    }
    std::printf("  [measure] 2d flat: verr %.3e gerr %.3e drift %.3e residual %.3e\n", verr,
                gerr, drift, res.cauchy_residual);
    CHECK(res.cauchy_residual <= 1e-5);
    CHECK_MSG(verr <= 1e-5, "flat strip speed err %.3e", verr);
    CHECK_MSG(gerr <= 5e-6, "flat strip ray err %.3e", gerr);
    CHECK_MSG(drift <= 1e-8, "flat strip drift %.3e", drift);
    PASS_NOTE("planar Cauchy route is exact on the flat medium");
}

void test_2d_hyperbolic_strip() {
    FieldPtr field = make_field("hyperbolic2d", 2, {});
    Vec x0(2), dir(2);
    x0 << 0.3, 1.0;
    dir << 0.0, -1.0;
    GeodesicOptions go;
    go.ode.rtol = 1e-12;
    go.ode.atol = 1e-14;
    double t0 = 1.0;
    ChartGeometry geom = fan_chart(*field, x0, dir, t0, 0.04, {21}, go);
    ChartField cf = traced_chart(*field, geom, 601);

    Step2Options so;
    so.threads = 2;
    Step2Result res = step2_2d(cf, CauchyOptions{}, so);

    std::vector<double> rels;
    double drift = 0.0, gerr = 0.0;
    long kc = cf.geom.node_index(10, 0);
    for (size_t k = 0; k < res.rays.size(); ++k) {
        const RayReconstruction& ray = res.rays[k];
        drift = std::max(drift, ray.drift);
        for (size_t i = 0; i < ray.r.size(); ++i) {
            double vt = field->value(ray.gamma[i]);
            rels.push_back(std::fabs(ray.v[i] - vt) / vt);
            if (static_cast<long>(k) == kc) {
                Vec truth(2);
                truth << 0.3, std::exp(-ray.r[i]);
                gerr = std::max(gerr, (ray.gamma[i] - truth).norm());
            }
        }
    }
    std::sort(rels.begin(), rels.end());
    double vmed = rels[rels.size() / 2];
    double vmax = rels.back();
    std::printf("  [measure] hyperbolic: vmed %.3e vmax %.3e drift %.3e gerr %.3e lambda %.1e\n",
                vmed, vmax, drift, gerr, res.cauchy_lambda);
    CHECK_MSG(vmed <= 1e-2, "hyperbolic strip median err %.3e", vmed);
    CHECK_MSG(vmax <= 5e-2, "hyperbolic strip max err %.3e", vmax);
    CHECK_MSG(drift <= 1e-6, "hyperbolic strip drift %.3e", drift);
    CHECK_MSG(gerr <= 5e-3, "vertical ray err %.3e", gerr);

    // An unreachable residual target reports the instability honestly.
    std::vector<double> f0, df0;
    for (const auto& nd : cf.geom.nodes) {
        f0.push_back(std::log(nd.v0));
        df0.push_back(nd.grad_v0.dot(nd.inward) / nd.v0);
    }
    CauchyOptions tight;
    tight.residual_tol = 1e-14;
    bool threw = false;
    try {
        solve_curvature_cauchy(cf, f0, df0, tight);
    } catch (const InstabilityError&) {
        threw = true;
    }
    CHECK(threw);
    PASS_NOTE("planar Cauchy route recovers the hyperbolic half-plane strip");
}

void test_stepping_mode() {
    FieldPtr field = make_field("spherical", 3, {});
    double t0 = 0.45 * kPi;
    ChartField cf = sphere_model_chart(*field, t0, 1.2e-3, 7, 241);
    trim_chart(cf, 0.97 * t0);
    double dr = cf.rgrid[1] - cf.rgrid[0];

    Step2Options so;
    Step2Result coarse = step2_integrate_stepping(cf, 0.0, so);
    Step2Result fine = step2_integrate_stepping(cf, dr / 4.0, so);
    double e1 = field_consistency(*field, coarse, 0.8 * t0);
    double e4 = field_consistency(*field, fine, 0.8 * t0);
    std::printf("  [measure] stepping: e1 %.3e e4 %.3e\n", e1, e4);
    CHECK_MSG(e1 <= 1e-2, "stepping err %.3e", e1);
    CHECK_MSG(e4 < e1, "no refinement: %.3e vs %.3e", e4, e1);
    CHECK_MSG(e4 <= 0.5 * e1, "first-order refinement too weak: %.3e vs %.3e", e4, e1);

    // Substepped explicit updates track the adaptive integration.  The raw
    // speed gap between the two routes also carries their relative position
    // drift (each route reads the medium at its own ray placement), so the
    // bound is an order of magnitude over the stepping route's own error.
    so.threads = 2;
    Step2Result ref = step2_integrate(cf, so);
    double eref = field_consistency(*field, ref, 0.8 * t0);
    double cross = 0.0;
    for (size_t k = 0; k < ref.rays.size(); ++k) {
        const RayReconstruction& rs = fine.rays[k];
        const RayReconstruction& rr = ref.rays[k];
        size_t m = std::min(rs.r.size(), rr.r.size());
        for (size_t i = 0; i < m; ++i) {
            if (rs.r[i] > 0.8 * t0) break;
            cross = std::max(cross, std::fabs(rs.v[i] - rr.v[i]) / rr.v[i]);
        }
    }
    CHECK_MSG(cross <= 10.0 * (e4 + eref), "stepping vs adaptive gap %.3e (e4 %.3e eref %.3e)",
              cross, e4, eref);
    PASS_NOTE("explicit stepping mode converges onto the adaptive route");
}

}  // namespace

int main() {
    test_chart_ricci_flat();
    test_chart_ricci_curved();
    test_rhs_gradient_and_hessian();
    test_usage_guards();
    test_flat_chart_reconstruction();
    test_2d_flat_strip();
    test_sphere_chart_reconstruction();
    test_conjugate_truncation();
    test_2d_hyperbolic_strip();
    test_stepping_mode();
    test_cover_guards();
    test_gausslens_roundtrip();
    test_cover_two_charts();
    std::printf("test_step2: all passed\n");
    return 0;
}
