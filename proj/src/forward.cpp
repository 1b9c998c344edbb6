#include "dixlab/forward.hpp"

#include <atomic>
#include <random>
#include <thread>

namespace dixlab {

namespace {

struct GeoState {
    int n;
    bool with_jacobi;
    int size() const {
        int s = n + n * n;
        if (with_jacobi) s += 2 * (n - 1) * (n - 1);
        return s;
    }
    void unpack(const Vec& y, Vec& x, Mat& F, Mat& J, Mat& dJ) const {
        int at = 0;
        x = y.segment(0, n);
        at = n;
        F.resize(n, n);
        dixlab::unpack(y, at, F);
        if (with_jacobi) {
            J.resize(n - 1, n - 1);
            dJ.resize(n - 1, n - 1);
            dixlab::unpack(y, at, J);
            dixlab::unpack(y, at, dJ);
        }
    }
    void pack(Vec& y, const Vec& x, const Mat& F, const Mat& J, const Mat& dJ) const {
        y.resize(size());
        y.segment(0, n) = x;
        int at = n;
        dixlab::pack(F, y, at);
        if (with_jacobi) {
            dixlab::pack(J, y, at);
            dixlab::pack(dJ, y, at);
        }
    }
};

}  // namespace

Mat complete_gframe(double v0, const Vec& tangent) {
    int n = static_cast<int>(tangent.size());
    Vec t = tangent / tangent.norm();
    // Euclid-orthonormal completion of t, greedy Gram-Schmidt over coordinate
    // directions (deterministic, no near-parallel pitfalls).
    std::vector<Vec> basis{t};
    while (static_cast<int>(basis.size()) < n) {
        Vec best;
        double bestn = -1.0;
        for (int c = 0; c < n; ++c) {
            Vec col = Vec::Unit(n, c);
            for (const Vec& b : basis) col -= b.dot(col) * b;
            double nn = col.norm();
            if (nn > bestn) {
                bestn = nn;
                best = col;
            }
        }
        basis.push_back(best / bestn);
    }
    // Scaling by v0 makes the columns g-orthonormal for g = v^-2 e.
    Mat F(n, n);
    for (int b = 1; b < n; ++b) F.col(b - 1) = v0 * basis[b];
    F.col(n - 1) = v0 * t;
    return F;
}

GeodesicRecord trace_geodesic(const WaveSpeedField& field, const Vec& x0, const Vec& eta0,
                              double r_max, const GeodesicOptions& opts) {
    int n = field.dim();
    if (x0.size() != n || eta0.size() != n) throw UsageError("trace_geodesic: dimension mismatch");
    double v0 = field.value(x0);
    Vec eta = eta0 * (v0 / eta0.norm());  // g-unit

    GeoState st{n, opts.with_jacobi};
    Mat F0 = opts.frame0 ? *opts.frame0 : complete_gframe(v0, eta);
    if (F0.col(n - 1).size() != n) throw UsageError("trace_geodesic: bad frame");
    Mat J0 = opts.jacobi0 ? *opts.jacobi0 : Mat::Zero(n - 1, n - 1);
    Mat dJ0 = opts.djacobi0 ? *opts.djacobi0 : Mat::Identity(n - 1, n - 1);

    Vec y0;
    st.pack(y0, x0, F0, J0, dJ0);

    auto rhs = [&](double, const Vec& y, Vec& dy) {
        Vec x;
        Mat F, J, dJ;
        st.unpack(y, x, F, J, dJ);
        Vec u = field.grad_logv(x);
        Mat dF = transport_term(F, F, u);
        Mat ddJ;
        if (opts.with_jacobi) {
            CurvaturePack pack = curvature_pack(field, x);
            Mat R = directional_curvature(pack, F);
            ddJ = -R.topLeftCorner(n - 1, n - 1) * J;
        }
        Vec xdot = F.col(n - 1);
        st.pack(dy, xdot, dF, opts.with_jacobi ? dJ : Mat::Zero(n, n).eval(),
                opts.with_jacobi ? ddJ : Mat::Zero(n, n).eval());
    };

    GeodesicRecord rec;
    rec.dim = n;
    int ns = std::max(2, opts.nsamples);
    std::vector<double> rg(ns);
    for (int i = 0; i < ns; ++i) rg[i] = r_max * double(i) / double(ns - 1);

    std::vector<Vec> raw(ns);
    integrate_sampled(rhs, 0.0, rg, y0, opts.ode, [&](int idx, double, const Vec& y) {
        raw[idx] = y;
    });

    rec.r = rg;
    for (int i = 0; i < ns; ++i) {
        Vec x;
        Mat F, J, dJ;
        st.unpack(raw[i], x, F, J, dJ);
        rec.x.push_back(x);
        rec.frame.push_back(F);
        CurvaturePack pack = curvature_pack(field, x);
        Mat R = directional_curvature(pack, F);
        rec.curv.push_back(R.topLeftCorner(n - 1, n - 1));
        if (opts.with_jacobi) {
            rec.jacobi.push_back(J);
            rec.djacobi.push_back(dJ);
            rec.det_jacobi.push_back(J.determinant());
        }
        double sp = F.col(n - 1).norm() / field.value(x);
        rec.speed_err.push_back(std::abs(sp - 1.0));
    }

    if (opts.with_jacobi && opts.find_conjugate) {
        auto det_at = [&](int i_from, double rq) {
            OdeResult res = integrate_adaptive(rhs, rg[i_from], rq, raw[i_from], opts.ode);
            if (!res.completed) throw NumericsError("conjugate refinement failed");
            Vec x;
            Mat F, J, dJ;
            st.unpack(res.y, x, F, J, dJ);
            return J.determinant();
        };
        double scale = 0.0;
        for (double d : rec.det_jacobi) scale = std::max(scale, std::fabs(d));
        if (scale == 0.0) scale = 1.0;

        std::vector<double> found;
        for (int i = 1; i + 1 < ns; ++i) {
            double d0 = rec.det_jacobi[i], d1 = rec.det_jacobi[i + 1];
            if (d0 == 0.0) continue;
            if (d0 * d1 < 0.0) {
                // Simple zero: bisection on the sign change.
                double a = rg[i], b = rg[i + 1], fa = d0;
                for (int it = 0; it < 60 && (b - a) > 1e-13 * std::max(1.0, r_max); ++it) {
                    double m = 0.5 * (a + b);
                    double fm = det_at(i, m);
                    if (fa * fm <= 0.0)
                        b = m;
                    else {
                        a = m;
                        fa = fm;
                    }
                }
                found.push_back(0.5 * (a + b));
            } else if (i + 2 < ns && std::fabs(rec.det_jacobi[i + 1]) <= std::fabs(d0) &&
                       std::fabs(rec.det_jacobi[i + 1]) <= std::fabs(rec.det_jacobi[i + 2]) &&
                       std::fabs(rec.det_jacobi[i + 1]) < 1e-3 * scale) {
                // Even-multiplicity zero (several directions focusing at once)
                // dips without a sign change: golden-section the local dip and
                // accept if it reaches (near) zero.
                const double gr = 0.5 * (std::sqrt(5.0) - 1.0);
                double a = rg[i], b = rg[i + 2];
                double c = b - gr * (b - a), d = a + gr * (b - a);
                double fc = std::fabs(det_at(i, c)), fd = std::fabs(det_at(i, d));
                for (int it = 0; it < 80 && (b - a) > 1e-12 * std::max(1.0, r_max); ++it) {
                    if (fc < fd) {
                        b = d;
                        d = c;
                        fd = fc;
                        c = b - gr * (b - a);
                        fc = std::fabs(det_at(i, c));
                    } else {
                        a = c;
                        c = d;
                        fc = fd;
                        d = a + gr * (b - a);
                        fd = std::fabs(det_at(i, d));
                    }
                }
                double rm = 0.5 * (a + b);
                if (std::fabs(det_at(i, rm)) < 1e-9 * scale) found.push_back(rm);
            }
        }
        std::sort(found.begin(), found.end());
        for (double r0 : found)
            if (rec.conjugate_radii.empty() ||
                r0 - rec.conjugate_radii.back() > 1e-6 * std::max(1.0, r_max))
                rec.conjugate_radii.push_back(r0);
    }
    return rec;
}

double ChartGeometry::axis_step(int a) const {
    const auto& ax = axes.at(a);
    if (ax.size() < 2) return 0.0;
    return (ax.back() - ax.front()) / double(ax.size() - 1);
}

ChartGeometry fan_chart(const WaveSpeedField& field, const Vec& surface_point,
                        const Vec& surface_dir, double t0, double halfwidth,
                        const std::vector<int>& counts, const GeodesicOptions& opts) {
    int n = field.dim();
    if (static_cast<int>(counts.size()) != n - 1)
        throw UsageError("fan_chart: need one grid count per transverse axis");

    GeodesicOptions center_opts = opts;
    center_opts.with_jacobi = false;
    center_opts.nsamples = 65;
    GeodesicRecord center = trace_geodesic(field, surface_point, surface_dir, t0, center_opts);
    Vec y = center.x.back();
    double vy = field.value(y);
    Vec xi0 = -center.frame.back().col(n - 1);  // g-unit, back toward the surface

    Mat Fy = complete_gframe(vy, xi0);  // columns E_1..E_{n-1}, xi0

    ChartGeometry geom;
    geom.dim = n;
    geom.t0 = t0;
    geom.center = y;
    for (int a = 0; a < n - 1; ++a) {
        int c = counts[a];
        if (c < 1) throw UsageError("fan_chart: grid counts must be positive");
        std::vector<double> ax(c);
        for (int i = 0; i < c; ++i)
            ax[i] = (c == 1) ? 0.0 : -halfwidth + 2.0 * halfwidth * double(i) / double(c - 1);
        geom.axes.push_back(ax);
    }

    auto ginner = [&](const Vec& a, const Vec& b) { return a.dot(b) / (vy * vy); };

    std::vector<Vec> xhats;
    if (n == 2) {
        for (double a : geom.axes[0]) {
            Vec xh(1);
            xh << a;
            xhats.push_back(xh);
        }
    } else {
        for (double a : geom.axes[0])
            for (double b : geom.axes[1]) {
                Vec xh(2);
                xh << a, b;
                xhats.push_back(xh);
            }
    }

    for (const Vec& xh : xhats) {
        Vec w = xi0;
        for (int a = 0; a < n - 1; ++a) w += xh(a) * Fy.col(a);
        double wg = std::sqrt(1.0 + xh.squaredNorm());
        Vec xi = w / wg;

        // Transverse g-orthonormal basis along xi.
        Mat P(n, n - 1);
        for (int b = 0; b < n - 1; ++b) {
            Vec col = Fy.col(b);
            col -= ginner(col, xi) * xi;
            for (int p = 0; p < b; ++p) col -= ginner(col, P.col(p)) * P.col(p);
            P.col(b) = col / std::sqrt(ginner(col, col));
        }

        // Initial Jacobi velocities: components of d xi / d xhat^a in the P basis.
        Mat B(n - 1, n - 1);
        for (int a = 0; a < n - 1; ++a) {
            Vec dxi = Fy.col(a) / wg - w * (xh(a) / (wg * wg * wg));
            for (int b = 0; b < n - 1; ++b) B(b, a) = ginner(dxi, P.col(b));
        }

        Mat F0(n, n);
        F0.leftCols(n - 1) = P;
        F0.col(n - 1) = xi * vy / xi.norm();  // already g-unit; keep exact

        GeodesicOptions ray_opts = opts;
        ray_opts.with_jacobi = true;
        ray_opts.nsamples = 33;
        ray_opts.frame0 = F0;
        ray_opts.jacobi0 = Mat::Zero(n - 1, n - 1);
        ray_opts.djacobi0 = B;
        GeodesicRecord ray = trace_geodesic(field, y, xi, t0, ray_opts);

        BoundaryNode node;
        node.xhat = xh;
        node.point = ray.x.back();
        Vec vel = ray.frame.back().col(n - 1);
        node.inward = -vel;
        node.frame.resize(n, n);
        const Mat& Pend = ray.frame.back();
        const Mat& Jend = ray.jacobi.back();
        for (int a = 0; a < n - 1; ++a) {
            Vec ca = Vec::Zero(n);
            for (int b = 0; b < n - 1; ++b) ca += Jend(b, a) * Pend.col(b);
            node.frame.col(a) = ca;
        }
        node.frame.col(n - 1) = node.inward;
        node.v0 = field.value(node.point);
        node.grad_v0 = field.grad(node.point);
        double det = node.frame.determinant();
        if (std::abs(det) < 1e-300) throw NumericsError("fan_chart: degenerate boundary frame");
        node.sigma = n * std::log(node.v0) - std::log(std::abs(det));
        geom.nodes.push_back(std::move(node));
    }
    return geom;
}

int SampleSet::t_index(double t, double tol) const {
    for (size_t i = 0; i < tgrid.size(); ++i)
        if (std::abs(tgrid[i] - t) <= tol * std::max(1.0, std::abs(t))) return static_cast<int>(i);
    return -1;
}

bool shape_from_jacobi(const JacobiTDerivs& jd, double det_tol, double cond_max,
                       ShapeSample* out) {
    int m = jd.B.rows();
    out->s = out->ds = out->d2s = out->d3s = Mat::Zero(m, m);
    out->valid = false;

    Eigen::JacobiSVD<Mat> svd(jd.B);
    const auto& sv = svd.singularValues();
    if (sv(sv.size() - 1) <= det_tol * sv(0)) return false;

    Mat E = jd.B.inverse();
    Mat EBt = E * jd.Bt;
    Mat Et = -EBt * E;
    Mat Ett = 2.0 * EBt * EBt * E - E * jd.Btt * E;
    Mat Ettt = -6.0 * EBt * EBt * EBt * E +
               3.0 * (E * jd.Btt * E * jd.Bt * E + EBt * E * jd.Btt * E) - E * jd.Bttt * E;

    out->s = jd.A * E;
    out->ds = jd.At * E + jd.A * Et;
    out->d2s = jd.Att * E + 2.0 * jd.At * Et + jd.A * Ett;
    out->d3s = jd.Attt * E + 3.0 * jd.Att * Et + 3.0 * jd.At * Ett + jd.A * Ettt;

    if (!out->s.allFinite() || !out->d3s.allFinite()) return false;
    if (cond2(out->s) > cond_max) return false;
    out->valid = true;
    return true;
}

RaySynthesizer::RaySynthesizer(const WaveSpeedField& field, const BoundaryNode& node,
                               double t0, const SynthOptions& opts)
    : nt_(field.dim() - 1), opts_(opts) {
    GeodesicOptions gop;
    gop.ode = opts.ode;
    gop.nsamples = opts.nprofile;
    gop.with_jacobi = false;
    gop.frame0 = node.frame;
    ray_ = trace_geodesic(field, node.point, node.inward, t0, gop);

    std::vector<double> comp(ray_.r.size());
    for (int a = 0; a < nt_; ++a)
        for (int b = 0; b < nt_; ++b) {
            for (size_t i = 0; i < ray_.r.size(); ++i) comp[i] = ray_.curv[i](a, b);
            curv_spl_.push_back(CubicSpline(ray_.r, comp));
        }
}

Mat RaySynthesizer::curv_at(double r) const {
    Mat R(nt_, nt_);
    for (int a = 0; a < nt_; ++a)
        for (int b = 0; b < nt_; ++b) R(a, b) = curv_spl_[a * nt_ + b].value(r);
    return R;
}

ShapeSample RaySynthesizer::shape(double r, double t) const {
    ShapeSample out;
    out.t = t;
    out.s = out.ds = out.d2s = out.d3s = Mat::Zero(nt_, nt_);
    if (!(t > r + 1e-12)) return out;  // invalid: the front degenerates at t = r

    Mat Rt = curv_at(t);
    Mat dRt(nt_, nt_);
    for (int a = 0; a < nt_; ++a)
        for (int b = 0; b < nt_; ++b) dRt(a, b) = curv_spl_[a * nt_ + b].deriv(t);

    int m = nt_ * nt_;
    Vec y0(8 * m);
    {
        int at = 0;
        Mat Z = Mat::Zero(nt_, nt_), I = Mat::Identity(nt_, nt_);
        pack(Z, y0, at);            // G
        pack((-I).eval(), y0, at);  // G'
        pack(I, y0, at);            // G_t
        pack(Z, y0, at);            // G_t'
        pack(Z, y0, at);            // G_tt
        pack(Rt, y0, at);           // G_tt'
        pack((-Rt).eval(), y0, at); // G_ttt
        pack(dRt, y0, at);          // G_ttt'
    }

    auto rhs = [&](double rho, const Vec& y, Vec& dy) {
        Mat R = curv_at(rho);
        dy.resize(8 * m);
        for (int blk = 0; blk < 4; ++blk) {
            int at = 2 * blk * m;
            Mat X(nt_, nt_), dX(nt_, nt_);
            unpack(y, at, X);
            unpack(y, at, dX);
            Mat ddX = -R * X;
            at = 2 * blk * m;
            pack(dX, dy, at);
            pack(ddX, dy, at);
        }
    };

    OdeResult res = integrate_adaptive(rhs, t, r, y0, opts_.ode);
    if (!res.completed) return out;

    JacobiTDerivs jd;
    int at = 0;
    Mat X(nt_, nt_), dX(nt_, nt_);
    unpack(res.y, at, X);
    unpack(res.y, at, dX);
    jd.B = X;
    jd.A = -dX;
    unpack(res.y, at, X);
    unpack(res.y, at, dX);
    jd.Bt = X;
    jd.At = -dX;
    unpack(res.y, at, X);
    unpack(res.y, at, dX);
    jd.Btt = X;
    jd.Att = -dX;
    unpack(res.y, at, X);
    unpack(res.y, at, dX);
    jd.Bttt = X;
    jd.Attt = -dX;

    shape_from_jacobi(jd, opts_.det_tol, opts_.cond_max, &out);
    out.t = t;
    return out;
}

SampleSet synthesize_shape_data(const WaveSpeedField& field, const ChartGeometry& geom,
                                const std::vector<double>& tgrid, const SynthOptions& opts) {
    SampleSet set;
    set.geom = geom;
    set.tgrid = tgrid;
    if (set.t_index(geom.t0) < 0)
        throw UsageError("synthesize_shape_data: tgrid must contain t0");

    long nn = geom.node_count();
    set.samples.resize(nn);

    auto work = [&](long k) {
        RaySynthesizer synth(field, geom.nodes[k], geom.t0, opts);
        std::vector<ShapeSample>& row = set.samples[k];
        row.resize(tgrid.size());
        for (size_t it = 0; it < tgrid.size(); ++it) row[it] = synth.shape(0.0, tgrid[it]);
        if (opts.noise_sigma > 0.0) {
            std::mt19937_64 rng(opts.seed * 1000003ull + static_cast<unsigned long long>(k));
            std::normal_distribution<double> N(0.0, 1.0);
            for (auto& smp : row) {
                for (Mat* mp : {&smp.s, &smp.ds, &smp.d2s, &smp.d3s}) {
                    double scale = opts.noise_sigma * mp->norm() / std::sqrt(double(mp->size()));
                    for (int i = 0; i < mp->rows(); ++i)
                        for (int j = 0; j < mp->cols(); ++j) (*mp)(i, j) += scale * N(rng);
                }
            }
        }
    };

    int nthreads = std::max(1, opts.threads);
    if (nthreads == 1) {
        for (long k = 0; k < nn; ++k) work(k);
    } else {
        std::vector<std::thread> pool;
        std::atomic<long> next{0};
        for (int t = 0; t < nthreads; ++t)
            pool.emplace_back([&]() {
                for (long k = next.fetch_add(1); k < nn; k = next.fetch_add(1)) work(k);
            });
        for (auto& th : pool) th.join();
    }
    return set;
}

std::vector<Vec> sphere_points(const WaveSpeedField& field, const Vec& center, double t0,
                               int count_per_axis, const GeodesicOptions& opts) {
    int n = field.dim();
    std::vector<Vec> pts;
    GeodesicOptions go = opts;
    go.with_jacobi = false;
    go.nsamples = 17;
    if (n == 2) {
        for (int i = 0; i < count_per_axis; ++i) {
            double a = 2.0 * M_PI * double(i) / double(count_per_axis);
            Vec d(2);
            d << std::cos(a), std::sin(a);
            pts.push_back(trace_geodesic(field, center, d, t0, go).x.back());
        }
    } else {
        for (int i = 1; i < count_per_axis; ++i) {
            double th = M_PI * double(i) / double(count_per_axis);
            for (int j = 0; j < count_per_axis; ++j) {
                double ph = 2.0 * M_PI * double(j) / double(count_per_axis);
                Vec d(3);
                d << std::sin(th) * std::cos(ph), std::sin(th) * std::sin(ph), std::cos(th);
                pts.push_back(trace_geodesic(field, center, d, t0, go).x.back());
            }
        }
    }
    return pts;
}

}  // namespace dixlab
