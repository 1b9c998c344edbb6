#include "dixlab/step2.hpp"

#include "dixlab/geometry.hpp"

#include <Eigen/SparseCholesky>
#include <Eigen/SparseCore>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <mutex>
#include <thread>

namespace dixlab {

namespace {

Mat jacobi_block(const Mat& j) {
    int n = static_cast<int>(j.rows()) + 1;
    Mat b = Mat::Zero(n, n);
    b.topLeftCorner(n - 1, n - 1) = j;
    b(n - 1, n - 1) = 1.0;
    return b;
}

// Visits every grid line of one transverse axis: calls fn(axis values, node
// indices along the line).  The node layout is row-major, last axis fastest.
void for_each_line(const std::vector<std::vector<double>>& axes, int axis,
                   const std::function<void(const std::vector<double>&, const std::vector<long>&)>& fn) {
    if (axes.size() == 1) {
        std::vector<long> idx(axes[0].size());
        for (size_t i = 0; i < idx.size(); ++i) idx[i] = static_cast<long>(i);
        fn(axes[0], idx);
        return;
    }
    long m0 = static_cast<long>(axes[0].size()), m1 = static_cast<long>(axes[1].size());
    if (axis == 0) {
        for (long j = 0; j < m1; ++j) {
            std::vector<long> idx(m0);
            for (long i = 0; i < m0; ++i) idx[i] = i * m1 + j;
            fn(axes[0], idx);
        }
    } else {
        for (long i = 0; i < m0; ++i) {
            std::vector<long> idx(m1);
            for (long j = 0; j < m1; ++j) idx[j] = i * m1 + j;
            fn(axes[1], idx);
        }
    }
}

// Per-node derivative of a matrix-valued grid function along each transverse
// axis, by spline differentiation down the grid lines.
std::vector<std::vector<Mat>> transverse_slopes(const std::vector<std::vector<double>>& axes,
                                                const std::vector<Mat>& vals) {
    int na = static_cast<int>(axes.size());
    int rows = static_cast<int>(vals[0].rows()), cols = static_cast<int>(vals[0].cols());
    std::vector<std::vector<Mat>> out(vals.size(), std::vector<Mat>(na, Mat::Zero(rows, cols)));
    for (int a = 0; a < na; ++a) {
        for_each_line(axes, a, [&](const std::vector<double>& x, const std::vector<long>& idx) {
            std::vector<double> y(idx.size());
            for (int r = 0; r < rows; ++r)
                for (int c = 0; c < cols; ++c) {
                    for (size_t k = 0; k < idx.size(); ++k) y[k] = vals[idx[k]](r, c);
                    CubicSpline sp(x, y);
                    for (size_t k = 0; k < idx.size(); ++k) out[idx[k]][a](r, c) = sp.deriv(x[k]);
                }
        });
    }
    return out;
}

std::vector<Vec> transverse_slopes_scalar(const std::vector<std::vector<double>>& axes,
                                          const std::vector<double>& vals) {
    std::vector<Mat> wrapped(vals.size(), Mat::Zero(1, 1));
    for (size_t k = 0; k < vals.size(); ++k) wrapped[k](0, 0) = vals[k];
    auto slopes = transverse_slopes(axes, wrapped);
    std::vector<Vec> out(vals.size(), Vec::Zero(axes.size()));
    for (size_t k = 0; k < vals.size(); ++k)
        for (size_t a = 0; a < axes.size(); ++a) out[k](a) = slopes[k][a](0, 0);
    return out;
}

// Weights of the interpolating quadratic through x[0..2] for the first and
// second derivative at xq (supports non-uniform spacing).
void quad_weights(const double* x, double xq, double* w1, double* w2) {
    for (int i = 0; i < 3; ++i) {
        int a = (i + 1) % 3, b = (i + 2) % 3;
        double denom = (x[i] - x[a]) * (x[i] - x[b]);
        w1[i] = (2.0 * xq - x[a] - x[b]) / denom;
        w2[i] = 2.0 / denom;
    }
}

void run_threaded(long count, int threads, const std::function<void(long)>& work) {
    int nt = std::max(1, threads);
    if (nt == 1) {
        for (long k = 0; k < count; ++k) work(k);
        return;
    }
    std::atomic<long> next{0};
    std::mutex mtx;
    std::exception_ptr err;
    auto body = [&]() {
        for (;;) {
            long k = next.fetch_add(1);
            if (k >= count) return;
            try {
                work(k);
            } catch (...) {
                std::lock_guard<std::mutex> lk(mtx);
                if (!err) err = std::current_exception();
                return;
            }
        }
    };
    std::vector<std::thread> pool;
    for (int i = 0; i < nt; ++i) pool.emplace_back(body);
    for (auto& th : pool) th.join();
    if (err) std::rethrow_exception(err);
}

}  // namespace

// ---------------------------------------------------------------------------
// ChartRicci

ChartRicci::ChartRicci(const ChartField& chart) : n_(chart.dim) {
    std::vector<std::vector<double>> ax = chart.geom.axes;
    ax.push_back(chart.rgrid);
    long nodes = chart.node_count(), nr = static_cast<long>(chart.rgrid.size());
    int nt = n_ - 1;
    for (int a = 0; a < nt; ++a)
        for (int b = a; b < nt; ++b) {
            std::vector<double> vals(nodes * nr);
            for (long k = 0; k < nodes; ++k)
                for (long ir = 0; ir < nr; ++ir) vals[k * nr + ir] = chart.ghat[k][ir](a, b);
            gh_.emplace_back(ax, vals);
        }
}

void ChartRicci::eval(const Vec& q, Mat* ric, Mat* ginv) const {
    int n = n_, nt = n - 1;
    Mat G = Mat::Zero(n, n);
    G(nt, nt) = 1.0;
    std::vector<Mat> dG(n, Mat::Zero(n, n));
    std::vector<std::vector<Mat>> d2G(n, std::vector<Mat>(n, Mat::Zero(n, n)));
    int id = 0;
    for (int a = 0; a < nt; ++a)
        for (int b = a; b < nt; ++b, ++id) {
            const GridInterp& gi = gh_[id];
            double v = gi.value(q);
            G(a, b) = G(b, a) = v;
            for (int p = 0; p < n; ++p) {
                double d = gi.deriv(q, p);
                dG[p](a, b) = dG[p](b, a) = d;
            }
            for (int p = 0; p < n; ++p)
                for (int s = p; s < n; ++s) {
                    double d = gi.deriv2(q, p, s);
                    d2G[p][s](a, b) = d2G[p][s](b, a) = d;
                    if (s != p) d2G[s][p] = d2G[p][s];
                }
        }

    Mat Gi = G.inverse();
    std::vector<Mat> dGi(n);
    for (int p = 0; p < n; ++p) dGi[p] = -Gi * dG[p] * Gi;

    double christ[3][3][3] = {};
    double dchrist[3][3][3][3] = {};
    for (int k = 0; k < n; ++k)
        for (int i = 0; i < n; ++i)
            for (int j = i; j < n; ++j) {
                double g = 0.0;
                for (int l = 0; l < n; ++l)
                    g += Gi(k, l) * (dG[i](j, l) + dG[j](i, l) - dG[l](i, j));
                christ[k][i][j] = christ[k][j][i] = 0.5 * g;
                for (int p = 0; p < n; ++p) {
                    double d = 0.0;
                    for (int l = 0; l < n; ++l) {
                        d += dGi[p](k, l) * (dG[i](j, l) + dG[j](i, l) - dG[l](i, j));
                        d += Gi(k, l) * (d2G[p][i](j, l) + d2G[p][j](i, l) - d2G[p][l](i, j));
                    }
                    dchrist[p][k][i][j] = dchrist[p][k][j][i] = 0.5 * d;
                }
            }

    Mat R = Mat::Zero(n, n);
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j) {
            double s = 0.0;
            for (int k = 0; k < n; ++k) {
                s += dchrist[k][k][i][j] - dchrist[i][k][k][j];
                for (int m = 0; m < n; ++m)
                    s += christ[k][k][m] * christ[m][i][j] - christ[k][i][m] * christ[m][k][j];
            }
            R(i, j) = s;
        }
    if (ric) *ric = 0.5 * (R + R.transpose());
    if (ginv) *ginv = Gi;
}

Mat ChartRicci::at(const Vec& xhat, double r) const {
    Vec q(n_);
    q.head(n_ - 1) = xhat;
    q(n_ - 1) = r;
    Mat ric;
    eval(q, &ric, nullptr);
    return ric;
}

double ChartRicci::scal(const Vec& xhat, double r) const {
    Vec q(n_);
    q.head(n_ - 1) = xhat;
    q(n_ - 1) = r;
    Mat ric, gi;
    eval(q, &ric, &gi);
    return (gi * ric).trace();
}

// ---------------------------------------------------------------------------
// ChartContext

ChartContext::ChartContext(const ChartField& chart)
    : n_(chart.dim),
      t0_(chart.t0),
      axes_(chart.geom.axes),
      rgrid_(chart.rgrid),
      st0_(chart.s_t0),
      curv_(chart.curv),
      ricci_(chart) {
    long nodes = chart.node_count();
    xhat_.reserve(nodes);
    point_.reserve(nodes);
    frame0_.reserve(nodes);
    std::vector<Mat> frames;
    for (long k = 0; k < nodes; ++k) {
        const BoundaryNode& nd = chart.geom.nodes[k];
        xhat_.push_back(nd.xhat);
        point_.push_back(nd.point);
        frame0_.push_back(nd.frame);
        v0_.push_back(nd.v0);
        u0_.push_back(nd.grad_v0 / nd.v0);
        sigma_.push_back(nd.sigma);
        frames.push_back(nd.frame);
    }
    dframe0_ = transverse_slopes(axes_, frames);
    auto ds = transverse_slopes_scalar(axes_, sigma_);
    dsigma_.assign(ds.begin(), ds.end());
    build_splines();
}

void ChartContext::build_splines() {
    int nt = n_ - 1;
    curv_spl_.assign(curv_.size(), {});
    for (size_t k = 0; k < curv_.size(); ++k) {
        curv_spl_[k].resize(nt * nt);
        std::vector<double> y(rgrid_.size());
        for (int a = 0; a < nt; ++a)
            for (int b = 0; b < nt; ++b) {
                for (size_t ir = 0; ir < rgrid_.size(); ++ir) y[ir] = curv_[k][ir](a, b);
                curv_spl_[k][a * nt + b] = CubicSpline(rgrid_, y);
            }
    }
}

Mat ChartContext::curv_at(long node, double r) const {
    int nt = n_ - 1;
    Mat m(nt, nt);
    for (int a = 0; a < nt; ++a)
        for (int b = 0; b < nt; ++b) m(a, b) = curv_spl_[node][a * nt + b].value(r);
    return m;
}

Step2State ChartContext::boundary_state(long node) const {
    Step2State s;
    s.gamma = point_[node];
    s.jacobi = Mat::Identity(n_ - 1, n_ - 1);
    s.djacobi = -st0_[node];
    s.frame = frame0_[node];
    s.dframe = dframe0_[node];
    s.dframe.push_back(transport_term(s.frame, s.frame, u0_[node]));
    s.f = std::log(v0_[node]);
    return s;
}

Step2Derivs ChartContext::rhs(long node, double r, const Step2State& s, double cond_max) const {
    if (cond2(s.jacobi) > cond_max || cond2(s.frame) > cond_max)
        throw NumericsError("chart geodesic state is near-conjugate (ill-conditioned frame or "
                            "Jacobi matrix)");
    int n = n_, nt = n - 1;
    Mat rr = curv_at(node, r);
    Mat Finv = s.frame.inverse();
    Mat jinv = s.jacobi.inverse();

    Vec b(n);
    for (int a = 0; a < nt; ++a)
        b(a) = (dsigma_[node](a) + (Finv * s.dframe[a]).trace()) / n;
    b(nt) = (Finv * s.dframe[nt]).trace() / n;

    Vec w(n);
    w.head(nt) = jinv.transpose() * b.head(nt);
    w(nt) = b(nt);
    Vec u = Finv.transpose() * w;

    Mat jt = s.frame * jacobi_block(s.jacobi);
    Mat jtinv = jacobi_block(jinv) * Finv;
    Mat richat = ricci_.at(xhat_[node], r);
    Mat ric = jtinv.transpose() * richat * jtinv;
    Mat hess = hessian_from_ricci(ric, u);

    Step2Derivs d;
    d.grad_f = u;
    d.hess_f = hess;
    d.ricci = ric;
    d.dot.gamma = s.frame.col(nt);
    d.dot.jacobi = s.djacobi;
    d.dot.djacobi = -rr * s.jacobi;
    d.dot.frame = s.dframe[nt];
    d.dot.dframe.resize(n);
    for (int a = 0; a < n; ++a)
        d.dot.dframe[a] = transport_term(s.dframe[a], s.frame, u) +
                          transport_term(s.frame, s.dframe[a], u) +
                          transport_term(s.frame, s.frame, hess * jt.col(a));
    d.dot.f = u.dot(s.frame.col(nt));
    return d;
}

ChartContext ChartContext::resumed(const std::vector<Mat>& frame_change) const {
    ChartContext out(*this);
    for (size_t k = 0; k < curv_.size(); ++k) {
        Mat C = frame_change[k];
        Mat Cinv = C.inverse();
        for (size_t ir = 0; ir < rgrid_.size(); ++ir)
            out.curv_[k][ir] = Cinv * curv_[k][ir] * C;
        out.dsigma_[k].setZero();
    }
    out.build_splines();
    return out;
}

// ---------------------------------------------------------------------------
// State packing and the per-node integration driver

namespace {

int state_size(int n) { return n + 2 * (n - 1) * (n - 1) + n * n + n * n * n + 1; }

Vec pack_state(const Step2State& s) {
    int n = static_cast<int>(s.gamma.size());
    Vec y(state_size(n));
    int at = 0;
    for (int i = 0; i < n; ++i) y(at++) = s.gamma(i);
    pack(s.jacobi, y, at);
    pack(s.djacobi, y, at);
    pack(s.frame, y, at);
    for (int a = 0; a < n; ++a) pack(s.dframe[a], y, at);
    y(at++) = s.f;
    return y;
}

Step2State unpack_state(const Vec& y, int n) {
    Step2State s;
    s.gamma = Vec(n);
    s.jacobi = Mat(n - 1, n - 1);
    s.djacobi = Mat(n - 1, n - 1);
    s.frame = Mat(n, n);
    s.dframe.assign(n, Mat(n, n));
    int at = 0;
    for (int i = 0; i < n; ++i) s.gamma(i) = y(at++);
    unpack(y, at, s.jacobi);
    unpack(y, at, s.djacobi);
    unpack(y, at, s.frame);
    for (int a = 0; a < n; ++a) unpack(y, at, s.dframe[a]);
    s.f = y(at++);
    return s;
}

double det_route_f(double sigma, const Mat& frame, int n) {
    return (sigma + std::log(std::fabs(frame.determinant()))) / n;
}

}  // namespace

double Step2Result::common_reach() const {
    double m = std::numeric_limits<double>::infinity();
    for (const auto& ray : rays) m = std::min(m, ray.reach);
    return rays.empty() ? r_begin : m;
}

double Step2Result::max_drift() const {
    double m = 0.0;
    for (const auto& ray : rays) m = std::max(m, ray.drift);
    return m;
}

class Step2Runner {
public:
    // Integrates every node from its seed at rgrid[first_ir] through the
    // rgrid landings up to last_ir, stopping a ray early when the state goes
    // near-conjugate.  sigma anchors the determinant readout of v.
    static Step2Result run(const ChartContext& ctx, const std::vector<Step2State>& seeds,
                           const std::vector<double>& sigma, int first_ir, int last_ir,
                           const Step2Options& opts) {
        const std::vector<double>& rg = ctx.rgrid_;
        int n = ctx.n_;
        Step2Result out;
        out.dim = n;
        out.t0 = ctx.t0_;
        out.r_begin = rg[first_ir];
        out.axes = ctx.axes_;
        out.xhat = ctx.xhat_;
        out.rays.resize(seeds.size());

        run_threaded(static_cast<long>(seeds.size()), opts.threads, [&](long node) {
            RayReconstruction& ray = out.rays[node];
            ray.reach = rg[first_ir];
            Vec y = pack_state(seeds[node]);
            // Isotropic focusing keeps cond(j) near 1 while det j collapses,
            // so the conditioning guards in rhs never fire there.  Watch the
            // determinants relative to their seed values as well.
            double det_j0 = std::fabs(seeds[node].jacobi.determinant());
            double det_f0 = std::fabs(seeds[node].frame.determinant());
            auto collapsed = [&](const Step2State& st) {
                return std::fabs(st.jacobi.determinant()) * opts.cond_max < det_j0 ||
                       std::fabs(st.frame.determinant()) * opts.cond_max < det_f0;
            };
            auto record = [&](double r, const Vec& yv) -> bool {
                Step2State st = unpack_state(yv, n);
                if (collapsed(st)) {
                    ray.hit_conjugate = true;
                    return false;
                }
                Vec grad;
                try {
                    grad = ctx.rhs(node, r, st, opts.cond_max).grad_f;
                } catch (const NumericsError&) {
                    ray.hit_conjugate = true;
                    return false;
                }
                double fdet = det_route_f(sigma[node], st.frame, n);
                ray.r.push_back(r);
                ray.gamma.push_back(st.gamma);
                ray.v.push_back(std::exp(fdet));
                ray.f_ode.push_back(st.f);
                ray.frame.push_back(st.frame);
                ray.jacobi.push_back(st.jacobi);
                ray.djacobi.push_back(st.djacobi);
                ray.grad_f.push_back(grad);
                ray.drift = std::max(ray.drift, std::fabs(st.f - fdet));
                ray.reach = r;
                return true;
            };
            if (!record(rg[first_ir], y)) return;

            bool poison = false;
            OdeRhs rhs = [&](double t, const Vec& yv, Vec& dydt) {
                dydt.setZero(yv.size());
                if (poison) return;
                if (!yv.allFinite()) {
                    poison = true;
                    return;
                }
                try {
                    Step2State st = unpack_state(yv, n);
                    if (collapsed(st)) {
                        poison = true;
                        return;
                    }
                    dydt = pack_state(ctx.rhs(node, t, st, opts.cond_max).dot);
                } catch (const NumericsError&) {
                    poison = true;
                    dydt.setZero(yv.size());
                }
            };

            OdeOptions oo = opts.ode;
            for (int ir = first_ir; ir < last_ir; ++ir) {
                // Approaching a focus, interpolation noise in the chart
                // tables gets amplified without bound and the controller
                // responds by collapsing the step.  Give each cell a step
                // floor with a small budget of forced crossings: isolated
                // rough spots at cell seams pass, while a ray pinned to the
                // floor for good has left the resolvable region and stops
                // here as its conjugate point.
                oo.h_min = 1e-4 * (rg[ir + 1] - rg[ir]);
                oo.h_min_forced = 64;
                OdeResult res = integrate_adaptive(rhs, rg[ir], rg[ir + 1], y, oo);
                if (poison || !res.completed) {
                    ray.hit_conjugate = true;
                    break;
                }
                y = res.y;
                oo.h_init = res.h_next;
                if (!record(rg[ir + 1], y)) break;
            }
        });
        return out;
    }

    static std::vector<double> chart_sigmas(const ChartContext& ctx) { return ctx.sigma_; }
    static const std::vector<std::vector<double>>& chart_axes(const ChartContext& ctx) {
        return ctx.axes_;
    }
};

Step2Result step2_integrate(const ChartField& chart, const Step2Options& opts) {
    if (chart.dim < 3)
        throw UsageError("the closed reconstruction system needs dimension >= 3; use the "
                         "two-dimensional route for planar charts");
    ChartContext ctx(chart);
    std::vector<Step2State> seeds;
    for (long k = 0; k < ctx.node_count(); ++k) seeds.push_back(ctx.boundary_state(k));
    return Step2Runner::run(ctx, seeds, Step2Runner::chart_sigmas(ctx), 0,
                            static_cast<int>(chart.rgrid.size()) - 1, opts);
}

// ---------------------------------------------------------------------------
// ReconstructedField

ReconstructedField::ReconstructedField(const Step2Result& run) : n_(run.dim) {
    size_t L = std::numeric_limits<size_t>::max();
    for (const auto& ray : run.rays) L = std::min(L, ray.r.size());
    if (run.rays.empty() || L < 4)
        throw NumericsError("reconstruction too shallow to tabulate (fewer than four radii "
                            "shared by all geodesics)");
    axes_ = run.axes;
    axes_.push_back(std::vector<double>(run.rays[0].r.begin(), run.rays[0].r.begin() + L));

    long nodes = static_cast<long>(run.rays.size());
    long nr = static_cast<long>(L);
    auto table = [&](const std::function<double(long, long)>& get) {
        std::vector<double> vals(nodes * nr);
        for (long k = 0; k < nodes; ++k)
            for (long ir = 0; ir < nr; ++ir) vals[k * nr + ir] = get(k, ir);
        return GridInterp(axes_, vals);
    };

    for (int c = 0; c < n_; ++c)
        pos_.push_back(table([&](long k, long ir) { return run.rays[k].gamma[ir](c); }));
    for (int col = 0; col < n_; ++col)
        for (int row = 0; row < n_; ++row)
            jac_.push_back(table([&](long k, long ir) {
                const RayReconstruction& ray = run.rays[k];
                Mat jt = ray.frame[ir] * jacobi_block(ray.jacobi[ir]);
                return jt(row, col);
            }));
    fval_ = table([&](long k, long ir) { return std::log(run.rays[k].v[ir]); });
    for (int c = 0; c < n_; ++c)
        grad_.push_back(table([&](long k, long ir) { return run.rays[k].grad_f[ir](c); }));
}

bool ReconstructedField::eval(const Vec& x, Vec* q, double* f, Vec* u) const {
    Vec qq;
    if (q && q->size() == n_) {
        qq = *q;
    } else {
        qq = Vec(n_);
        for (int a = 0; a < n_; ++a) qq(a) = 0.5 * (axes_[a].front() + axes_[a].back());
    }
    auto in_bounds = [&](const Vec& p) {
        for (int a = 0; a < n_; ++a) {
            const auto& ax = axes_[a];
            double pad = 0.6 * (ax.size() > 1 ? std::min(ax[1] - ax[0], ax[ax.size() - 1] - ax[ax.size() - 2])
                                              : 1.0);
            if (p(a) < ax.front() - pad || p(a) > ax.back() + pad) return false;
        }
        return true;
    };
    // The iteration may wander outside the tabulated tube transiently (the
    // tables extrapolate their edge stencils); only a converged point is
    // held to the bounds.
    for (int iter = 0; iter < 40; ++iter) {
        Vec pos(n_);
        for (int c = 0; c < n_; ++c) pos(c) = pos_[c].value(qq);
        Mat jt(n_, n_);
        for (int col = 0; col < n_; ++col)
            for (int row = 0; row < n_; ++row) jt(row, col) = jac_[col * n_ + row].value(qq);
        Vec dx = x - pos;
        Vec step = jt.partialPivLu().solve(dx);
        if (!step.allFinite()) return false;
        qq += step;
        if (step.norm() <= 1e-10 * (1.0 + qq.norm())) {
            if (!in_bounds(qq)) return false;
            if (q) *q = qq;
            if (f) *f = fval_.value(qq);
            if (u) {
                u->resize(n_);
                for (int c = 0; c < n_; ++c) (*u)(c) = grad_[c].value(qq);
            }
            return true;
        }
    }
    return false;
}

// ---------------------------------------------------------------------------
// Conjugate-point cover

namespace {

// Union of already reconstructed regions; lookups try the newest run first
// and keep one warm chart-coordinate hint per field.
struct FieldStack {
    std::vector<ReconstructedField> fields;
    std::vector<Vec> hints;

    void add(ReconstructedField f) {
        fields.push_back(std::move(f));
        hints.emplace_back();
    }
    void reset_hints() {
        for (auto& h : hints) h = Vec();
    }
    bool eval(const Vec& x, double* f, Vec* u) {
        for (int i = static_cast<int>(fields.size()) - 1; i >= 0; --i)
            if (fields[i].eval(x, &hints[i], f, u)) return true;
        return false;
    }
};

struct Window {
    double lo = 0.0, hi = 0.0;
};

// Clear integration windows of a chart: the complement of padded zones around
// the conjugate radii of its nodes and around the focal radius t0.
std::vector<Window> clear_windows(const ChartField& chart, double margin) {
    std::vector<double> bad;
    for (const auto& per_node : chart.conjugate_radii)
        bad.insert(bad.end(), per_node.begin(), per_node.end());
    bad.push_back(chart.t0);
    std::sort(bad.begin(), bad.end());
    std::vector<Window> zones;
    for (double c : bad) {
        double lo = c - margin, hi = c + margin;
        if (!zones.empty() && lo <= zones.back().hi)
            zones.back().hi = std::max(zones.back().hi, hi);
        else
            zones.push_back({lo, hi});
    }
    std::vector<Window> out;
    double cursor = 0.0;
    for (const auto& z : zones) {
        if (z.lo > cursor) out.push_back({cursor, std::min(z.lo, chart.t0)});
        cursor = std::max(cursor, z.hi);
        if (cursor >= chart.t0) break;
    }
    if (cursor < chart.t0) out.push_back({cursor, chart.t0});
    return out;
}

double median_step(const std::vector<double>& rg) {
    std::vector<double> d;
    for (size_t i = 1; i < rg.size(); ++i) d.push_back(rg[i] - rg[i - 1]);
    return median(d);
}

struct ThroughState {
    Vec gamma;
    Mat frame, jacobi, djacobi;
};

Vec pack_through(const ThroughState& s) {
    int n = static_cast<int>(s.gamma.size());
    Vec y(n + n * n + 2 * (n - 1) * (n - 1));
    int at = 0;
    for (int i = 0; i < n; ++i) y(at++) = s.gamma(i);
    pack(s.frame, y, at);
    pack(s.jacobi, y, at);
    pack(s.djacobi, y, at);
    return y;
}

ThroughState unpack_through(const Vec& y, int n) {
    ThroughState s;
    s.gamma = Vec(n);
    s.frame = Mat(n, n);
    s.jacobi = Mat(n - 1, n - 1);
    s.djacobi = Mat(n - 1, n - 1);
    int at = 0;
    for (int i = 0; i < n; ++i) s.gamma(i) = y(at++);
    unpack(y, at, s.frame);
    unpack(y, at, s.jacobi);
    unpack(y, at, s.djacobi);
    return s;
}

// Pushes one chart geodesic from r_from to r_to through possibly conjugate
// territory, using the already reconstructed gradient for the transport and
// the chart's own curvature profile for the Jacobi data.  Nothing here needs
// an invertible Jacobi matrix.
ThroughState push_through(const ChartContext& ctx, long node, ThroughState s, double r_from,
                          double r_to, FieldStack& stack, const OdeOptions& oo) {
    if (r_to <= r_from + 1e-14) return s;
    int n = static_cast<int>(s.gamma.size());
    stack.reset_hints();
    bool lost = false;
    OdeRhs rhs = [&](double t, const Vec& yv, Vec& dydt) {
        dydt.setZero(yv.size());
        if (lost || !yv.allFinite()) {
            lost = true;
            return;
        }
        ThroughState st = unpack_through(yv, n);
        double fv;
        Vec u;
        if (!stack.eval(st.gamma, &fv, &u)) {
            lost = true;
            return;
        }
        ThroughState d;
        d.gamma = st.frame.col(n - 1);
        d.frame = transport_term(st.frame, st.frame, u);
        d.jacobi = st.djacobi;
        d.djacobi = -ctx.curv_at(node, t) * st.jacobi;
        dydt = pack_through(d);
    };
    OdeResult res = integrate_adaptive(rhs, r_from, r_to, pack_through(s), oo);
    if (lost || !res.completed)
        throw NumericsError("handoff geodesic left the reconstructed region while crossing a "
                            "conjugate zone");
    return unpack_through(res.y, n);
}

// Restarts a chart at rgrid[seed_ir]: every node is pushed through from its
// last reconstructed state (or from the boundary when the chart is fresh),
// the parallel frame is re-orthonormalized against the recovered metric, and
// the Jacobi data and curvature profile are conjugated into the new frame.
// The re-orthonormalized frame makes the determinant anchor vanish, so the
// resumed run carries sigma = 0.
Step2Result resume_chart(const ChartContext& ctx, const ChartField& chart,
                         const Step2Result* prev, int seed_ir, int last_ir, FieldStack& stack,
                         const CoverOptions& opts) {
    int n = chart.dim, nt = n - 1;
    long nodes = ctx.node_count();
    double r_seed = ctx.rgrid()[seed_ir];

    std::vector<Step2State> seeds(nodes);
    std::vector<Mat> frame_change(nodes), new_frames(nodes);
    for (long k = 0; k < nodes; ++k) {
        ThroughState s;
        double r_from;
        if (prev) {
            const RayReconstruction& ray = prev->rays[k];
            s.gamma = ray.gamma.back();
            s.frame = ray.frame.back();
            s.jacobi = ray.jacobi.back();
            s.djacobi = ray.djacobi.back();
            r_from = ray.r.back();
        } else {
            Step2State b = ctx.boundary_state(k);
            s.gamma = b.gamma;
            s.frame = b.frame;
            s.jacobi = b.jacobi;
            s.djacobi = b.djacobi;
            r_from = ctx.rgrid().front();
        }
        s = push_through(ctx, k, s, r_from, r_seed, stack, opts.step2.ode);

        double fv;
        Vec u;
        stack.reset_hints();
        if (!stack.eval(s.gamma, &fv, &u))
            throw NumericsError("handoff seed point fell outside the reconstructed region");
        double v = std::exp(fv);

        // Gram-Schmidt in the recovered metric v^-2 * euclidean, keeping the
        // velocity direction as the last column.
        Mat fr(n, n);
        Vec t = s.frame.col(nt);
        fr.col(nt) = t / t.norm() * v;
        for (int a = 0; a < nt; ++a) {
            Vec z = s.frame.col(a);
            z -= z.dot(fr.col(nt)) / (v * v) * fr.col(nt);
            for (int b = 0; b < a; ++b) z -= z.dot(fr.col(b)) / (v * v) * fr.col(b);
            fr.col(a) = z / z.norm() * v;
        }
        Mat mix = (s.frame.inverse() * fr).topLeftCorner(nt, nt);
        Mat mix_inv = mix.inverse();

        Step2State& seed = seeds[k];
        seed.gamma = s.gamma;
        seed.jacobi = mix_inv * s.jacobi;
        seed.djacobi = mix_inv * s.djacobi;
        seed.frame = fr;
        seed.f = fv;
        seed.dframe.assign(n, Mat());
        seed.dframe[nt] = transport_term(fr, fr, u);
        frame_change[k] = mix;
        new_frames[k] = fr;
    }

    auto slopes = transverse_slopes(Step2Runner::chart_axes(ctx), new_frames);
    for (long k = 0; k < nodes; ++k)
        for (int a = 0; a < nt; ++a) seeds[k].dframe[a] = slopes[k][a];

    ChartContext resumed = ctx.resumed(frame_change);
    return Step2Runner::run(resumed, seeds, std::vector<double>(nodes, 0.0), seed_ir, last_ir,
                            opts.step2);
}

}  // namespace

CoverResult step2_conjugate_cover(const std::vector<const ChartField*>& charts, double r_max,
                                  const CoverOptions& opts) {
    if (charts.empty()) throw UsageError("conjugate cover needs at least one chart");
    int n = charts[0]->dim;
    if (n < 3) throw UsageError("the conjugate cover runs on the closed system (dimension >= 3)");
    for (const ChartField* c : charts)
        if (c->dim != n) throw UsageError("conjugate cover charts must share the dimension");
    for (size_t i = 0; i < charts.size(); ++i)
        for (size_t j = i + 1; j < charts.size(); ++j)
            if (std::fabs(charts[i]->t0 - charts[j]->t0) < 1e-12)
                throw UsageError("conjugate cover charts must have distinct radii (equal radii "
                                 "share every conjugate point)");

    // All charts must extend the same central geodesic: compare the boundary
    // point and inward direction of the node closest to xhat = 0.
    auto central = [](const ChartField* c) -> const BoundaryNode& {
        long best = 0;
        double bn = std::numeric_limits<double>::infinity();
        for (long k = 0; k < c->node_count(); ++k) {
            double v = c->geom.nodes[k].xhat.norm();
            if (v < bn) {
                bn = v;
                best = k;
            }
        }
        return c->geom.nodes[best];
    };
    const BoundaryNode& ref = central(charts[0]);
    for (const ChartField* c : charts) {
        const BoundaryNode& nd = central(c);
        if ((nd.point - ref.point).norm() > 1e-6 || (nd.inward - ref.inward).norm() > 1e-6)
            throw UsageError("conjugate cover charts must share the central geodesic");
    }

    std::vector<ChartContext> ctxs;
    for (const ChartField* c : charts) ctxs.emplace_back(*c);
    std::vector<std::vector<Window>> windows;
    std::vector<double> steps;
    for (const ChartField* c : charts) {
        double dr = median_step(c->rgrid);
        steps.push_back(dr);
        windows.push_back(clear_windows(*c, opts.margin_steps * dr));
    }

    CoverResult out;
    out.r_max = r_max;
    FieldStack stack;
    std::vector<int> latest_run(charts.size(), -1);
    double frontier = 0.0;

    while (frontier < r_max - 1e-12) {
        if (static_cast<int>(out.runs.size()) >= opts.max_runs)
            throw NumericsError("conjugate cover did not reach the requested radius within the "
                                "run limit; the chart radii may share conjugate zones");
        int best_chart = -1, best_seed_ir = 0;
        double best_gain = 0.0, best_top = 0.0;
        for (size_t ci = 0; ci < charts.size(); ++ci) {
            const std::vector<double>& rg = charts[ci]->rgrid;
            for (const Window& w : windows[ci]) {
                double top = std::min(w.hi, r_max + opts.margin_steps * steps[ci]);
                if (top <= frontier + 0.5 * steps[ci]) continue;
                int seed_ir;
                if (out.runs.empty()) {
                    if (w.lo > 0.0) continue;
                    seed_ir = 0;
                } else {
                    double seed = w.lo + opts.seed_frac * (w.hi - w.lo);
                    double limit = frontier - opts.overlap_steps * steps[ci];
                    if (seed > limit) continue;
                    seed_ir = static_cast<int>(
                        std::lower_bound(rg.begin(), rg.end(), seed) - rg.begin());
                    while (seed_ir + 1 < static_cast<int>(rg.size()) && rg[seed_ir] < w.lo)
                        ++seed_ir;
                    if (rg[seed_ir] > limit) continue;
                }
                double gain = std::min(top, r_max) - frontier;
                if (gain > best_gain) {
                    best_gain = gain;
                    best_chart = static_cast<int>(ci);
                    best_seed_ir = seed_ir;
                    best_top = top;
                }
            }
        }
        if (best_chart < 0)
            throw NumericsError("conjugate cover stalled: no chart has a clear window seeded "
                                "inside the reconstructed region; try a different companion "
                                "radius");

        const ChartContext& ctx = ctxs[best_chart];
        const std::vector<double>& rg = charts[best_chart]->rgrid;
        int last_ir = static_cast<int>(
            std::lower_bound(rg.begin(), rg.end(), best_top) - rg.begin());
        last_ir = std::min(last_ir, static_cast<int>(rg.size()) - 1);

        CoverRun run;
        run.chart = best_chart;
        run.t0 = charts[best_chart]->t0;

        if (out.runs.empty()) {
            std::vector<Step2State> seeds;
            for (long k = 0; k < ctx.node_count(); ++k) seeds.push_back(ctx.boundary_state(k));
            run.result = Step2Runner::run(ctx, seeds, Step2Runner::chart_sigmas(ctx), 0, last_ir,
                                          opts.step2);
        } else {
            run.result = resume_chart(ctx, *charts[best_chart], latest_run[best_chart] < 0
                                                                   ? nullptr
                                                                   : &out.runs[latest_run[best_chart]].result,
                                      best_seed_ir, last_ir, stack, opts);
            // Agreement with the earlier reconstruction over the overlap.
            double worst = 0.0;
            for (const auto& ray : run.result.rays) {
                stack.reset_hints();
                for (size_t i = 0; i < ray.r.size(); ++i) {
                    if (ray.r[i] > frontier + 1e-12) break;
                    double fprev;
                    if (!stack.eval(ray.gamma[i], &fprev, nullptr)) continue;
                    double vprev = std::exp(fprev);
                    worst = std::max(worst, std::fabs(ray.v[i] - vprev) / vprev);
                }
            }
            run.overlap_max_rel = worst;
            out.overlap_worst = std::max(out.overlap_worst, worst);
        }

        double reach = run.result.common_reach();
        if (reach <= frontier + 0.5 * steps[best_chart])
            throw NumericsError("conjugate cover stalled: a resumed run made no progress past "
                                "the frontier");
        latest_run[best_chart] = static_cast<int>(out.runs.size());
        stack.add(ReconstructedField(run.result));
        out.runs.push_back(std::move(run));
        frontier = reach;
    }
    return out;
}

// ---------------------------------------------------------------------------
// Two-dimensional route

namespace {

// Node values on the Cauchy strip are affine in the free unknowns: the r=0
// row is pinned by the data and the r=1 row is eliminated through the
// one-sided derivative stencil, leaving the rows at depth >= 2 free.
struct AffineNode {
    double c = 0.0, a = 0.0;
    long var = -1;
};

}  // namespace

CauchySolution solve_curvature_cauchy(const ChartField& chart, const std::vector<double>& f_sigma,
                                      const std::vector<double>& df_sigma,
                                      const CauchyOptions& opts) {
    if (chart.dim != 2)
        throw UsageError("the scalar-curvature Cauchy continuation is the planar route");
    long K = chart.node_count();
    if (static_cast<long>(f_sigma.size()) != K || static_cast<long>(df_sigma.size()) != K)
        throw UsageError("Cauchy data must supply one value and one radial derivative per node");
    if (K < 3) throw UsageError("the Cauchy strip needs at least three transverse nodes");
    const std::vector<double>& rg = chart.rgrid;
    const std::vector<double>& xh = chart.geom.axes[0];

    double depth = opts.depth_frac * chart.t0;
    long I = 0;
    while (I < static_cast<long>(rg.size()) && rg[I] <= depth + 1e-12) ++I;
    if (I < 4) throw UsageError("the Cauchy strip is too shallow for the difference stencils");

    std::vector<std::vector<double>> phi(K, std::vector<double>(I));
    for (long k = 0; k < K; ++k)
        for (long i = 0; i < I; ++i) {
            double g11 = chart.ghat[k][i](0, 0);
            if (!(g11 > 0.0))
                throw NumericsError("chart metric degenerates inside the Cauchy strip");
            phi[k][i] = std::sqrt(g11);
        }
    ChartRicci ricci(chart);
    std::vector<std::vector<double>> half_scal(K, std::vector<double>(I));
    for (long k = 0; k < K; ++k) {
        Vec xk(1);
        xk(0) = xh[k];
        for (long i = 0; i < I; ++i) half_scal[k][i] = 0.5 * ricci.scal(xk, rg[i]);
    }

    long nvar = K * (I - 2);
    auto vid = [&](long k, long i) { return k * (I - 2) + (i - 2); };
    std::vector<AffineNode> aff(K * I);
    {
        double w1[3], w2[3];
        quad_weights(&rg[0], rg[0], w1, w2);
        for (long k = 0; k < K; ++k) {
            aff[k * I + 0] = {f_sigma[k], 0.0, -1};
            aff[k * I + 1] = {(df_sigma[k] - w1[0] * f_sigma[k]) / w1[1], -w1[2] / w1[1],
                              vid(k, 2)};
            for (long i = 2; i < I; ++i) aff[k * I + i] = {0.0, 1.0, vid(k, i)};
        }
    }

    using Trip = Eigen::Triplet<double>;
    std::vector<Trip> eq_t, pen_t;
    std::vector<double> eq_b, pen_b;
    auto add = [&](std::vector<Trip>& ts, std::vector<double>& bs, long k, long i, double coef) {
        const AffineNode& af = aff[k * I + i];
        long row = static_cast<long>(bs.size()) - 1;
        if (af.var >= 0 && af.a != 0.0) ts.emplace_back(row, af.var, coef * af.a);
        bs.back() -= coef * af.c;
        (void)row;
    };

    for (long k = 1; k + 1 < K; ++k)
        for (long i = 1; i + 1 < I; ++i) {
            double wx1[3], wx2[3], wr1[3], wr2[3];
            quad_weights(&xh[k - 1], xh[k], wx1, wx2);
            quad_weights(&rg[i - 1], rg[i], wr1, wr2);
            double p = phi[k][i];
            double px = wx1[0] * phi[k - 1][i] + wx1[1] * phi[k][i] + wx1[2] * phi[k + 1][i];
            double pr = wr1[0] * phi[k][i - 1] + wr1[1] * phi[k][i] + wr1[2] * phi[k][i + 1];
            double cxx = 1.0 / (p * p), cx = -px / (p * p * p), cr = pr / p;
            eq_b.push_back(half_scal[k][i]);
            for (int m = 0; m < 3; ++m) {
                add(eq_t, eq_b, k - 1 + m, i, cxx * wx2[m] + cx * wx1[m]);
                add(eq_t, eq_b, k, i - 1 + m, wr2[m] + cr * wr1[m]);
            }
        }
    long rows_eq = static_cast<long>(eq_b.size());

    for (long k = 1; k + 1 < K; ++k)
        for (long i = 0; i < I; ++i) {
            double wx1[3], wx2[3];
            quad_weights(&xh[k - 1], xh[k], wx1, wx2);
            pen_b.push_back(0.0);
            for (int m = 0; m < 3; ++m) add(pen_t, pen_b, k - 1 + m, i, wx2[m]);
        }
    for (long k = 0; k < K; ++k)
        for (long i = 1; i + 1 < I; ++i) {
            double wr1[3], wr2[3];
            quad_weights(&rg[i - 1], rg[i], wr1, wr2);
            pen_b.push_back(0.0);
            for (int m = 0; m < 3; ++m) add(pen_t, pen_b, k, i - 1 + m, wr2[m]);
        }
    for (long k = 1; k + 1 < K; ++k)
        for (long i = 1; i + 1 < I; ++i) {
            double wx1[3], wx2[3], wr1[3], wr2[3];
            quad_weights(&xh[k - 1], xh[k], wx1, wx2);
            quad_weights(&rg[i - 1], rg[i], wr1, wr2);
            pen_b.push_back(0.0);
            for (int m = 0; m < 3; ++m)
                for (int mm = 0; mm < 3; ++mm)
                    add(pen_t, pen_b, k - 1 + m, i - 1 + mm, wx1[m] * wr1[mm]);
        }

    Eigen::SparseMatrix<double> Aeq(rows_eq, nvar), Apen(static_cast<long>(pen_b.size()), nvar);
    Aeq.setFromTriplets(eq_t.begin(), eq_t.end());
    Apen.setFromTriplets(pen_t.begin(), pen_t.end());
    Vec beq = Eigen::Map<Vec>(eq_b.data(), rows_eq);
    Vec bpen = Eigen::Map<Vec>(pen_b.data(), static_cast<long>(pen_b.size()));
    Eigen::SparseMatrix<double> ata_eq = Eigen::SparseMatrix<double>(Aeq.transpose()) * Aeq;
    Eigen::SparseMatrix<double> ata_pen = Eigen::SparseMatrix<double>(Apen.transpose()) * Apen;
    Vec rhs_eq = Aeq.transpose() * beq, rhs_pen = Apen.transpose() * bpen;

    std::vector<double> lambdas = opts.lambdas;
    if (lambdas.empty())
        for (double l = 1e-2; l >= 0.99e-12; l *= 0.1) lambdas.push_back(l);

    double best_rms = std::numeric_limits<double>::infinity(), best_lambda = 0.0;
    for (double lambda : lambdas) {
        Eigen::SparseMatrix<double> M = ata_eq + lambda * ata_pen;
        Eigen::SimplicialLDLT<Eigen::SparseMatrix<double>> solver(M);
        if (solver.info() != Eigen::Success) continue;
        Vec x = solver.solve(rhs_eq + lambda * rhs_pen);
        double rms = std::sqrt((Aeq * x - beq).squaredNorm() / rows_eq);
        if (rms < best_rms) {
            best_rms = rms;
            best_lambda = lambda;
        }
        if (rms <= opts.residual_tol) {
            CauchySolution sol;
            sol.rsub.assign(rg.begin(), rg.begin() + I);
            sol.f.assign(K, std::vector<double>(I));
            for (long k = 0; k < K; ++k)
                for (long i = 0; i < I; ++i) {
                    const AffineNode& af = aff[k * I + i];
                    sol.f[k][i] = af.c + (af.var >= 0 ? af.a * x(af.var) : 0.0);
                }
            sol.lambda = lambda;
            sol.residual_rms = rms;
            return sol;
        }
    }
    throw InstabilityError("Cauchy continuation cannot meet the curvature-equation residual "
                           "target (best rms " +
                           std::to_string(best_rms) + " at lambda " +
                           std::to_string(best_lambda) +
                           "); the strip is too deep for stable continuation");
}

Step2Result step2_2d(const ChartField& chart, const CauchyOptions& copts,
                     const Step2Options& opts) {
    std::vector<double> f0, df0;
    for (long k = 0; k < chart.node_count(); ++k) {
        const BoundaryNode& nd = chart.geom.nodes[k];
        f0.push_back(std::log(nd.v0));
        df0.push_back((nd.grad_v0 / nd.v0).dot(nd.inward));
    }
    return step2_2d(chart, f0, df0, copts, opts);
}

Step2Result step2_2d(const ChartField& chart, const std::vector<double>& f_sigma,
                     const std::vector<double>& df_sigma, const CauchyOptions& copts,
                     const Step2Options& opts) {
    if (chart.dim != 2) throw UsageError("step2_2d runs on planar charts only");
    CauchySolution sol = solve_curvature_cauchy(chart, f_sigma, df_sigma, copts);
    long K = chart.node_count();
    long I = static_cast<long>(sol.rsub.size());
    const std::vector<double>& xh = chart.geom.axes[0];

    // Chart derivatives of the continued log-speed: transverse by splines
    // across the nodes per depth row, radial by the per-node depth spline.
    std::vector<std::vector<double>> fx(K, std::vector<double>(I));
    for (long i = 0; i < I; ++i) {
        std::vector<double> row(K);
        for (long k = 0; k < K; ++k) row[k] = sol.f[k][i];
        CubicSpline sp(xh, row);
        for (long k = 0; k < K; ++k) fx[k][i] = sp.deriv(xh[k]);
    }
    std::vector<CubicSpline> fsp(K), fxsp(K);
    for (long k = 0; k < K; ++k) {
        fsp[k] = CubicSpline(sol.rsub, sol.f[k]);
        fxsp[k] = CubicSpline(sol.rsub, fx[k]);
    }

    ChartContext ctx(chart);
    Step2Result out;
    out.dim = 2;
    out.t0 = chart.t0;
    out.r_begin = sol.rsub.front();
    out.axes = chart.geom.axes;
    out.cauchy_lambda = sol.lambda;
    out.cauchy_residual = sol.residual_rms;
    for (long k = 0; k < K; ++k) out.xhat.push_back(chart.geom.nodes[k].xhat);
    out.rays.resize(K);

    run_threaded(K, opts.threads, [&](long k) {
        const BoundaryNode& nd = chart.geom.nodes[k];
        double sigma_k = 2.0 * f_sigma[k] - std::log(std::fabs(nd.frame.determinant()));
        RayReconstruction& ray = out.rays[k];
        ray.reach = sol.rsub.front();

        // Reduced state: gamma, scalar Jacobi pair, frame, log v.
        Vec y(9);
        int at = 0;
        y(at++) = nd.point(0);
        y(at++) = nd.point(1);
        y(at++) = 1.0;
        y(at++) = -chart.s_t0[k](0, 0);
        pack(nd.frame, y, at);
        y(at++) = f_sigma[k];

        bool poison = false;
        auto gradient = [&](double r, const Vec& yv, Vec* u) -> bool {
            double j = yv(2);
            Mat F(2, 2);
            int p = 4;
            unpack(yv, p, F);
            if (std::fabs(j) * opts.cond_max < 1.0 || cond2(F) > opts.cond_max) return false;
            Vec w(2);
            w(0) = fxsp[k].value(r) / j;
            w(1) = fsp[k].deriv(r);
            *u = F.inverse().transpose() * w;
            return true;
        };
        OdeRhs rhs = [&](double r, const Vec& yv, Vec& dydt) {
            dydt.setZero(9);
            if (poison || !yv.allFinite()) {
                poison = true;
                return;
            }
            Vec u;
            if (!gradient(r, yv, &u)) {
                poison = true;
                return;
            }
            Mat F(2, 2);
            int p = 4;
            unpack(yv, p, F);
            Mat dF = transport_term(F, F, u);
            dydt(0) = F(0, 1);
            dydt(1) = F(1, 1);
            dydt(2) = yv(3);
            dydt(3) = -ctx.curv_at(k, r)(0, 0) * yv(2);
            p = 4;
            pack(dF, dydt, p);
            dydt(8) = u.dot(F.col(1));
        };

        auto record = [&](double r, const Vec& yv) -> bool {
            Vec u;
            if (!gradient(r, yv, &u)) {
                ray.hit_conjugate = true;
                return false;
            }
            Mat F(2, 2);
            int p = 4;
            unpack(yv, p, F);
            double fdet = det_route_f(sigma_k, F, 2);
            ray.r.push_back(r);
            ray.gamma.push_back(yv.head(2));
            ray.v.push_back(std::exp(fsp[k].value(r)));
            ray.f_ode.push_back(yv(8));
            ray.frame.push_back(F);
            ray.jacobi.push_back(Mat::Constant(1, 1, yv(2)));
            ray.djacobi.push_back(Mat::Constant(1, 1, yv(3)));
            ray.grad_f.push_back(u);
            ray.drift = std::max(ray.drift, std::fabs(yv(8) - fdet));
            ray.reach = r;
            return true;
        };
        if (!record(sol.rsub.front(), y)) return;

        OdeOptions oo = opts.ode;
        for (long i = 0; i + 1 < I; ++i) {
            OdeResult res = integrate_adaptive(rhs, sol.rsub[i], sol.rsub[i + 1], y, oo);
            if (poison || !res.completed) {
                ray.hit_conjugate = true;
                break;
            }
            y = res.y;
            oo.h_init = res.h_next;
            if (!record(sol.rsub[i + 1], y)) break;
        }
    });
    return out;
}

Step2Result step2_integrate_stepping(const ChartField& chart, double step,
                                     const Step2Options& opts) {
    if (chart.dim < 2) throw UsageError("stepping reconstruction needs dimension >= 2");
    ChartContext ctx(chart);
    int n = ctx.n_;
    long nodes = ctx.node_count();
    const std::vector<double>& rg = ctx.rgrid_;

    // Forward-Euler substep sequence through the chart radii; landing points
    // keep their rgrid index for recording.
    std::vector<double> rseq;
    std::vector<long> landing;
    for (size_t ir = 0; ir + 1 < rg.size(); ++ir) {
        landing.push_back(static_cast<long>(rseq.size()));
        rseq.push_back(rg[ir]);
        if (step > 0.0) {
            int nsub = std::max(1, static_cast<int>(std::ceil((rg[ir + 1] - rg[ir]) / step)));
            for (int s = 1; s < nsub; ++s)
                rseq.push_back(rg[ir] + (rg[ir + 1] - rg[ir]) * s / nsub);
        }
    }
    landing.push_back(static_cast<long>(rseq.size()));
    rseq.push_back(rg.back());

    Step2Result out;
    out.dim = n;
    out.t0 = ctx.t0_;
    out.r_begin = rg.front();
    out.axes = ctx.axes_;
    out.xhat = ctx.xhat_;
    out.rays.resize(nodes);
    for (auto& ray : out.rays) ray.reach = rg.front();
    const std::vector<double>& sigma = ctx.sigma_;

    // Forward Euler on the same closed per-node system the adaptive route
    // integrates; each ray marches independently.
    run_threaded(nodes, opts.threads, [&](long k) {
        RayReconstruction& ray = out.rays[k];
        Step2State st = ctx.boundary_state(k);
        double det_j0 = std::fabs(st.jacobi.determinant());
        double det_f0 = std::fabs(st.frame.determinant());
        size_t next_landing = 0;
        for (size_t p = 0; p < rseq.size(); ++p) {
            double r = rseq[p];
            double fdet = det_route_f(sigma[k], st.frame, n);
            Step2Derivs d;
            if (!std::isfinite(fdet) ||
                std::fabs(st.jacobi.determinant()) * opts.cond_max < det_j0 ||
                std::fabs(st.frame.determinant()) * opts.cond_max < det_f0) {
                ray.hit_conjugate = true;
                break;
            }
            try {
                d = ctx.rhs(k, r, st, opts.cond_max);
            } catch (const NumericsError&) {
                ray.hit_conjugate = true;
                break;
            }
            if (next_landing < landing.size() && static_cast<long>(p) == landing[next_landing]) {
                ray.r.push_back(r);
                ray.gamma.push_back(st.gamma);
                ray.v.push_back(std::exp(fdet));
                ray.f_ode.push_back(st.f);
                ray.frame.push_back(st.frame);
                ray.jacobi.push_back(st.jacobi);
                ray.djacobi.push_back(st.djacobi);
                ray.grad_f.push_back(d.grad_f);
                ray.drift = std::max(ray.drift, std::fabs(st.f - fdet));
                ray.reach = r;
                ++next_landing;
            }
            if (p + 1 == rseq.size()) break;
            double h = rseq[p + 1] - r;
            st.gamma += h * d.dot.gamma;
            st.jacobi += h * d.dot.jacobi;
            st.djacobi += h * d.dot.djacobi;
            st.frame += h * d.dot.frame;
            for (int a = 0; a < n; ++a) st.dframe[a] += h * d.dot.dframe[a];
            st.f += h * d.dot.f;
        }
    });
    return out;
}

}  // namespace dixlab
