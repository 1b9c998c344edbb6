#include "dixlab/step1.hpp"

#include <algorithm>
#include <atomic>
#include <limits>
#include <mutex>
#include <thread>

namespace dixlab {

void inverse_derivatives(const Mat& s, const Mat& ds, const Mat& d2s, const Mat& d3s,
                         Mat* V0, Mat* V1, Mat* V2, Mat* V3) {
    Mat A = s.inverse();
    Mat A1 = A * ds * A;      // -V1
    Mat A2 = A * d2s * A;
    *V0 = A;
    *V1 = -A1;
    *V2 = 2.0 * A1 * ds * A - A2;
    *V3 = -A * d3s * A + 3.0 * (A2 * ds * A + A1 * d2s * A) - 6.0 * A1 * ds * A1;
}

namespace {

struct VNode {
    double t = 0.0;
    Mat V0, V1, V2, V3;
    bool alive = false;
};

// Integration family over the alive nodes.  The state vector concatenates
// V0..V3 per alive node; the diagonal coupling T(rho) = V3(rho, rho) comes
// from Lagrange interpolation over the nearest alive nodes in t.
class Family {
public:
    Family(int m, std::vector<VNode>* nodes, double reach)
        : m_(m), nodes_(nodes), reach_(reach), T_(m, m), S0_(m, m), S1_(m, m), S2_(m, m),
          S3_(m, m) {}

    void rebuild_alive() {
        alive_.clear();
        for (size_t i = 0; i < nodes_->size(); ++i)
            if ((*nodes_)[i].alive) alive_.push_back(static_cast<int>(i));
    }
    const std::vector<int>& alive() const { return alive_; }
    int state_size() const { return static_cast<int>(alive_.size()) * 4 * m_ * m_; }

    Vec pack_state() const {
        Vec y(state_size());
        int at = 0;
        for (int id : alive_) {
            const VNode& nd = (*nodes_)[id];
            pack(nd.V0, y, at);
            pack(nd.V1, y, at);
            pack(nd.V2, y, at);
            pack(nd.V3, y, at);
        }
        return y;
    }
    void unpack_state(const Vec& y) {
        int at = 0;
        for (int id : alive_) {
            VNode& nd = (*nodes_)[id];
            unpack(y, at, nd.V0);
            unpack(y, at, nd.V1);
            unpack(y, at, nd.V2);
            unpack(y, at, nd.V3);
        }
    }

    // Distance from rho to the nearest alive node in t.
    double nearest_gap(double rho) const {
        double best = std::numeric_limits<double>::infinity();
        for (int id : alive_) best = std::min(best, std::fabs((*nodes_)[id].t - rho));
        return best;
    }

    // Indices (into alive_) of the <=4 nodes nearest to rho.  The members must
    // form one local cluster: a node whose inclusion would stretch the stencil
    // span past twice the reach is dropped, along with everything farther out.
    // Without that cap, a stencil at the edge of a thinned-out region can pair
    // a few near nodes with one far across a gap; its Lagrange weight is tiny
    // but its V3 can be near the kill threshold, and the product poisons T.
    void stencil(double rho, int* idx, int* count) const {
        int na = static_cast<int>(alive_.size());
        // alive_ is ascending in t; find the insertion point and expand.
        int lo = 0, hi = na;
        while (lo < hi) {
            int mid = (lo + hi) / 2;
            if ((*nodes_)[alive_[mid]].t < rho)
                lo = mid + 1;
            else
                hi = mid;
        }
        int a = lo - 1, b = lo;
        *count = 0;
        double tmin = 0.0, tmax = 0.0;
        while (*count < 4 && (a >= 0 || b < na)) {
            bool take_a;
            if (a < 0)
                take_a = false;
            else if (b >= na)
                take_a = true;
            else
                take_a = rho - (*nodes_)[alive_[a]].t <= (*nodes_)[alive_[b]].t - rho;
            double tc = (*nodes_)[alive_[take_a ? a : b]].t;
            if (*count == 0) {
                tmin = tmax = tc;
            } else if (std::max(tmax, tc) - std::min(tmin, tc) > 2.0 * reach_) {
                break;
            } else {
                tmin = std::min(tmin, tc);
                tmax = std::max(tmax, tc);
            }
            idx[(*count)++] = take_a ? a-- : b++;
        }
    }

    // T(rho) from the current stage values for V3 held in vals (aligned with
    // alive_).
    Mat diag_T(double rho, const std::vector<Mat>& V3s) const {
        int idx[4], count = 0;
        stencil(rho, idx, &count);
        if (count == 0) throw NumericsError("diagonal stencil empty");
        Mat T = Mat::Zero(m_, m_);
        for (int k = 0; k < count; ++k) {
            double tk = (*nodes_)[alive_[idx[k]]].t;
            double w = 1.0;
            for (int l = 0; l < count; ++l) {
                if (l == k) continue;
                double tl = (*nodes_)[alive_[idx[l]]].t;
                w *= (rho - tl) / (tk - tl);
            }
            T += w * V3s[idx[k]];
        }
        return T;
    }

    // Hot path: mapped views over the packed state, no per-call allocation.
    void rhs(double rho, const Vec& y, Vec& dy) const {
        using CMap = Eigen::Map<const Mat>;
        using MMap = Eigen::Map<Mat>;
        int na = static_cast<int>(alive_.size());
        int mm = m_ * m_;
        dy.resize(4 * na * mm);

        int idx[4], count = 0;
        stencil(rho, idx, &count);
        if (count == 0) throw NumericsError("diagonal stencil empty");
        T_.setZero(m_, m_);
        for (int k = 0; k < count; ++k) {
            double tk = (*nodes_)[alive_[idx[k]]].t;
            double w = 1.0;
            for (int l = 0; l < count; ++l) {
                if (l == k) continue;
                double tl = (*nodes_)[alive_[idx[l]]].t;
                w *= (rho - tl) / (tk - tl);
            }
            T_ += w * CMap(y.data() + idx[k] * 4 * mm + 3 * mm, m_, m_);
        }

        for (int k = 0; k < na; ++k) {
            const double* base = y.data() + k * 4 * mm;
            CMap V0(base, m_, m_), V1(base + mm, m_, m_), V2(base + 2 * mm, m_, m_),
                V3(base + 3 * mm, m_, m_);
            double* dbase = dy.data() + k * 4 * mm;
            MMap d0(dbase, m_, m_), d1(dbase + mm, m_, m_), d2(dbase + 2 * mm, m_, m_),
                d3(dbase + 3 * mm, m_, m_);
            S0_.noalias() = T_ * V0;
            S1_.noalias() = T_ * V1;
            S2_.noalias() = T_ * V2;
            S3_.noalias() = T_ * V3;
            d0.noalias() = -0.5 * (V0 * S0_);
            d0.diagonal().array() -= 1.0;
            d1.noalias() = -0.5 * (V1 * S0_ + V0 * S1_);
            d2.noalias() = -0.5 * (V2 * S0_ + 2.0 * V1 * S1_ + V0 * S2_);
            d3.noalias() = -0.5 * (V3 * S0_ + 3.0 * V2 * S1_ + 3.0 * V1 * S2_ + V0 * S3_);
        }
    }

    double reach() const { return reach_; }

private:
    int m_;
    std::vector<VNode>* nodes_;
    double reach_;
    std::vector<int> alive_;
    mutable Mat T_, S0_, S1_, S2_, S3_;
};

Mat spline_block(const std::vector<CubicSpline>& spl, int m, double rho) {
    Mat R(m, m);
    for (int a = 0; a < m; ++a)
        for (int b = 0; b < m; ++b) R(a, b) = spl[a * m + b].value(rho);
    return R;
}

// Propagates the Jacobi solution X'' = -rhat X with its three t-derivative
// variations from 0 to r_stop; initial data (I, -s), (0, -ds), (0, -d2s),
// (0, -d3s).  Returns the B/A blocks for the shape-operator algebra.
JacobiTDerivs propagate_jacobi(const std::vector<CubicSpline>& curv_spl, int m,
                               const ShapeSample& smp, double r_stop, const OdeOptions& ode) {
    int mm = m * m;
    Vec y0(8 * mm);
    {
        int at = 0;
        Mat I = Mat::Identity(m, m), Z = Mat::Zero(m, m);
        pack(I, y0, at);
        pack((-smp.s).eval(), y0, at);
        pack(Z, y0, at);
        pack((-smp.ds).eval(), y0, at);
        pack(Z, y0, at);
        pack((-smp.d2s).eval(), y0, at);
        pack(Z, y0, at);
        pack((-smp.d3s).eval(), y0, at);
    }
    auto rhs = [&](double rho, const Vec& y, Vec& dy) {
        Mat R = spline_block(curv_spl, m, rho);
        dy.resize(8 * mm);
        for (int blk = 0; blk < 4; ++blk) {
            int at = 2 * blk * mm;
            Mat X(m, m), dX(m, m);
            unpack(y, at, X);
            unpack(y, at, dX);
            at = 2 * blk * mm;
            pack(dX, dy, at);
            pack((-R * X).eval(), dy, at);
        }
    };
    OdeResult res = integrate_adaptive(rhs, 0.0, r_stop, y0, ode);
    if (!res.completed) throw NumericsError("jacobi propagation failed");
    JacobiTDerivs jd;
    int at = 0;
    Mat X(m, m), dX(m, m);
    auto take = [&](Mat* B, Mat* A) {
        unpack(res.y, at, X);
        unpack(res.y, at, dX);
        *B = X;
        *A = -dX;
    };
    take(&jd.B, &jd.A);
    take(&jd.Bt, &jd.At);
    take(&jd.Btt, &jd.Att);
    take(&jd.Bttt, &jd.Attt);
    return jd;
}

}  // namespace

Step1Result step1_recover_profile(const std::vector<ShapeSample>& data, double t0,
                                  const std::vector<double>& rgrid,
                                  const Step1Options& opts) {
    if (data.empty()) throw UsageError("step1: no samples");
    int m = data.front().s.rows();

    std::vector<VNode> nodes;
    for (const ShapeSample& smp : data) {
        if (!smp.valid) continue;
        VNode nd;
        nd.t = smp.t;
        inverse_derivatives(smp.s, smp.ds, smp.d2s, smp.d3s, &nd.V0, &nd.V1, &nd.V2, &nd.V3);
        nd.alive = nd.V3.allFinite() && nd.V3.norm() < opts.blowup_norm;
        nodes.push_back(std::move(nd));
    }
    if (nodes.size() < 4) throw NumericsError("step1: fewer than 4 usable t nodes");

    std::vector<double> gaps;
    for (size_t i = 1; i < nodes.size(); ++i) gaps.push_back(nodes[i].t - nodes[i - 1].t);
    double dt_med = median(gaps);
    double reach = opts.stencil_reach * dt_med;

    Step1Result out;
    out.rgrid = rgrid;
    out.curv.assign(rgrid.size(), Mat::Zero(m, m));
    out.covered.assign(rgrid.size(), 0);

    Family fam(m, &nodes, reach);
    fam.rebuild_alive();

    OdeOptions ode = opts.ode;
    ode.h_min = opts.step_frac_min * t0;

    double r_cur = 0.0;
    double r_begin = 0.0;
    size_t ip = 0;
    Vec y = fam.pack_state();

    auto extract_here = [&](double rho) {
        if (fam.nearest_gap(rho) > reach) return;
        fam.unpack_state(y);
        std::vector<Mat> V3s;
        for (int id : fam.alive()) V3s.push_back(nodes[id].V3);
        // alive() holds node ids; diag_T indexes into alive order.
        Mat T = fam.diag_T(rho, V3s);
        // Find the rgrid slot(s) matching rho.
        for (size_t q = 0; q < rgrid.size(); ++q)
            if (std::fabs(rgrid[q] - rho) < 1e-12 * std::max(1.0, t0)) {
                out.curv[q] = 0.5 * T;
                out.covered[q] = 1;
            }
    };

    int guard = 0;
    while (true) {
        if (++guard > 10000) throw NumericsError("step1: iteration guard tripped");
        Step1Interval iv;
        iv.r_begin = r_begin;
        iv.nodes_alive = static_cast<int>(fam.alive().size());

        bool stalled = false;
        double r_stall = r_cur;
        double h_scale = dt_med;

        while (ip < rgrid.size() && !stalled) {
            double rp = rgrid[ip];
            if (rp <= r_cur + 1e-12 * std::max(1.0, t0)) {
                extract_here(r_cur);
                ++ip;
                continue;
            }
            // March toward rp, absorbing individual node deaths.
            while (true) {
                std::vector<int> kills;
                bool reach_lost = false;
                auto observer = [&](double rho, const Vec& ys, double) {
                    int mm = m * m;
                    int at = 0;
                    kills.clear();
                    for (size_t k = 0; k < fam.alive().size(); ++k) {
                        at = static_cast<int>(k) * 4 * mm + 3 * mm;
                        Mat V3(m, m);
                        unpack(ys, at, V3);
                        if (!V3.allFinite() || V3.norm() > opts.blowup_norm)
                            kills.push_back(fam.alive()[k]);
                    }
                    if (!kills.empty()) return StepVerdict::halt;
                    double gap = std::numeric_limits<double>::infinity();
                    for (int id : fam.alive())
                        if (std::find(kills.begin(), kills.end(), id) == kills.end())
                            gap = std::min(gap, std::fabs(nodes[id].t - rho));
                    if (gap > fam.reach()) {
                        reach_lost = true;
                        return StepVerdict::halt;
                    }
                    return StepVerdict::proceed;
                };
                auto rhs = [&fam](double rho, const Vec& ys, Vec& dys) { fam.rhs(rho, ys, dys); };
                OdeResult res = integrate_adaptive(rhs, r_cur, rp, y, ode, observer);
                r_cur = res.t;
                y = res.y;
                if (res.h_next != 0.0) ode.h_init = std::abs(res.h_next);
                if (res.h_last != 0.0) h_scale = std::abs(res.h_last);

                if (res.completed) break;
                if (res.halted && !kills.empty() && !reach_lost) {
                    fam.unpack_state(y);
                    for (int id : kills) nodes[id].alive = false;
                    fam.rebuild_alive();
                    if (fam.alive().empty()) {
                        stalled = true;
                        r_stall = r_cur;
                        break;
                    }
                    y = fam.pack_state();
                    continue;
                }
                // Reach lost or step underflow: the interval is over.
                stalled = true;
                r_stall = r_cur;
                break;
            }
            if (stalled) break;

            extract_here(r_cur);
            ++ip;

            // Retire nodes that fell behind the diagonal.
            fam.unpack_state(y);
            bool retired = false;
            for (VNode& nd : nodes)
                if (nd.alive && nd.t + opts.subdiag_margin * dt_med < r_cur) {
                    nd.alive = false;
                    retired = true;
                }
            if (retired) {
                fam.rebuild_alive();
                if (fam.alive().empty()) {
                    stalled = true;
                    r_stall = r_cur;
                    break;
                }
                y = fam.pack_state();
            }
        }

        if (!stalled) {
            iv.r_end = r_cur;
            out.intervals.push_back(iv);
            break;  // all rgrid points visited
        }

        iv.r_end = r_stall;
        out.intervals.push_back(iv);

        // Restart below the stall radius.  The floor on the pullback matters:
        // the last extractions before a stall lean on nodes that were born near
        // the blowup threshold, and their states carry the integration noise of
        // that near-blowup stretch.  Rewinding past the stencil reach lets the
        // restarted family re-extract those points from freshly propagated
        // states instead.
        if (out.restarts >= opts.max_restarts)
            throw NumericsError("step1: restart limit reached at r=" + std::to_string(r_stall));
        double pull = std::max(opts.pullback_steps * h_scale,
                               (opts.stencil_reach + 1.5) * dt_med);
        double t1 = r_stall - pull;
        if (t1 <= r_begin + 10.0 * ode.h_min)
            throw NumericsError("step1: no progress at r=" + std::to_string(r_stall));

        // Curvature spline over the covered prefix.
        std::vector<double> rs;
        std::vector<Mat> cs;
        for (size_t q = 0; q < rgrid.size(); ++q)
            if (out.covered[q] && rgrid[q] <= r_stall + 1e-12) {
                rs.push_back(rgrid[q]);
                cs.push_back(out.curv[q]);
            }
        if (rs.size() < 4) throw NumericsError("step1: restart without recovered prefix");
        std::vector<CubicSpline> spl;
        std::vector<double> comp(rs.size());
        for (int a = 0; a < m; ++a)
            for (int b = 0; b < m; ++b) {
                for (size_t q = 0; q < rs.size(); ++q) comp[q] = cs[q](a, b);
                spl.push_back(CubicSpline(rs, comp));
            }

        int alive_after = 0;
        size_t di = 0;
        for (VNode& nd : nodes) nd.alive = false;
        for (const ShapeSample& smp : data) {
            if (!smp.valid) continue;
            VNode& nd = nodes[di++];
            if (nd.t <= t1 - opts.subdiag_margin * dt_med) continue;
            ShapeSample at1;
            JacobiTDerivs jd = propagate_jacobi(spl, m, smp, t1, opts.ode);
            if (!shape_from_jacobi(jd, 1e-12, opts.cond_max, &at1)) continue;
            inverse_derivatives(at1.s, at1.ds, at1.d2s, at1.d3s, &nd.V0, &nd.V1, &nd.V2, &nd.V3);
            if (!nd.V3.allFinite() || nd.V3.norm() > 0.5 * opts.blowup_norm) continue;
            nd.alive = true;
            ++alive_after;
        }
        if (alive_after < 4)
            throw NumericsError("step1: restart left fewer than 4 nodes at r=" +
                                std::to_string(t1));
        fam.rebuild_alive();
        y = fam.pack_state();
        ++out.restarts;
        r_cur = t1;
        r_begin = t1;
        ode.h_init = 0.0;
        // Re-extract points in the overwrite window [t1, r_stall].
        while (ip > 0 && rgrid[ip - 1] > t1) --ip;
    }

    return out;
}

ChartField assemble_chart(const SampleSet& data, const std::vector<double>& rgrid,
                          const AssembleOptions& opts) {
    const ChartGeometry& geom = data.geom;
    int n = geom.dim;
    int m = n - 1;
    double t0 = geom.t0;
    int it0 = data.t_index(t0);
    if (it0 < 0) throw UsageError("assemble_chart: tgrid lacks t0");

    ChartField chart;
    chart.dim = n;
    chart.t0 = t0;
    chart.geom = geom;
    chart.rgrid = rgrid;
    long nn = geom.node_count();
    chart.curv.resize(nn);
    chart.jacobi.resize(nn);
    chart.ghat.resize(nn);
    chart.conjugate_radii.resize(nn);
    chart.s_t0.resize(nn);
    chart.profiles.resize(nn);

    std::atomic<bool> failed{false};
    std::string fail_msg;
    std::mutex fail_mx;

    auto work = [&](long k) {
        try {
            const std::vector<ShapeSample>& row = data.samples[k];
            if (!row[it0].valid) throw NumericsError("node lacks a valid sample at t0");
            Step1Result prof = step1_recover_profile(row, t0, rgrid, opts.step1);
            if (!prof.fully_covered())
                throw NumericsError("curvature profile has gaps");

            // Splines of the recovered curvature.
            std::vector<CubicSpline> spl;
            std::vector<double> comp(rgrid.size());
            for (int a = 0; a < m; ++a)
                for (int b = 0; b < m; ++b) {
                    for (size_t q = 0; q < rgrid.size(); ++q) comp[q] = prof.curv[q](a, b);
                    spl.push_back(CubicSpline(rgrid, comp));
                }

            // Chart Jacobi from the boundary: X(0) = I, X'(0) = -s(t0 data).
            int mm = m * m;
            Vec y0(2 * mm);
            {
                int at = 0;
                Mat I = Mat::Identity(m, m);
                pack(I, y0, at);
                pack((-row[it0].s).eval(), y0, at);
            }
            auto rhs = [&](double rho, const Vec& ys, Vec& dys) {
                Mat R = spline_block(spl, m, rho);
                Mat X(m, m), dX(m, m);
                int at = 0;
                unpack(ys, at, X);
                unpack(ys, at, dX);
                dys.resize(2 * mm);
                at = 0;
                pack(dX, dys, at);
                pack((-R * X).eval(), dys, at);
            };
            std::vector<Mat> jrow(rgrid.size());
            std::vector<Vec> states(rgrid.size());
            integrate_sampled(rhs, 0.0, rgrid, y0, opts.step1.ode,
                              [&](int idx, double, const Vec& ys) {
                                  Mat X(m, m);
                                  int at = 0;
                                  unpack(ys, at, X);
                                  jrow[idx] = X;
                                  states[idx] = ys;
                              });

            const BoundaryNode& bn = geom.nodes[k];
            Mat gring = (bn.frame.transpose() * bn.frame).topLeftCorner(m, m) / sqr(bn.v0);
            std::vector<Mat> grow(rgrid.size());
            for (size_t q = 0; q < rgrid.size(); ++q)
                grow[q] = jrow[q].transpose() * gring * jrow[q];

            // Conjugate radii: interior zeros of det j (sign changes, plus
            // dips for multiplicity 2); the focus at t0 itself is excluded.
            std::vector<double> conj;
            std::vector<double> dets(rgrid.size());
            for (size_t q = 0; q < rgrid.size(); ++q) dets[q] = jrow[q].determinant();
            double scale = 0.0;
            for (double d : dets) scale = std::max(scale, std::fabs(d));
            double dr = rgrid.size() > 1 ? rgrid[1] - rgrid[0] : 0.0;
            auto det_at = [&](size_t qfrom, double rq) {
                OdeResult res =
                    integrate_adaptive(rhs, rgrid[qfrom], rq, states[qfrom], opts.step1.ode);
                if (!res.completed) throw NumericsError("conjugate refinement failed");
                Mat X(m, m);
                int at = 0;
                unpack(res.y, at, X);
                return X.determinant();
            };
            for (size_t q = 1; q + 1 < rgrid.size(); ++q) {
                if (rgrid[q + 1] > t0 - 2.5 * dr) break;
                double d0 = dets[q], d1 = dets[q + 1];
                if (d0 * d1 < 0.0) {
                    double a = rgrid[q], b = rgrid[q + 1], fa = d0;
                    for (int it = 0; it < 60 && (b - a) > 1e-12 * t0; ++it) {
                        double mid = 0.5 * (a + b);
                        double fm = det_at(q, mid);
                        if (fa * fm <= 0.0)
                            b = mid;
                        else {
                            a = mid;
                            fa = fm;
                        }
                    }
                    conj.push_back(0.5 * (a + b));
                } else if (q + 2 < rgrid.size() && std::fabs(d1) <= std::fabs(d0) &&
                           std::fabs(d1) <= std::fabs(dets[q + 2]) &&
                           std::fabs(d1) < 1e-3 * scale) {
                    const double gr = 0.5 * (std::sqrt(5.0) - 1.0);
                    double a = rgrid[q], b = rgrid[q + 2];
                    double c = b - gr * (b - a), d = a + gr * (b - a);
                    double fc = std::fabs(det_at(q, c)), fd = std::fabs(det_at(q, d));
                    for (int it = 0; it < 80 && (b - a) > 1e-11 * t0; ++it) {
                        if (fc < fd) {
                            b = d;
                            d = c;
                            fd = fc;
                            c = b - gr * (b - a);
                            fc = std::fabs(det_at(q, c));
                        } else {
                            a = c;
                            c = d;
                            fc = fd;
                            d = a + gr * (b - a);
                            fd = std::fabs(det_at(q, d));
                        }
                    }
                    double rm = 0.5 * (a + b);
                    if (std::fabs(det_at(q, rm)) < 1e-8 * scale) conj.push_back(rm);
                }
            }
            std::vector<double> dedup;
            std::sort(conj.begin(), conj.end());
            for (double r0 : conj)
                if (dedup.empty() || r0 - dedup.back() > 1e-6 * t0) dedup.push_back(r0);

            chart.curv[k] = std::move(prof.curv);
            chart.jacobi[k] = std::move(jrow);
            chart.ghat[k] = std::move(grow);
            chart.conjugate_radii[k] = std::move(dedup);
            chart.s_t0[k] = row[it0].s;
            prof.curv.clear();
            chart.profiles[k] = std::move(prof);
        } catch (const std::exception& e) {
            bool expected = false;
            if (failed.compare_exchange_strong(expected, true)) {
                std::lock_guard<std::mutex> lk(fail_mx);
                fail_msg = "assemble_chart node " + std::to_string(k) + ": " + e.what();
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
                for (long k = next.fetch_add(1); k < nn; k = next.fetch_add(1)) {
                    if (failed.load()) break;
                    work(k);
                }
            });
        for (auto& th : pool) th.join();
    }
    if (failed.load()) throw NumericsError(fail_msg);
    return chart;
}

}  // namespace dixlab
