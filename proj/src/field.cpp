#include "dixlab/field.hpp"

namespace dixlab {

double WaveSpeedField::logv(const Vec& x) const {
    double v = value(x);
    if (!(v > 0.0) || !std::isfinite(v))
        throw NumericsError("wave speed not positive at queried point");
    return std::log(v);
}

Vec WaveSpeedField::grad_logv(const Vec& x) const {
    double v = value(x);
    if (!(v > 0.0) || !std::isfinite(v))
        throw NumericsError("wave speed not positive at queried point");
    return grad(x) / v;
}

Mat WaveSpeedField::hess_logv(const Vec& x) const {
    double v = value(x);
    if (!(v > 0.0) || !std::isfinite(v))
        throw NumericsError("wave speed not positive at queried point");
    Vec u = grad(x) / v;
    return hess(x) / v - u * u.transpose();
}

namespace {

void reject_unknown(const std::map<std::string, double>& params,
                    std::initializer_list<const char*> known, const std::string& field) {
    for (const auto& kv : params) {
        bool ok = false;
        for (const char* k : known)
            if (kv.first == k) ok = true;
        if (!ok) throw UsageError("field '" + field + "': unknown parameter '" + kv.first + "'");
    }
}

double get_or(const std::map<std::string, double>& params, const std::string& key, double dflt) {
    auto it = params.find(key);
    return it == params.end() ? dflt : it->second;
}

class EuclideanField : public WaveSpeedField {
public:
    EuclideanField(int n, double c) : n_(n), c_(c) {
        if (!(c > 0.0)) throw UsageError("euclidean: speed must be positive");
    }
    int dim() const override { return n_; }
    std::string name() const override { return "euclidean"; }
    double value(const Vec&) const override { return c_; }
    Vec grad(const Vec&) const override { return Vec::Zero(n_); }
    Mat hess(const Vec&) const override { return Mat::Zero(n_, n_); }

private:
    int n_;
    double c_;
};

// v(x, z) = z on the upper half plane: the hyperbolic plane, curvature -1.
class Hyperbolic2dField : public WaveSpeedField {
public:
    int dim() const override { return 2; }
    std::string name() const override { return "hyperbolic2d"; }
    double value(const Vec& x) const override { return x(1); }
    Vec grad(const Vec&) const override {
        Vec g(2);
        g << 0.0, 1.0;
        return g;
    }
    Mat hess(const Vec&) const override { return Mat::Zero(2, 2); }
};

// v(x) = (1 + |x|^2) / 2: stereographic model of the unit sphere, curvature +1.
// Geodesics through the origin are Euclidean straight lines with g-arclength
// 2*atan(|x|); the antipode of the origin sits at infinity, one conjugate
// point at distance pi.
class SphericalField : public WaveSpeedField {
public:
    explicit SphericalField(int n) : n_(n) {}
    int dim() const override { return n_; }
    std::string name() const override { return "spherical"; }
    double value(const Vec& x) const override { return 0.5 * (1.0 + x.squaredNorm()); }
    Vec grad(const Vec& x) const override { return x; }
    Mat hess(const Vec&) const override { return Mat::Identity(n_, n_); }

private:
    int n_;
};

// Constant speed a near the boundary z = 0, then a steady gradient b with
// depth, blended with a C^2 ramp of width w starting at depth zb (depth means
// -z; the field extends constant above z = 0 so measurement geometry that pokes
// outside the medium stays valid).
class ConstGradField : public WaveSpeedField {
public:
    ConstGradField(int n, double a, double b, double zb, double w)
        : n_(n), a_(a), b_(b), zb_(zb), w_(w) {
        if (!(a > 0.0)) throw UsageError("constgrad: base speed must be positive");
        if (!(w > 0.0)) throw UsageError("constgrad: blend width must be positive");
    }
    int dim() const override { return n_; }
    std::string name() const override { return "constgrad"; }

    double value(const Vec& x) const override {
        double xi = (-x(n_ - 1) - zb_) / w_;
        return a_ + b_ * w_ * ramp(xi);
    }
    Vec grad(const Vec& x) const override {
        double xi = (-x(n_ - 1) - zb_) / w_;
        Vec g = Vec::Zero(n_);
        g(n_ - 1) = -b_ * ramp1(xi);
        return g;
    }
    Mat hess(const Vec& x) const override {
        double xi = (-x(n_ - 1) - zb_) / w_;
        Mat h = Mat::Zero(n_, n_);
        h(n_ - 1, n_ - 1) = (b_ / w_) * ramp2(xi);
        return h;
    }

private:
    // Integral of the quintic smoothstep: 0 for xi <= 0, xi - 1/2 for xi >= 1,
    // C^2 throughout.
    static double ramp(double xi) {
        if (xi <= 0.0) return 0.0;
        if (xi >= 1.0) return xi - 0.5;
        return ((xi - 3.0) * xi + 2.5) * xi * xi * xi * xi;  // xi^6 - 3 xi^5 + 2.5 xi^4
    }
    static double ramp1(double xi) {
        if (xi <= 0.0) return 0.0;
        if (xi >= 1.0) return 1.0;
        return ((6.0 * xi - 15.0) * xi + 10.0) * xi * xi * xi;
    }
    static double ramp2(double xi) {
        if (xi <= 0.0 || xi >= 1.0) return 0.0;
        return ((30.0 * xi - 60.0) * xi + 30.0) * xi * xi;
    }

    int n_;
    double a_, b_, zb_, w_;
};

// Slow spherical blob: v = 1 - A exp(-|x - x0|^2 / w^2).  Focuses rays; the
// standard smooth lens for 3D round trips.
class GaussLensField : public WaveSpeedField {
public:
    GaussLensField(int n, double amp, double w, Vec center)
        : n_(n), amp_(amp), w2_(w * w), c_(std::move(center)) {
        if (!(amp < 1.0)) throw UsageError("gausslens: amplitude must be below 1");
        if (!(w > 0.0)) throw UsageError("gausslens: width must be positive");
    }
    int dim() const override { return n_; }
    std::string name() const override { return "gausslens"; }

    double value(const Vec& x) const override {
        return 1.0 - amp_ * std::exp(-(x - c_).squaredNorm() / w2_);
    }
    Vec grad(const Vec& x) const override {
        Vec d = x - c_;
        double e = amp_ * std::exp(-d.squaredNorm() / w2_);
        return (2.0 * e / w2_) * d;
    }
    Mat hess(const Vec& x) const override {
        Vec d = x - c_;
        double e = amp_ * std::exp(-d.squaredNorm() / w2_);
        return (2.0 * e / w2_) * Mat::Identity(n_, n_) - (4.0 * e / (w2_ * w2_)) * (d * d.transpose());
    }

private:
    int n_;
    double amp_, w2_;
    Vec c_;
};

}  // namespace

FieldPtr make_field(const std::string& name, int dim,
                    const std::map<std::string, double>& params) {
    if (dim < 2 || dim > 3) throw UsageError("field dimension must be 2 or 3");
    if (name == "euclidean") {
        reject_unknown(params, {"c"}, name);
        return std::make_shared<EuclideanField>(dim, get_or(params, "c", 1.0));
    }
    if (name == "hyperbolic2d") {
        reject_unknown(params, {}, name);
        if (dim != 2) throw UsageError("hyperbolic2d is two-dimensional");
        return std::make_shared<Hyperbolic2dField>();
    }
    if (name == "spherical") {
        reject_unknown(params, {}, name);
        return std::make_shared<SphericalField>(dim);
    }
    if (name == "constgrad") {
        reject_unknown(params, {"a", "b", "z_blend", "width"}, name);
        return std::make_shared<ConstGradField>(dim, get_or(params, "a", 1.0),
                                                get_or(params, "b", 0.5),
                                                get_or(params, "z_blend", 0.2),
                                                get_or(params, "width", 0.3));
    }
    if (name == "gausslens") {
        reject_unknown(params, {"amp", "width", "cx", "cy", "cz"}, name);
        Vec c = Vec::Zero(dim);
        c(0) = get_or(params, "cx", 0.0);
        if (dim == 3) {
            c(1) = get_or(params, "cy", 0.0);
            c(2) = get_or(params, "cz", 0.0);
        } else {
            c(1) = get_or(params, "cz", 0.0);
        }
        return std::make_shared<GaussLensField>(dim, get_or(params, "amp", 0.3),
                                                get_or(params, "width", 1.0), std::move(c));
    }
    throw UsageError("unknown field '" + name + "'");
}

std::vector<std::pair<std::string, int>> builtin_fields() {
    return {{"euclidean", 2}, {"euclidean", 3}, {"hyperbolic2d", 2},
            {"spherical", 2}, {"spherical", 3}, {"constgrad", 2},
            {"constgrad", 3}, {"gausslens", 3}};
}

GridField::GridField(std::vector<std::vector<double>> axes, std::vector<double> values)
    : interp_(std::move(axes), std::move(values)) {}

Vec GridField::grad(const Vec& x) const {
    int n = interp_.dims();
    Vec g(n);
    for (int a = 0; a < n; ++a) g(a) = interp_.deriv(x, a);
    return g;
}

Mat GridField::hess(const Vec& x) const {
    int n = interp_.dims();
    Mat h(n, n);
    for (int a = 0; a < n; ++a)
        for (int b = a; b < n; ++b) h(a, b) = h(b, a) = interp_.deriv2(x, a, b);
    return h;
}

}  // namespace dixlab
