#pragma once
//
// Wave speed fields v(x) > 0 on R^n.  The metric of interest is conformally
// Euclidean, g = v^-2 * delta, so every geometric object downstream is built
// from v, grad v, and hess v.  Built-in fields carry analytic derivatives;
// gridded fields evaluate through the tensor interpolant.

#include "dixlab/common.hpp"
#include "dixlab/spline.hpp"

#include <map>
#include <memory>

namespace dixlab {

class WaveSpeedField {
public:
    virtual ~WaveSpeedField() = default;
    virtual int dim() const = 0;
    virtual std::string name() const = 0;
    virtual double value(const Vec& x) const = 0;
    virtual Vec grad(const Vec& x) const = 0;
    virtual Mat hess(const Vec& x) const = 0;

    // f = log v and its derivatives, the quantities the geometry actually
    // consumes.  Throws NumericsError if v is not strictly positive.
    double logv(const Vec& x) const;
    Vec grad_logv(const Vec& x) const;
    Mat hess_logv(const Vec& x) const;
};

using FieldPtr = std::shared_ptr<const WaveSpeedField>;

// name in {euclidean, hyperbolic2d, spherical, constgrad, gausslens, grid is
// handled separately}.  Unknown parameter keys are rejected.
FieldPtr make_field(const std::string& name, int dim,
                    const std::map<std::string, double>& params = {});

// All built-in field names (used by the invariant sweep and the CLI).
std::vector<std::pair<std::string, int>> builtin_fields();

// Gridded field: v sampled on a structured grid, derivatives from the local
// cubic interpolant.
class GridField : public WaveSpeedField {
public:
    GridField(std::vector<std::vector<double>> axes, std::vector<double> values);
    int dim() const override { return interp_.dims(); }
    std::string name() const override { return "grid"; }
    double value(const Vec& x) const override { return interp_.value(x); }
    Vec grad(const Vec& x) const override;
    Mat hess(const Vec& x) const override;

private:
    GridInterp interp_;
};

}  // namespace dixlab
