#pragma once

#include <Eigen/Dense>

#include <cstddef>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

namespace saehd {

/// Input data failed a model invariant (bad multiplier, missing area, ...).
class DataError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// A linear system or iteration could not be solved.
class NumericalError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class SingularSystemError : public NumericalError {
public:
    using NumericalError::NumericalError;
};

struct UnitRecord {
    std::string area_id;
    double y = 0.0;
    std::vector<double> x;  // covariates, intercept excluded
    double k = 1.0;         // unit-level variance multiplier
};

struct AreaInfo {
    std::string area_id;
    long N = 0;                 // population size
    long n = 0;                 // sample size
    std::vector<double> Xbar;   // population covariate means
    double h = 1.0;             // area-level variance multiplier
};

struct Dataset {
    std::vector<UnitRecord> units;
    std::vector<AreaInfo> areas;
    std::size_t p = 0;
};

struct ParamVector {
    double beta0 = 0.0;
    Eigen::VectorXd beta;
    double sigma2_gamma = 0.0;
    double sigma2_eps = 0.0;
    double tau = 0.5;
};

enum class FitMethod { GEE, MLE };

struct FitControl {
    double tol = 1e-6;        // convergence threshold on the max relative parameter change
    int max_iter = 200;
    double var_floor = 1e-8;  // lower clamp for variance solves
    double bracket_max = 0.0; // upper bracket for variance roots; 0 selects 1e6 * var(y)

    void check() const {
        if (!(tol > 0.0) || max_iter < 1 || !(var_floor > 0.0) || (bracket_max != 0.0 && !(bracket_max > var_floor)))
            throw std::invalid_argument("invalid fit control");
    }
};

struct FitResult {
    std::vector<ParamVector> params;
    FitMethod method = FitMethod::GEE;
    int iterations = 0;
    bool converged = false;
    double max_param_delta = 0.0;
    // per-area intercepts alpha_0i from the pooled equations (GEE only)
    std::vector<double> area_intercepts;
    // per-iteration max parameter change (GEE) or log-likelihood (MLE)
    std::vector<double> trace;
    // set when a variance root was clamped because the bracket had no sign change
    bool bracket_warning = false;
    // areas whose per-area solve failed and fell back to initial values (MLE)
    std::vector<std::size_t> flagged_areas;

    std::size_t m() const { return params.size(); }
    double beta0() const { return params.empty() ? 0.0 : params.front().beta0; }
    double sigma2_gamma() const { return params.empty() ? 0.0 : params.front().sigma2_gamma; }
};

struct Violation {
    std::string where;   // "unit 12" or "area A3"
    std::string what;
};

inline std::vector<Violation> validate(const Dataset& ds) {
    std::vector<Violation> out;
    std::unordered_map<std::string, long> counts;
    for (std::size_t u = 0; u < ds.units.size(); ++u) {
        const auto& rec = ds.units[u];
        const std::string where = "unit " + std::to_string(u) + " (area " + rec.area_id + ")";
        if (!(rec.k > 0.0)) out.push_back({where, "k must be > 0"});
        if (rec.x.size() != ds.p)
            out.push_back({where, "expected " + std::to_string(ds.p) + " covariates, got " +
                                      std::to_string(rec.x.size())});
        ++counts[rec.area_id];
    }
    std::unordered_map<std::string, const AreaInfo*> by_id;
    for (const auto& a : ds.areas) {
        const std::string where = "area " + a.area_id;
        if (!by_id.emplace(a.area_id, &a).second) out.push_back({where, "duplicate area id"});
        if (a.n < 1) out.push_back({where, "n must be >= 1"});
        if (a.N < 1) out.push_back({where, "N must be >= 1"});
        if (a.n > a.N) out.push_back({where, "n exceeds N"});
        if (!(a.h > 0.0)) out.push_back({where, "h must be > 0"});
        if (a.Xbar.size() != ds.p)
            out.push_back({where, "Xbar length " + std::to_string(a.Xbar.size()) + " != p"});
        const auto it = counts.find(a.area_id);
        const long seen = it == counts.end() ? 0 : it->second;
        if (seen != a.n)
            out.push_back({where, "n=" + std::to_string(a.n) + " but " + std::to_string(seen) +
                                      " unit records"});
    }
    // report each orphan area once
    std::unordered_map<std::string, bool> reported;
    for (const auto& rec : ds.units) {
        if (!by_id.count(rec.area_id) && !reported[rec.area_id]) {
            reported[rec.area_id] = true;
            out.push_back({"area " + rec.area_id, "unit area missing from area table"});
        }
    }
    if (ds.areas.size() < 2) out.push_back({"dataset", "need at least 2 areas"});
    return out;
}

/// Sample units of one area in matrix form.
struct AreaBlock {
    std::string id;
    Eigen::VectorXd y;
    Eigen::MatrixXd X;   // n x p, no intercept column
    Eigen::VectorXd k;
    Eigen::VectorXd Xbar;
    double h = 1.0;
    long N = 0;

    Eigen::Index n() const { return y.size(); }
    double ybar() const { return y.mean(); }
    Eigen::VectorXd xbar() const { return X.colwise().mean().transpose(); }
};

/// Areas in order of first appearance in the unit list.
class GroupedData {
public:
    GroupedData() = default;
    GroupedData(std::vector<AreaBlock> blocks, std::size_t p) : blocks_(std::move(blocks)), p_(p) {}

    std::size_t m() const { return blocks_.size(); }
    std::size_t p() const { return p_; }
    const AreaBlock& operator[](std::size_t i) const { return blocks_[i]; }
    AreaBlock& operator[](std::size_t i) { return blocks_[i]; }
    const std::vector<AreaBlock>& blocks() const { return blocks_; }

    Eigen::Index total_n() const {
        Eigen::Index n = 0;
        for (const auto& b : blocks_) n += b.n();
        return n;
    }
    bool unit_multipliers() const {
        for (const auto& b : blocks_)
            if (b.h != 1.0 || (b.k.array() != 1.0).any()) return false;
        return true;
    }
    double y_variance() const {
        const auto n = total_n();
        double s = 0, ss = 0;
        for (const auto& b : blocks_) {
            s += b.y.sum();
            ss += b.y.squaredNorm();
        }
        const double mean = s / static_cast<double>(n);
        return n > 1 ? (ss - n * mean * mean) / static_cast<double>(n - 1) : 0.0;
    }
    /// Copy without area `drop`.
    GroupedData without(std::size_t drop) const {
        std::vector<AreaBlock> b;
        b.reserve(blocks_.size() - 1);
        for (std::size_t i = 0; i < blocks_.size(); ++i)
            if (i != drop) b.push_back(blocks_[i]);
        return {std::move(b), p_};
    }

private:
    std::vector<AreaBlock> blocks_;
    std::size_t p_ = 0;
};

/// Throws DataError listing every violation when the dataset is invalid.
inline GroupedData group(const Dataset& ds) {
    if (auto v = validate(ds); !v.empty()) {
        std::string msg = "dataset validation failed:";
        for (const auto& e : v) msg += "\n  " + e.where + ": " + e.what;
        throw DataError(msg);
    }
    std::unordered_map<std::string, const AreaInfo*> info;
    for (const auto& a : ds.areas) info[a.area_id] = &a;

    std::vector<std::string> order;
    std::unordered_map<std::string, std::vector<std::size_t>> members;
    for (std::size_t u = 0; u < ds.units.size(); ++u) {
        auto& list = members[ds.units[u].area_id];
        if (list.empty()) order.push_back(ds.units[u].area_id);
        list.push_back(u);
    }
    const auto p = static_cast<Eigen::Index>(ds.p);
    std::vector<AreaBlock> blocks;
    blocks.reserve(order.size());
    for (const auto& id : order) {
        const auto& idx = members[id];
        const auto n = static_cast<Eigen::Index>(idx.size());
        AreaBlock b;
        b.id = id;
        b.y.resize(n);
        b.X.resize(n, p);
        b.k.resize(n);
        for (Eigen::Index j = 0; j < n; ++j) {
            const auto& rec = ds.units[idx[static_cast<std::size_t>(j)]];
            b.y(j) = rec.y;
            b.k(j) = rec.k;
            for (Eigen::Index c = 0; c < p; ++c) b.X(j, c) = rec.x[static_cast<std::size_t>(c)];
        }
        const AreaInfo& a = *info.at(id);
        b.Xbar = Eigen::Map<const Eigen::VectorXd>(a.Xbar.data(), p);
        b.h = a.h;
        b.N = a.N;
        blocks.push_back(std::move(b));
    }
    return {std::move(blocks), ds.p};
}

/// Inverse of group(): unit rows in block order, area table in block order.
inline Dataset to_dataset(const GroupedData& g) {
    Dataset ds;
    ds.p = g.p();
    for (const auto& b : g.blocks()) {
        for (Eigen::Index j = 0; j < b.n(); ++j) {
            UnitRecord r;
            r.area_id = b.id;
            r.y = b.y(j);
            r.k = b.k(j);
            r.x.resize(g.p());
            for (std::size_t c = 0; c < g.p(); ++c) r.x[c] = b.X(j, static_cast<Eigen::Index>(c));
            ds.units.push_back(std::move(r));
        }
        AreaInfo a;
        a.area_id = b.id;
        a.N = b.N;
        a.n = b.n();
        a.h = b.h;
        a.Xbar.assign(b.Xbar.data(), b.Xbar.data() + b.Xbar.size());
        ds.areas.push_back(std::move(a));
    }
    return ds;
}

}  // namespace saehd
