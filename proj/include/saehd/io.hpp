#pragma once

#include "saehd/model.hpp"
#include "saehd/predict.hpp"
#include "saehd/sim.hpp"

#include <Eigen/Dense>

#include <charconv>
#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

namespace saehd {

/// Malformed input file; carries the 1-based line number (0 = whole file).
class ParseError : public DataError {
public:
    ParseError(const std::string& path, std::size_t line, const std::string& what)
        : DataError(path + (line ? ":" + std::to_string(line) : std::string()) + ": " + what), line_(line) {}
    std::size_t line() const { return line_; }

private:
    std::size_t line_;
};

namespace detail {

inline std::string trim(const std::string& s) {
    const auto a = s.find_first_not_of(" \t\r");
    if (a == std::string::npos) return {};
    const auto b = s.find_last_not_of(" \t\r");
    return s.substr(a, b - a + 1);
}

inline std::vector<std::string> split_csv(const std::string& line) {
    std::vector<std::string> out;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) out.push_back(trim(cell));
    if (!line.empty() && line.back() == ',') out.emplace_back();
    return out;
}

inline double parse_double(const std::string& s, const std::string& path, std::size_t line, const std::string& col) {
    double v = 0.0;
    const auto* end = s.data() + s.size();
    const auto [p, ec] = std::from_chars(s.data(), end, v);
    if (s.empty() || ec != std::errc() || p != end)
        throw ParseError(path, line, "column '" + col + "': not a number: '" + s + "'");
    return v;
}

inline long parse_long(const std::string& s, const std::string& path, std::size_t line, const std::string& col) {
    long v = 0;
    const auto* end = s.data() + s.size();
    const auto [p, ec] = std::from_chars(s.data(), end, v);
    if (s.empty() || ec != std::errc() || p != end)
        throw ParseError(path, line, "column '" + col + "': not an integer: '" + s + "'");
    return v;
}

struct CsvTable {
    std::vector<std::string> header;
    std::vector<std::vector<std::string>> rows;
    std::vector<std::size_t> line;  // source line of each row

    int col(const std::string& name) const {
        for (std::size_t c = 0; c < header.size(); ++c)
            if (header[c] == name) return static_cast<int>(c);
        return -1;
    }
};

inline CsvTable read_csv(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ParseError(path, 0, "cannot open file");
    CsvTable t;
    std::string raw;
    std::size_t ln = 0;
    while (std::getline(in, raw)) {
        ++ln;
        if (trim(raw).empty()) continue;
        auto cells = split_csv(raw);
        if (t.header.empty()) {
            t.header = std::move(cells);
            continue;
        }
        if (cells.size() != t.header.size())
            throw ParseError(path, ln, "expected " + std::to_string(t.header.size()) + " fields, got " +
                                           std::to_string(cells.size()));
        t.rows.push_back(std::move(cells));
        t.line.push_back(ln);
    }
    if (t.header.empty()) throw ParseError(path, 0, "empty file");
    return t;
}

/// Columns named prefix1, prefix2, ... in order.
inline std::vector<int> numbered_columns(const CsvTable& t, const std::string& prefix) {
    std::vector<int> out;
    for (int j = 1;; ++j) {
        const int c = t.col(prefix + std::to_string(j));
        if (c < 0) break;
        out.push_back(c);
    }
    return out;
}

inline std::string fmt(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

}  // namespace detail

/// Reads a unit file (area_id, y, x1..xp[, k]) and an area file
/// (area_id, N, Xbar1..Xbarp[, h][, n]); n defaults to the unit count.
inline Dataset read_dataset(const std::string& units_path, const std::string& areas_path) {
    using namespace detail;
    const auto ut = read_csv(units_path);
    const int ca = ut.col("area_id"), cy = ut.col("y"), ck = ut.col("k");
    if (ca < 0 || cy < 0) throw ParseError(units_path, 1, "header must contain area_id and y");
    const auto cx = numbered_columns(ut, "x");
    Dataset ds;
    ds.p = cx.size();
    std::map<std::string, long> counts;
    for (std::size_t r = 0; r < ut.rows.size(); ++r) {
        const auto& row = ut.rows[r];
        UnitRecord u;
        u.area_id = row[ca];
        if (u.area_id.empty()) throw ParseError(units_path, ut.line[r], "empty area_id");
        u.y = parse_double(row[cy], units_path, ut.line[r], "y");
        for (std::size_t j = 0; j < cx.size(); ++j)
            u.x.push_back(parse_double(row[cx[j]], units_path, ut.line[r], ut.header[cx[j]]));
        if (ck >= 0) u.k = parse_double(row[ck], units_path, ut.line[r], "k");
        ++counts[u.area_id];
        ds.units.push_back(std::move(u));
    }

    const auto at = read_csv(areas_path);
    const int aa = at.col("area_id"), aN = at.col("N"), ah = at.col("h"), an = at.col("n");
    if (aa < 0 || aN < 0) throw ParseError(areas_path, 1, "header must contain area_id and N");
    const auto cX = numbered_columns(at, "Xbar");
    if (cX.size() != ds.p)
        throw ParseError(areas_path, 1, "found " + std::to_string(cX.size()) + " Xbar columns for " +
                                            std::to_string(ds.p) + " covariates");
    for (std::size_t r = 0; r < at.rows.size(); ++r) {
        const auto& row = at.rows[r];
        AreaInfo a;
        a.area_id = row[aa];
        a.N = parse_long(row[aN], areas_path, at.line[r], "N");
        for (int c : cX) a.Xbar.push_back(parse_double(row[c], areas_path, at.line[r], at.header[c]));
        if (ah >= 0) a.h = parse_double(row[ah], areas_path, at.line[r], "h");
        const auto it = counts.find(a.area_id);
        a.n = an >= 0 ? parse_long(row[an], areas_path, at.line[r], "n") : (it == counts.end() ? 0 : it->second);
        ds.areas.push_back(std::move(a));
    }
    return ds;
}

/// read_dataset followed by validation; throws DataError listing violations.
inline GroupedData read_unit_csv(const std::string& units_path, const std::string& areas_path) {
    return group(read_dataset(units_path, areas_path));
}

inline void write_dataset(const Dataset& ds, const std::string& units_path, const std::string& areas_path) {
    std::ofstream u(units_path), a(areas_path);
    if (!u || !a) throw std::runtime_error("cannot write dataset files");
    u << "area_id,y";
    for (std::size_t j = 1; j <= ds.p; ++j) u << ",x" << j;
    u << ",k\n";
    for (const auto& r : ds.units) {
        u << r.area_id << ',' << detail::fmt(r.y);
        for (double x : r.x) u << ',' << detail::fmt(x);
        u << ',' << detail::fmt(r.k) << '\n';
    }
    a << "area_id,N,n";
    for (std::size_t j = 1; j <= ds.p; ++j) a << ",Xbar" << j;
    a << ",h\n";
    for (const auto& r : ds.areas) {
        a << r.area_id << ',' << r.N << ',' << r.n;
        for (double x : r.Xbar) a << ',' << detail::fmt(x);
        a << ',' << detail::fmt(r.h) << '\n';
    }
}

/// Population file: area_id, y, x1..xp; one row per population unit.
inline Population read_population_csv(const std::string& path) {
    using namespace detail;
    const auto t = read_csv(path);
    const int ca = t.col("area_id"), cy = t.col("y");
    if (ca < 0 || cy < 0) throw ParseError(path, 1, "header must contain area_id and y");
    const auto cx = numbered_columns(t, "x");
    std::vector<std::string> order;
    std::map<std::string, std::vector<std::size_t>> rows;
    for (std::size_t r = 0; r < t.rows.size(); ++r) {
        auto& list = rows[t.rows[r][ca]];
        if (list.empty()) order.push_back(t.rows[r][ca]);
        list.push_back(r);
    }
    if (order.size() < 2) throw ParseError(path, 0, "population needs at least 2 areas");
    Population pop;
    pop.p = cx.size();
    for (const auto& id : order) {
        const auto& idx = rows[id];
        Eigen::VectorXd y(static_cast<Eigen::Index>(idx.size()));
        Eigen::MatrixXd X(static_cast<Eigen::Index>(idx.size()), static_cast<Eigen::Index>(cx.size()));
        for (std::size_t j = 0; j < idx.size(); ++j) {
            const auto& row = t.rows[idx[j]];
            y(static_cast<Eigen::Index>(j)) = parse_double(row[cy], path, t.line[idx[j]], "y");
            for (std::size_t c = 0; c < cx.size(); ++c)
                X(static_cast<Eigen::Index>(j), static_cast<Eigen::Index>(c)) =
                    parse_double(row[cx[c]], path, t.line[idx[j]], t.header[cx[c]]);
        }
        pop.ids.push_back(id);
        pop.y.push_back(std::move(y));
        pop.X.push_back(std::move(X));
    }
    return pop;
}

inline void write_population_csv(const Population& pop, const std::string& path) {
    std::ofstream o(path);
    if (!o) throw std::runtime_error("cannot write " + path);
    o << "area_id,y";
    for (std::size_t j = 1; j <= pop.p; ++j) o << ",x" << j;
    o << '\n';
    for (std::size_t i = 0; i < pop.m(); ++i)
        for (Eigen::Index j = 0; j < pop.y[i].size(); ++j) {
            o << pop.ids[i] << ',' << detail::fmt(pop.y[i](j));
            for (Eigen::Index c = 0; c < pop.X[i].cols(); ++c) o << ',' << detail::fmt(pop.X[i](j, c));
            o << '\n';
        }
}

/// One row per area; empty predictor columns are omitted.
inline void write_predictions(std::ostream& o, const PredictorSet& ps) {
    std::vector<std::pair<std::string, const std::vector<double>*>> cols{
        {"direct", &ps.direct}, {"eblup", &ps.eblup_bhf}, {"ebp", &ps.ebp},       {"ebp_mle", &ps.ebp_mle},
        {"ebp_finite", &ps.ebp_finite}, {"mq", &ps.mq_synth}, {"mqcd", &ps.mqcd}, {"B_ebp", &ps.B_ebp},
        {"B_eblup", &ps.B_bhf}, {"B_mle", &ps.B_mle}};
    std::erase_if(cols, [](const auto& c) { return c.second->empty(); });
    o << "area_id";
    for (const auto& c : cols) o << ',' << c.first;
    o << '\n';
    for (std::size_t i = 0; i < ps.area_id.size(); ++i) {
        o << ps.area_id[i];
        for (const auto& c : cols) o << ',' << detail::fmt((*c.second)[i]);
        o << '\n';
    }
}

inline PredictorSet read_predictions(const std::string& path) {
    const auto t = detail::read_csv(path);
    PredictorSet ps;
    std::vector<std::pair<std::string, std::vector<double>*>> cols{
        {"direct", &ps.direct}, {"eblup", &ps.eblup_bhf}, {"ebp", &ps.ebp},       {"ebp_mle", &ps.ebp_mle},
        {"ebp_finite", &ps.ebp_finite}, {"mq", &ps.mq_synth}, {"mqcd", &ps.mqcd}, {"B_ebp", &ps.B_ebp},
        {"B_eblup", &ps.B_bhf}, {"B_mle", &ps.B_mle}};
    const int ca = t.col("area_id");
    if (ca < 0) throw ParseError(path, 1, "missing area_id column");
    for (std::size_t r = 0; r < t.rows.size(); ++r) {
        ps.area_id.push_back(t.rows[r][ca]);
        for (auto& [name, vec] : cols)
            if (const int c = t.col(name); c >= 0)
                vec->push_back(detail::parse_double(t.rows[r][c], path, t.line[r], name));
    }
    return ps;
}

inline void write_metrics(std::ostream& o, const MetricsTable& tab, const std::string& label = "") {
    o << "label,kind,name,arb_pct,rrmse_pct,eff,rb_pct,coverage_pct\n";
    for (const auto& p : tab.predictors)
        o << label << ",predictor," << to_string(p.predictor) << ',' << detail::fmt(p.arb) << ','
          << detail::fmt(p.rrmse) << ',' << detail::fmt(p.eff) << ",,\n";
    for (const auto& e : tab.rmse)
        o << label << ",rmse," << to_string(e.method) << ",," << detail::fmt(e.rrmse) << ",," << detail::fmt(e.rb)
          << ',' << detail::fmt(e.coverage) << '\n';
}

/// Inverse of write_metrics; tables are grouped by label in file order.
inline std::vector<std::pair<std::string, MetricsTable>> read_metrics(const std::string& path) {
    using namespace detail;
    const auto t = read_csv(path);
    for (const char* c : {"label", "kind", "name", "arb_pct", "rrmse_pct", "eff", "rb_pct", "coverage_pct"})
        if (t.col(c) < 0) throw ParseError(path, 1, std::string("missing column ") + c);
    auto num = [&](std::size_t r, const char* c) { return parse_double(t.rows[r][t.col(c)], path, t.line[r], c); };
    std::vector<std::pair<std::string, MetricsTable>> out;
    for (std::size_t r = 0; r < t.rows.size(); ++r) {
        const auto& label = t.rows[r][t.col("label")];
        if (out.empty() || out.back().first != label) out.emplace_back(label, MetricsTable{});
        auto& tab = out.back().second;
        const auto& kind = t.rows[r][t.col("kind")];
        const auto& name = t.rows[r][t.col("name")];
        if (kind == "predictor") {
            PredictorMetrics pm{};
            bool found = false;
            for (auto p : {Predictor::Direct, Predictor::EBLUP, Predictor::EBP, Predictor::EBPMLE, Predictor::EBPFinite,
                           Predictor::MQ, Predictor::MQCD})
                if (to_string(p) == name) pm.predictor = p, found = true;
            if (!found) throw ParseError(path, t.line[r], "unknown predictor '" + name + "'");
            pm.arb = pm.median_abs_rb = num(r, "arb_pct");
            pm.rrmse = num(r, "rrmse_pct");
            pm.eff = num(r, "eff");
            tab.predictors.push_back(std::move(pm));
        } else if (kind == "rmse") {
            EstimatorMetrics em{};
            bool found = false;
            for (auto u : {UncertaintyMethod::Naive, UncertaintyMethod::Bootstrap, UncertaintyMethod::McJack})
                if (to_string(u) == name) em.method = u, found = true;
            if (!found) throw ParseError(path, t.line[r], "unknown RMSE estimator '" + name + "'");
            em.rrmse = num(r, "rrmse_pct");
            em.rb = num(r, "rb_pct");
            em.coverage = num(r, "coverage_pct");
            tab.rmse.push_back(em);
        } else {
            throw ParseError(path, t.line[r], "unknown row kind '" + kind + "'");
        }
    }
    return out;
}

}  // namespace saehd
