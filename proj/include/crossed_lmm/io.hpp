#pragma once

// File formats. Identifiers in CSV files are 1-based; matrices in JSON are
// row-major nested arrays.

#include "crossed_lmm/bandit.hpp"
#include "crossed_lmm/dataset.hpp"
#include "crossed_lmm/em.hpp"
#include "crossed_lmm/error.hpp"
#include "crossed_lmm/simenv.hpp"
#include "crossed_lmm/trial_log.hpp"

#include <Eigen/Dense>
#include "json.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <iomanip>
#include <istream>
#include <ostream>
#include <sstream>
#include <string>
#include <string_view>
#include <system_error>
#include <vector>

namespace crossed_lmm::io {

using nlohmann::json;

// Shortest text that parses back to the same double.
inline std::string format_double(double v) {
    char buf[64];
    const auto res = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, res.ptr);
}

inline std::vector<std::string_view> split_csv_line(std::string_view line) {
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    std::vector<std::string_view> out;
    std::size_t start = 0;
    while (true) {
        const std::size_t comma = line.find(',', start);
        std::string_view cell = line.substr(start, comma == std::string_view::npos ? std::string_view::npos : comma - start);
        while (!cell.empty() && cell.front() == ' ') cell.remove_prefix(1);
        while (!cell.empty() && cell.back() == ' ') cell.remove_suffix(1);
        out.push_back(cell);
        if (comma == std::string_view::npos) break;
        start = comma + 1;
    }
    return out;
}

inline double parse_real(std::string_view cell, long row, const std::string& field) {
    double v = 0.0;
    const auto res = std::from_chars(cell.data(), cell.data() + cell.size(), v);
    if (cell.empty() || res.ec != std::errc() || res.ptr != cell.data() + cell.size())
        throw SchemaError(row, field, "'" + std::string(cell) + "' is not a number");
    if (!std::isfinite(v)) throw SchemaError(row, field, "value must be finite");
    return v;
}

inline long parse_id(std::string_view cell, long row, const std::string& field) {
    long v = 0;
    const auto res = std::from_chars(cell.data(), cell.data() + cell.size(), v);
    if (cell.empty() || res.ec != std::errc() || res.ptr != cell.data() + cell.size())
        throw SchemaError(row, field, "'" + std::string(cell) + "' is not an integer");
    if (v < 1) throw SchemaError(row, field, "identifiers are 1-based");
    return v;
}

// ---------------------------------------------------------------- dataset

inline std::string dataset_header(const ModelDims& d) {
    std::string h = "user,time,rep,y";
    for (Index k = 1; k <= d.p; ++k) h += ",z_" + std::to_string(k);
    for (Index k = 1; k <= d.q_u; ++k) h += ",zu_" + std::to_string(k);
    for (Index k = 1; k <= d.q_v; ++k) h += ",zv_" + std::to_string(k);
    return h;
}

// Reads `user,time,rep,y,z_1..z_p,zu_1..zu_qu,zv_1..zv_qv`. The group counts
// m and t are the largest user and time identifiers present.
inline TrialDataset read_dataset_csv(std::istream& in) {
    std::string line;
    if (!std::getline(in, line)) throw SchemaError(0, "", "dataset file is empty");
    const auto header = split_csv_line(line);
    auto count_prefix = [&](std::size_t& pos, const std::string& prefix) {
        Index k = 0;
        while (pos < header.size() && header[pos] == prefix + std::to_string(k + 1)) {
            ++k;
            ++pos;
        }
        return k;
    };
    const char* fixed[] = {"user", "time", "rep", "y"};
    for (std::size_t c = 0; c < 4; ++c)
        if (c >= header.size() || header[c] != fixed[c])
            throw SchemaError(0, fixed[c], "header must start with user,time,rep,y");
    std::size_t pos = 4;
    ModelDims dims;
    dims.p = count_prefix(pos, "z_");
    dims.q_u = count_prefix(pos, "zu_");
    dims.q_v = count_prefix(pos, "zv_");
    if (pos != header.size())
        throw SchemaError(0, std::string(header[pos]), "unexpected column (expected z_k, zu_k, zv_k in order)");
    if (dims.p < 1) throw SchemaError(0, "z_1", "at least one fixed-effect column is required");
    if (dims.q_u < 1) throw SchemaError(0, "zu_1", "at least one user random-effect column is required");
    if (dims.q_v < 1) throw SchemaError(0, "zv_1", "at least one time random-effect column is required");

    struct Row {
        long user, time, rep;
        double y;
    };
    std::vector<Row> rows;
    std::vector<double> z, zu, zv;
    long row = 0;
    while (std::getline(in, line)) {
        if (line.empty() || line == "\r") continue;
        ++row;
        const auto cells = split_csv_line(line);
        if (cells.size() != header.size())
            throw SchemaError(row, "", "expected " + std::to_string(header.size()) + " fields, found " +
                                           std::to_string(cells.size()));
        Row r{parse_id(cells[0], row, "user"), parse_id(cells[1], row, "time"), parse_id(cells[2], row, "rep"),
              parse_real(cells[3], row, "y")};
        rows.push_back(r);
        std::size_t c = 4;
        for (Index k = 0; k < dims.p; ++k, ++c) z.push_back(parse_real(cells[c], row, std::string(header[c])));
        for (Index k = 0; k < dims.q_u; ++k, ++c) zu.push_back(parse_real(cells[c], row, std::string(header[c])));
        for (Index k = 0; k < dims.q_v; ++k, ++c) zv.push_back(parse_real(cells[c], row, std::string(header[c])));
    }
    if (rows.empty()) throw SchemaError(0, "", "dataset has no rows");
    for (const Row& r : rows) {
        dims.m = std::max<Index>(dims.m, r.user);
        dims.t = std::max<Index>(dims.t, r.time);
    }
    TrialDataset data(dims);
    data.reserve(static_cast<Index>(rows.size()));
    for (std::size_t k = 0; k < rows.size(); ++k) {
        const Index kk = static_cast<Index>(k);
        data.add_row(rows[k].user - 1, rows[k].time - 1, rows[k].rep - 1, rows[k].y,
                     Eigen::Map<const Eigen::VectorXd>(z.data() + kk * dims.p, dims.p),
                     Eigen::Map<const Eigen::VectorXd>(zu.data() + kk * dims.q_u, dims.q_u),
                     Eigen::Map<const Eigen::VectorXd>(zv.data() + kk * dims.q_v, dims.q_v));
    }
    return data;
}

inline void write_dataset_csv(std::ostream& out, const TrialDataset& data) {
    out << dataset_header(data.dims()) << '\n';
    for (Index r = 0; r < data.size(); ++r) {
        out << data.user(r) + 1 << ',' << data.time(r) + 1 << ',' << data.rep(r) + 1 << ',' << format_double(data.y(r));
        for (double v : data.z(r)) out << ',' << format_double(v);
        for (double v : data.zu(r)) out << ',' << format_double(v);
        for (double v : data.zv(r)) out << ',' << format_double(v);
        out << '\n';
    }
}

// ---------------------------------------------------------------- JSON values

inline json matrix_to_json(const Eigen::MatrixXd& m) {
    json rows = json::array();
    for (Index r = 0; r < m.rows(); ++r) {
        json row = json::array();
        for (Index c = 0; c < m.cols(); ++c) row.push_back(m(r, c));
        rows.push_back(std::move(row));
    }
    return rows;
}

inline json vector_to_json(const Eigen::VectorXd& v) {
    json out = json::array();
    for (double x : v) out.push_back(x);
    return out;
}

inline const json& require(const json& obj, const std::string& key) {
    if (!obj.is_object()) throw SchemaError(0, key, "expected a JSON object containing this field");
    const auto it = obj.find(key);
    if (it == obj.end()) throw SchemaError(0, key, "missing field");
    return *it;
}

inline double real_from_json(const json& j, const std::string& field) {
    if (!j.is_number()) throw SchemaError(0, field, "expected a number");
    const double v = j.get<double>();
    if (!std::isfinite(v)) throw SchemaError(0, field, "value must be finite");
    return v;
}

inline Eigen::VectorXd vector_from_json(const json& j, const std::string& field) {
    if (!j.is_array()) throw SchemaError(0, field, "expected an array of numbers");
    Eigen::VectorXd v(static_cast<Index>(j.size()));
    for (std::size_t k = 0; k < j.size(); ++k)
        v(static_cast<Index>(k)) = real_from_json(j[k], field + "[" + std::to_string(k) + "]");
    return v;
}

inline Eigen::MatrixXd matrix_from_json(const json& j, const std::string& field) {
    if (!j.is_array() || j.empty()) throw SchemaError(0, field, "expected a non-empty array of rows");
    const std::size_t rows = j.size();
    if (!j[0].is_array()) throw SchemaError(0, field, "expected an array of rows");
    const std::size_t cols = j[0].size();
    Eigen::MatrixXd m(static_cast<Index>(rows), static_cast<Index>(cols));
    for (std::size_t r = 0; r < rows; ++r) {
        if (!j[r].is_array() || j[r].size() != cols) throw SchemaError(0, field, "rows must have equal length");
        for (std::size_t c = 0; c < cols; ++c)
            m(static_cast<Index>(r), static_cast<Index>(c)) =
                real_from_json(j[r][c], field + "[" + std::to_string(r) + "][" + std::to_string(c) + "]");
    }
    return m;
}

inline json to_json(const PriorSpec& p) {
    return {{"mu_beta", vector_to_json(p.mu_beta)}, {"Sigma_beta", matrix_to_json(p.Sigma_beta)}};
}

inline PriorSpec prior_from_json(const json& j) {
    PriorSpec p;
    p.mu_beta = vector_from_json(require(j, "mu_beta"), "mu_beta");
    p.Sigma_beta = matrix_from_json(require(j, "Sigma_beta"), "Sigma_beta");
    if (p.Sigma_beta.rows() != p.mu_beta.size() || p.Sigma_beta.cols() != p.mu_beta.size())
        throw SchemaError(0, "Sigma_beta", "must be square with the length of mu_beta");
    return p;
}

inline json to_json(const VarianceComponents& s) {
    return {{"sigma2_eps", s.sigma2_eps}, {"Sigma_u", matrix_to_json(s.Sigma_u)}, {"Sigma_v", matrix_to_json(s.Sigma_v)}};
}

inline VarianceComponents components_from_json(const json& j) {
    VarianceComponents s;
    s.sigma2_eps = real_from_json(require(j, "sigma2_eps"), "sigma2_eps");
    s.Sigma_u = matrix_from_json(require(j, "Sigma_u"), "Sigma_u");
    s.Sigma_v = matrix_from_json(require(j, "Sigma_v"), "Sigma_v");
    return s;
}

inline std::string to_string(EStepMode m) { return m == EStepMode::dense ? "dense" : "streamlined"; }

inline json to_json(const EmOptions& o) {
    json j = {{"tol", o.tol}, {"max_iter", o.max_iter}, {"e_step_mode", to_string(o.e_step_mode)}};
    if (o.init) j["init"] = to_json(*o.init);
    return j;
}

// All fields optional; missing ones keep their defaults. `init` may be a
// components object or a complete fit result (its `components` are used).
inline EmOptions em_options_from_json(const json& j) {
    if (!j.is_object()) throw SchemaError(0, "", "options must be a JSON object");
    EmOptions o;
    for (const auto& [key, value] : j.items()) {
        if (key == "tol") {
            o.tol = real_from_json(value, key);
        } else if (key == "max_iter") {
            if (!value.is_number_integer()) throw SchemaError(0, key, "expected an integer");
            o.max_iter = value.get<int>();
        } else if (key == "e_step_mode") {
            const std::string mode = value.is_string() ? value.get<std::string>() : "";
            if (mode == "dense")
                o.e_step_mode = EStepMode::dense;
            else if (mode == "streamlined")
                o.e_step_mode = EStepMode::streamlined;
            else
                throw SchemaError(0, key, "expected \"dense\" or \"streamlined\"");
        } else if (key == "init") {
            o.init = components_from_json(value.contains("components") ? value["components"] : value);
        } else {
            throw SchemaError(0, key, "unknown option");
        }
    }
    if (!(o.tol > 0.0)) throw SchemaError(0, "tol", "must be positive");
    if (o.max_iter < 1) throw SchemaError(0, "max_iter", "must be at least 1");
    return o;
}

inline json to_json(const FitResult& fit) {
    json j;
    j["components"] = to_json(fit.sigma_hat);
    j["trace"] = fit.trace;
    j["iterations"] = fit.iterations;
    j["converged"] = fit.converged;
    j["posterior"] = {{"mu_beta", vector_to_json(fit.posterior.mu_beta_post)},
                      {"Sigma_beta", matrix_to_json(fit.posterior.Sigma_beta_post)}};
    return j;
}

// ---------------------------------------------------------------- simulation configs

inline json to_json(const MHealthConfig& c) {
    return {{"n_users", c.n_users},
            {"weeks_per_user", c.weeks_per_user},
            {"decisions_per_day", c.decisions_per_day},
            {"cohort_size", c.cohort_size},
            {"beta", vector_to_json(c.beta)},
            {"Sigma_u", matrix_to_json(c.Sigma_u)},
            {"delta_mean", c.delta_mean},
            {"delta_sd", c.delta_sd},
            {"decay_horizon_days", c.decay_horizon_days},
            {"noise_var", c.noise_var},
            {"seed", c.seed}};
}

inline int int_from_json(const json& v, const std::string& key) {
    if (!v.is_number_integer()) throw SchemaError(0, key, "expected an integer");
    return v.get<int>();
}

inline MHealthConfig mhealth_config_from_json(const json& j) {
    if (!j.is_object()) throw SchemaError(0, "", "environment config must be a JSON object");
    MHealthConfig c;
    for (const auto& [key, value] : j.items()) {
        if (key == "n_users") c.n_users = int_from_json(value, key);
        else if (key == "weeks_per_user") c.weeks_per_user = int_from_json(value, key);
        else if (key == "decisions_per_day") c.decisions_per_day = int_from_json(value, key);
        else if (key == "cohort_size") c.cohort_size = int_from_json(value, key);
        else if (key == "beta") c.beta = vector_from_json(value, key);
        else if (key == "Sigma_u") c.Sigma_u = matrix_from_json(value, key);
        else if (key == "delta_mean") c.delta_mean = real_from_json(value, key);
        else if (key == "delta_sd") c.delta_sd = real_from_json(value, key);
        else if (key == "decay_horizon_days") c.decay_horizon_days = real_from_json(value, key);
        else if (key == "noise_var") c.noise_var = real_from_json(value, key);
        else if (key == "seed") {
            if (!value.is_number_unsigned()) throw SchemaError(0, key, "expected a non-negative integer");
            c.seed = value.get<std::uint64_t>();
        } else throw SchemaError(0, key, "unknown field");
    }
    return c;
}

// Thompson-sampling algorithm settings: schedule, prior and EM options.
struct AlgorithmConfig {
    TrialSchedule schedule;
    PriorSpec prior;
    EmOptions em;
};

inline PriorSpec default_bandit_prior(const FeatureMap& fm) {
    return {Eigen::VectorXd::Zero(fm.p), 10.0 * Eigen::MatrixXd::Identity(fm.p, fm.p)};
}

inline json to_json(const AlgorithmConfig& a) {
    const char* method = a.schedule.method == ProbabilityMethod::closed_form   ? "closed_form"
                         : a.schedule.method == ProbabilityMethod::monte_carlo ? "monte_carlo"
                                                                               : "automatic";
    return {{"refit_every_days", a.schedule.refit_every_days},
            {"n_draws", a.schedule.n_draws},
            {"method", method},
            {"prior", to_json(a.prior)},
            {"em", to_json(a.em)}};
}

inline AlgorithmConfig algorithm_config_from_json(const json& j, const FeatureMap& fm) {
    if (!j.is_object()) throw SchemaError(0, "", "algorithm config must be a JSON object");
    AlgorithmConfig a;
    a.prior = default_bandit_prior(fm);
    for (const auto& [key, value] : j.items()) {
        if (key == "refit_every_days") a.schedule.refit_every_days = int_from_json(value, key);
        else if (key == "n_draws") a.schedule.n_draws = int_from_json(value, key);
        else if (key == "method") {
            const std::string m = value.is_string() ? value.get<std::string>() : "";
            if (m == "automatic") a.schedule.method = ProbabilityMethod::automatic;
            else if (m == "closed_form") a.schedule.method = ProbabilityMethod::closed_form;
            else if (m == "monte_carlo") a.schedule.method = ProbabilityMethod::monte_carlo;
            else throw SchemaError(0, key, "expected automatic, closed_form or monte_carlo");
        } else if (key == "prior") a.prior = prior_from_json(value);
        else if (key == "em") a.em = em_options_from_json(value);
        else throw SchemaError(0, key, "unknown field");
    }
    if (a.schedule.refit_every_days < 1) throw SchemaError(0, "refit_every_days", "must be at least 1");
    if (a.schedule.n_draws < 1) throw SchemaError(0, "n_draws", "must be at least 1");
    return a;
}

// ---------------------------------------------------------------- trial log

inline void write_trial_log_csv(std::ostream& out, const BanditTrialLog& log, int actions) {
    out << "user,time,decision,week_in_study";
    for (int k = 0; k < actions; ++k) out << ",pi_" << k;
    out << ",action,reward,regret\n";
    for (const auto& r : log.records) {
        out << r.user + 1 << ',' << r.time + 1 << ',' << r.decision + 1 << ',' << r.week_in_study;
        for (int k = 0; k < actions; ++k) out << ',' << format_double(r.pi(k));
        out << ',' << r.action << ',' << format_double(r.reward) << ',' << format_double(r.regret) << '\n';
    }
}

// ---------------------------------------------------------------- summaries

// "mean (sd)" with the sample standard deviation (0 for a single value).
inline std::string format_mean_sd(const std::vector<double>& values, int mean_digits = 1, int sd_digits = 2) {
    double mean = 0.0, sd = 0.0;
    if (!values.empty()) {
        for (double v : values) mean += v;
        mean /= static_cast<double>(values.size());
        if (values.size() > 1) {
            for (double v : values) sd += (v - mean) * (v - mean);
            sd = std::sqrt(sd / static_cast<double>(values.size() - 1));
        }
    }
    std::ostringstream os;
    os << std::fixed << std::setprecision(mean_digits) << mean << " (" << std::setprecision(sd_digits) << sd << ')';
    return os.str();
}

// ---------------------------------------------------------------- files

inline json read_json_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw SchemaError(0, "", "cannot open " + path);
    try {
        return json::parse(in);
    } catch (const json::parse_error& e) {
        throw SchemaError(0, "", path + ": " + e.what());
    }
}

inline TrialDataset read_dataset_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw SchemaError(0, "", "cannot open " + path);
    return read_dataset_csv(in);
}

inline std::ofstream open_output(const std::string& path) {
    std::ofstream out(path);
    if (!out) throw SchemaError(0, "", "cannot write " + path);
    return out;
}

}  // namespace crossed_lmm::io
