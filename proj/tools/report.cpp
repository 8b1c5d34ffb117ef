#include "report.hpp"

#include <cmath>
#include <cstdio>
#include <stdexcept>

#include <openssl/evp.h>

namespace jointpo::cli {

std::string sha256_hex(std::string_view bytes) {
    unsigned char digest[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    if (EVP_Digest(bytes.data(), bytes.size(), digest, &len, EVP_sha256(), nullptr) != 1)
        throw std::runtime_error("sha256 digest failed");
    std::string hex;
    char buf[3];
    for (unsigned int i = 0; i < len; ++i) {
        std::snprintf(buf, sizeof buf, "%02x", digest[i]);
        hex += buf;
    }
    return hex;
}

namespace {

Json number(double x) { return std::isfinite(x) ? Json(x) : Json(nullptr); }

}  // namespace

Json to_json(const Eigen::MatrixXd& m) {
    Json rows = Json::array();
    for (Eigen::Index i = 0; i < m.rows(); ++i) {
        Json row = Json::array();
        for (Eigen::Index j = 0; j < m.cols(); ++j) row.push_back(number(m(i, j)));
        rows.push_back(std::move(row));
    }
    return rows;
}

Json to_json(const Eigen::VectorXd& v) {
    Json out = Json::array();
    for (Eigen::Index i = 0; i < v.size(); ++i) out.push_back(number(v[i]));
    return out;
}

Json to_json(const std::optional<double>& v) { return v ? number(*v) : Json(nullptr); }

Json to_json(const SupportMask& mask) {
    Json rows = Json::array();
    for (Eigen::Index i = 0; i < mask.rows(); ++i) {
        Json row = Json::array();
        for (Eigen::Index j = 0; j < mask.cols(); ++j) row.push_back(static_cast<bool>(mask(i, j)));
        rows.push_back(std::move(row));
    }
    return rows;
}

Json to_json(const RankDiagnostics& d) {
    Json out;
    out["singular_values"] = d.singular_values;
    out["condition_ratio"] = number(d.condition_ratio);
    out["tolerance"] = d.tolerance;
    out["masked"] = d.masked;
    out["satisfied"] = d.satisfied;
    out["reason"] = d.reason;
    Json cols = Json::array();
    for (const auto& c : d.columns) {
        Json col;
        col["target"] = c.target;
        col["sources"] = c.sources;
        col["condition_ratio"] = number(c.condition_ratio);
        col["satisfied"] = c.satisfied;
        col["role"] = c.role == ColumnRole::solved ? "solved" : "derived";
        cols.push_back(std::move(col));
    }
    out["columns"] = std::move(cols);
    return out;
}

Json to_json(const DerivedEstimands& e) {
    Json out;
    out["treatment_harm_rate"] = to_json(e.treatment_harm_rate);
    out["treatment_benefit_rate"] = to_json(e.treatment_benefit_rate);
    out["persuasion_rate"] = to_json(e.persuasion_rate);
    out["probability_sufficient"] = to_json(e.probability_sufficient);
    out["probability_necessary"] = to_json(e.probability_necessary);
    return out;
}

Json to_json(const VarianceEstimate& v) {
    Json out;
    out["source"] = to_string(v.source);
    out["ci_level"] = v.ci_level;
    out["point"] = to_json(v.point);
    out["se"] = to_json(v.se);
    Json lo = Json::array(), hi = Json::array();
    for (const auto& ci : v.ci) {
        lo.push_back(number(ci.lower));
        hi.push_back(number(ci.upper));
    }
    out["ci_lower"] = std::move(lo);
    out["ci_upper"] = std::move(hi);
    return out;
}

std::string dump(const Json& doc) { return doc.dump(2) + "\n"; }

}  // namespace jointpo::cli
