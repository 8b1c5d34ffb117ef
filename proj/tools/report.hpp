#pragma once

#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Dense>

#include <nlohmann/json.hpp>
#include "jointpo/inference.hpp"
#include "jointpo/transition.hpp"

namespace jointpo::cli {

using Json = nlohmann::json;

inline constexpr const char* kSchemaVersion = "1.0";

std::string sha256_hex(std::string_view bytes);

Json to_json(const Eigen::MatrixXd& m);
Json to_json(const Eigen::VectorXd& v);
Json to_json(const std::optional<double>& v);
Json to_json(const SupportMask& mask);
Json to_json(const RankDiagnostics& d);
Json to_json(const DerivedEstimands& e);
Json to_json(const VarianceEstimate& v);

/// Deterministic document text: sorted keys, two-space indent, trailing newline.
std::string dump(const Json& doc);

}  // namespace jointpo::cli
