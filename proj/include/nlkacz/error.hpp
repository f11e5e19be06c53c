#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace nlkacz {

/// Failure categories raised by the solver toolkit.
enum class Errc {
    GradientVanished,
    IndexOutOfRange,
    ZeroResidual,
    RankDeficient,
    SizeCapExceeded,
    OutOfDomain,
    HypothesisViolated,
    DimensionMismatch,
    NonFinite,
    EmptyRay,
    NotPositive,
    DominanceViolated,
    EmptySupport,
    SchemaError,
    GridError,
    PositivityError,
    InconsistentGeometry,
    MaxEpochs,
    EmptyRaySelected,
    ZeroTruth,
    NonPositiveValues,
    NonPositiveVariance,
    InvalidArgument,
    IoError,
    ConfigError,
};

std::string_view to_string(Errc code);

class Error : public std::runtime_error {
public:
    Error(Errc code, const std::string& what)
        : std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code) {}

    Errc code() const noexcept { return code_; }

private:
    Errc code_;
};

}  // namespace nlkacz
