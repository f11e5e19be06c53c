#include "nlkacz/error.hpp"

namespace nlkacz {

std::string_view to_string(Errc code) {
    switch (code) {
        case Errc::GradientVanished: return "GradientVanished";
        case Errc::IndexOutOfRange: return "IndexOutOfRange";
        case Errc::ZeroResidual: return "ZeroResidual";
        case Errc::RankDeficient: return "RankDeficient";
        case Errc::SizeCapExceeded: return "SizeCapExceeded";
        case Errc::OutOfDomain: return "OutOfDomain";
        case Errc::HypothesisViolated: return "HypothesisViolated";
        case Errc::DimensionMismatch: return "DimensionMismatch";
        case Errc::NonFinite: return "NonFinite";
        case Errc::EmptyRay: return "EmptyRay";
        case Errc::NotPositive: return "NotPositive";
        case Errc::DominanceViolated: return "DominanceViolated";
        case Errc::EmptySupport: return "EmptySupport";
        case Errc::SchemaError: return "SchemaError";
        case Errc::GridError: return "GridError";
        case Errc::PositivityError: return "PositivityError";
        case Errc::InconsistentGeometry: return "InconsistentGeometry";
        case Errc::MaxEpochs: return "MaxEpochs";
        case Errc::EmptyRaySelected: return "EmptyRaySelected";
        case Errc::ZeroTruth: return "ZeroTruth";
        case Errc::NonPositiveValues: return "NonPositiveValues";
        case Errc::NonPositiveVariance: return "NonPositiveVariance";
        case Errc::InvalidArgument: return "InvalidArgument";
        case Errc::IoError: return "IoError";
        case Errc::ConfigError: return "ConfigError";
    }
    return "Unknown";
}

}  // namespace nlkacz
