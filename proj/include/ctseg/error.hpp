#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace ctseg {

enum class ErrorCode {
    BadMagic,
    TruncatedPayload,
    InvalidSpacing,
    InvalidDims,
    IoFailure,
    IndexOutOfRange,
    BilinearOnMask,
    UnsupportedMaxval,
    MalformedHeader,
    InvalidSpec,
    UnreachableTarget,
    ShapeMismatch,
    NonIntegralOutputSize,
    OddSpatialDims,
    NotScalar,
    MissingGrad,
    InvalidConfig,
    TooFewItems,
    NonSquareInput,
    EmptyDataset,
    PlanMismatch,
    EmptyMatrix,
    DivisionByZero,
    OutOfRange,
    NoLungDetected,
    SubsetViolation,
    InvalidArgument,
};

constexpr std::string_view to_string(ErrorCode code) {
    switch (code) {
        case ErrorCode::BadMagic: return "BadMagic";
        case ErrorCode::TruncatedPayload: return "TruncatedPayload";
        case ErrorCode::InvalidSpacing: return "InvalidSpacing";
        case ErrorCode::InvalidDims: return "InvalidDims";
        case ErrorCode::IoFailure: return "IoFailure";
        case ErrorCode::IndexOutOfRange: return "IndexOutOfRange";
        case ErrorCode::BilinearOnMask: return "BilinearOnMask";
        case ErrorCode::UnsupportedMaxval: return "UnsupportedMaxval";
        case ErrorCode::MalformedHeader: return "MalformedHeader";
        case ErrorCode::InvalidSpec: return "InvalidSpec";
        case ErrorCode::UnreachableTarget: return "UnreachableTarget";
        case ErrorCode::ShapeMismatch: return "ShapeMismatch";
        case ErrorCode::NonIntegralOutputSize: return "NonIntegralOutputSize";
        case ErrorCode::OddSpatialDims: return "OddSpatialDims";
        case ErrorCode::NotScalar: return "NotScalar";
        case ErrorCode::MissingGrad: return "MissingGrad";
        case ErrorCode::InvalidConfig: return "InvalidConfig";
        case ErrorCode::TooFewItems: return "TooFewItems";
        case ErrorCode::NonSquareInput: return "NonSquareInput";
        case ErrorCode::EmptyDataset: return "EmptyDataset";
        case ErrorCode::PlanMismatch: return "PlanMismatch";
        case ErrorCode::EmptyMatrix: return "EmptyMatrix";
        case ErrorCode::DivisionByZero: return "DivisionByZero";
        case ErrorCode::OutOfRange: return "OutOfRange";
        case ErrorCode::NoLungDetected: return "NoLungDetected";
        case ErrorCode::SubsetViolation: return "SubsetViolation";
        case ErrorCode::InvalidArgument: return "InvalidArgument";
    }
    return "Unknown";
}

/// Every failure raised by the library carries one of the codes above so
/// callers (the CLI in particular) can map it onto an exit status.
class Error : public std::runtime_error {
public:
    Error(ErrorCode code, const std::string& message)
        : std::runtime_error(std::string(to_string(code)) + ": " + message), code_(code) {}

    [[nodiscard]] ErrorCode code() const noexcept { return code_; }

private:
    ErrorCode code_;
};

[[noreturn]] inline void fail(ErrorCode code, const std::string& message) {
    throw Error(code, message);
}

inline void require(bool condition, ErrorCode code, const std::string& message) {
    if (!condition) fail(code, message);
}

}  // namespace ctseg
