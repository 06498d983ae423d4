#pragma once

#include <stdexcept>
#include <string>

namespace sadkit {

/// Base class for all toolkit errors.
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Invalid parameter set or domain object (violated invariant).
struct InvalidArgument : Error {
    using Error::Error;
};

/// Rational function evaluated at one of its poles.
struct PoleAtEvaluation : Error {
    using Error::Error;
};

/// Winding-number curve passes through the test point.
struct OnBoundary : Error {
    using Error::Error;
};

/// Frequency sampling too coarse to resolve the curve (argument jump >= pi).
struct GridTooCoarse : Error {
    using Error::Error;
};

struct SingularMatrix : Error {
    using Error::Error;
};

/// Perturbation too small to solve for grid impedance.
struct InsufficientExcitation : Error {
    using Error::Error;
};

/// Signal did not reach steady state within the available window.
struct NotSettled : Error {
    using Error::Error;
};

/// Admittance scan aborted (device unstable or projection never converged).
struct ScanRefused : Error {
    using Error::Error;
};

/// No damper design satisfies the margin constraint within search bounds.
struct InfeasibleDesign : Error {
    InfeasibleDesign(const std::string& msg, double best) : Error(msg), best_margin(best) {}
    double best_margin;
};

/// Config file or persisted artifact failed to parse.
struct ParseError : Error {
    using Error::Error;
};

/// Training diverged even after step-size restarts.
struct TrainingDiverged : Error {
    using Error::Error;
};

}  // namespace sadkit
