#pragma once

#include <stdexcept>
#include <string>

namespace insider {

/// Base class for every numerical failure raised by the library.
class Error : public std::runtime_error {
public:
    explicit Error(const std::string& what) : std::runtime_error(what) {}
};

#define INSIDER_DEFINE_ERROR(Name)                                  \
    class Name : public Error {                                     \
    public:                                                         \
        explicit Name(const std::string& what) : Error(what) {}     \
    };

INSIDER_DEFINE_ERROR(DegenerateVariance)
INSIDER_DEFINE_ERROR(QuadratureFailure)
INSIDER_DEFINE_ERROR(DivisionUnstable)
INSIDER_DEFINE_ERROR(UnknownMark)
INSIDER_DEFINE_ERROR(MissingDerivativeCallback)
INSIDER_DEFINE_ERROR(NonParabolic)
INSIDER_DEFINE_ERROR(LinearSolveFailure)
INSIDER_DEFINE_ERROR(StepTooLarge)
INSIDER_DEFINE_ERROR(DegenerateVolatility)
INSIDER_DEFINE_ERROR(MassCollapse)
INSIDER_DEFINE_ERROR(WeightDegeneracy)
INSIDER_DEFINE_ERROR(DegenerateCurvature)
INSIDER_DEFINE_ERROR(BoundaryViolation)

#undef INSIDER_DEFINE_ERROR

}  // namespace insider
