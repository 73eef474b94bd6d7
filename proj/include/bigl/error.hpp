#ifndef BIGL_ERROR_HPP
#define BIGL_ERROR_HPP

#include <stdexcept>
#include <string>

namespace bigl {

/// Root of every error raised by the library. `kind()` is a stable tag that
/// the CLI maps to exit codes and that tests match against.
class Error : public std::runtime_error {
public:
    Error(std::string kind, const std::string& what)
        : std::runtime_error(kind + ": " + what), kind_(std::move(kind)) {}

    const std::string& kind() const noexcept { return kind_; }

private:
    std::string kind_;
};

#define BIGL_DEFINE_ERROR(Name)                                         \
    class Name : public Error {                                         \
    public:                                                             \
        explicit Name(const std::string& what) : Error(#Name, what) {}  \
    }

BIGL_DEFINE_ERROR(EmptyImage);
BIGL_DEFINE_ERROR(LabelSchemeViolation);
BIGL_DEFINE_ERROR(DirectionMismatch);
BIGL_DEFINE_ERROR(ShapeMismatch);
BIGL_DEFINE_ERROR(NonFiniteActivation);
BIGL_DEFINE_ERROR(NonFiniteLoss);
BIGL_DEFINE_ERROR(EmptyEpoch);
BIGL_DEFINE_ERROR(LevelMismatch);
BIGL_DEFINE_ERROR(FrozenContractViolation);
BIGL_DEFINE_ERROR(IncompleteReport);
BIGL_DEFINE_ERROR(ScheduleExhausted);
BIGL_DEFINE_ERROR(CheckpointWriteError);
BIGL_DEFINE_ERROR(CheckpointReadError);
BIGL_DEFINE_ERROR(IncompleteCase);
BIGL_DEFINE_ERROR(IngestError);
BIGL_DEFINE_ERROR(InsufficientCases);
BIGL_DEFINE_ERROR(ConfigError);

#undef BIGL_DEFINE_ERROR

/// Surface distances need a nonempty border on both sides.
class UndefinedDistance : public Error {
public:
    enum class Side { Prediction, GroundTruth };

    explicit UndefinedDistance(Side side)
        : Error("UndefinedDistance",
                side == Side::Prediction ? "prediction mask is empty" : "ground-truth mask is empty"),
          side_(side) {}

    Side side() const noexcept { return side_; }

private:
    Side side_;
};

}  // namespace bigl

#endif  // BIGL_ERROR_HPP
