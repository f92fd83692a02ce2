#pragma once

#include <stdexcept>
#include <string>

namespace fedul {

// Base of every error the library raises. `kind()` is a stable token used in
// machine-readable diagnostics.
class Error : public std::runtime_error {
public:
    explicit Error(const std::string& what) : std::runtime_error(what) {}
    virtual const char* kind() const noexcept { return "error"; }
};

#define FEDUL_DECLARE_ERROR(Name, token)                                  \
    class Name : public Error {                                           \
    public:                                                               \
        explicit Name(const std::string& what) : Error(what) {}           \
        const char* kind() const noexcept override { return token; }      \
    };

FEDUL_DECLARE_ERROR(ShapeError, "shape")
FEDUL_DECLARE_ERROR(PreconditionError, "precondition")
FEDUL_DECLARE_ERROR(InvariantError, "invariant")
FEDUL_DECLARE_ERROR(GenerationError, "generation")
FEDUL_DECLARE_ERROR(RankError, "rank")
FEDUL_DECLARE_ERROR(SingularityError, "singularity")
FEDUL_DECLARE_ERROR(NotInImageError, "not_in_image")
FEDUL_DECLARE_ERROR(AllocationError, "allocation")
FEDUL_DECLARE_ERROR(FormatError, "format")
FEDUL_DECLARE_ERROR(NonFiniteError, "non_finite")
FEDUL_DECLARE_ERROR(IoError, "io")

#undef FEDUL_DECLARE_ERROR

// Raised when a client's local objective stops being finite.
class DivergenceError : public Error {
public:
    DivergenceError(const std::string& what, std::size_t round, std::size_t step)
        : Error(what + " (round " + std::to_string(round) + ", step " + std::to_string(step) + ")"),
          round_(round), step_(step) {}
    const char* kind() const noexcept override { return "divergence"; }
    std::size_t round() const noexcept { return round_; }
    std::size_t step() const noexcept { return step_; }

private:
    std::size_t round_;
    std::size_t step_;
};

// Schema violation in an experiment file; `pointer()` is a JSON pointer.
class ConfigError : public Error {
public:
    ConfigError(std::string pointer, const std::string& what)
        : Error(what), pointer_(std::move(pointer)) {}
    const char* kind() const noexcept override { return "config"; }
    const std::string& pointer() const noexcept { return pointer_; }

private:
    std::string pointer_;
};

}  // namespace fedul
