#pragma once

#include <array>
#include <cstddef>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>

namespace histotype {

// Error categories map one-to-one onto CLI exit codes.
enum class ErrorKind { Validation = 1, Runtime = 2, Protocol = 3 };

class Error : public std::runtime_error {
public:
    Error(ErrorKind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
    ErrorKind kind() const noexcept { return kind_; }

private:
    ErrorKind kind_;
};

struct ValidationError : Error {
    explicit ValidationError(const std::string& what) : Error(ErrorKind::Validation, what) {}
};

struct RuntimeError : Error {
    explicit RuntimeError(const std::string& what) : Error(ErrorKind::Runtime, what) {}
};

struct ProtocolError : Error {
    explicit ProtocolError(const std::string& what) : Error(ErrorKind::Protocol, what) {}
};

/// Molecular subtypes in their declared order. The order matters: feature
/// columns, model classes and argmax tie-breaking all follow it.
enum class Subtype : int { LumA = 0, LumB = 1, HER2 = 2, Basal = 3 };

inline constexpr std::size_t kNumSubtypes = 4;
inline constexpr std::array<Subtype, kNumSubtypes> kAllSubtypes = {
    Subtype::LumA, Subtype::LumB, Subtype::HER2, Subtype::Basal};

std::string_view subtype_name(Subtype s);

/// Accepts the canonical names plus "BL" as an alias for Basal.
std::optional<Subtype> parse_subtype(std::string_view name);

inline std::size_t index_of(Subtype s) { return static_cast<std::size_t>(s); }

}  // namespace histotype
