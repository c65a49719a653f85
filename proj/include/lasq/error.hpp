#pragma once

#include <stdexcept>
#include <string>

namespace lasq {

// All library failures carry a short machine-parsable category; the CLI maps
// categories to distinct exit codes (see README).
class Error : public std::runtime_error {
public:
    Error(std::string category, const std::string& detail)
        : std::runtime_error("error: " + category + ": " + detail),
          category_(std::move(category)) {}

    const std::string& category() const { return category_; }

private:
    std::string category_;
};

namespace errc {
inline constexpr const char* io = "io";
inline constexpr const char* malformed_header = "malformed-header";
inline constexpr const char* payload_length = "payload-length";
inline constexpr const char* non_finite = "non-finite";
inline constexpr const char* unknown_kind = "unknown-kind";
inline constexpr const char* checksum_mismatch = "checksum-mismatch";
inline constexpr const char* alphabet = "alphabet";
inline constexpr const char* grid_mismatch = "grid-mismatch";
inline constexpr const char* empty_class = "empty-class";
inline constexpr const char* degenerate_field = "degenerate-field";
inline constexpr const char* out_of_range = "out-of-range";
inline constexpr const char* degenerate_window = "degenerate-window";
inline constexpr const char* constant_input = "constant-input";
inline constexpr const char* empty_surface = "empty-surface";
inline constexpr const char* empty_la = "empty-la";
inline constexpr const char* infeasible_spec = "infeasible-spec";
inline constexpr const char* divergence = "divergence";
inline constexpr const char* bad_argument = "bad-argument";
} // namespace errc

[[noreturn]] inline void fail(const char* category, const std::string& detail) {
    throw Error(category, detail);
}

} // namespace lasq
