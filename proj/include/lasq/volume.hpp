#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "lasq/error.hpp"

namespace lasq {

struct Dims {
    int nx = 0, ny = 0, nz = 0;

    bool operator==(const Dims&) const = default;
    std::size_t count() const { return static_cast<std::size_t>(nx) * ny * nz; }
};

struct Spacing {
    double sx = 1.0, sy = 1.0, sz = 1.0;

    bool operator==(const Spacing&) const = default;
    double axis(int a) const { return a == 0 ? sx : (a == 1 ? sy : sz); }
};

// Dense 3-D scalar grid, x-fastest flat ordering. The payload type is always
// 64-bit float; labels are constrained by LabelVolume on top of this.
class Volume3 {
public:
    Volume3() = default;
    Volume3(Dims dims, Spacing spacing, double fill = 0.0);
    Volume3(Dims dims, Spacing spacing, std::vector<double> data);

    const Dims& dims() const { return dims_; }
    const Spacing& spacing() const { return spacing_; }
    std::size_t size() const { return data_.size(); }

    std::size_t index(int i, int j, int k) const {
        return static_cast<std::size_t>(i) + static_cast<std::size_t>(dims_.nx) * (static_cast<std::size_t>(j) + static_cast<std::size_t>(dims_.ny) * k);
    }
    std::array<int, 3> coords(std::size_t idx) const {
        const int i = static_cast<int>(idx % dims_.nx);
        const int j = static_cast<int>((idx / dims_.nx) % dims_.ny);
        const int k = static_cast<int>(idx / (static_cast<std::size_t>(dims_.nx) * dims_.ny));
        return {i, j, k};
    }
    bool in_bounds(int i, int j, int k) const {
        return i >= 0 && j >= 0 && k >= 0 && i < dims_.nx && j < dims_.ny && k < dims_.nz;
    }

    double& at(int i, int j, int k) { return data_[index(i, j, k)]; }
    double at(int i, int j, int k) const { return data_[index(i, j, k)]; }
    double& operator[](std::size_t idx) { return data_[idx]; }
    double operator[](std::size_t idx) const { return data_[idx]; }

    std::vector<double>& data() { return data_; }
    const std::vector<double>& data() const { return data_; }

    bool same_grid(const Volume3& o) const { return dims_ == o.dims_ && spacing_ == o.spacing_; }

    // Throws errc::non_finite with the flat index of the first bad value.
    void check_finite(const char* context) const;

private:
    Dims dims_;
    Spacing spacing_;
    std::vector<double> data_;
};

void require_same_grid(const Volume3& a, const Volume3& b, const char* context);

// A Volume3 whose values are restricted to a declared label alphabet.
class LabelVolume {
public:
    LabelVolume() = default;
    LabelVolume(Volume3 vol, std::vector<int> alphabet);

    const Volume3& vol() const { return vol_; }
    const std::vector<int>& alphabet() const { return alphabet_; }

    int label_at(std::size_t idx) const { return static_cast<int>(vol_[idx]); }
    int label_at(int i, int j, int k) const { return static_cast<int>(vol_.at(i, j, k)); }

    std::size_t count(int label) const;

private:
    Volume3 vol_;
    std::vector<int> alphabet_;
};

enum class ValueKind { intensity, label, probability, distance };

const char* to_string(ValueKind k);
ValueKind value_kind_from_string(const std::string& s);

struct VolumeHeader {
    Dims dims;
    Spacing spacing;
    ValueKind kind = ValueKind::intensity;
    std::optional<std::vector<int>> alphabet; // present iff kind == label
    std::optional<std::string> checksum;      // "fnv1a64:<hex>"

    void validate_against(const Volume3& vol) const;
};

std::string payload_checksum(const Volume3& vol);

// MVOL: one UTF-8 JSON header line ('\n'-terminated), then the raw
// little-endian float64 payload, x-fastest.
void write_mvol(const std::string& path, const VolumeHeader& header, const Volume3& vol);
std::pair<VolumeHeader, Volume3> read_mvol(const std::string& path);

Volume3 read_mvol_volume(const std::string& path);
LabelVolume read_mvol_label(const std::string& path, const std::vector<int>& expected_alphabet);

// Binary PGM (P5, maxval 255) of one slice, values windowed linearly from
// [lo,hi] to [0,255] and clamped.
std::vector<std::uint8_t> export_slice_pgm(const Volume3& vol, char axis, int index, double lo, double hi);

} // namespace lasq
