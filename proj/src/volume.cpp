#include "lasq/volume.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>

#include "lasq/util.hpp"
#include "json.hpp"

namespace lasq {

static void check_dims_spacing(const Dims& d, const Spacing& s) {
    if (d.nx <= 0 || d.ny <= 0 || d.nz <= 0)
        fail(errc::bad_argument, "dims must be positive, got (" + std::to_string(d.nx) + "," + std::to_string(d.ny) + "," + std::to_string(d.nz) + ")");
    if (!(s.sx > 0.0) || !(s.sy > 0.0) || !(s.sz > 0.0))
        fail(errc::bad_argument, "spacing must be strictly positive");
}

Volume3::Volume3(Dims dims, Spacing spacing, double fill)
    : dims_(dims), spacing_(spacing) {
    check_dims_spacing(dims, spacing);
    data_.assign(dims.count(), fill);
}

Volume3::Volume3(Dims dims, Spacing spacing, std::vector<double> data)
    : dims_(dims), spacing_(spacing), data_(std::move(data)) {
    check_dims_spacing(dims, spacing);
    if (data_.size() != dims.count())
        fail(errc::payload_length, "data length " + std::to_string(data_.size()) + " does not match dims product " + std::to_string(dims.count()));
}

void Volume3::check_finite(const char* context) const {
    for (std::size_t i = 0; i < data_.size(); ++i)
        if (!std::isfinite(data_[i]))
            fail(errc::non_finite, std::string(context) + ": non-finite value at flat index " + std::to_string(i));
}

void require_same_grid(const Volume3& a, const Volume3& b, const char* context) {
    if (!a.same_grid(b))
        fail(errc::grid_mismatch, std::string(context) + ": volumes are on different grids");
}

LabelVolume::LabelVolume(Volume3 vol, std::vector<int> alphabet)
    : vol_(std::move(vol)), alphabet_(std::move(alphabet)) {
    if (alphabet_.empty()) fail(errc::alphabet, "empty label alphabet");
    for (std::size_t i = 0; i < vol_.size(); ++i) {
        const double v = vol_[i];
        const int lab = static_cast<int>(v);
        if (static_cast<double>(lab) != v || std::find(alphabet_.begin(), alphabet_.end(), lab) == alphabet_.end())
            fail(errc::alphabet, "value " + std::to_string(v) + " at flat index " + std::to_string(i) + " is not in the label alphabet");
    }
}

std::size_t LabelVolume::count(int label) const {
    std::size_t n = 0;
    for (std::size_t i = 0; i < vol_.size(); ++i)
        if (label_at(i) == label) ++n;
    return n;
}

const char* to_string(ValueKind k) {
    switch (k) {
        case ValueKind::intensity: return "intensity";
        case ValueKind::label: return "label";
        case ValueKind::probability: return "probability";
        case ValueKind::distance: return "distance";
    }
    return "intensity";
}

ValueKind value_kind_from_string(const std::string& s) {
    if (s == "intensity") return ValueKind::intensity;
    if (s == "label") return ValueKind::label;
    if (s == "probability") return ValueKind::probability;
    if (s == "distance") return ValueKind::distance;
    fail(errc::unknown_kind, "unknown value kind \"" + s + "\" at byte offset 0");
}

void VolumeHeader::validate_against(const Volume3& vol) const {
    if (!(dims == vol.dims()) || !(spacing == vol.spacing()))
        fail(errc::grid_mismatch, "header dims/spacing do not match payload volume");
    if (kind == ValueKind::label) {
        if (!alphabet) fail(errc::alphabet, "label header without alphabet");
        LabelVolume(vol, *alphabet); // throws on out-of-alphabet values
    }
    vol.check_finite("header validation");
}

std::string payload_checksum(const Volume3& vol) {
    std::uint64_t h = 0xcbf29ce484222325ull;
    for (double v : vol.data()) {
        const std::uint64_t bits = std::bit_cast<std::uint64_t>(v);
        unsigned char le[8];
        for (int b = 0; b < 8; ++b) le[b] = static_cast<unsigned char>((bits >> (8 * b)) & 0xff);
        h = fnv1a64(le, 8, h);
    }
    char buf[32];
    std::snprintf(buf, sizeof buf, "fnv1a64:%016llx", static_cast<unsigned long long>(h));
    return buf;
}

void write_mvol(const std::string& path, const VolumeHeader& header, const Volume3& vol) {
    header.validate_against(vol);

    nlohmann::json j;
    j["dims"] = {header.dims.nx, header.dims.ny, header.dims.nz};
    j["spacing"] = {header.spacing.sx, header.spacing.sy, header.spacing.sz};
    j["kind"] = to_string(header.kind);
    if (header.alphabet) j["alphabet"] = *header.alphabet;
    if (header.checksum) j["checksum"] = *header.checksum;

    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) fail(errc::io, "cannot open " + path + " for writing");
    out << j.dump() << '\n';
    std::vector<unsigned char> buf(vol.size() * 8);
    for (std::size_t i = 0; i < vol.size(); ++i) {
        const std::uint64_t bits = std::bit_cast<std::uint64_t>(vol[i]);
        for (int b = 0; b < 8; ++b) buf[i * 8 + b] = static_cast<unsigned char>((bits >> (8 * b)) & 0xff);
    }
    out.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
    if (!out) fail(errc::io, "short write to " + path);
}

std::pair<VolumeHeader, Volume3> read_mvol(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) fail(errc::io, "cannot open " + path);

    std::string line;
    if (!std::getline(in, line))
        fail(errc::malformed_header, path + ": missing header line at byte offset 0");
    const std::size_t payload_offset = line.size() + 1;

    nlohmann::json j = nlohmann::json::parse(line, nullptr, false);
    if (j.is_discarded() || !j.is_object())
        fail(errc::malformed_header, path + ": header is not a JSON object (byte offset 0)");

    VolumeHeader h;
    try {
        const auto& jd = j.at("dims");
        const auto& js = j.at("spacing");
        if (jd.size() != 3 || js.size() != 3) throw nlohmann::json::other_error::create(501, "bad arity", nullptr);
        h.dims = {jd[0].get<int>(), jd[1].get<int>(), jd[2].get<int>()};
        h.spacing = {js[0].get<double>(), js[1].get<double>(), js[2].get<double>()};
        h.kind = value_kind_from_string(j.at("kind").get<std::string>());
        if (j.contains("alphabet")) h.alphabet = j["alphabet"].get<std::vector<int>>();
        if (j.contains("checksum")) h.checksum = j["checksum"].get<std::string>();
    } catch (const Error&) {
        throw;
    } catch (const std::exception& e) {
        fail(errc::malformed_header, path + ": " + e.what() + " (byte offset 0)");
    }
    if (h.dims.nx <= 0 || h.dims.ny <= 0 || h.dims.nz <= 0 || !(h.spacing.sx > 0) || !(h.spacing.sy > 0) || !(h.spacing.sz > 0))
        fail(errc::malformed_header, path + ": non-positive dims or spacing (byte offset 0)");

    const std::size_t n = h.dims.count();
    std::vector<unsigned char> buf(n * 8);
    in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
    const std::size_t got = static_cast<std::size_t>(in.gcount());
    if (got != n * 8)
        fail(errc::payload_length, path + ": expected " + std::to_string(n * 8) + " payload bytes, got " + std::to_string(got) + " (payload starts at byte offset " + std::to_string(payload_offset) + ")");
    char extra;
    if (in.read(&extra, 1))
        fail(errc::payload_length, path + ": trailing bytes after payload at byte offset " + std::to_string(payload_offset + n * 8));

    std::vector<double> data(n);
    for (std::size_t i = 0; i < n; ++i) {
        std::uint64_t bits = 0;
        for (int b = 0; b < 8; ++b) bits |= static_cast<std::uint64_t>(buf[i * 8 + b]) << (8 * b);
        data[i] = std::bit_cast<double>(bits);
        if (!std::isfinite(data[i]))
            fail(errc::non_finite, path + ": non-finite payload value at byte offset " + std::to_string(payload_offset + i * 8));
    }
    Volume3 vol(h.dims, h.spacing, std::move(data));
    if (h.checksum) {
        const std::string actual = payload_checksum(vol);
        if (actual != *h.checksum)
            fail(errc::checksum_mismatch, path + ": payload checksum " + actual + " does not match header " + *h.checksum);
    }
    h.validate_against(vol);
    return {h, std::move(vol)};
}

Volume3 read_mvol_volume(const std::string& path) {
    return read_mvol(path).second;
}

LabelVolume read_mvol_label(const std::string& path, const std::vector<int>& expected_alphabet) {
    auto [h, vol] = read_mvol(path);
    return LabelVolume(std::move(vol), expected_alphabet);
}

std::vector<std::uint8_t> export_slice_pgm(const Volume3& vol, char axis, int index, double lo, double hi) {
    if (!(lo < hi)) fail(errc::degenerate_window, "window requires lo < hi");
    const Dims d = vol.dims();
    int w = 0, h = 0;
    switch (axis) {
        case 'x': w = d.ny; h = d.nz; if (index < 0 || index >= d.nx) fail(errc::out_of_range, "slice index out of range on axis x"); break;
        case 'y': w = d.nx; h = d.nz; if (index < 0 || index >= d.ny) fail(errc::out_of_range, "slice index out of range on axis y"); break;
        case 'z': w = d.nx; h = d.ny; if (index < 0 || index >= d.nz) fail(errc::out_of_range, "slice index out of range on axis z"); break;
        default: fail(errc::bad_argument, std::string("unknown axis '") + axis + "'");
    }

    std::string head = "P5\n" + std::to_string(w) + " " + std::to_string(h) + "\n255\n";
    std::vector<std::uint8_t> out(head.begin(), head.end());
    out.reserve(out.size() + static_cast<std::size_t>(w) * h);
    const double scale = 255.0 / (hi - lo);
    for (int row = 0; row < h; ++row) {
        for (int col = 0; col < w; ++col) {
            double v;
            if (axis == 'x') v = vol.at(index, col, row);
            else if (axis == 'y') v = vol.at(col, index, row);
            else v = vol.at(col, row, index);
            double u = (v - lo) * scale;
            u = std::clamp(u, 0.0, 255.0);
            out.push_back(static_cast<std::uint8_t>(std::llround(u)));
        }
    }
    return out;
}

} // namespace lasq
