#ifndef BIGL_NIFTI_HPP
#define BIGL_NIFTI_HPP

// Minimal single-file NIfTI-1 reader/writer (gzip-compressed or plain) for
// 3D scalar volumes.

#include <zlib.h>

#include <array>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <string>
#include <vector>

#include "bigl/metrics.hpp"

namespace bigl {

struct VolumeHeader {
    std::int64_t depth = 0, height = 0, width = 0;
    Spacing3 spacing;
    std::int16_t datatype = 0;
};

namespace nifti {

inline constexpr std::int16_t kUint8 = 2;
inline constexpr std::int16_t kInt16 = 4;
inline constexpr std::int16_t kInt32 = 8;
inline constexpr std::int16_t kFloat32 = 16;
inline constexpr std::int16_t kFloat64 = 64;
inline constexpr std::int16_t kUint16 = 512;
inline constexpr std::size_t kHeaderSize = 348;
inline constexpr std::size_t kDataOffset = 352;

inline int bytes_per_voxel(std::int16_t datatype) {
    switch (datatype) {
        case kUint8: return 1;
        case kInt16:
        case kUint16: return 2;
        case kInt32:
        case kFloat32: return 4;
        case kFloat64: return 8;
        default: return 0;
    }
}

template <class T>
void put(std::array<char, kDataOffset>& buf, std::size_t offset, T v) {
    std::memcpy(buf.data() + offset, &v, sizeof(T));
}

template <class T>
T get(const std::array<char, kDataOffset>& buf, std::size_t offset) {
    T v;
    std::memcpy(&v, buf.data() + offset, sizeof(T));
    return v;
}

class GzFile {
public:
    GzFile(const std::filesystem::path& path, const char* mode) : file_(gzopen(path.c_str(), mode)) {}
    ~GzFile() {
        if (file_) gzclose(file_);
    }
    GzFile(const GzFile&) = delete;
    GzFile& operator=(const GzFile&) = delete;

    explicit operator bool() const { return file_ != nullptr; }
    gzFile get() const { return file_; }

    bool close() {
        const int rc = gzclose(file_);
        file_ = nullptr;
        return rc == Z_OK;
    }

private:
    gzFile file_;
};

inline VolumeHeader parse_header(const std::array<char, kDataOffset>& buf, const std::filesystem::path& path) {
    if (get<std::int32_t>(buf, 0) != 348) throw IngestError(path.string() + ": not a NIfTI-1 file");
    if (std::memcmp(buf.data() + 344, "n+1", 4) != 0 && std::memcmp(buf.data() + 344, "ni1", 4) != 0) {
        throw IngestError(path.string() + ": bad NIfTI magic");
    }
    const auto ndim = get<std::int16_t>(buf, 40);
    if (ndim < 2 || ndim > 4) throw IngestError(path.string() + ": unsupported dimensionality " + std::to_string(ndim));
    if (ndim == 4 && get<std::int16_t>(buf, 40 + 2 * 4) > 1) {
        throw IngestError(path.string() + ": 4D volumes with more than one frame are not supported");
    }
    VolumeHeader h;
    h.width = get<std::int16_t>(buf, 42);
    h.height = get<std::int16_t>(buf, 44);
    h.depth = ndim >= 3 ? get<std::int16_t>(buf, 46) : 1;
    if (h.width <= 0 || h.height <= 0 || h.depth <= 0) throw IngestError(path.string() + ": nonpositive dimension");
    h.datatype = get<std::int16_t>(buf, 70);
    if (bytes_per_voxel(h.datatype) == 0) {
        throw IngestError(path.string() + ": unsupported datatype " + std::to_string(h.datatype));
    }
    h.spacing.col_mm = get<float>(buf, 80);
    h.spacing.row_mm = get<float>(buf, 84);
    h.spacing.z_mm = ndim >= 3 ? get<float>(buf, 88) : 1.0;
    if (!(h.spacing.col_mm > 0.0) || !(h.spacing.row_mm > 0.0) || !(h.spacing.z_mm > 0.0)) {
        throw IngestError(path.string() + ": nonpositive voxel spacing");
    }
    return h;
}

inline std::array<char, kDataOffset> read_raw_header(GzFile& f, const std::filesystem::path& path) {
    std::array<char, kDataOffset> buf{};
    if (gzread(f.get(), buf.data(), static_cast<unsigned>(kDataOffset)) != static_cast<int>(kDataOffset)) {
        throw IngestError(path.string() + ": truncated header");
    }
    return buf;
}

}  // namespace nifti

inline VolumeHeader read_volume_header(const std::filesystem::path& path) {
    nifti::GzFile f(path, "rb");
    if (!f) throw IngestError(path.string() + ": cannot open");
    return nifti::parse_header(nifti::read_raw_header(f, path), path);
}

/// Reads any supported voxel type as double, applying the scaling slope.
inline Volume<double> read_volume(const std::filesystem::path& path, VolumeHeader* header_out = nullptr) {
    nifti::GzFile f(path, "rb");
    if (!f) throw IngestError(path.string() + ": cannot open");
    const auto buf = nifti::read_raw_header(f, path);
    const VolumeHeader h = nifti::parse_header(buf, path);
    const auto offset = static_cast<std::size_t>(nifti::get<float>(buf, 108));
    if (offset > nifti::kDataOffset) {
        std::vector<char> skip(offset - nifti::kDataOffset);
        if (gzread(f.get(), skip.data(), static_cast<unsigned>(skip.size())) != static_cast<int>(skip.size())) {
            throw IngestError(path.string() + ": truncated extension");
        }
    }
    double slope = nifti::get<float>(buf, 112), inter = nifti::get<float>(buf, 116);
    if (slope == 0.0) {
        slope = 1.0;
        inter = 0.0;
    }

    const auto n = static_cast<std::size_t>(h.depth * h.height * h.width);
    const int bpv = nifti::bytes_per_voxel(h.datatype);
    std::vector<char> raw(n * static_cast<std::size_t>(bpv));
    if (gzread(f.get(), raw.data(), static_cast<unsigned>(raw.size())) != static_cast<int>(raw.size())) {
        throw IngestError(path.string() + ": truncated voxel data");
    }
    Volume<double> v(h.depth, h.height, h.width, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
        const char* p = raw.data() + i * static_cast<std::size_t>(bpv);
        double x = 0.0;
        switch (h.datatype) {
            case nifti::kUint8: x = static_cast<unsigned char>(*p); break;
            case nifti::kInt16: { std::int16_t t; std::memcpy(&t, p, 2); x = t; break; }
            case nifti::kUint16: { std::uint16_t t; std::memcpy(&t, p, 2); x = t; break; }
            case nifti::kInt32: { std::int32_t t; std::memcpy(&t, p, 4); x = t; break; }
            case nifti::kFloat32: { float t; std::memcpy(&t, p, 4); x = t; break; }
            case nifti::kFloat64: { std::memcpy(&x, p, 8); break; }
            default: break;
        }
        v.values()[i] = x * slope + inter;
    }
    if (header_out) *header_out = h;
    return v;
}

/// Writes float32 (intensities) or int16 (labels) voxels, gzip-compressed.
inline void write_volume(const std::filesystem::path& path, const Volume<double>& v, const Spacing3& spacing,
                         std::int16_t datatype = nifti::kFloat32) {
    if (datatype != nifti::kFloat32 && datatype != nifti::kInt16) {
        throw IngestError("write_volume supports float32 and int16 only");
    }
    std::array<char, nifti::kDataOffset> buf{};
    nifti::put<std::int32_t>(buf, 0, 348);
    nifti::put<std::int16_t>(buf, 40, 3);
    nifti::put<std::int16_t>(buf, 42, static_cast<std::int16_t>(v.width()));
    nifti::put<std::int16_t>(buf, 44, static_cast<std::int16_t>(v.height()));
    nifti::put<std::int16_t>(buf, 46, static_cast<std::int16_t>(v.depth()));
    for (int i = 4; i < 8; ++i) nifti::put<std::int16_t>(buf, 40 + 2 * i, 1);
    nifti::put<std::int16_t>(buf, 70, datatype);
    nifti::put<std::int16_t>(buf, 72, static_cast<std::int16_t>(8 * nifti::bytes_per_voxel(datatype)));
    nifti::put<float>(buf, 76, 1.0f);
    nifti::put<float>(buf, 80, static_cast<float>(spacing.col_mm));
    nifti::put<float>(buf, 84, static_cast<float>(spacing.row_mm));
    nifti::put<float>(buf, 88, static_cast<float>(spacing.z_mm));
    nifti::put<float>(buf, 108, static_cast<float>(nifti::kDataOffset));
    nifti::put<float>(buf, 112, 1.0f);
    nifti::put<char>(buf, 123, 2);  // millimetres
    std::memcpy(buf.data() + 344, "n+1", 4);

    std::vector<char> raw(v.size() * static_cast<std::size_t>(nifti::bytes_per_voxel(datatype)));
    for (std::size_t i = 0; i < v.size(); ++i) {
        if (datatype == nifti::kFloat32) {
            const auto t = static_cast<float>(v.values()[i]);
            std::memcpy(raw.data() + 4 * i, &t, 4);
        } else {
            const auto t = static_cast<std::int16_t>(std::lround(v.values()[i]));
            std::memcpy(raw.data() + 2 * i, &t, 2);
        }
    }

    // gzip output is deterministic for identical input (no timestamp in gzopen streams)
    nifti::GzFile f(path, "wb6");
    if (!f) throw IngestError(path.string() + ": cannot open for writing");
    if (gzwrite(f.get(), buf.data(), static_cast<unsigned>(buf.size())) != static_cast<int>(buf.size()) ||
        gzwrite(f.get(), raw.data(), static_cast<unsigned>(raw.size())) != static_cast<int>(raw.size()) ||
        !f.close()) {
        throw IngestError(path.string() + ": write failed");
    }
}

}  // namespace bigl

#endif  // BIGL_NIFTI_HPP
