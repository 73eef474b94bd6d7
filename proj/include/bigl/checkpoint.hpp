#ifndef BIGL_CHECKPOINT_HPP
#define BIGL_CHECKPOINT_HPP

// Binary checkpoints: a text header followed by named float64 tensors.
//
//   BIGL-CKPT-1\n
//   kind=<segnet|generator|image_disc|disc>\n
//   tag=<direction/domain/level tag>\n
//   epoch=<n>\n iteration=<n>\n config_hash=<hex>\n tensors=<n>\n
//   per tensor: u32 name length, name, u32 rank, i64 dims[rank], f64 values
//
// Optimizer state is stored as extra tensors prefixed "opt.".

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "bigl/nn.hpp"
#include "bigl/optim.hpp"

namespace bigl {

inline constexpr const char* kCheckpointMagic = "BIGL-CKPT-1";
inline constexpr const char* kOptimizerPrefix = "opt.";

struct CheckpointHeader {
    std::string kind;
    std::string tag;
    std::int64_t epoch = 0;
    std::int64_t iteration = 0;
    std::uint64_t config_hash = 0;

    friend bool operator==(const CheckpointHeader&, const CheckpointHeader&) = default;
};

struct Checkpoint {
    CheckpointHeader header;
    std::vector<NamedParameter> tensors;

    const Tensor* find(const std::string& name) const {
        for (const auto& t : tensors) {
            if (t.name == name) return &t.tensor;
        }
        return nullptr;
    }
};

namespace detail {

template <class T>
void write_pod(std::ofstream& out, T v) {
    out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <class T>
T read_pod(std::ifstream& in, const std::filesystem::path& path) {
    T v{};
    if (!in.read(reinterpret_cast<char*>(&v), sizeof(T))) throw CheckpointReadError(path.string() + ": truncated");
    return v;
}

}  // namespace detail

/// Writes to a sibling temp file, then renames over the target.
inline void write_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
    namespace fs = std::filesystem;
    std::error_code ec;
    if (path.has_parent_path()) fs::create_directories(path.parent_path(), ec);
    if (ec) throw CheckpointWriteError(path.string() + ": " + ec.message());
    const fs::path tmp = path.string() + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw CheckpointWriteError(tmp.string() + ": cannot open for writing");
        char hash[20];
        std::snprintf(hash, sizeof(hash), "%016llx", static_cast<unsigned long long>(ckpt.header.config_hash));
        out << kCheckpointMagic << '\n'
            << "kind=" << ckpt.header.kind << '\n'
            << "tag=" << ckpt.header.tag << '\n'
            << "epoch=" << ckpt.header.epoch << '\n'
            << "iteration=" << ckpt.header.iteration << '\n'
            << "config_hash=" << hash << '\n'
            << "tensors=" << ckpt.tensors.size() << '\n';
        for (const auto& [name, t] : ckpt.tensors) {
            detail::write_pod<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
            out.write(name.data(), static_cast<std::streamsize>(name.size()));
            detail::write_pod<std::uint32_t>(out, static_cast<std::uint32_t>(t.rank()));
            for (auto d : t.shape()) detail::write_pod<std::int64_t>(out, d);
            out.write(reinterpret_cast<const char*>(t.data().data()),
                      static_cast<std::streamsize>(t.size() * sizeof(double)));
        }
        out.flush();
        if (!out) throw CheckpointWriteError(tmp.string() + ": write failed");
    }
    fs::rename(tmp, path, ec);
    if (ec) throw CheckpointWriteError(path.string() + ": rename failed: " + ec.message());
}

inline Checkpoint read_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw CheckpointReadError(path.string() + ": cannot open");
    auto line = [&](const char* key) {
        std::string s;
        if (!std::getline(in, s)) throw CheckpointReadError(path.string() + ": truncated header");
        if (key == nullptr) return s;
        const std::string prefix = std::string(key) + "=";
        if (s.rfind(prefix, 0) != 0) throw CheckpointReadError(path.string() + ": expected " + key);
        return s.substr(prefix.size());
    };
    if (line(nullptr) != kCheckpointMagic) throw CheckpointReadError(path.string() + ": not a checkpoint");
    Checkpoint c;
    try {
        c.header.kind = line("kind");
        c.header.tag = line("tag");
        c.header.epoch = std::stoll(line("epoch"));
        c.header.iteration = std::stoll(line("iteration"));
        c.header.config_hash = std::stoull(line("config_hash"), nullptr, 16);
    } catch (const std::logic_error&) {
        throw CheckpointReadError(path.string() + ": malformed header");
    }
    const auto n = std::stoull(line("tensors"));
    for (std::size_t i = 0; i < n; ++i) {
        const auto len = detail::read_pod<std::uint32_t>(in, path);
        if (len > 4096) throw CheckpointReadError(path.string() + ": implausible name length");
        std::string name(len, '\0');
        if (!in.read(name.data(), len)) throw CheckpointReadError(path.string() + ": truncated");
        const auto rank = detail::read_pod<std::uint32_t>(in, path);
        if (rank > 8) throw CheckpointReadError(path.string() + ": implausible rank");
        Shape shape;
        for (std::uint32_t r = 0; r < rank; ++r) shape.push_back(detail::read_pod<std::int64_t>(in, path));
        std::vector<double> values(static_cast<std::size_t>(numel(shape)));
        if (!in.read(reinterpret_cast<char*>(values.data()), static_cast<std::streamsize>(values.size() * sizeof(double)))) {
            throw CheckpointReadError(path.string() + ": truncated tensor " + name);
        }
        c.tensors.push_back({name, Tensor::from(shape, std::move(values))});
    }
    return c;
}

/// Snapshot of a module's parameters plus optional optimizer buffers.
inline Checkpoint make_checkpoint(const Module& m, CheckpointHeader header, const Optimizer* opt = nullptr) {
    Checkpoint c{std::move(header), {}};
    for (const auto& p : m.parameters()) c.tensors.push_back({p.name, p.tensor.detach()});
    if (opt) {
        for (const auto& b : opt->buffers()) c.tensors.push_back({kOptimizerPrefix + b.name, b.tensor});
    }
    return c;
}

/// Copies parameter values (and optimizer buffers when `opt` is given) in
/// place. Every module parameter must be present with a matching shape.
inline void load_checkpoint(const Checkpoint& c, Module& m, const std::string& expected_kind,
                            Optimizer* opt = nullptr) {
    if (c.header.kind != expected_kind) {
        throw CheckpointReadError("checkpoint kind '" + c.header.kind + "' where '" + expected_kind + "' expected");
    }
    for (const auto& p : m.parameters()) {
        const Tensor* src = c.find(p.name);
        if (!src) throw CheckpointReadError("checkpoint lacks parameter " + p.name);
        if (src->shape() != p.tensor.shape()) {
            throw CheckpointReadError("parameter " + p.name + ": shape " + to_string(src->shape()) + " vs " +
                                      to_string(p.tensor.shape()));
        }
        Tensor dst = p.tensor;
        std::copy(src->data().begin(), src->data().end(), dst.mutable_data().begin());
    }
    if (opt) {
        std::vector<NamedParameter> buffers;
        const std::string prefix = kOptimizerPrefix;
        for (const auto& t : c.tensors) {
            if (t.name.rfind(prefix, 0) == 0) buffers.push_back({t.name.substr(prefix.size()), t.tensor});
        }
        opt->load_buffers(buffers);
    }
}

}  // namespace bigl

#endif  // BIGL_CHECKPOINT_HPP
