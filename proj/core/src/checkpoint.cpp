#include "rangediff/checkpoint.hpp"

#include <limits>

#include "rangediff/binary_io.hpp"
#include "rangediff/errors.hpp"

namespace rangediff {

void write_checkpoint(const std::filesystem::path& path, const std::vector<NamedBuffer>& buffers) {
    io::ByteWriter w;
    w.put_bytes("OLCK");
    w.put<std::uint16_t>(kCheckpointVersion);
    w.put<std::uint32_t>(static_cast<std::uint32_t>(buffers.size()));
    for (const auto& b : buffers) {
        if (b.name.size() > std::numeric_limits<std::uint16_t>::max())
            throw IoError("buffer name too long for OLCK: " + b.name.substr(0, 32) + "...");
        if (b.shape.size() > 255) throw IoError("buffer '" + b.name + "' has rank above 255");
        if (shape_numel(b.shape) != b.values.size())
            throw DimensionError("buffer '" + b.name + "' shape does not match its value count");
        w.put<std::uint16_t>(static_cast<std::uint16_t>(b.name.size()));
        w.put_bytes(b.name);
        w.put<std::uint8_t>(static_cast<std::uint8_t>(b.shape.size()));
        for (auto e : b.shape) w.put<std::uint32_t>(static_cast<std::uint32_t>(e));
        for (float v : b.values) w.put<float>(v);
    }
    w.save(path);
}

std::vector<NamedBuffer> read_checkpoint(const std::filesystem::path& path) {
    io::ByteReader r(path);
    r.expect_magic("OLCK");
    const auto version = r.get<std::uint16_t>();
    if (version != kCheckpointVersion)
        throw IoError("'" + path.string() + "': unsupported OLCK version " + std::to_string(version));
    const auto count = r.get<std::uint32_t>();
    std::vector<NamedBuffer> out;
    out.reserve(count);
    for (std::uint32_t i = 0; i < count; ++i) {
        NamedBuffer b;
        b.name = r.get_bytes(r.get<std::uint16_t>());
        const auto rank = r.get<std::uint8_t>();
        for (std::uint8_t k = 0; k < rank; ++k) b.shape.push_back(r.get<std::uint32_t>());
        b.values.resize(shape_numel(b.shape));
        for (auto& v : b.values) v = r.get<float>();
        out.push_back(std::move(b));
    }
    if (!r.at_end()) throw IoError("'" + path.string() + "' has trailing bytes after the last buffer");
    return out;
}

std::vector<NamedBuffer> snapshot(const ParamStore& params) {
    std::vector<NamedBuffer> out;
    for (const auto& e : params.entries()) {
        NamedBuffer b{e.name, e.tensor.shape(), {}};
        b.values.assign(e.tensor.data().begin(), e.tensor.data().end());
        out.push_back(std::move(b));
    }
    return out;
}

void restore(ParamStore& params, const std::vector<NamedBuffer>& buffers) {
    for (auto& e : params.entries()) {
        const NamedBuffer* found = nullptr;
        for (const auto& b : buffers)
            if (b.name == e.name) found = &b;
        if (!found) throw IoError("checkpoint is missing parameter '" + e.name + "'");
        if (found->shape != e.tensor.shape())
            throw DimensionError("checkpoint buffer '" + e.name + "' has shape " + shape_str(found->shape) +
                                 ", model expects " + shape_str(e.tensor.shape()));
        auto dst = e.tensor.mutable_data();
        for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = found->values[i];
    }
}

}  // namespace rangediff
