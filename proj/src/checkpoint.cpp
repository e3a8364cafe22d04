#include "ordistage/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

#include "ordistage/errors.hpp"

namespace ordistage {

namespace {

constexpr char kMagic[4] = {'O', 'S', 'T', 'G'};

template <class T>
void put_le(std::vector<std::uint8_t>& out, T value) {
    static_assert(std::is_unsigned_v<T>);
    for (std::size_t i = 0; i < sizeof(T); ++i) out.push_back(static_cast<std::uint8_t>(value >> (8 * i)));
}

class Reader {
public:
    explicit Reader(const std::vector<std::uint8_t>& bytes) : bytes_(bytes) {}

    template <class T>
    T get_le() {
        need(sizeof(T));
        T value = 0;
        for (std::size_t i = 0; i < sizeof(T); ++i) value |= static_cast<T>(T{bytes_[pos_ + i]} << (8 * i));
        pos_ += sizeof(T);
        return value;
    }

    std::string get_string(std::size_t n) {
        need(n);
        std::string s(reinterpret_cast<const char*>(bytes_.data() + pos_), n);
        pos_ += n;
        return s;
    }

    bool done() const { return pos_ == bytes_.size(); }

private:
    void need(std::size_t n) const {
        if (pos_ + n > bytes_.size()) throw DataError("checkpoint truncated");
    }

    const std::vector<std::uint8_t>& bytes_;
    std::size_t pos_ = 0;
};

}  // namespace

std::vector<std::uint8_t> encode_checkpoint(const ParameterMap& params) {
    std::vector<std::uint8_t> out(std::begin(kMagic), std::end(kMagic));
    put_le<std::uint32_t>(out, kCheckpointVersion);
    put_le<std::uint32_t>(out, static_cast<std::uint32_t>(params.size()));
    for (const auto& [name, tensor] : params) {
        if (name.size() > 0xFFFF) throw ParameterError("parameter name too long: " + name);
        put_le<std::uint16_t>(out, static_cast<std::uint16_t>(name.size()));
        out.insert(out.end(), name.begin(), name.end());
        const auto& shape = tensor.shape();
        if (shape.size() > 0xFF) throw ParameterError("rank too large for " + name);
        out.push_back(static_cast<std::uint8_t>(shape.size()));
        for (auto d : shape) put_le<std::uint32_t>(out, static_cast<std::uint32_t>(d));
        for (double v : tensor.data()) put_le<std::uint64_t>(out, std::bit_cast<std::uint64_t>(v));
    }
    return out;
}

ParameterMap decode_checkpoint(const std::vector<std::uint8_t>& bytes) {
    Reader in(bytes);
    if (in.get_string(4) != std::string(kMagic, 4)) throw DataError("not an OSTG checkpoint");
    const auto version = in.get_le<std::uint32_t>();
    if (version != kCheckpointVersion) throw DataError("unsupported checkpoint version " + std::to_string(version));
    const auto count = in.get_le<std::uint32_t>();
    ParameterMap params;
    for (std::uint32_t i = 0; i < count; ++i) {
        const auto len = in.get_le<std::uint16_t>();
        std::string name = in.get_string(len);
        const auto rank = in.get_le<std::uint8_t>();
        Shape shape(rank);
        for (auto& d : shape) d = in.get_le<std::uint32_t>();
        std::vector<double> values(shape_numel(shape));
        for (auto& v : values) v = std::bit_cast<double>(in.get_le<std::uint64_t>());
        if (!params.emplace(name, Tensor(std::move(shape), std::move(values))).second) {
            throw DataError("duplicate parameter " + name);
        }
    }
    if (!in.done()) throw DataError("trailing bytes after checkpoint");
    return params;
}

void save_checkpoint(const std::filesystem::path& path, const ParameterMap& params) {
    const auto bytes = encode_checkpoint(params);
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot write " + path.string());
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw DataError("write failed for " + path.string());
}

ParameterMap load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open checkpoint " + path.string());
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return decode_checkpoint(bytes);
}

void assign_parameters(const ParameterMap& target, const ParameterMap& source) {
    for (const auto& [name, tensor] : target) {
        const auto it = source.find(name);
        if (it == source.end()) throw DataError("checkpoint lacks parameter " + name);
        if (it->second.shape() != tensor.shape()) {
            throw DataError("shape mismatch for " + name + ": " + shape_str(it->second.shape()) + " vs " +
                            shape_str(tensor.shape()));
        }
        Tensor dst = tensor;
        const auto src = it->second.data();
        std::copy(src.begin(), src.end(), dst.mutable_data().begin());
    }
}

ParameterMap snapshot_parameters(const ParameterMap& params) {
    ParameterMap copy;
    for (const auto& [name, tensor] : params) copy.emplace(name, tensor.detach());
    return copy;
}

}  // namespace ordistage
