#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "autolora/nn.hpp"

namespace autolora {

// Checkpoint layout: magic "ALRA", u32 format version, u32 record count, then
// per record (u32 name length, name bytes, u8 dtype tag, u32 rank, u64 dims,
// payload). All integers and payloads little-endian; dtype 0 = f64, 1 = i64.
inline constexpr char kCheckpointMagic[4] = {'A', 'L', 'R', 'A'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

inline void put_u32(std::vector<std::byte>& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(std::byte((v >> (8 * i)) & 0xff));
}

inline void put_u64(std::vector<std::byte>& out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(std::byte((v >> (8 * i)) & 0xff));
}

inline void put_f64(std::vector<std::byte>& out, double v) {
    std::uint64_t bits;
    std::memcpy(&bits, &v, sizeof(bits));
    put_u64(out, bits);
}

class ByteReader {
public:
    ByteReader(const std::byte* data, std::size_t size) : data_(data), size_(size) {}

    std::uint32_t u32() {
        need(4);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= std::uint32_t(std::to_integer<unsigned>(data_[pos_ + i])) << (8 * i);
        pos_ += 4;
        return v;
    }

    std::uint64_t u64() {
        need(8);
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= std::uint64_t(std::to_integer<unsigned>(data_[pos_ + i])) << (8 * i);
        pos_ += 8;
        return v;
    }

    double f64() {
        const std::uint64_t bits = u64();
        double v;
        std::memcpy(&v, &bits, sizeof(v));
        return v;
    }

    std::uint8_t u8() {
        need(1);
        return std::to_integer<std::uint8_t>(data_[pos_++]);
    }

    std::string str(std::size_t n) {
        need(n);
        std::string s(reinterpret_cast<const char*>(data_ + pos_), n);
        pos_ += n;
        return s;
    }

    bool done() const { return pos_ == size_; }

private:
    void need(std::size_t n) const {
        if (pos_ + n > size_) throw FormatError("unexpected end of checkpoint data");
    }

    const std::byte* data_;
    std::size_t size_;
    std::size_t pos_ = 0;
};

struct Record {
    std::uint8_t dtype = 0;  // 0 = f64, 1 = i64
    std::vector<std::uint64_t> dims;
    std::vector<double> f64s;
    std::vector<std::int64_t> i64s;

    std::size_t count() const {
        std::size_t n = 1;
        for (auto d : dims) n *= static_cast<std::size_t>(d);
        return n;
    }
};

inline void append_record(std::vector<std::byte>& out, const std::string& name, const Record& r) {
    put_u32(out, static_cast<std::uint32_t>(name.size()));
    for (char c : name) out.push_back(std::byte(static_cast<unsigned char>(c)));
    out.push_back(std::byte(r.dtype));
    put_u32(out, static_cast<std::uint32_t>(r.dims.size()));
    for (auto d : r.dims) put_u64(out, d);
    if (r.dtype == 0) {
        for (double v : r.f64s) put_f64(out, v);
    } else {
        for (std::int64_t v : r.i64s) put_u64(out, static_cast<std::uint64_t>(v));
    }
}

inline Record tensor_record(const Tensor& t) {
    Record r;
    r.dtype = 0;
    for (std::size_t d : t.shape()) r.dims.push_back(d);
    r.f64s.assign(t.data(), t.data() + t.size());
    return r;
}

inline Record i64_record(const std::vector<std::int64_t>& values) {
    Record r;
    r.dtype = 1;
    r.dims.push_back(values.size());
    r.i64s = values;
    return r;
}

inline std::int64_t meta_scalar(const std::map<std::string, Record>& records,
                                const std::string& name) {
    auto it = records.find(name);
    if (it == records.end()) throw FormatError("checkpoint missing field " + name);
    if (it->second.dtype != 1 || it->second.i64s.size() != 1) {
        throw FormatError("checkpoint field " + name + " is not an i64 scalar");
    }
    return it->second.i64s[0];
}

}  // namespace detail

inline std::vector<std::byte> save_checkpoint(const ParamSet& params) {
    std::vector<std::pair<std::string, detail::Record>> records;

    std::vector<std::int64_t> hidden;
    for (std::size_t h : params.spec.hidden_dims) hidden.push_back(static_cast<std::int64_t>(h));
    records.emplace_back("meta.input_dim",
                         detail::i64_record({static_cast<std::int64_t>(params.spec.input_dim)}));
    records.emplace_back("meta.hidden_dims", detail::i64_record(hidden));
    records.emplace_back("meta.feature_dim",
                         detail::i64_record({static_cast<std::int64_t>(params.spec.feature_dim)}));
    records.emplace_back("meta.num_classes",
                         detail::i64_record({static_cast<std::int64_t>(params.spec.num_classes)}));
    records.emplace_back("meta.use_batchnorm",
                         detail::i64_record({params.spec.use_batchnorm ? 1 : 0}));
    records.emplace_back("meta.has_frozen_stats",
                         detail::i64_record({params.bn_stats_frozen ? 1 : 0}));
    const std::int64_t rank =
        params.lora ? static_cast<std::int64_t>((*params.lora)[0].A.dim(0)) : 0;
    records.emplace_back("meta.lora_rank", detail::i64_record({rank}));

    ParamSet& mut = const_cast<ParamSet&>(params);  // visitation only reads
    mut.for_each_named([&](const std::string& name, Tensor& t) {
        records.emplace_back(name, detail::tensor_record(t));
    });

    std::vector<std::byte> out;
    out.insert(out.end(), {std::byte('A'), std::byte('L'), std::byte('R'), std::byte('A')});
    detail::put_u32(out, kCheckpointVersion);
    detail::put_u32(out, static_cast<std::uint32_t>(records.size()));
    for (const auto& [name, record] : records) detail::append_record(out, name, record);
    return out;
}

inline ParamSet load_checkpoint(const std::vector<std::byte>& bytes) {
    detail::ByteReader reader(bytes.data(), bytes.size());
    const std::string magic = reader.str(4);
    if (magic != std::string(kCheckpointMagic, 4)) throw FormatError("bad checkpoint magic");
    const std::uint32_t version = reader.u32();
    if (version != kCheckpointVersion) {
        throw FormatError("unsupported checkpoint version " + std::to_string(version));
    }
    const std::uint32_t count = reader.u32();
    std::map<std::string, detail::Record> records;
    for (std::uint32_t i = 0; i < count; ++i) {
        const std::uint32_t name_len = reader.u32();
        const std::string name = reader.str(name_len);
        detail::Record r;
        r.dtype = reader.u8();
        if (r.dtype > 1) throw FormatError("unknown dtype tag in field " + name);
        const std::uint32_t rank = reader.u32();
        for (std::uint32_t d = 0; d < rank; ++d) r.dims.push_back(reader.u64());
        const std::size_t n = r.count();
        if (r.dtype == 0) {
            r.f64s.reserve(n);
            for (std::size_t k = 0; k < n; ++k) r.f64s.push_back(reader.f64());
        } else {
            r.i64s.reserve(n);
            for (std::size_t k = 0; k < n; ++k) r.i64s.push_back(static_cast<std::int64_t>(reader.u64()));
        }
        if (!records.emplace(name, std::move(r)).second) {
            throw FormatError("duplicate checkpoint field " + name);
        }
    }
    if (!reader.done()) throw FormatError("trailing bytes after checkpoint records");

    ModelSpec spec;
    spec.input_dim = static_cast<std::size_t>(detail::meta_scalar(records, "meta.input_dim"));
    auto hit = records.find("meta.hidden_dims");
    if (hit == records.end() || hit->second.dtype != 1) {
        throw FormatError("checkpoint missing field meta.hidden_dims");
    }
    for (auto v : hit->second.i64s) spec.hidden_dims.push_back(static_cast<std::size_t>(v));
    spec.feature_dim = static_cast<std::size_t>(detail::meta_scalar(records, "meta.feature_dim"));
    spec.num_classes = static_cast<std::size_t>(detail::meta_scalar(records, "meta.num_classes"));
    spec.use_batchnorm = detail::meta_scalar(records, "meta.use_batchnorm") != 0;
    const bool has_frozen = detail::meta_scalar(records, "meta.has_frozen_stats") != 0;
    const std::int64_t rank = detail::meta_scalar(records, "meta.lora_rank");

    ParamSet ps = ParamSet::init(spec, 0);
    if (has_frozen) ps.freeze_bn_stats();
    if (rank > 0) {
        ps.attach_lora(LoRaConfig{static_cast<std::size_t>(rank), 1.0}, 0);
    }

    std::size_t consumed = 7;  // meta records
    ps.for_each_named([&](const std::string& name, Tensor& t) {
        auto it = records.find(name);
        if (it == records.end()) throw FormatError("checkpoint missing field " + name);
        const detail::Record& r = it->second;
        if (r.dtype != 0) throw FormatError("checkpoint field " + name + " has wrong dtype");
        Shape shape;
        for (auto d : r.dims) shape.push_back(static_cast<std::size_t>(d));
        if (shape != t.shape()) {
            throw FormatError("shape mismatch for checkpoint field " + name + ": stored " +
                              shape_to_string(shape) + ", expected " + shape_to_string(t.shape()));
        }
        std::copy(r.f64s.begin(), r.f64s.end(), t.data());
        ++consumed;
    });
    if (consumed != records.size()) throw FormatError("checkpoint contains unknown fields");
    return ps;
}

inline void save_checkpoint_file(const ParamSet& params, const std::filesystem::path& path) {
    const std::vector<std::byte> bytes = save_checkpoint(params);
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw FormatError("cannot open checkpoint file for writing: " + path.string());
    out.write(reinterpret_cast<const char*>(bytes.data()),
              static_cast<std::streamsize>(bytes.size()));
    if (!out) throw FormatError("failed writing checkpoint file: " + path.string());
}

inline ParamSet load_checkpoint_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError("cannot open checkpoint file: " + path.string());
    std::vector<char> raw((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    std::vector<std::byte> bytes(raw.size());
    std::memcpy(bytes.data(), raw.data(), raw.size());
    return load_checkpoint(bytes);
}

}  // namespace autolora
