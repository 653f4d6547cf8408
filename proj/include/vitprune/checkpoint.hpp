#pragma once

// Binary tensor container and model checkpointing. Layout (little-endian):
//   8-byte magic "HVITCKPT"
//   u32 version (currently 1; readers reject anything else)
//   u64 config-text length, then that many UTF-8 bytes (key=value lines)
//   repeated records until end of file:
//     u64 name length, name bytes, u32 rank, u64 dims..., f64 payload
// Writes are atomic (temp file + rename). Read errors report the byte
// offset where the file stopped making sense.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "vitprune/vit.hpp"

namespace vitprune {

static_assert(std::endian::native == std::endian::little,
              "container I/O assumes a little-endian host");

namespace container {

inline constexpr char magic[8] = {'H', 'V', 'I', 'T', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t version = 1;

struct Record {
    std::string name;
    Tensor tensor;
};

struct File {
    std::string config_text;
    std::vector<Record> records;

    const Record* find(const std::string& name) const {
        for (const Record& r : records)
            if (r.name == name) return &r;
        return nullptr;
    }
};

namespace detail_io {

template <typename T>
inline void put(std::string& out, T v) {
    char buf[sizeof(T)];
    std::memcpy(buf, &v, sizeof(T));
    out.append(buf, sizeof(T));
}

struct Reader {
    const std::string& bytes;
    std::size_t pos = 0;

    void need(std::size_t k, const std::string& what) const {
        require(pos + k <= bytes.size(), ErrorKind::format,
                "container: truncated while reading " + what + " at byte offset " +
                    std::to_string(pos));
    }
    template <typename T>
    T get(const std::string& what) {
        need(sizeof(T), what);
        T v;
        std::memcpy(&v, bytes.data() + pos, sizeof(T));
        pos += sizeof(T);
        return v;
    }
    std::string get_bytes(std::size_t k, const std::string& what) {
        need(k, what);
        std::string out = bytes.substr(pos, k);
        pos += k;
        return out;
    }
};

} // namespace detail_io

// Serializes and writes atomically: the target path either keeps its old
// content or receives the complete new file.
inline void write_file(const std::string& path, const std::string& config_text,
                       const std::vector<Record>& records) {
    std::string out;
    out.append(magic, sizeof(magic));
    detail_io::put(out, version);
    detail_io::put(out, static_cast<std::uint64_t>(config_text.size()));
    out += config_text;
    for (const Record& r : records) {
        require(!r.name.empty(), ErrorKind::contract, "container: record name empty");
        detail_io::put(out, static_cast<std::uint64_t>(r.name.size()));
        out += r.name;
        detail_io::put(out, static_cast<std::uint32_t>(r.tensor.rank()));
        for (std::size_t d : r.tensor.shape)
            detail_io::put(out, static_cast<std::uint64_t>(d));
        std::size_t bytes = r.tensor.size() * sizeof(double);
        std::size_t at = out.size();
        out.resize(out.size() + bytes);
        std::memcpy(out.data() + at, r.tensor.data.data(), bytes);
    }
    std::filesystem::path target(path);
    std::filesystem::path tmp = target;
    tmp += ".tmp";
    {
        std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
        require(f.good(), ErrorKind::io, "container: cannot open '" + tmp.string() +
                                             "' for writing");
        f.write(out.data(), static_cast<std::streamsize>(out.size()));
        f.flush();
        require(f.good(), ErrorKind::io, "container: write failed for '" + tmp.string() + "'");
    }
    std::error_code ec;
    std::filesystem::rename(tmp, target, ec);
    if (ec) {
        std::filesystem::remove(tmp);
        fail(ErrorKind::io, "container: cannot move '" + tmp.string() + "' to '" +
                                target.string() + "': " + ec.message());
    }
}

inline File read_file(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    require(f.good(), ErrorKind::io, "container: cannot open '" + path + "'");
    std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    require(!f.bad(), ErrorKind::io, "container: read failed for '" + path + "'");

    detail_io::Reader r{bytes};
    std::string got_magic = r.get_bytes(sizeof(magic), "magic");
    require(std::memcmp(got_magic.data(), magic, sizeof(magic)) == 0, ErrorKind::format,
            "container: bad magic at byte offset 0 in '" + path + "'");
    std::uint32_t got_version = r.get<std::uint32_t>("version");
    require(got_version == version, ErrorKind::format,
            "container: unsupported version " + std::to_string(got_version) +
                " at byte offset 8 (expected " + std::to_string(version) + ")");
    std::uint64_t cfg_len = r.get<std::uint64_t>("config length");
    File out;
    out.config_text = r.get_bytes(cfg_len, "config text");

    while (r.pos < bytes.size()) {
        Record rec;
        std::uint64_t name_len = r.get<std::uint64_t>("record name length");
        require(name_len > 0 && name_len <= (1u << 16), ErrorKind::format,
                "container: implausible record name length " + std::to_string(name_len) +
                    " at byte offset " + std::to_string(r.pos - sizeof(std::uint64_t)));
        rec.name = r.get_bytes(name_len, "record name");
        std::uint32_t rank = r.get<std::uint32_t>("record rank");
        require(rank <= 8, ErrorKind::format,
                "container: implausible rank " + std::to_string(rank) + " for record '" +
                    rec.name + "' at byte offset " + std::to_string(r.pos - sizeof(std::uint32_t)));
        std::vector<std::size_t> shape(rank);
        std::size_t count = 1;
        for (std::uint32_t i = 0; i < rank; ++i) {
            std::uint64_t d = r.get<std::uint64_t>("record dims");
            require(d > 0 && count <= (std::size_t(1) << 31) / std::max<std::size_t>(d, 1),
                    ErrorKind::format,
                    "container: implausible dimensions for record '" + rec.name +
                        "' at byte offset " + std::to_string(r.pos - sizeof(std::uint64_t)));
            shape[i] = d;
            count *= d;
        }
        rec.tensor.shape = shape;
        rec.tensor.data.resize(rank == 0 ? 1 : count);
        std::size_t payload = rec.tensor.data.size() * sizeof(double);
        r.need(payload, "payload of record '" + rec.name + "'");
        std::memcpy(rec.tensor.data.data(), bytes.data() + r.pos, payload);
        r.pos += payload;
        out.records.push_back(std::move(rec));
    }
    return out;
}

} // namespace container

// Atomic text-file write with the same temp+rename discipline as the
// container: readers never observe a half-written file.
inline void atomic_write_text(const std::string& path, const std::string& body) {
    std::filesystem::path target(path);
    std::filesystem::path tmp = target;
    tmp += ".tmp";
    {
        std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
        require(f.good(), ErrorKind::io, "cannot open '" + tmp.string() + "' for writing");
        f.write(body.data(), static_cast<std::streamsize>(body.size()));
        f.flush();
        require(f.good(), ErrorKind::io, "write failed for '" + tmp.string() + "'");
    }
    std::error_code ec;
    std::filesystem::rename(tmp, target, ec);
    if (ec) {
        std::filesystem::remove(tmp);
        fail(ErrorKind::io, "cannot move '" + tmp.string() + "' to '" + target.string() +
                                "': " + ec.message());
    }
}

inline std::string read_text_file(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    require(f.good(), ErrorKind::io, "cannot open '" + path + "'");
    std::string body((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    require(!f.bad(), ErrorKind::io, "read failed for '" + path + "'");
    return body;
}

inline void save_checkpoint(const ViTModel& m, const std::string& path) {
    std::vector<container::Record> records;
    records.reserve(m.params.size());
    for (const auto& [name, tensor] : m.params) records.push_back({name, tensor});
    container::write_file(path, m.config.to_text(), records);
}

// Rebuilds a model, insisting that the records exactly match the parameter
// registry implied by the embedded config (same names, order and shapes).
inline ViTModel load_checkpoint(const std::string& path) {
    container::File f = container::read_file(path);
    ViTModel m;
    m.config = ViTConfig::from_text(f.config_text);
    m.config.validate();
    auto expected = detail::param_registry(m.config);
    require(f.records.size() == expected.size(), ErrorKind::format,
            "checkpoint '" + path + "': expected " + std::to_string(expected.size()) +
                " tensors, found " + std::to_string(f.records.size()));
    m.params.reserve(expected.size());
    for (std::size_t i = 0; i < expected.size(); ++i) {
        const auto& [name, shape] = expected[i];
        const container::Record& rec = f.records[i];
        require(rec.name == name, ErrorKind::format,
                "checkpoint '" + path + "': tensor " + std::to_string(i) + " is '" +
                    rec.name + "', expected '" + name + "'");
        require(rec.tensor.shape == shape, ErrorKind::format,
                "checkpoint '" + path + "': tensor '" + name +
                    "' has shape " + rec.tensor.shape_str() +
                    " which does not match the config");
        m.index[name] = m.params.size();
        m.params.emplace_back(name, rec.tensor);
    }
    return m;
}

} // namespace vitprune
