#ifndef BLOCKCACHE_CHECKPOINT_HPP
#define BLOCKCACHE_CHECKPOINT_HPP

#include <cstdio>
#include <fstream>
#include <map>
#include <utility>

#include "blockcache/tensor.hpp"

namespace bc {

// Versioned binary checkpoint: magic, version, structured-text header,
// then named f32 arrays (name, rank, dims as 64-bit LE, raw LE data).
// Round-trips bit-exactly.
struct Checkpoint {
    static constexpr const char* kMagic = "BCKPT";
    static constexpr uint32_t kVersion = 1;

    std::string header_text;                               // e.g. embedded ModelConfig
    std::vector<std::pair<std::string, Tensor>> entries;   // insertion-ordered

    void add(const std::string& name, const Tensor& t) { entries.emplace_back(name, t); }

    const Tensor* find(const std::string& name) const {
        for (const auto& e : entries)
            if (e.first == name) return &e.second;
        return nullptr;
    }

    const Tensor& get(const std::string& name) const {
        const Tensor* t = find(name);
        check(t != nullptr, "checkpoint: missing array '" + name + "'");
        return *t;
    }

    void save(const std::string& path) const {
        std::ofstream f(path, std::ios::binary);
        check(f.good(), "checkpoint: cannot open for write: " + path);
        f.write(kMagic, 5);
        write_u32(f, kVersion);
        write_u64(f, header_text.size());
        f.write(header_text.data(), static_cast<std::streamsize>(header_text.size()));
        write_u64(f, entries.size());
        for (const auto& [name, t] : entries) {
            write_u64(f, name.size());
            f.write(name.data(), static_cast<std::streamsize>(name.size()));
            write_u64(f, t.shape.size());
            for (int64_t d : t.shape) write_u64(f, static_cast<uint64_t>(d));
            f.write(reinterpret_cast<const char*>(t.data.data()),
                    static_cast<std::streamsize>(t.data.size() * sizeof(float)));
        }
        check(f.good(), "checkpoint: write failed: " + path);
    }

    static Checkpoint load(const std::string& path) {
        std::ifstream f(path, std::ios::binary);
        check(f.good(), "checkpoint: cannot open: " + path);
        char magic[5];
        f.read(magic, 5);
        check(f.good() && std::memcmp(magic, kMagic, 5) == 0, "checkpoint: bad magic in " + path);
        uint32_t ver = read_u32(f);
        check(ver == kVersion, "checkpoint: unsupported version " + std::to_string(ver));
        Checkpoint ck;
        uint64_t hlen = read_u64(f);
        ck.header_text.resize(hlen);
        f.read(ck.header_text.data(), static_cast<std::streamsize>(hlen));
        uint64_t count = read_u64(f);
        for (uint64_t i = 0; i < count; ++i) {
            uint64_t nlen = read_u64(f);
            std::string name(nlen, '\0');
            f.read(name.data(), static_cast<std::streamsize>(nlen));
            uint64_t rank = read_u64(f);
            std::vector<int64_t> shape(rank);
            for (auto& d : shape) d = static_cast<int64_t>(read_u64(f));
            Tensor t(shape);
            f.read(reinterpret_cast<char*>(t.data.data()),
                   static_cast<std::streamsize>(t.data.size() * sizeof(float)));
            check(f.good(), "checkpoint: truncated array '" + name + "' in " + path);
            ck.entries.emplace_back(std::move(name), std::move(t));
        }
        return ck;
    }

  private:
    static void write_u32(std::ofstream& f, uint32_t v) {
        unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                              static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
        f.write(reinterpret_cast<char*>(b), 4);
    }
    static void write_u64(std::ofstream& f, uint64_t v) {
        unsigned char b[8];
        for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
        f.write(reinterpret_cast<char*>(b), 8);
    }
    static uint32_t read_u32(std::ifstream& f) {
        unsigned char b[4];
        f.read(reinterpret_cast<char*>(b), 4);
        return static_cast<uint32_t>(b[0]) | (static_cast<uint32_t>(b[1]) << 8) |
               (static_cast<uint32_t>(b[2]) << 16) | (static_cast<uint32_t>(b[3]) << 24);
    }
    static uint64_t read_u64(std::ifstream& f) {
        unsigned char b[8];
        f.read(reinterpret_cast<char*>(b), 8);
        uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(b[i]) << (8 * i);
        return v;
    }
};

}  // namespace bc

#endif
