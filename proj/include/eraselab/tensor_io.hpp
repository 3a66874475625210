#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "eraselab/sha256.hpp"
#include "eraselab/tensor.hpp"

namespace eraselab {

// Flat binary container of named arrays, little-endian, row-major:
//   magic "ELTB1\n" | u32 n_entries
//   per entry: u32 name_len | name | u8 dtype ('f' = f32, 'i' = i32)
//              | u32 ndim | u64 dims[ndim] | payload
// All floating payloads are stored as f32 regardless of the in-memory scalar.

struct NamedArray {
    char dtype = 'f';
    std::vector<int> dims;
    std::vector<float> f32;
    std::vector<std::int32_t> i32;

    std::size_t count() const {
        std::size_t n = 1;
        for (int d : dims)
            n *= static_cast<std::size_t>(d);
        return n;
    }
};

class ArrayFile {
  public:
    std::map<std::string, NamedArray> entries;

    template <class S>
    void put(const std::string& name, const Tensor<S>& t) {
        NamedArray a;
        a.dtype = 'f';
        a.dims = t.dims;
        a.f32.resize(t.size());
        for (std::size_t i = 0; i < t.size(); ++i)
            a.f32[i] = static_cast<float>(t.data[i]);
        entries[name] = std::move(a);
    }

    void put_i32(const std::string& name, std::vector<int> dims, std::vector<std::int32_t> v) {
        NamedArray a;
        a.dtype = 'i';
        a.dims = std::move(dims);
        a.i32 = std::move(v);
        if (a.i32.size() != a.count())
            throw std::invalid_argument("ArrayFile: dims/payload mismatch for " + name);
        entries[name] = std::move(a);
    }

    const NamedArray& get(const std::string& name) const {
        auto it = entries.find(name);
        if (it == entries.end())
            throw std::runtime_error("ArrayFile: missing array '" + name + "'");
        return it->second;
    }

    template <class S>
    Tensor<S> tensor(const std::string& name) const {
        const NamedArray& a = get(name);
        if (a.dtype != 'f')
            throw std::runtime_error("ArrayFile: '" + name + "' is not a float array");
        Tensor<S> t(a.dims);
        for (std::size_t i = 0; i < a.f32.size(); ++i)
            t.data[i] = static_cast<S>(a.f32[i]);
        return t;
    }

    void save(const std::string& path) const {
        std::ofstream f(path, std::ios::binary | std::ios::trunc);
        if (!f)
            throw std::runtime_error("ArrayFile: cannot open for write: " + path);
        f.write("ELTB1\n", 6);
        write_u32(f, static_cast<std::uint32_t>(entries.size()));
        for (const auto& [name, a] : entries) {
            write_u32(f, static_cast<std::uint32_t>(name.size()));
            f.write(name.data(), static_cast<std::streamsize>(name.size()));
            f.put(a.dtype);
            write_u32(f, static_cast<std::uint32_t>(a.dims.size()));
            for (int d : a.dims)
                write_u64(f, static_cast<std::uint64_t>(d));
            if (a.dtype == 'f')
                f.write(reinterpret_cast<const char*>(a.f32.data()),
                        static_cast<std::streamsize>(a.f32.size() * 4));
            else
                f.write(reinterpret_cast<const char*>(a.i32.data()),
                        static_cast<std::streamsize>(a.i32.size() * 4));
        }
        if (!f)
            throw std::runtime_error("ArrayFile: write failed: " + path);
    }

    static ArrayFile load(const std::string& path) {
        std::ifstream f(path, std::ios::binary);
        if (!f)
            throw std::runtime_error("ArrayFile: cannot open: " + path);
        char magic[6];
        f.read(magic, 6);
        if (!f || std::memcmp(magic, "ELTB1\n", 6) != 0)
            throw std::runtime_error("ArrayFile: bad magic in " + path);
        std::uint32_t n = read_u32(f);
        ArrayFile out;
        for (std::uint32_t i = 0; i < n; ++i) {
            std::uint32_t name_len = read_u32(f);
            std::string name(name_len, '\0');
            f.read(name.data(), name_len);
            NamedArray a;
            a.dtype = static_cast<char>(f.get());
            if (a.dtype != 'f' && a.dtype != 'i')
                throw std::runtime_error("ArrayFile: bad dtype in " + path);
            std::uint32_t ndim = read_u32(f);
            a.dims.resize(ndim);
            for (auto& d : a.dims)
                d = static_cast<int>(read_u64(f));
            std::size_t cnt = a.count();
            if (a.dtype == 'f') {
                a.f32.resize(cnt);
                f.read(reinterpret_cast<char*>(a.f32.data()), static_cast<std::streamsize>(cnt * 4));
            } else {
                a.i32.resize(cnt);
                f.read(reinterpret_cast<char*>(a.i32.data()), static_cast<std::streamsize>(cnt * 4));
            }
            if (!f)
                throw std::runtime_error("ArrayFile: truncated file " + path);
            out.entries[name] = std::move(a);
        }
        return out;
    }

  private:
    static void write_u32(std::ofstream& f, std::uint32_t v) {
        char b[4] = {char(v), char(v >> 8), char(v >> 16), char(v >> 24)};
        f.write(b, 4);
    }
    static void write_u64(std::ofstream& f, std::uint64_t v) {
        char b[8];
        for (int i = 0; i < 8; ++i)
            b[i] = char(v >> (8 * i));
        f.write(b, 8);
    }
    static std::uint32_t read_u32(std::ifstream& f) {
        unsigned char b[4];
        f.read(reinterpret_cast<char*>(b), 4);
        return std::uint32_t(b[0]) | (std::uint32_t(b[1]) << 8) | (std::uint32_t(b[2]) << 16) |
               (std::uint32_t(b[3]) << 24);
    }
    static std::uint64_t read_u64(std::ifstream& f) {
        unsigned char b[8];
        f.read(reinterpret_cast<char*>(b), 8);
        std::uint64_t v = 0;
        for (int i = 7; i >= 0; --i)
            v = (v << 8) | b[i];
        return v;
    }
};

inline std::string file_sha256(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f)
        throw std::runtime_error("file_sha256: cannot open " + path);
    Sha256 h;
    char buf[65536];
    while (f) {
        f.read(buf, sizeof(buf));
        h.update(buf, static_cast<std::size_t>(f.gcount()));
    }
    return h.hex_digest();
}

} // namespace eraselab
