#include "mf/checkpoint.hpp"

#include <openssl/evp.h>

#include <bit>
#include <cstring>
#include <fstream>

static_assert(std::endian::native == std::endian::little,
              "container I/O assumes a little-endian host");

namespace mf::io {

namespace {
constexpr char kMagic[4] = {'D', 'S', 'D', 'F'};
constexpr uint8_t kVersion = 1;

void write_u64(std::ostream& os, uint64_t v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof(v));
}
uint64_t read_u64(std::istream& is) {
    uint64_t v = 0;
    is.read(reinterpret_cast<char*>(&v), sizeof(v));
    return v;
}
}  // namespace

void Archive::save(const std::string& path) const {
    json header;
    header["meta"] = meta;
    header["tensors"] = json::array();
    for (const auto& t : tensors) {
        header["tensors"].push_back(
            {{"name", t.name}, {"dtype", dtype_name(t.dtype)}, {"shape", t.shape}});
    }
    std::string hs = header.dump();  // object keys are sorted -> deterministic bytes

    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw std::runtime_error("cannot open for writing: " + path);
    os.write(kMagic, 4);
    os.put(static_cast<char>(kVersion));
    write_u64(os, hs.size());
    os.write(hs.data(), static_cast<std::streamsize>(hs.size()));
    for (const auto& t : tensors) {
        if (t.dtype == Dtype::f32) {
            if (static_cast<int64_t>(t.f32.size()) != t.numel())
                throw std::logic_error("archive tensor payload/shape mismatch: " + t.name);
            os.write(reinterpret_cast<const char*>(t.f32.data()),
                     static_cast<std::streamsize>(t.f32.size() * sizeof(float)));
        } else {
            if (static_cast<int64_t>(t.f64.size()) != t.numel())
                throw std::logic_error("archive tensor payload/shape mismatch: " + t.name);
            os.write(reinterpret_cast<const char*>(t.f64.data()),
                     static_cast<std::streamsize>(t.f64.size() * sizeof(double)));
        }
    }
    if (!os) throw std::runtime_error("write failed: " + path);
}

Archive Archive::load(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("cannot open: " + path);
    char magic[4];
    is.read(magic, 4);
    if (!is || std::memcmp(magic, kMagic, 4) != 0)
        throw std::runtime_error("bad container magic in " + path);
    int v = is.get();
    if (v != kVersion)
        throw std::runtime_error("unsupported container version " + std::to_string(v) + " in " + path);
    uint64_t hlen = read_u64(is);
    if (!is) throw std::runtime_error("truncated container header in " + path);
    std::string hs(hlen, '\0');
    is.read(hs.data(), static_cast<std::streamsize>(hlen));
    if (!is) throw std::runtime_error("truncated container header in " + path);
    json header = json::parse(hs);

    Archive a;
    a.meta = header.value("meta", json::object());
    for (const auto& tj : header.at("tensors")) {
        ArchiveTensor t;
        t.name = tj.at("name").get<std::string>();
        t.dtype = dtype_from_name(tj.at("dtype").get<std::string>());
        t.shape = tj.at("shape").get<std::vector<int64_t>>();
        int64_t n = t.numel();
        if (t.dtype == Dtype::f32) {
            t.f32.resize(static_cast<size_t>(n));
            is.read(reinterpret_cast<char*>(t.f32.data()),
                    static_cast<std::streamsize>(n * sizeof(float)));
        } else {
            t.f64.resize(static_cast<size_t>(n));
            is.read(reinterpret_cast<char*>(t.f64.data()),
                    static_cast<std::streamsize>(n * sizeof(double)));
        }
        if (!is) throw std::runtime_error("truncated tensor payload '" + t.name + "' in " + path);
        a.tensors.push_back(std::move(t));
    }
    return a;
}

namespace {
std::string sha256_bytes(const unsigned char* data, size_t len) {
    unsigned char md[EVP_MAX_MD_SIZE];
    unsigned int mdlen = 0;
    if (!EVP_Digest(data, len, md, &mdlen, EVP_sha256(), nullptr))
        throw std::runtime_error("sha256 digest failed");
    static const char* hex = "0123456789abcdef";
    std::string out;
    out.reserve(mdlen * 2);
    for (unsigned int i = 0; i < mdlen; ++i) {
        out.push_back(hex[md[i] >> 4]);
        out.push_back(hex[md[i] & 0xf]);
    }
    return out;
}
}  // namespace

std::string sha256_file(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("cannot hash missing file: " + path);
    std::string bytes((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
    return sha256_bytes(reinterpret_cast<const unsigned char*>(bytes.data()), bytes.size());
}

std::string sha256_string(const std::string& text) {
    return sha256_bytes(reinterpret_cast<const unsigned char*>(text.data()), text.size());
}

}  // namespace mf::io
