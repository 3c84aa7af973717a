#include "klp/tensor_io.hpp"

#include <cstdint>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

namespace klp {

namespace {

constexpr char kMagic[4] = {'K', 'L', 'P', 'T'};

void put_u32le(std::ostream& os, std::uint32_t v) {
    unsigned char b[4] = {static_cast<unsigned char>(v & 0xFF),
                          static_cast<unsigned char>((v >> 8) & 0xFF),
                          static_cast<unsigned char>((v >> 16) & 0xFF),
                          static_cast<unsigned char>((v >> 24) & 0xFF)};
    os.write(reinterpret_cast<const char*>(b), 4);
}

std::uint32_t get_u32le(std::istream& is) {
    unsigned char b[4];
    is.read(reinterpret_cast<char*>(b), 4);
    if (!is) throw std::runtime_error("tensor record truncated");
    return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
           (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

void put_f64le(std::ostream& os, double v) {
    std::uint64_t bits;
    std::memcpy(&bits, &v, 8);
    unsigned char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>((bits >> (8 * i)) & 0xFF);
    os.write(reinterpret_cast<const char*>(b), 8);
}

double get_f64le(std::istream& is) {
    unsigned char b[8];
    is.read(reinterpret_cast<char*>(b), 8);
    if (!is) throw std::runtime_error("tensor record truncated");
    std::uint64_t bits = 0;
    for (int i = 0; i < 8; ++i) bits |= static_cast<std::uint64_t>(b[i]) << (8 * i);
    double v;
    std::memcpy(&v, &bits, 8);
    return v;
}

} // namespace

void write_tensor_record(std::ostream& os, const Tensor& t) {
    os.write(kMagic, 4);
    put_u32le(os, static_cast<std::uint32_t>(t.rank()));
    for (std::size_t e : t.shape()) put_u32le(os, static_cast<std::uint32_t>(e));
    for (std::size_t i = 0; i < t.size(); ++i) put_f64le(os, t[i]);
}

Tensor read_tensor_record(std::istream& is) {
    char magic[4];
    is.read(magic, 4);
    if (!is || std::memcmp(magic, kMagic, 4) != 0)
        throw std::runtime_error("bad tensor record magic (expected KLPT)");
    const std::uint32_t rank = get_u32le(is);
    std::vector<std::size_t> shape(rank);
    std::size_t n = 1;
    for (std::uint32_t d = 0; d < rank; ++d) {
        shape[d] = get_u32le(is);
        n *= shape[d];
    }
    std::vector<double> data(n);
    for (std::size_t i = 0; i < n; ++i) data[i] = get_f64le(is);
    return Tensor(std::move(shape), std::move(data));
}

void save_archive(const std::string& path,
                  const std::vector<std::pair<std::string, Tensor>>& entries) {
    std::ostringstream payload(std::ios::binary);
    nlohmann::json manifest;
    manifest["format"] = "klpt-archive";
    nlohmann::json offsets = nlohmann::json::object();
    std::vector<std::string> order;
    for (const auto& [name, tensor] : entries) {
        offsets[name] = static_cast<std::uint64_t>(payload.tellp());
        order.push_back(name);
        write_tensor_record(payload, tensor);
    }
    manifest["entries"] = offsets;
    manifest["order"] = order;
    atomic_write_file(path, payload.str());
    atomic_write_file(path + ".manifest.json", manifest.dump(2) + "\n");
}

std::map<std::string, Tensor> load_archive(const std::string& path) {
    std::ifstream manifest_in(path + ".manifest.json");
    if (!manifest_in) throw std::runtime_error("cannot open manifest for " + path);
    nlohmann::json manifest = nlohmann::json::parse(manifest_in);

    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open archive " + path);

    std::map<std::string, Tensor> out;
    for (const auto& [name, offset] : manifest.at("entries").items()) {
        in.clear();
        in.seekg(static_cast<std::streamoff>(offset.get<std::uint64_t>()));
        out.emplace(name, read_tensor_record(in));
    }
    return out;
}

void atomic_write_file(const std::string& path, const std::string& contents) {
    const std::string tmp = path + ".tmp";
    {
        std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
        if (!os) throw std::runtime_error("cannot open " + tmp + " for writing");
        os.write(contents.data(), static_cast<std::streamsize>(contents.size()));
        if (!os) throw std::runtime_error("write failed for " + tmp);
    }
    if (std::rename(tmp.c_str(), path.c_str()) != 0)
        throw std::runtime_error("rename failed for " + path);
}

} // namespace klp
