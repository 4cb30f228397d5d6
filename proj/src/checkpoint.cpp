#include "ciml/checkpoint.hpp"

#include <cstring>
#include <set>

#include "ciml/io.hpp"
#include "json.hpp"

namespace ciml {

using json = nlohmann::ordered_json;

namespace {

constexpr char kMagic[8] = {'C', 'I', 'M', 'L', 'C', 'K', 'P', 'T'};
constexpr uint32_t kVersion = 1;

struct Parsed {
    json header;
    std::string data;
};

Parsed parse(const std::filesystem::path& path) {
    const std::string bytes = io::read_file(path);
    const size_t fixed = sizeof(kMagic) + sizeof(uint32_t) + sizeof(uint64_t);
    if (bytes.size() < fixed || std::memcmp(bytes.data(), kMagic, sizeof(kMagic)) != 0) {
        throw io::IoError(path.string() + ": not a checkpoint file");
    }
    uint32_t version;
    uint64_t header_len;
    std::memcpy(&version, bytes.data() + sizeof(kMagic), sizeof(version));
    std::memcpy(&header_len, bytes.data() + sizeof(kMagic) + sizeof(version), sizeof(header_len));
    if (version != kVersion) throw io::IoError(path.string() + ": unsupported checkpoint version " + std::to_string(version));
    if (fixed + header_len > bytes.size()) throw io::IoError(path.string() + ": truncated header");
    Parsed p;
    try {
        p.header = json::parse(bytes.substr(fixed, header_len));
    } catch (const json::parse_error& e) {
        throw io::IoError(path.string() + ": corrupt header: " + e.what());
    }
    p.data = bytes.substr(fixed + header_len);
    if (p.header.at("crc32").get<uint32_t>() != io::crc32_of(p.data.data(), p.data.size())) {
        throw io::IoError(path.string() + ": checksum mismatch");
    }
    return p;
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const nn::ParameterSet<float>& params,
                     const std::string& config_json) {
    json header;
    header["config"] = json::parse(config_json);
    header["tensors"] = json::array();
    std::string data;
    auto append = [&](const std::string& name, const Tensor<float>& t, const char* kind) {
        header["tensors"].push_back({{"name", name}, {"kind", kind}, {"shape", t.shape()}, {"offset", data.size()}});
        data.append(reinterpret_cast<const char*>(t.data()), static_cast<size_t>(t.numel()) * sizeof(float));
    };
    for (const auto& e : params.entries()) append(e.name, e.var.value(), "parameter");
    for (const auto& [name, buf] : params.buffers()) append(name, *buf, "buffer");
    header["crc32"] = io::crc32_of(data.data(), data.size());

    const std::string hs = header.dump();
    const uint64_t header_len = hs.size();
    std::string out(kMagic, sizeof(kMagic));
    out.append(reinterpret_cast<const char*>(&kVersion), sizeof(kVersion));
    out.append(reinterpret_cast<const char*>(&header_len), sizeof(header_len));
    out += hs;
    out += data;
    io::atomic_write(path, out);
}

std::string read_checkpoint_config(const std::filesystem::path& path) { return parse(path).header.at("config").dump(); }

void load_checkpoint(const std::filesystem::path& path, nn::ParameterSet<float>& params) {
    const Parsed p = parse(path);
    std::set<std::string> seen;
    for (const auto& t : p.header.at("tensors")) {
        const std::string name = t.at("name").get<std::string>();
        const Shape shape = t.at("shape").get<Shape>();
        const size_t offset = t.at("offset").get<size_t>();
        Tensor<float>* dst = nullptr;
        if (t.at("kind") == "buffer") {
            auto it = params.buffers().find(name);
            if (it != params.buffers().end()) dst = it->second.get();
        } else if (params.contains(name)) {
            auto var = params.at(name);
            dst = &var.mutable_value();
        }
        if (!dst) throw io::IoError(path.string() + ": unexpected tensor " + name);
        if (dst->shape() != shape) {
            throw io::IoError(path.string() + ": tensor " + name + " has shape " + shape_str(shape) + ", model expects " +
                              shape_str(dst->shape()));
        }
        const size_t bytes = static_cast<size_t>(dst->numel()) * sizeof(float);
        if (offset + bytes > p.data.size()) throw io::IoError(path.string() + ": tensor " + name + " is truncated");
        std::memcpy(dst->data(), p.data.data() + offset, bytes);
        seen.insert(name);
    }
    for (const auto& e : params.entries()) {
        if (!seen.count(e.name)) throw io::IoError(path.string() + ": missing tensor " + e.name);
    }
    for (const auto& [name, _] : params.buffers()) {
        if (!seen.count(name)) throw io::IoError(path.string() + ": missing buffer " + name);
    }
}

}  // namespace ciml
