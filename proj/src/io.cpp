#include "ciml/io.hpp"

#include <zlib.h>

#include <bit>
#include <cstring>
#include <fstream>
#include <set>
#include <sstream>

#include "json.hpp"

namespace ciml::io {

using json = nlohmann::ordered_json;

namespace {

static_assert(std::endian::native == std::endian::little, "tensor files are little-endian; add byte swapping");

std::vector<std::string> axis_order(size_t rank) {
    if (rank == 3) return {"z", "y", "x"};
    if (rank == 2) return {"y", "x"};
    std::vector<std::string> out;
    for (size_t i = 0; i < rank; ++i) out.push_back("d" + std::to_string(i));
    return out;
}

template <typename T>
void write_tensor_impl(const fs::path& path, const Tensor<T>& t, const char* dtype) {
    const size_t bytes = static_cast<size_t>(t.numel()) * sizeof(T);
    std::string payload(reinterpret_cast<const char*>(t.data()), bytes);
    json side;
    side["shape"] = t.shape();
    side["dtype"] = dtype;
    side["axis_order"] = axis_order(t.shape().size());
    side["crc32"] = crc32_of(payload.data(), payload.size());
    atomic_write(path, payload);
    atomic_write(fs::path(path.string() + ".json"), side.dump(2) + "\n");
}

template <typename T>
Tensor<T> read_tensor_impl(const fs::path& path, const char* dtype) {
    const fs::path side_path(path.string() + ".json");
    json side;
    try {
        side = json::parse(read_file(side_path));
    } catch (const json::parse_error& e) {
        throw IoError(side_path.string() + ": sidecar is not valid JSON: " + e.what());
    }
    auto field = [&](const char* name) -> const json& {
        if (!side.contains(name)) throw IoError(side_path.string() + ": missing field '" + name + "'");
        return side.at(name);
    };
    if (!field("dtype").is_string() || field("dtype").template get<std::string>() != dtype) {
        throw IoError(side_path.string() + ": field 'dtype' is " + field("dtype").dump() + ", expected " + dtype);
    }
    Shape shape;
    const json& js = field("shape");
    if (!js.is_array()) throw IoError(side_path.string() + ": field 'shape' must be an array");
    for (const auto& d : js) {
        if (!d.is_number_integer() || d.get<int64_t>() < 0) {
            throw IoError(side_path.string() + ": field 'shape' has an invalid extent " + d.dump());
        }
        shape.push_back(d.get<int64_t>());
    }
    const std::string payload = read_file(path);
    const size_t expected = static_cast<size_t>(shape_numel(shape)) * sizeof(T);
    if (payload.size() != expected) {
        throw IoError(side_path.string() + ": field 'shape' " + shape_str(shape) + " needs " + std::to_string(expected) +
                      " bytes but " + path.string() + " has " + std::to_string(payload.size()));
    }
    if (!field("crc32").is_number_unsigned() || field("crc32").template get<uint32_t>() != crc32_of(payload.data(), payload.size())) {
        throw IoError(path.string() + ": checksum mismatch (field 'crc32')");
    }
    Tensor<T> t(shape);
    std::memcpy(t.data(), payload.data(), payload.size());
    return t;
}

}  // namespace

void atomic_write(const fs::path& path, const std::string& bytes) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    const fs::path tmp(path.string() + ".tmp");
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw IoError("cannot open " + tmp.string() + " for writing");
        out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        if (!out) throw IoError("write failed for " + tmp.string());
    }
    std::error_code ec;
    fs::rename(tmp, path, ec);
    if (ec) throw IoError("cannot rename " + tmp.string() + " to " + path.string() + ": " + ec.message());
}

std::string read_file(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

uint32_t crc32_of(const void* data, size_t size) {
    uLong crc = crc32(0L, Z_NULL, 0);
    const auto* p = static_cast<const Bytef*>(data);
    while (size > 0) {
        const uInt chunk = static_cast<uInt>(std::min<size_t>(size, 1u << 30));
        crc = crc32(crc, p, chunk);
        p += chunk;
        size -= chunk;
    }
    return static_cast<uint32_t>(crc);
}

void write_tensor(const fs::path& path, const Tensor<float>& t) { write_tensor_impl(path, t, "float32"); }
void write_tensor(const fs::path& path, const Tensor<uint8_t>& t) { write_tensor_impl(path, t, "uint8"); }
Tensor<float> read_tensor_f32(const fs::path& path) { return read_tensor_impl<float>(path, "float32"); }
Tensor<uint8_t> read_tensor_u8(const fs::path& path) { return read_tensor_impl<uint8_t>(path, "uint8"); }

ValidationReport DatasetManifest::validate() const {
    ValidationReport r;
    std::set<std::string> names;
    for (size_t i = 0; i < modalities.size(); ++i) {
        if (!names.insert(modalities[i].name).second) r.violations.push_back("duplicate modality " + modalities[i].name);
        if (modalities[i].index != static_cast<int>(i)) {
            r.violations.push_back("modality " + modalities[i].name + " has index " +
                                   std::to_string(modalities[i].index) + ", expected " + std::to_string(i));
        }
    }
    for (const auto& v : regions.validate()) r.violations.push_back(v);
    std::set<std::string> ids;
    for (const auto& c : cases) {
        if (!ids.insert(c.case_id).second) r.violations.push_back("duplicate case " + c.case_id);
        if (c.volumes.size() != modalities.size()) {
            r.violations.push_back("case " + c.case_id + " lists " + std::to_string(c.volumes.size()) +
                                   " volumes for " + std::to_string(modalities.size()) + " modalities");
        }
        Shape mask_shape;
        try {
            auto side = json::parse(read_file(root / (c.mask + ".json")));
            if (side.at("dtype") != "uint8") r.violations.push_back("case " + c.case_id + ": mask dtype is not uint8");
            mask_shape = side.at("shape").get<Shape>();
            if (fs::file_size(root / c.mask) != static_cast<uintmax_t>(shape_numel(mask_shape))) {
                r.violations.push_back("case " + c.case_id + ": mask size does not match its shape");
            }
        } catch (const std::exception& e) {
            r.violations.push_back("case " + c.case_id + ": mask " + c.mask + ": " + e.what());
            continue;
        }
        if (spacing.size() != mask_shape.size()) {
            r.violations.push_back("case " + c.case_id + ": spacing has " + std::to_string(spacing.size()) +
                                   " axes, mask has " + std::to_string(mask_shape.size()));
        }
        for (const auto& [mod, file] : c.volumes) {
            bool known = false;
            for (const auto& m : modalities) known |= m.name == mod;
            if (!known) r.violations.push_back("case " + c.case_id + " references unknown modality " + mod);
            try {
                auto side = json::parse(read_file(root / (file + ".json")));
                if (side.at("dtype") != "float32") r.violations.push_back("case " + c.case_id + ": " + file + " is not float32");
                const Shape s = side.at("shape").get<Shape>();
                if (s != mask_shape) {
                    r.violations.push_back("case " + c.case_id + ": " + mod + " shape " + shape_str(s) +
                                           " differs from mask " + shape_str(mask_shape));
                }
                if (fs::file_size(root / file) != static_cast<uintmax_t>(shape_numel(s)) * sizeof(float)) {
                    r.violations.push_back("case " + c.case_id + ": " + file + " size does not match its shape");
                }
            } catch (const std::exception& e) {
                r.violations.push_back("case " + c.case_id + ": " + file + ": " + e.what());
            }
        }
    }
    return r;
}

DatasetManifest read_manifest(const fs::path& root) {
    const fs::path path = root / "manifest.json";
    json j;
    try {
        j = json::parse(read_file(path));
    } catch (const json::parse_error& e) {
        throw IoError(path.string() + ": not valid JSON: " + e.what());
    }
    DatasetManifest m;
    m.root = root;
    try {
        for (const auto& mod : j.at("modalities")) {
            m.modalities.push_back({mod.at("name").get<std::string>(), mod.at("index").get<int>()});
        }
        m.regions.nested = j.at("regions").at("nested").get<bool>();
        for (const auto& r : j.at("regions").at("items")) {
            m.regions.regions.push_back({r.at("name").get<std::string>(), r.at("class_index").get<int>()});
        }
        m.spacing = j.at("spacing").get<std::vector<double>>();
        for (const auto& c : j.at("cases")) {
            CaseEntry e;
            e.case_id = c.at("case_id").get<std::string>();
            for (const auto& [mod, file] : c.at("volumes").items()) e.volumes.emplace_back(mod, file.get<std::string>());
            e.mask = c.at("mask").get<std::string>();
            m.cases.push_back(std::move(e));
        }
    } catch (const json::exception& e) {
        throw IoError(path.string() + ": " + e.what());
    }
    return m;
}

void write_manifest(const DatasetManifest& m) {
    json j;
    j["modalities"] = json::array();
    for (const auto& mod : m.modalities) j["modalities"].push_back({{"name", mod.name}, {"index", mod.index}});
    j["regions"]["nested"] = m.regions.nested;
    j["regions"]["items"] = json::array();
    for (const auto& r : m.regions.regions) {
        j["regions"]["items"].push_back({{"name", r.name}, {"class_index", r.class_index}});
    }
    j["spacing"] = m.spacing;
    j["cases"] = json::array();
    for (const auto& c : m.cases) {
        json vols = json::object();
        for (const auto& [mod, file] : c.volumes) vols[mod] = file;
        j["cases"].push_back({{"case_id", c.case_id}, {"volumes", vols}, {"mask", c.mask}});
    }
    atomic_write(m.root / "manifest.json", j.dump(2) + "\n");
}

CaseEntry write_case(const VolumeSample& sample, const fs::path& root) {
    if (sample.case_id.empty() || sample.case_id.find('/') != std::string::npos) {
        throw IoError("invalid case id '" + sample.case_id + "'");
    }
    CaseEntry e;
    e.case_id = sample.case_id;
    const std::string dir = "cases/" + sample.case_id + "/";
    for (const auto& [mod, vol] : sample.volumes) {
        if (vol.shape() != sample.mask.shape()) {
            throw IoError("case " + sample.case_id + ": modality " + mod + " shape " + shape_str(vol.shape()) +
                          " differs from mask " + shape_str(sample.mask.shape()));
        }
        const std::string rel = dir + mod + ".f32";
        write_tensor(root / rel, vol);
        e.volumes.emplace_back(mod, rel);
    }
    e.mask = dir + "mask.u8";
    write_tensor(root / e.mask, sample.mask);
    return e;
}

VolumeSample read_case(const DatasetManifest& manifest, const CaseEntry& entry) {
    VolumeSample s;
    s.case_id = entry.case_id;
    s.mask = read_tensor_u8(manifest.root / entry.mask);
    for (const auto& [mod, file] : entry.volumes) {
        auto t = read_tensor_f32(manifest.root / file);
        if (t.shape() != s.mask.shape()) {
            throw IoError((manifest.root / file).string() + ": shape " + shape_str(t.shape()) + " differs from mask " +
                          shape_str(s.mask.shape()));
        }
        s.volumes.emplace(mod, std::move(t));
    }
    try {
        s.validate(manifest.regions.num_classes());
    } catch (const std::domain_error& e) {
        throw IoError((manifest.root / entry.mask).string() + ": " + e.what());
    }
    return s;
}

std::vector<VolumeSample> load_dataset(const DatasetManifest& manifest) {
    auto report = manifest.validate();
    if (!report.ok()) throw IoError("invalid dataset at " + manifest.root.string() + ": " + report.summary());
    std::vector<VolumeSample> out;
    for (const auto& c : manifest.cases) out.push_back(read_case(manifest, c));
    return out;
}

}  // namespace ciml::io
