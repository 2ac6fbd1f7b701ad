#pragma once

#include <cctype>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "duet/tensor.hpp"

namespace duet {

// Checkpoint layout: a directory holding manifest.json plus one raw tensor
// file per named tensor (u32 ndim, u32 dims..., row-major payload in the
// training precision recorded by the manifest).

template <typename T>
const char* dtype_tag() {
    if constexpr (sizeof(T) == 4)
        return "f32";
    else
        return "f64";
}

template <typename T>
void write_tensor_file(const std::string& path, const Tensor<T>& t) {
    std::ofstream out(path, std::ios::binary);
    DUET_CHECK(out.good(), "checkpoint: cannot write ", path);
    const uint32_t ndim = uint32_t(t.shape.size());
    out.write(reinterpret_cast<const char*>(&ndim), 4);
    for (int64_t d : t.shape) {
        const uint32_t dim = uint32_t(d);
        out.write(reinterpret_cast<const char*>(&dim), 4);
    }
    out.write(reinterpret_cast<const char*>(t.data.data()),
              std::streamsize(t.data.size() * sizeof(T)));
    DUET_CHECK(out.good(), "checkpoint: short write to ", path);
}

template <typename T>
Tensor<T> read_tensor_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    DUET_CHECK(in.good(), "checkpoint: cannot read ", path);
    uint32_t ndim = 0;
    in.read(reinterpret_cast<char*>(&ndim), 4);
    DUET_CHECK(in.good() && ndim >= 1 && ndim <= 8, "checkpoint: bad tensor header in ", path);
    Shape shape(ndim);
    for (auto& d : shape) {
        uint32_t dim = 0;
        in.read(reinterpret_cast<char*>(&dim), 4);
        d = int64_t(dim);
    }
    Tensor<T> t(shape);
    in.read(reinterpret_cast<char*>(t.data.data()), std::streamsize(t.data.size() * sizeof(T)));
    DUET_CHECK(in.good(), "checkpoint: truncated tensor data in ", path);
    return t;
}

inline std::string tensor_file_name(size_t index, const std::string& name) {
    std::string safe = name;
    for (char& c : safe)
        if (!std::isalnum(static_cast<unsigned char>(c))) c = '_';
    char buf[16];
    std::snprintf(buf, sizeof(buf), "%05zu", index);
    return std::string("tensors/") + buf + "_" + safe + ".bin";
}

template <typename T>
class CheckpointWriter {
public:
    explicit CheckpointWriter(std::string dir) : dir_(std::move(dir)) {
        namespace fs = std::filesystem;
        std::error_code ec;
        fs::create_directories(fs::path(dir_) / "tensors", ec);
        DUET_CHECK(fs::is_directory(fs::path(dir_) / "tensors"),
                   "checkpoint: cannot create ", dir_);
        manifest_["format_version"] = 1;
        manifest_["dtype"] = dtype_tag<T>();
        manifest_["tensors"] = nlohmann::json::array();
    }

    void add_tensor(const std::string& name, const Tensor<T>& t) {
        const std::string file = tensor_file_name(manifest_["tensors"].size(), name);
        write_tensor_file((std::filesystem::path(dir_) / file).string(), t);
        manifest_["tensors"].push_back(
            {{"name", name}, {"file", file}, {"shape", t.shape}});
    }

    nlohmann::json& manifest() { return manifest_; }

    void finalize() {
        std::ofstream out(std::filesystem::path(dir_) / "manifest.json", std::ios::binary);
        DUET_CHECK(out.good(), "checkpoint: cannot write manifest in ", dir_);
        out << manifest_.dump(2) << "\n";
        DUET_CHECK(out.good(), "checkpoint: short manifest write in ", dir_);
    }

private:
    std::string dir_;
    nlohmann::json manifest_;
};

template <typename T>
struct CheckpointData {
    nlohmann::json manifest;
    std::map<std::string, Tensor<T>> tensors;

    const Tensor<T>& tensor(const std::string& name) const {
        auto it = tensors.find(name);
        DUET_CHECK(it != tensors.end(), "checkpoint: missing tensor '", name, "'");
        return it->second;
    }
    bool has(const std::string& name) const { return tensors.count(name) > 0; }
};

template <typename T>
CheckpointData<T> load_checkpoint(const std::string& dir) {
    namespace fs = std::filesystem;
    std::ifstream in(fs::path(dir) / "manifest.json", std::ios::binary);
    DUET_CHECK(in.good(), "checkpoint: missing manifest.json in ", dir);
    CheckpointData<T> data;
    data.manifest = nlohmann::json::parse(in);
    const std::string tag = data.manifest.at("dtype").template get<std::string>();
    DUET_CHECK(tag == dtype_tag<T>(), "checkpoint: dtype ", tag, " does not match requested ",
               dtype_tag<T>());
    for (const auto& entry : data.manifest.at("tensors")) {
        const std::string name = entry.at("name").template get<std::string>();
        const std::string file = entry.at("file").template get<std::string>();
        data.tensors[name] = read_tensor_file<T>((fs::path(dir) / file).string());
    }
    return data;
}

inline std::string checkpoint_dtype(const std::string& dir) {
    std::ifstream in(std::filesystem::path(dir) / "manifest.json", std::ios::binary);
    DUET_CHECK(in.good(), "checkpoint: missing manifest.json in ", dir);
    return nlohmann::json::parse(in).at("dtype").get<std::string>();
}

} // namespace duet
