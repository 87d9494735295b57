#pragma once

// Binary tensor container ("HCT1"): magic bytes, u8 dtype code (0 = f64,
// 1 = f32), u8 rank, little-endian u64 dims, little-endian payload. Used by
// checkpoints and dataset files. Plus episode and checkpoint directory
// layout helpers.

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "hclsm/tensor.hpp"
#include "hclsm/worldgen.hpp"

#include "json.hpp"

namespace hclsm::io {

inline constexpr char kMagic[4] = {'H', 'C', 'T', '1'};

enum class Dtype : std::uint8_t { f64 = 0, f32 = 1 };

namespace detail_io {

template <class T>
void write_le(std::ostream& os, T v) {
    // this artifact targets little-endian hosts; serialize raw
    os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <class T>
T read_le(std::istream& is) {
    T v{};
    is.read(reinterpret_cast<char*>(&v), sizeof(T));
    return v;
}

}  // namespace detail_io

inline void save_tensor(const std::string& path, const Tensor& t, Dtype dtype = Dtype::f64) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("cannot open for write: " + path);
    os.write(kMagic, 4);
    detail_io::write_le<std::uint8_t>(os, static_cast<std::uint8_t>(dtype));
    detail_io::write_le<std::uint8_t>(os, static_cast<std::uint8_t>(t.rank()));
    for (std::size_t d : t.shape()) detail_io::write_le<std::uint64_t>(os, d);
    if (dtype == Dtype::f64) {
        os.write(reinterpret_cast<const char*>(t.data().data()),
                 static_cast<std::streamsize>(t.numel() * sizeof(double)));
    } else {
        std::vector<float> buf(t.numel());
        for (std::size_t i = 0; i < buf.size(); ++i) buf[i] = static_cast<float>(t.data()[i]);
        os.write(reinterpret_cast<const char*>(buf.data()),
                 static_cast<std::streamsize>(buf.size() * sizeof(float)));
    }
    if (!os) throw std::runtime_error("write failed: " + path);
}

inline Tensor load_tensor(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("cannot open for read: " + path);
    char magic[4];
    is.read(magic, 4);
    if (!is || std::memcmp(magic, kMagic, 4) != 0) {
        throw std::runtime_error("bad tensor container magic in " + path);
    }
    auto dtype = static_cast<Dtype>(detail_io::read_le<std::uint8_t>(is));
    std::size_t rank = detail_io::read_le<std::uint8_t>(is);
    Shape shape(rank);
    for (auto& d : shape) d = static_cast<std::size_t>(detail_io::read_le<std::uint64_t>(is));
    std::size_t n = shape_numel(shape);
    Tensor t(shape);
    auto& data = t.mutable_data();
    if (dtype == Dtype::f64) {
        is.read(reinterpret_cast<char*>(data.data()),
                static_cast<std::streamsize>(n * sizeof(double)));
    } else {
        std::vector<float> buf(n);
        is.read(reinterpret_cast<char*>(buf.data()),
                static_cast<std::streamsize>(n * sizeof(float)));
        for (std::size_t i = 0; i < n; ++i) data[i] = static_cast<double>(buf[i]);
    }
    if (!is) throw std::runtime_error("truncated tensor container: " + path);
    return t;
}

// ---------------------------------------------------------------------------
// episodes: one directory per episode, one container per field + manifest
// ---------------------------------------------------------------------------

inline void save_episode(const std::string& dir, const worldgen::Episode& ep) {
    namespace fs = std::filesystem;
    fs::create_directories(dir);
    save_tensor(dir + "/frames.hct", ep.frames, Dtype::f32);
    save_tensor(dir + "/masks.hct", ep.masks, Dtype::f32);
    save_tensor(dir + "/actions.hct", ep.actions);
    nlohmann::json manifest;
    manifest["seed"] = ep.seed;
    manifest["n_objects"] = ep.config.n_objects;
    manifest["frames"] = ep.config.frames;
    manifest["height"] = ep.config.height;
    manifest["width"] = ep.config.width;
    manifest["collisions"] = ep.collisions;
    std::ofstream os(dir + "/manifest.json");
    os << manifest.dump(2) << "\n";
}

inline worldgen::Episode load_episode(const std::string& dir) {
    worldgen::Episode ep;
    ep.frames = load_tensor(dir + "/frames.hct");
    ep.masks = load_tensor(dir + "/masks.hct");
    ep.actions = load_tensor(dir + "/actions.hct");
    std::ifstream is(dir + "/manifest.json");
    if (!is) throw std::runtime_error("missing episode manifest in " + dir);
    nlohmann::json manifest = nlohmann::json::parse(is);
    ep.seed = manifest["seed"].get<std::uint64_t>();
    ep.config.n_objects = manifest["n_objects"].get<std::size_t>();
    ep.config.frames = manifest["frames"].get<std::size_t>();
    ep.config.height = manifest["height"].get<std::size_t>();
    ep.config.width = manifest["width"].get<std::size_t>();
    ep.collisions = manifest["collisions"].get<std::vector<std::size_t>>();
    return ep;
}

inline std::vector<std::string> list_episode_dirs(const std::string& dataset_dir) {
    namespace fs = std::filesystem;
    std::vector<std::string> dirs;
    if (!fs::exists(dataset_dir)) throw std::runtime_error("dataset not found: " + dataset_dir);
    for (const auto& e : fs::directory_iterator(dataset_dir)) {
        if (e.is_directory() && fs::exists(e.path() / "manifest.json")) {
            dirs.push_back(e.path().string());
        }
    }
    std::sort(dirs.begin(), dirs.end());
    return dirs;
}

// ---------------------------------------------------------------------------
// CSV / PGM writers
// ---------------------------------------------------------------------------

class CsvWriter {
public:
    CsvWriter(const std::string& path, const std::vector<std::string>& header, bool append = false)
        : os_(path, append ? std::ios::app : std::ios::trunc) {
        if (!os_) throw std::runtime_error("cannot open CSV: " + path);
        if (!append) {
            for (std::size_t i = 0; i < header.size(); ++i) os_ << (i ? "," : "") << header[i];
            os_ << "\n";
        }
    }

    void row(const std::vector<std::string>& cells) {
        for (std::size_t i = 0; i < cells.size(); ++i) os_ << (i ? "," : "") << cells[i];
        os_ << "\n";
        os_.flush();
    }

    static std::string num(double v) {
        char buf[40];
        std::snprintf(buf, sizeof(buf), "%.12g", v);
        return buf;
    }

private:
    std::ofstream os_;
};

// 8-bit binary PGM from values in [0, 1].
inline void save_pgm(const std::string& path, const std::vector<double>& values, std::size_t h,
                     std::size_t w) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("cannot open PGM: " + path);
    os << "P5\n" << w << " " << h << "\n255\n";
    for (double v : values) {
        double c = std::min(1.0, std::max(0.0, v));
        os.put(static_cast<char>(static_cast<int>(c * 255.0 + 0.5)));
    }
}

// Indexed PGM for label maps (labels scaled into gray levels).
inline void save_label_pgm(const std::string& path, const std::vector<std::size_t>& labels,
                           std::size_t h, std::size_t w, std::size_t n_labels) {
    std::vector<double> values(labels.size());
    double denom = n_labels > 1 ? static_cast<double>(n_labels - 1) : 1.0;
    for (std::size_t i = 0; i < labels.size(); ++i)
        values[i] = static_cast<double>(labels[i]) / denom;
    save_pgm(path, values, h, w);
}

}  // namespace hclsm::io
