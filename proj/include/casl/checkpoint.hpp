#pragma once

// casl-ckpt-v1 container: a UTF-8 JSON manifest listing named f64 entries
// plus one sibling binary file with the concatenated little-endian payloads.
// A container saved to "stem" occupies stem.json + stem.bin.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "casl/core.hpp"

namespace casl {

namespace fs = std::filesystem;

inline constexpr const char* kCkptVersion = "casl-ckpt-v1";

// ----------------------------- atomic file writes -----------------------------

/// Writes bytes to a temp name in the target directory, then renames.
inline void atomic_write_file(const fs::path& path, const void* bytes, size_t len) {
    fs::path tmp = path;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw io_error("cannot open " + tmp.string() + " for writing");
        out.write(static_cast<const char*>(bytes), static_cast<std::streamsize>(len));
        if (!out) throw io_error("short write to " + tmp.string());
    }
    fs::rename(tmp, path);
}

inline void atomic_write_file(const fs::path& path, const std::string& text) {
    atomic_write_file(path, text.data(), text.size());
}

inline std::string read_file(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw io_error("cannot open " + path.string());
    std::string out((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return out;
}

// ----------------------------- container -----------------------------

class Checkpoint {
public:
    nlohmann::json meta = nlohmann::json::object();

    void add(const std::string& name, const Array& a) {
        if (index_.count(name)) throw contract_error("checkpoint: duplicate entry " + name);
        index_[name] = entries_.size();
        entries_.push_back({name, a});
    }

    bool has(const std::string& name) const { return index_.count(name) != 0; }

    const Array& get(const std::string& name) const {
        auto it = index_.find(name);
        if (it == index_.end()) throw io_error("checkpoint: no entry named " + name);
        return entries_[it->second].array;
    }

    std::vector<std::string> names() const {
        std::vector<std::string> out;
        out.reserve(entries_.size());
        for (const auto& e : entries_) out.push_back(e.name);
        return out;
    }

    size_t size() const { return entries_.size(); }

    /// FNV-1a over the binary payload, the artifact's identity.
    uint64_t payload_hash() const {
        uint64_t h = 14695981039346656037ull;
        for (const auto& e : entries_)
            h = fnv1a64(e.array.data.data(), e.array.data.size() * sizeof(double), h);
        return h;
    }

    void save(const fs::path& stem) const {
        nlohmann::json manifest;
        manifest["version"] = kCkptVersion;
        manifest["meta"] = meta;
        nlohmann::json jentries = nlohmann::json::array();
        std::vector<char> payload;
        uint64_t offset = 0;
        for (const auto& e : entries_) {
            require_finite(e.array, ("checkpoint entry " + e.name).c_str());
            const uint64_t len = e.array.data.size() * sizeof(double);
            nlohmann::json je;
            je["name"] = e.name;
            je["shape"] = e.array.shape;
            je["dtype"] = "f64";
            je["byte_offset"] = offset;
            je["byte_length"] = len;
            jentries.push_back(je);
            const size_t old = payload.size();
            payload.resize(old + len);
            std::memcpy(payload.data() + old, e.array.data.data(), len);
            offset += len;
        }
        manifest["entries"] = jentries;
        fs::path dir = stem.parent_path();
        if (!dir.empty()) fs::create_directories(dir);
        // payload first so a visible manifest always refers to complete data
        atomic_write_file(bin_path(stem), payload.data(), payload.size());
        atomic_write_file(json_path(stem), manifest.dump(2) + "\n");
    }

    static Checkpoint load(const fs::path& stem) {
        nlohmann::json manifest;
        try {
            manifest = nlohmann::json::parse(read_file(json_path(stem)));
        } catch (const nlohmann::json::exception& e) {
            throw io_error("checkpoint manifest " + json_path(stem).string() + ": " + e.what());
        }
        if (manifest.value("version", "") != kCkptVersion)
            throw io_error("checkpoint " + stem.string() + ": unsupported version");
        const std::string payload = read_file(bin_path(stem));
        Checkpoint ck;
        ck.meta = manifest.value("meta", nlohmann::json::object());
        for (const auto& je : manifest.at("entries")) {
            const std::string name = je.at("name").get<std::string>();
            Shape shape = je.at("shape").get<Shape>();
            const uint64_t off = je.at("byte_offset").get<uint64_t>();
            const uint64_t len = je.at("byte_length").get<uint64_t>();
            if (je.at("dtype").get<std::string>() != "f64")
                throw io_error("checkpoint entry " + name + ": unsupported dtype");
            if (off + len > payload.size())
                throw io_error("checkpoint entry " + name + ": payload out of range");
            Array a(shape);
            if (len != a.data.size() * sizeof(double))
                throw io_error("checkpoint entry " + name + ": length disagrees with shape");
            std::memcpy(a.data.data(), payload.data() + off, len);
            ck.add(name, a);
        }
        return ck;
    }

    static bool exists(const fs::path& stem) {
        return fs::exists(json_path(stem)) && fs::exists(bin_path(stem));
    }

    static fs::path json_path(fs::path stem) { return stem += ".json"; }
    static fs::path bin_path(fs::path stem) { return stem += ".bin"; }

private:
    struct Entry {
        std::string name;
        Array array;
    };
    std::vector<Entry> entries_;
    std::map<std::string, size_t> index_;
};

// ----------------------------- PGM images -----------------------------

/// Binary PGM (P5) dump of a [-1,1] image, affine-mapped to [0,255].
inline void write_pgm(const fs::path& path, const Array& img) {
    if (img.shape.size() != 2) throw dim_error("write_pgm: expected [H,W]");
    const int h = img.shape[0], w = img.shape[1];
    std::string out = "P5\n" + std::to_string(w) + " " + std::to_string(h) + "\n255\n";
    out.reserve(out.size() + static_cast<size_t>(h) * w);
    for (double v : img.data) {
        double u = (v + 1.0) * 0.5 * 255.0;
        u = std::min(255.0, std::max(0.0, u));
        out.push_back(static_cast<char>(static_cast<unsigned char>(std::lround(u))));
    }
    fs::path dir = path.parent_path();
    if (!dir.empty()) fs::create_directories(dir);
    atomic_write_file(path, out);
}

inline Array read_pgm(const fs::path& path) {
    const std::string raw = read_file(path);
    size_t pos = 0;
    auto token = [&]() -> std::string {
        while (pos < raw.size() && std::isspace(static_cast<unsigned char>(raw[pos]))) ++pos;
        if (pos < raw.size() && raw[pos] == '#') { // comment line
            while (pos < raw.size() && raw[pos] != '\n') ++pos;
            while (pos < raw.size() && std::isspace(static_cast<unsigned char>(raw[pos]))) ++pos;
        }
        size_t start = pos;
        while (pos < raw.size() && !std::isspace(static_cast<unsigned char>(raw[pos]))) ++pos;
        return raw.substr(start, pos - start);
    };
    if (token() != "P5") throw io_error("read_pgm: not a binary PGM: " + path.string());
    const int w = std::stoi(token());
    const int h = std::stoi(token());
    const int maxv = std::stoi(token());
    if (maxv != 255) throw io_error("read_pgm: expected maxval 255");
    ++pos; // single whitespace after header
    if (raw.size() - pos < static_cast<size_t>(w) * h) throw io_error("read_pgm: truncated pixel data");
    Array img({h, w});
    for (int i = 0; i < h * w; ++i) {
        const auto byte = static_cast<unsigned char>(raw[pos + i]);
        img.data[i] = static_cast<double>(byte) / 255.0 * 2.0 - 1.0;
    }
    return img;
}

} // namespace casl
