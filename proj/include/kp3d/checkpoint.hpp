#pragma once

// KP3D checkpoint format: magic "KP3D", version u32, then repeated
// records of (name_len u32, name bytes, ndim u32, dims u32[], payload
// little-endian f32[]). Round trips must be bit-exact.

#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "kp3d/tensor.hpp"

namespace kp3d {

struct CheckpointError : std::runtime_error {
    explicit CheckpointError(const std::string& msg) : std::runtime_error(msg) {}
};

struct CheckpointRecord {
    Shape shape;
    std::vector<float> data;
};

// Insertion order is preserved on save; load keeps file order.
class Checkpoint {
public:
    static constexpr std::uint32_t kVersion = 1;

    void put(const std::string& name, const Shape& shape, std::vector<float> data) {
        require(shape_numel(shape) == data.size(), "checkpoint record " + name +
                                                       ": payload length mismatch");
        if (index_.count(name)) throw CheckpointError("duplicate checkpoint record: " + name);
        index_[name] = records_.size();
        names_.push_back(name);
        records_.push_back({shape, std::move(data)});
    }

    void put_tensor(const std::string& name, const Tensor<float>& t) {
        put(name, t.shape(), t.data());
    }

    // Packs an arbitrary byte string into f32 words (zero padded).
    void put_bytes(const std::string& name, const std::string& bytes) {
        std::size_t nwords = (bytes.size() + 3) / 4;
        std::vector<float> payload(nwords + 1, 0.0f);
        float len;
        std::uint32_t len_u = static_cast<std::uint32_t>(bytes.size());
        std::memcpy(&len, &len_u, 4);
        payload[0] = len;
        if (!bytes.empty()) std::memcpy(payload.data() + 1, bytes.data(), bytes.size());
        int payload_words = static_cast<int>(payload.size());
        put(name, {payload_words}, std::move(payload));
    }

    bool has(const std::string& name) const { return index_.count(name) != 0; }

    const CheckpointRecord& get(const std::string& name) const {
        auto it = index_.find(name);
        if (it == index_.end()) throw CheckpointError("missing checkpoint record: " + name);
        return records_[it->second];
    }

    std::string get_bytes(const std::string& name) const {
        const auto& rec = get(name);
        require(!rec.data.empty(), "byte record " + name + " is empty");
        std::uint32_t len_u;
        std::memcpy(&len_u, rec.data.data(), 4);
        if (len_u > (rec.data.size() - 1) * 4)
            throw CheckpointError("byte record " + name + " has corrupt length");
        std::string out(len_u, '\0');
        if (len_u) std::memcpy(out.data(), rec.data.data() + 1, len_u);
        return out;
    }

    void load_into(const std::string& name, Tensor<float>& t) const {
        const auto& rec = get(name);
        if (rec.shape != t.shape())
            throw CheckpointError("checkpoint record " + name + " has shape " +
                                  shape_str(rec.shape) + ", expected " + shape_str(t.shape()));
        t.data() = rec.data;
    }

    const std::vector<std::string>& names() const { return names_; }

    void save(const std::string& path) const {
        std::ofstream f(path, std::ios::binary);
        if (!f) throw CheckpointError("cannot open for write: " + path);
        f.write("KP3D", 4);
        write_u32(f, kVersion);
        for (std::size_t i = 0; i < records_.size(); ++i) {
            const std::string& name = names_[i];
            const auto& rec = records_[i];
            write_u32(f, static_cast<std::uint32_t>(name.size()));
            f.write(name.data(), static_cast<std::streamsize>(name.size()));
            write_u32(f, static_cast<std::uint32_t>(rec.shape.size()));
            for (int d : rec.shape) write_u32(f, static_cast<std::uint32_t>(d));
            f.write(reinterpret_cast<const char*>(rec.data.data()),
                    static_cast<std::streamsize>(rec.data.size() * 4));
        }
        if (!f) throw CheckpointError("write failed: " + path);
    }

    static Checkpoint load(const std::string& path) {
        std::ifstream f(path, std::ios::binary);
        if (!f) throw CheckpointError("cannot open: " + path);
        char magic[4];
        f.read(magic, 4);
        if (!f || std::memcmp(magic, "KP3D", 4) != 0)
            throw CheckpointError(path + ": bad magic (expected KP3D)");
        std::uint32_t version = read_u32(f, path);
        if (version != kVersion)
            throw CheckpointError(path + ": unsupported version " + std::to_string(version));
        Checkpoint ck;
        while (true) {
            std::uint32_t name_len;
            if (!try_read_u32(f, name_len)) break;
            std::string name(name_len, '\0');
            f.read(name.data(), name_len);
            std::uint32_t ndim = read_u32(f, path);
            Shape shape(ndim);
            for (auto& d : shape) d = static_cast<int>(read_u32(f, path));
            std::vector<float> data(shape_numel(shape));
            f.read(reinterpret_cast<char*>(data.data()),
                   static_cast<std::streamsize>(data.size() * 4));
            if (!f) throw CheckpointError(path + ": truncated record " + name);
            ck.put(name, shape, std::move(data));
        }
        return ck;
    }

private:
    static void write_u32(std::ofstream& f, std::uint32_t v) {
        // assumes little-endian host, as does the payload write
        f.write(reinterpret_cast<const char*>(&v), 4);
    }
    static std::uint32_t read_u32(std::ifstream& f, const std::string& path) {
        std::uint32_t v;
        f.read(reinterpret_cast<char*>(&v), 4);
        if (!f) throw CheckpointError(path + ": truncated header field");
        return v;
    }
    static bool try_read_u32(std::ifstream& f, std::uint32_t& v) {
        f.read(reinterpret_cast<char*>(&v), 4);
        return static_cast<bool>(f);
    }

    std::vector<std::string> names_;
    std::vector<CheckpointRecord> records_;
    std::map<std::string, std::size_t> index_;
};

}  // namespace kp3d
