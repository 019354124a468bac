// mmsn/param_store.hpp — named trainable tensors with gradient and Adam
// moment slots, plus the versioned binary dump used by run artifacts.
#pragma once

#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "mmsn/errors.hpp"
#include "mmsn/tensor.hpp"

namespace mmsn {

class ParamStore {
public:
    struct Slot {
        Tensor value;
        Tensor grad;
        Tensor m;
        Tensor v;
        bool trainable = true;
    };

    // Registers a trainable parameter. Names are unique.
    Tensor& add(const std::string& name, Tensor init) {
        return emplace(name, std::move(init), true);
    }

    // Registers a non-trainable tensor (saved and loaded, never updated).
    Tensor& add_buffer(const std::string& name, Tensor init) {
        return emplace(name, std::move(init), false);
    }

    bool has(const std::string& name) const { return slots_.count(name) != 0; }

    Tensor& value(const std::string& name) { return slot(name).value; }
    const Tensor& value(const std::string& name) const { return slot(name).value; }
    Tensor& grad(const std::string& name) { return slot(name).grad; }
    const Tensor& grad(const std::string& name) const { return slot(name).grad; }

    std::vector<std::string> names(bool trainable_only = false) const {
        std::vector<std::string> out;
        for (const auto& [name, s] : slots_)
            if (!trainable_only || s.trainable) out.push_back(name);
        return out;
    }

    std::map<std::string, Slot>& slots() { return slots_; }
    const std::map<std::string, Slot>& slots() const { return slots_; }

    std::int64_t step() const { return step_; }

    void zero_grad() {
        for (auto& [name, s] : slots_)
            for (double& g : s.grad.data()) g = 0.0;
    }

    // Standard Adam with bias correction. Zero gradients leave parameters
    // bit-identical.
    void adam_step(double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8) {
        if (lr <= 0.0) throw ConfigError("adam_step: learning rate must be positive");
        ++step_;
        double bc1 = 1.0 - std::pow(beta1, static_cast<double>(step_));
        double bc2 = 1.0 - std::pow(beta2, static_cast<double>(step_));
        for (auto& [name, s] : slots_) {
            if (!s.trainable) continue;
            for (int i = 0; i < s.value.size(); ++i) {
                double g = s.grad[i];
                s.m[i] = beta1 * s.m[i] + (1.0 - beta1) * g;
                s.v[i] = beta2 * s.v[i] + (1.0 - beta2) * g * g;
                double mhat = s.m[i] / bc1;
                double vhat = s.v[i] / bc2;
                s.value[i] -= lr * mhat / (std::sqrt(vhat) + eps);
            }
            if (!s.value.is_finite())
                throw NumericError("adam_step: non-finite parameter '" + name + "'");
        }
    }

    ParamStore snapshot() const { return *this; }

    // ---- binary dump: magic "MMSN", little-endian, named tensors ----

    static constexpr std::uint32_t kFormatVersion = 1;

    void save(const std::filesystem::path& path) const {
        std::string buf;
        buf.append("MMSN", 4);
        append_u32(buf, kFormatVersion);
        append_u32(buf, static_cast<std::uint32_t>(slots_.size()));
        for (const auto& [name, s] : slots_) {
            buf.push_back(s.trainable ? 0 : 1);
            append_u32(buf, static_cast<std::uint32_t>(name.size()));
            buf.append(name);
            append_u32(buf, static_cast<std::uint32_t>(s.value.rows()));
            append_u32(buf, static_cast<std::uint32_t>(s.value.cols()));
            for (double v : s.value.data()) append_f64(buf, v);
        }
        std::ofstream out(path, std::ios::binary | std::ios::trunc);
        if (!out) throw IoError("cannot open for writing: " + path.string());
        out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
        if (!out) throw IoError("write failed: " + path.string());
    }

    static ParamStore load(const std::filesystem::path& path) {
        std::ifstream in(path, std::ios::binary);
        if (!in) throw IoError("cannot open: " + path.string());
        std::string buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
        std::size_t pos = 0;
        auto need = [&](std::size_t n) {
            if (pos + n > buf.size()) throw ParseError("params file truncated: " + path.string());
        };
        need(4);
        if (buf.compare(0, 4, "MMSN") != 0)
            throw ParseError("bad magic in params file: " + path.string());
        pos = 4;
        std::uint32_t version = read_u32(buf, pos, need);
        if (version != kFormatVersion)
            throw ParseError("unsupported params format version " + std::to_string(version));
        std::uint32_t count = read_u32(buf, pos, need);
        ParamStore store;
        for (std::uint32_t i = 0; i < count; ++i) {
            need(1);
            bool buffer = buf[pos++] != 0;
            std::uint32_t name_len = read_u32(buf, pos, need);
            need(name_len);
            std::string name = buf.substr(pos, name_len);
            pos += name_len;
            std::uint32_t rows = read_u32(buf, pos, need);
            std::uint32_t cols = read_u32(buf, pos, need);
            if (rows == 0 || cols == 0) throw ParseError("zero-sized tensor in params file");
            Tensor t(static_cast<int>(rows), static_cast<int>(cols));
            for (int k = 0; k < t.size(); ++k) t[k] = read_f64(buf, pos, need);
            if (buffer)
                store.add_buffer(name, std::move(t));
            else
                store.add(name, std::move(t));
        }
        return store;
    }

    Slot& slot(const std::string& name) {
        auto it = slots_.find(name);
        if (it == slots_.end()) throw ContractError("ParamStore: unknown parameter '" + name + "'");
        return it->second;
    }
    const Slot& slot(const std::string& name) const {
        auto it = slots_.find(name);
        if (it == slots_.end()) throw ContractError("ParamStore: unknown parameter '" + name + "'");
        return it->second;
    }

private:
    Tensor& emplace(const std::string& name, Tensor init, bool trainable) {
        if (slots_.count(name))
            throw ContractError("ParamStore: duplicate parameter '" + name + "'");
        Slot s;
        s.grad = Tensor::zeros(init.rows(), init.cols());
        s.m = Tensor::zeros(init.rows(), init.cols());
        s.v = Tensor::zeros(init.rows(), init.cols());
        s.value = std::move(init);
        s.trainable = trainable;
        return slots_.emplace(name, std::move(s)).first->second.value;
    }

    static void append_u32(std::string& buf, std::uint32_t v) {
        for (int i = 0; i < 4; ++i) buf.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
    }
    static void append_f64(std::string& buf, double d) {
        std::uint64_t v;
        std::memcpy(&v, &d, 8);
        for (int i = 0; i < 8; ++i) buf.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
    }
    template <typename Need>
    static std::uint32_t read_u32(const std::string& buf, std::size_t& pos, Need need) {
        need(4);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i)
            v |= static_cast<std::uint32_t>(static_cast<unsigned char>(buf[pos + i])) << (8 * i);
        pos += 4;
        return v;
    }
    template <typename Need>
    static double read_f64(const std::string& buf, std::size_t& pos, Need need) {
        need(8);
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i)
            v |= static_cast<std::uint64_t>(static_cast<unsigned char>(buf[pos + i])) << (8 * i);
        pos += 8;
        double d;
        std::memcpy(&d, &v, 8);
        return d;
    }

    std::map<std::string, Slot> slots_;
    std::int64_t step_ = 0;
};

}  // namespace mmsn
