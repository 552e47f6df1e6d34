#pragma once

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "fedinit/errors.hpp"
#include "fedinit/federation.hpp"
#include "fedinit/metrics.hpp"

namespace fedinit {

/// Binary snapshot of a run, little-endian, version 1:
///
///   "FEDICKPT" | u32 version | u64 config_hash
///   server:  u64 round | vec global | vec control | vec momentum | vec dyn_h
///            | vec adam_m | vec adam_v | i64 adam_step | str sampler
///   u64 C, then per client: u64 id | vec last_local | vec control | vec dual
///            | str rng | u64vec order | u64 cursor
///   record initial | u64 count | record × count
///
/// vec = u64 n + n raw f64; u64vec = u64 n + n u64; str = u64 n + n bytes
/// (mt19937_64 textual state); record = u64 round + 10 f64 (divergence,
/// grad_norm_sq, train_loss, test_loss, train_acc, test_acc, lr, beta,
/// optimization_error, reserved) + u64 bytes_up + u64 bytes_down + u64vec active.
struct Checkpoint {
    std::uint64_t config_hash = 0;
    ServerState server;
    std::vector<ClientState> clients;
    RoundRecord initial;
    std::vector<RoundRecord> records;
};

inline constexpr std::uint32_t kCheckpointVersion = 1;
inline constexpr char kCheckpointMagic[8] = {'F', 'E', 'D', 'I', 'C', 'K', 'P', 'T'};

namespace detail {

class Writer {
public:
    void bytes(const void* p, std::size_t n) { out_.write(static_cast<const char*>(p), static_cast<std::streamsize>(n)); }
    void u32(std::uint32_t v) { bytes(&v, sizeof v); }
    void u64(std::uint64_t v) { bytes(&v, sizeof v); }
    void i64(std::int64_t v) { bytes(&v, sizeof v); }
    void f64(double v) { bytes(&v, sizeof v); }
    void vec(const ParamVector& v) {
        u64(v.dim());
        bytes(v.values().data(), v.dim() * sizeof(double));
    }
    void u64vec(const std::vector<std::size_t>& v) {
        u64(v.size());
        for (auto x : v) u64(x);
    }
    void str(const std::string& s) {
        u64(s.size());
        bytes(s.data(), s.size());
    }
    std::string take() { return out_.str(); }

private:
    std::ostringstream out_;
};

class Reader {
public:
    explicit Reader(std::string data) : data_(std::move(data)) {}
    void bytes(void* p, std::size_t n) {
        if (pos_ + n > data_.size()) throw IoError("checkpoint truncated");
        std::memcpy(p, data_.data() + pos_, n);
        pos_ += n;
    }
    std::uint32_t u32() { std::uint32_t v; bytes(&v, sizeof v); return v; }
    std::uint64_t u64() { std::uint64_t v; bytes(&v, sizeof v); return v; }
    std::int64_t i64() { std::int64_t v; bytes(&v, sizeof v); return v; }
    double f64() { double v; bytes(&v, sizeof v); return v; }
    ParamVector vec() {
        const auto n = u64();
        if (n > (data_.size() - pos_) / sizeof(double)) throw IoError("checkpoint truncated");
        std::vector<double> v(n);
        bytes(v.data(), n * sizeof(double));
        return ParamVector(std::move(v));
    }
    std::vector<std::size_t> u64vec() {
        const auto n = u64();
        if (n > (data_.size() - pos_) / sizeof(std::uint64_t)) throw IoError("checkpoint truncated");
        std::vector<std::size_t> v(n);
        for (auto& x : v) x = u64();
        return v;
    }
    std::string str() {
        const auto n = u64();
        if (n > data_.size() - pos_) throw IoError("checkpoint truncated");
        std::string s(data_.data() + pos_, n);
        pos_ += n;
        return s;
    }
    bool done() const { return pos_ == data_.size(); }

private:
    std::string data_;
    std::size_t pos_ = 0;
};

inline void write_record(Writer& w, const RoundRecord& r) {
    w.u64(r.round);
    for (double v : {r.divergence, r.grad_norm_sq, r.train_loss, r.test_loss, r.train_acc, r.test_acc, r.lr, r.beta,
                     r.optimization_error, 0.0})
        w.f64(v);
    w.u64(r.bytes_up);
    w.u64(r.bytes_down);
    w.u64vec(r.active);
}

inline RoundRecord read_record(Reader& in) {
    RoundRecord r;
    r.round = in.u64();
    r.divergence = in.f64();
    r.grad_norm_sq = in.f64();
    r.train_loss = in.f64();
    r.test_loss = in.f64();
    r.train_acc = in.f64();
    r.test_acc = in.f64();
    r.lr = in.f64();
    r.beta = in.f64();
    r.optimization_error = in.f64();
    in.f64();
    r.bytes_up = in.u64();
    r.bytes_down = in.u64();
    r.active = in.u64vec();
    return r;
}

} // namespace detail

/// Writes `contents` to `path` through a temporary file and a rename, so the
/// final name only ever holds a complete file.
inline void write_file_atomic(const std::filesystem::path& path, const std::string& contents) {
    auto tmp = path;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw IoError("cannot open '" + tmp.string() + "' for writing");
        out.write(contents.data(), static_cast<std::streamsize>(contents.size()));
        out.flush();
        if (!out) throw IoError("failed writing '" + tmp.string() + "'");
    }
    std::error_code ec;
    std::filesystem::rename(tmp, path, ec);
    if (ec) throw IoError("cannot rename '" + tmp.string() + "' to '" + path.string() + "': " + ec.message());
}

inline std::string read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open '" + path.string() + "'");
    std::ostringstream buf;
    buf << in.rdbuf();
    return buf.str();
}

inline std::string serialize_checkpoint(const Checkpoint& ck) {
    detail::Writer w;
    w.bytes(kCheckpointMagic, sizeof kCheckpointMagic);
    w.u32(kCheckpointVersion);
    w.u64(ck.config_hash);
    const auto& s = ck.server;
    w.u64(s.round);
    w.vec(s.global);
    w.vec(s.aux.control);
    w.vec(s.aux.momentum);
    w.vec(s.aux.dyn_h);
    w.vec(s.aux.adam_m);
    w.vec(s.aux.adam_v);
    w.i64(s.aux.adam_step);
    w.str(rng_state(s.sampler));
    w.u64(ck.clients.size());
    for (const auto& c : ck.clients) {
        w.u64(c.id);
        w.vec(c.last_local);
        w.vec(c.aux.control);
        w.vec(c.aux.dual);
        w.str(rng_state(c.rng));
        w.u64vec(c.order);
        w.u64(c.cursor);
    }
    detail::write_record(w, ck.initial);
    w.u64(ck.records.size());
    for (const auto& r : ck.records) detail::write_record(w, r);
    return w.take();
}

inline Checkpoint deserialize_checkpoint(std::string data) {
    detail::Reader in(std::move(data));
    char magic[8];
    in.bytes(magic, sizeof magic);
    if (std::memcmp(magic, kCheckpointMagic, sizeof magic) != 0) throw IoError("not a fedinit checkpoint");
    const auto version = in.u32();
    if (version != kCheckpointVersion)
        throw IoError("unsupported checkpoint version " + std::to_string(version));
    Checkpoint ck;
    ck.config_hash = in.u64();
    auto& s = ck.server;
    s.round = in.u64();
    s.global = in.vec();
    s.aux.control = in.vec();
    s.aux.momentum = in.vec();
    s.aux.dyn_h = in.vec();
    s.aux.adam_m = in.vec();
    s.aux.adam_v = in.vec();
    s.aux.adam_step = in.i64();
    s.sampler = rng_from_state(in.str());
    ck.clients.resize(in.u64());
    for (auto& c : ck.clients) {
        c.id = in.u64();
        c.last_local = in.vec();
        c.aux.control = in.vec();
        c.aux.dual = in.vec();
        c.rng = rng_from_state(in.str());
        c.order = in.u64vec();
        c.cursor = in.u64();
    }
    ck.initial = detail::read_record(in);
    ck.records.resize(in.u64());
    for (auto& r : ck.records) r = detail::read_record(in);
    if (!in.done()) throw IoError("trailing bytes in checkpoint");
    return ck;
}

inline void save_checkpoint(const Checkpoint& ck, const std::filesystem::path& path) {
    write_file_atomic(path, serialize_checkpoint(ck));
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
    try {
        return deserialize_checkpoint(read_file(path));
    } catch (const IoError& e) {
        throw IoError("checkpoint '" + path.string() + "': " + e.what());
    }
}

} // namespace fedinit
