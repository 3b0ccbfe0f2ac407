#pragma once

// Checkpoint file: little-endian, magic "SFCN", u32 format version, u32 block
// count, then named blocks. Each block is u32 name length, name bytes, u64
// payload length and the payload. Doubles are stored as their IEEE-754 bits.
//
// Blocks, in write order:
//   config             model and reflection keys as text (head channel 0 = background, 1 = foreground)
//   run                loss and train keys as text
//   param:<name>       u32 rank, u64 dims, f64 values
//   bn:<layer>@<dom>   i32 domain, u64 update count, u32 channels, f64 means, f64 variances
//   velocity:<name>    f64 momentum buffer
//   state              u64 step, f64 lr, plateau fields, u64 decays
//   rng                engine state text
//   order              u64 cursor, u64 count, u64 indices

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "sfcn/config.hpp"
#include "sfcn/error.hpp"
#include "sfcn/model.hpp"
#include "sfcn/optim.hpp"
#include "sfcn/pnm.hpp"
#include "sfcn/rng.hpp"

namespace sfcn {

inline constexpr std::uint32_t kCheckpointVersion = 1;
inline constexpr char kCheckpointMagic[4] = {'S', 'F', 'C', 'N'};

/// Optimizer and sampling state needed to continue a run exactly.
struct TrainState {
    std::uint64_t step = 0;
    PlateauState plateau;
    Rng rng;
    std::vector<std::uint64_t> order;  // current pass over the dataset
    std::uint64_t cursor = 0;
    std::vector<std::vector<double>> velocity;  // aligned with named_parameters()
};

struct Checkpoint {
    SfcnConfig config;
    SfcnParams params;
    LossConfig loss;
    TrainConfig train;
    TrainState state;
};

namespace ckpt {

class Writer {
public:
    void u32(std::uint32_t v) {
        for (int i = 0; i < 4; ++i) bytes.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
    }
    void u64(std::uint64_t v) {
        for (int i = 0; i < 8; ++i) bytes.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
    }
    void i32(std::int32_t v) { u32(static_cast<std::uint32_t>(v)); }
    void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }
    void raw(const std::string& s) { bytes.insert(bytes.end(), s.begin(), s.end()); }
    void f64s(std::span<const double> v) {
        for (double x : v) f64(x);
    }

    std::vector<std::uint8_t> bytes;
};

class Reader {
public:
    Reader(std::span<const std::uint8_t> b, std::size_t base) : b_(b), base_(base) {}

    std::uint32_t u32() {
        need(4);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b_[pos_ + i]) << (8 * i);
        pos_ += 4;
        return v;
    }
    std::uint64_t u64() {
        need(8);
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b_[pos_ + i]) << (8 * i);
        pos_ += 8;
        return v;
    }
    std::int32_t i32() { return static_cast<std::int32_t>(u32()); }
    double f64() { return std::bit_cast<double>(u64()); }
    std::string raw(std::size_t n) {
        need(n);
        std::string s(reinterpret_cast<const char*>(b_.data() + pos_), n);
        pos_ += n;
        return s;
    }
    std::vector<double> f64s(std::size_t n) {
        if (n > remaining() / 8) throw FormatError("checkpoint: truncated block", base_ + b_.size());
        std::vector<double> v(n);
        for (auto& x : v) x = f64();
        return v;
    }
    std::span<const std::uint8_t> take(std::size_t n) {
        need(n);
        auto s = b_.subspan(pos_, n);
        pos_ += n;
        return s;
    }

    std::size_t remaining() const { return b_.size() - pos_; }
    std::size_t offset() const { return base_ + pos_; }
    void expect_end(const std::string& what) const {
        if (pos_ != b_.size()) throw FormatError("checkpoint: trailing bytes in " + what, offset());
    }

private:
    void need(std::size_t n) const {
        if (n > b_.size() - pos_) throw FormatError("checkpoint: truncated data", base_ + b_.size());
    }

    std::span<const std::uint8_t> b_;
    std::size_t base_;
    std::size_t pos_ = 0;
};

struct Block {
    std::string name;
    std::vector<std::uint8_t> payload;
};

inline std::string bn_block_name(const std::string& layer, DomainId d) { return "bn:" + layer + "@" + std::to_string(d); }

inline std::string run_text(const LossConfig& loss, const TrainConfig& train) {
    RunConfig c;
    c.loss = loss;
    c.train = train;
    std::string out;
    for (const auto& [k, f] : cfg::fields())
        if (k.rfind("loss.", 0) == 0 || (k.rfind("train.", 0) == 0 && k != "train.preset"))
            out += k + " = " + f.get(c) + "\n";
    return out;
}

// Every AdaBN layer with its stable name.
template <class Params, class F>
void for_each_norm(Params& p, F f) {
    for (std::size_t b = 0; b < p.branches.size(); ++b)
        for (std::size_t j = 0; j < p.branches[b].norms.size(); ++j)
            f("enc" + std::to_string(b) + ".bn" + std::to_string(j), p.branches[b].norms[j]);
}

}  // namespace ckpt

inline std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& c) {
    std::vector<ckpt::Block> blocks;
    const auto add = [&](std::string name, ckpt::Writer w) { blocks.push_back({std::move(name), std::move(w.bytes)}); };

    {
        ckpt::Writer w;
        w.raw(model_to_text(c.config));
        add("config", std::move(w));
    }
    {
        ckpt::Writer w;
        w.raw(ckpt::run_text(c.loss, c.train));
        add("run", std::move(w));
    }
    const auto params = named_parameters(c.params);
    for (const auto& p : params) {
        ckpt::Writer w;
        w.u32(static_cast<std::uint32_t>(p.tensor.rank()));
        for (auto d : p.tensor.shape()) w.u64(d);
        w.f64s(p.tensor.values());
        add("param:" + p.name, std::move(w));
    }
    ckpt::for_each_norm(c.params, [&](const std::string& layer, const AdaBnLayerState& s) {
        for (const auto& [domain, st] : s.stats) {
            ckpt::Writer w;
            w.i32(domain);
            w.u64(st.count);
            w.u32(static_cast<std::uint32_t>(st.mean.size()));
            w.f64s(st.mean);
            w.f64s(st.var);
            add(ckpt::bn_block_name(layer, domain), std::move(w));
        }
    });
    for (std::size_t i = 0; i < params.size(); ++i) {
        ckpt::Writer w;
        if (i < c.state.velocity.size() && !c.state.velocity[i].empty())
            w.f64s(c.state.velocity[i]);
        else
            for (std::size_t k = 0; k < params[i].tensor.numel(); ++k) w.f64(0.0);
        add("velocity:" + params[i].name, std::move(w));
    }
    {
        const auto& pl = c.state.plateau;
        ckpt::Writer w;
        w.u64(c.state.step);
        w.f64(pl.lr);
        w.f64(pl.ema);
        w.u32(pl.has_ema ? 1 : 0);
        w.f64(pl.window_start);
        w.u64(pl.window_steps);
        w.u64(pl.decays);
        add("state", std::move(w));
    }
    {
        ckpt::Writer w;
        w.raw(c.state.rng.state());
        add("rng", std::move(w));
    }
    {
        ckpt::Writer w;
        w.u64(c.state.cursor);
        w.u64(c.state.order.size());
        for (auto v : c.state.order) w.u64(v);
        add("order", std::move(w));
    }

    ckpt::Writer out;
    out.raw(std::string(kCheckpointMagic, 4));
    out.u32(kCheckpointVersion);
    out.u32(static_cast<std::uint32_t>(blocks.size()));
    for (const auto& b : blocks) {
        out.u32(static_cast<std::uint32_t>(b.name.size()));
        out.raw(b.name);
        out.u64(b.payload.size());
        out.bytes.insert(out.bytes.end(), b.payload.begin(), b.payload.end());
    }
    return std::move(out.bytes);
}

/// Decodes a whole checkpoint or throws; nothing is returned on failure.
inline Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes) {
    if (bytes.size() < 4 || std::memcmp(bytes.data(), kCheckpointMagic, 4) != 0)
        throw FormatError("checkpoint: bad magic (expected \"SFCN\")", 0);
    ckpt::Reader head(bytes, 0);
    head.take(4);
    const std::uint32_t version = head.u32();
    if (version != kCheckpointVersion)
        throw FormatError("checkpoint: unsupported version " + std::to_string(version) + " (expected " +
                              std::to_string(kCheckpointVersion) + ")",
                          4);
    const std::uint32_t count = head.u32();
    struct Span {
        std::span<const std::uint8_t> data;
        std::size_t offset;
        bool used = false;
    };
    std::map<std::string, Span> blocks;
    for (std::uint32_t i = 0; i < count; ++i) {
        const std::size_t at = head.offset();
        const std::string name = head.raw(head.u32());
        const std::uint64_t len = head.u64();
        if (len > head.remaining()) throw FormatError("checkpoint: block '" + name + "' truncated", bytes.size());
        const std::size_t start = head.offset();
        if (!blocks.emplace(name, Span{head.take(static_cast<std::size_t>(len)), start}).second)
            throw FormatError("checkpoint: duplicate block '" + name + "'", at);
    }
    head.expect_end("file");

    const auto block = [&](const std::string& name) -> ckpt::Reader {
        auto it = blocks.find(name);
        if (it == blocks.end()) throw FormatError("checkpoint: missing block '" + name + "'", bytes.size());
        it->second.used = true;
        return ckpt::Reader(it->second.data, it->second.offset);
    };
    const auto text_of = [&](const std::string& name) {
        auto r = block(name);
        return r.raw(r.remaining());
    };

    Checkpoint c;
    try {
        c.config = model_from_text(text_of("config"));
        const RunConfig run = apply_keys(RunConfig{}, parse_config_text(text_of("run"), "checkpoint run"));
        c.loss = run.loss;
        c.train = run.train;
    } catch (const ConfigError& e) {
        throw FormatError(std::string("checkpoint: invalid stored configuration: ") + e.what(), 0);
    }
    Rng scratch(0);
    c.params = init_params(c.config, scratch);

    auto params = named_parameters(c.params);
    for (auto& p : params) {
        auto r = block("param:" + p.name);
        const std::uint32_t rank = r.u32();
        Shape shape(rank);
        for (auto& d : shape) d = static_cast<std::size_t>(r.u64());
        if (shape != p.tensor.shape())
            throw FormatError("checkpoint: parameter " + p.name + " has shape " + shape_str(shape) + ", config implies " +
                                  shape_str(p.tensor.shape()),
                              r.offset());
        const auto v = r.f64s(p.tensor.numel());
        r.expect_end("param:" + p.name);
        std::copy(v.begin(), v.end(), p.tensor.mutable_values().begin());
    }
    ckpt::for_each_norm(c.params, [&](const std::string& layer, AdaBnLayerState& s) {
        const std::string prefix = "bn:" + layer + "@";
        for (auto& [name, span] : blocks) {
            if (name.rfind(prefix, 0) != 0) continue;
            span.used = true;
            ckpt::Reader r(span.data, span.offset);
            const DomainId domain = r.i32();
            if (name != ckpt::bn_block_name(layer, domain))
                throw FormatError("checkpoint: block " + name + " holds domain " + std::to_string(domain), span.offset);
            DomainStats st;
            st.count = r.u64();
            const std::uint32_t ch = r.u32();
            if (ch != s.channels) throw FormatError("checkpoint: channel count mismatch in " + name, span.offset);
            st.mean = r.f64s(ch);
            st.var = r.f64s(ch);
            r.expect_end(name);
            s.stats[domain] = std::move(st);
        }
    });
    c.state.velocity.clear();
    for (auto& p : params) {
        auto r = block("velocity:" + p.name);
        c.state.velocity.push_back(r.f64s(p.tensor.numel()));
        r.expect_end("velocity:" + p.name);
    }
    {
        auto r = block("state");
        auto& pl = c.state.plateau;
        c.state.step = r.u64();
        pl.lr = r.f64();
        pl.ema = r.f64();
        pl.has_ema = r.u32() != 0;
        pl.window_start = r.f64();
        pl.window_steps = static_cast<std::size_t>(r.u64());
        pl.decays = static_cast<std::size_t>(r.u64());
        r.expect_end("state");
    }
    c.state.rng.set_state(text_of("rng"));
    {
        auto r = block("order");
        c.state.cursor = r.u64();
        const std::uint64_t n = r.u64();
        if (n > r.remaining() / 8) throw FormatError("checkpoint: truncated order block", r.offset());
        c.state.order.resize(static_cast<std::size_t>(n));
        for (auto& v : c.state.order) v = r.u64();
        r.expect_end("order");
    }
    for (const auto& [name, span] : blocks)
        if (!span.used) throw FormatError("checkpoint: unexpected block '" + name + "'", span.offset);
    return c;
}

inline void save_checkpoint(const std::filesystem::path& path, const Checkpoint& c) {
    write_file(path, encode_checkpoint(c));
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
    try {
        return decode_checkpoint(read_file(path));
    } catch (const FormatError& e) {
        throw FormatError(path.string() + ": " + e.detail(), e.offset());
    }
}

}  // namespace sfcn
