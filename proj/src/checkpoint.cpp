#include "ssf/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <map>

namespace ssf {

namespace {

constexpr char kMagic[8] = {'S', 'S', 'F', 'C', 'K', 'P', 'T', '1'};
constexpr uint32_t kVersion = 1;

template <typename T>
T to_little(T v) {
    if constexpr (std::endian::native == std::endian::little) return v;
    T out;
    auto* src = reinterpret_cast<const unsigned char*>(&v);
    auto* dst = reinterpret_cast<unsigned char*>(&out);
    for (size_t i = 0; i < sizeof(T); ++i) dst[i] = src[sizeof(T) - 1 - i];
    return out;
}

void write_u32(std::ostream& os, uint32_t v) {
    v = to_little(v);
    os.write(reinterpret_cast<const char*>(&v), sizeof(v));
}

void write_f64(std::ostream& os, const double* data, size_t n) {
    if constexpr (std::endian::native == std::endian::little) {
        os.write(reinterpret_cast<const char*>(data), static_cast<std::streamsize>(n * sizeof(double)));
    } else {
        for (size_t i = 0; i < n; ++i) {
            uint64_t bits;
            std::memcpy(&bits, &data[i], sizeof(bits));
            bits = to_little(bits);
            os.write(reinterpret_cast<const char*>(&bits), sizeof(bits));
        }
    }
}

uint32_t read_u32(std::istream& is, const std::string& path) {
    uint32_t v;
    is.read(reinterpret_cast<char*>(&v), sizeof(v));
    if (!is) throw IoError("'" + path + "': corrupt checkpoint (truncated)");
    return to_little(v);
}

struct Record {
    Shape shape;
    std::vector<double> data;
};

void write_record(std::ostream& os, const std::string& name, const Shape& shape,
                  const std::vector<double>& data) {
    write_u32(os, static_cast<uint32_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    write_u32(os, static_cast<uint32_t>(shape.size()));
    for (int d : shape) write_u32(os, static_cast<uint32_t>(d));
    write_f64(os, data.data(), data.size());
}

void write_tensor(std::ostream& os, const std::string& name, const Tensor& t) {
    write_record(os, name, t.shape(), t.value());
}

void write_scalar(std::ostream& os, const std::string& name, double v) {
    write_record(os, name, {1}, {v});
}

void write_vecd(std::ostream& os, const std::string& name, const std::vector<double>& v) {
    write_record(os, name, {static_cast<int>(v.size())}, v);
}

std::map<std::string, Record> read_all_records(std::istream& is, const std::string& path) {
    std::map<std::string, Record> out;
    while (true) {
        uint32_t name_len;
        is.read(reinterpret_cast<char*>(&name_len), sizeof(name_len));
        if (is.eof()) break;
        if (!is) throw IoError("'" + path + "': corrupt checkpoint (truncated)");
        name_len = to_little(name_len);
        if (name_len > 4096) throw IoError("'" + path + "': corrupt checkpoint (bad record name)");
        std::string name(name_len, '\0');
        is.read(name.data(), name_len);
        if (!is) throw IoError("'" + path + "': corrupt checkpoint (truncated)");
        uint32_t rank = read_u32(is, path);
        if (rank > 8) throw IoError("'" + path + "': corrupt checkpoint (bad rank)");
        Record rec;
        size_t numel = 1;
        for (uint32_t i = 0; i < rank; ++i) {
            uint32_t d = read_u32(is, path);
            rec.shape.push_back(static_cast<int>(d));
            numel *= d;
        }
        if (numel > (1u << 28)) throw IoError("'" + path + "': corrupt checkpoint (bad dims)");
        rec.data.resize(numel);
        is.read(reinterpret_cast<char*>(rec.data.data()),
                static_cast<std::streamsize>(numel * sizeof(double)));
        if (static_cast<size_t>(is.gcount()) != numel * sizeof(double))
            throw IoError("'" + path + "': corrupt checkpoint (truncated)");
        if constexpr (std::endian::native != std::endian::little) {
            for (auto& d : rec.data) {
                uint64_t bits;
                std::memcpy(&bits, &d, sizeof(bits));
                bits = to_little(bits);
                std::memcpy(&d, &bits, sizeof(bits));
            }
        }
        out.emplace(std::move(name), std::move(rec));
    }
    return out;
}

std::vector<double> string_to_doubles(const std::string& s) {
    std::vector<double> out((s.size() + 7) / 8 + 1);
    out[0] = static_cast<double>(s.size());
    std::memcpy(out.data() + 1, s.data(), s.size());
    return out;
}

std::string doubles_to_string(const std::vector<double>& v, const std::string& path) {
    if (v.empty()) return {};
    auto len = static_cast<size_t>(v[0]);
    if ((v.size() - 1) * 8 < len) throw IoError("'" + path + "': corrupt rng record");
    std::string s(len, '\0');
    std::memcpy(s.data(), v.data() + 1, len);
    return s;
}

const Record& need(const std::map<std::string, Record>& recs, const std::string& name,
                   const std::string& path) {
    auto it = recs.find(name);
    if (it == recs.end()) throw IoError("'" + path + "': checkpoint is missing record '" + name + "'");
    return it->second;
}

double need_scalar(const std::map<std::string, Record>& recs, const std::string& name,
                   const std::string& path) {
    const Record& r = need(recs, name, path);
    if (r.data.size() != 1) throw IoError("'" + path + "': record '" + name + "' is not a scalar");
    return r.data[0];
}

}  // namespace

void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot write '" + path + "'");
    os.write(kMagic, sizeof(kMagic));
    write_u32(os, kVersion);

    const ModelConfig& cfg = ckpt.model.cfg;
    write_scalar(os, "config/image_side", cfg.image_side);
    write_scalar(os, "config/encoder_side", cfg.encoder_side);
    write_scalar(os, "config/proj_dim", cfg.proj_dim);
    write_scalar(os, "config/tau", cfg.tau);
    write_scalar(os, "config/dropout", cfg.dropout_rate);
    write_scalar(os, "config/mask_mode", static_cast<double>(static_cast<int>(cfg.mask_mode)));
    write_scalar(os, "config/variant", static_cast<double>(static_cast<int>(cfg.variant)));
    write_scalar(os, "config/grid_expansion", cfg.grids.expansion);
    {
        std::vector<double> gs(cfg.grids.sizes.begin(), cfg.grids.sizes.end());
        write_vecd(os, "config/grid_sizes", gs);
        std::vector<double> ch(cfg.channels.begin(), cfg.channels.end());
        write_vecd(os, "config/channels", ch);
    }
    write_scalar(os, "meta/epoch", ckpt.epoch);

    for (size_t i = 0; i < ckpt.model.backbone.blocks.size(); ++i) {
        const auto& blk = ckpt.model.backbone.blocks[i];
        write_tensor(os, "backbone/" + std::to_string(i) + "/w", blk.w);
        write_tensor(os, "backbone/" + std::to_string(i) + "/b", blk.b);
    }
    const auto& h = ckpt.model.heads;
    write_tensor(os, "heads/wk", h.wk);
    write_tensor(os, "heads/bk", h.bk);
    write_tensor(os, "heads/wq", h.wq);
    write_tensor(os, "heads/bq", h.bq);
    write_tensor(os, "heads/wv", h.wv);
    write_tensor(os, "heads/bv", h.bv);

    write_scalar(os, "opt/present", ckpt.optimizer ? 1.0 : 0.0);
    if (ckpt.optimizer) {
        const auto& o = *ckpt.optimizer;
        write_scalar(os, "opt/kind", static_cast<double>(static_cast<int>(o.kind)));
        write_scalar(os, "opt/lr", o.lr);
        write_scalar(os, "opt/step", static_cast<double>(o.step));
        write_scalar(os, "opt/slots", static_cast<double>(o.m.size()));
        for (size_t i = 0; i < o.m.size(); ++i) {
            write_vecd(os, "opt/m/" + std::to_string(i), o.m[i]);
            write_vecd(os, "opt/v/" + std::to_string(i), o.v[i]);
        }
    }

    write_vecd(os, "rng/state", string_to_doubles(ckpt.rng_state));
    if (!os) throw IoError("write failed for '" + path + "'");
}

Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open '" + path + "'");
    char magic[8];
    is.read(magic, sizeof(magic));
    if (!is || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0)
        throw IoError("'" + path + "': not a checkpoint file (bad magic)");
    uint32_t version = read_u32(is, path);
    if (version != kVersion)
        throw IoError("'" + path + "': unsupported checkpoint version " +
                      std::to_string(version) + " (expected " + std::to_string(kVersion) + ")");

    auto recs = read_all_records(is, path);

    Checkpoint ckpt;
    ModelConfig cfg;
    cfg.image_side = static_cast<int>(need_scalar(recs, "config/image_side", path));
    cfg.encoder_side = static_cast<int>(need_scalar(recs, "config/encoder_side", path));
    cfg.proj_dim = static_cast<int>(need_scalar(recs, "config/proj_dim", path));
    cfg.tau = need_scalar(recs, "config/tau", path);
    cfg.dropout_rate = need_scalar(recs, "config/dropout", path);
    cfg.mask_mode = static_cast<MaskMode>(static_cast<int>(need_scalar(recs, "config/mask_mode", path)));
    cfg.variant = static_cast<Variant>(static_cast<int>(need_scalar(recs, "config/variant", path)));
    cfg.grids.expansion = need_scalar(recs, "config/grid_expansion", path);
    cfg.grids.sizes.clear();
    for (double d : need(recs, "config/grid_sizes", path).data)
        cfg.grids.sizes.push_back(static_cast<int>(d));
    cfg.channels.clear();
    for (double d : need(recs, "config/channels", path).data)
        cfg.channels.push_back(static_cast<int>(d));
    ckpt.epoch = static_cast<int>(need_scalar(recs, "meta/epoch", path));

    ckpt.model.cfg = cfg;
    ckpt.model.backbone.in_channels = 3;
    ckpt.model.backbone.input_side = cfg.encoder_side;
    for (size_t i = 0; i < cfg.channels.size(); ++i) {
        const Record& w = need(recs, "backbone/" + std::to_string(i) + "/w", path);
        const Record& b = need(recs, "backbone/" + std::to_string(i) + "/b", path);
        BackboneParams::Block blk;
        blk.w = Tensor::from(w.shape, w.data).set_requires_grad(true);
        blk.b = Tensor::from(b.shape, b.data).set_requires_grad(true);
        ckpt.model.backbone.blocks.push_back(std::move(blk));
    }
    auto head = [&](const char* name) {
        const Record& r = need(recs, name, path);
        return Tensor::from(r.shape, r.data).set_requires_grad(true);
    };
    ckpt.model.heads.wk = head("heads/wk");
    ckpt.model.heads.bk = head("heads/bk");
    ckpt.model.heads.wq = head("heads/wq");
    ckpt.model.heads.bq = head("heads/bq");
    ckpt.model.heads.wv = head("heads/wv");
    ckpt.model.heads.bv = head("heads/bv");

    if (need_scalar(recs, "opt/present", path) != 0.0) {
        Checkpoint::OptState o;
        o.kind = static_cast<OptimizerKind>(static_cast<int>(need_scalar(recs, "opt/kind", path)));
        o.lr = need_scalar(recs, "opt/lr", path);
        o.step = static_cast<int64_t>(need_scalar(recs, "opt/step", path));
        auto slots = static_cast<size_t>(need_scalar(recs, "opt/slots", path));
        for (size_t i = 0; i < slots; ++i) {
            o.m.push_back(need(recs, "opt/m/" + std::to_string(i), path).data);
            o.v.push_back(need(recs, "opt/v/" + std::to_string(i), path).data);
        }
        ckpt.optimizer = std::move(o);
    }

    ckpt.rng_state = doubles_to_string(need(recs, "rng/state", path).data, path);
    return ckpt;
}

}  // namespace ssf
