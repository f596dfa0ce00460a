#pragma once

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "drpoint/config.hpp"
#include "drpoint/image_io.hpp"
#include "drpoint/trainer.hpp"

namespace drpoint {

inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

enum class RecordType : std::uint8_t { F32 = 0, F64 = 1, U64 = 2, Text = 3 };

struct Record {
    RecordType type = RecordType::F64;
    std::vector<std::uint64_t> shape;
    std::vector<double> f64;
    std::vector<std::uint64_t> u64;
    std::string text;
};

class CheckpointWriter {
public:
    void matrix(const std::string& name, const Mat& m) {
        Record r;
        r.type = RecordType::F64;
        r.shape = {std::uint64_t(m.rows()), std::uint64_t(m.cols())};
        r.f64.assign(m.data(), m.data() + m.size());
        records_.emplace_back(name, std::move(r));
    }
    void store(const std::string& prefix, const ParamStore& ps) {
        for (const auto& [name, m] : ps.tensors) matrix(prefix + name, m);
    }
    void scalar_u64(const std::string& name, std::uint64_t v) {
        Record r;
        r.type = RecordType::U64;
        r.shape = {1};
        r.u64 = {v};
        records_.emplace_back(name, std::move(r));
    }
    void scalar_f64(const std::string& name, double v) {
        Record r;
        r.type = RecordType::F64;
        r.shape = {1};
        r.f64 = {v};
        records_.emplace_back(name, std::move(r));
    }
    void text(const std::string& name, const std::string& s) {
        Record r;
        r.type = RecordType::Text;
        r.shape = {std::uint64_t(s.size())};
        r.text = s;
        records_.emplace_back(name, std::move(r));
    }

    void write(std::ostream& os) const {
        os.write("DRCK", 4);
        write_le<std::uint32_t>(os, kCheckpointVersion);
        write_le<std::uint64_t>(os, records_.size());
        for (const auto& [name, r] : records_) {
            write_le<std::uint32_t>(os, std::uint32_t(name.size()));
            os.write(name.data(), std::streamsize(name.size()));
            write_le<std::uint8_t>(os, std::uint8_t(r.type));
            write_le<std::uint32_t>(os, std::uint32_t(r.shape.size()));
            for (std::uint64_t d : r.shape) write_le<std::uint64_t>(os, d);
            switch (r.type) {
                case RecordType::F64:
                    for (double v : r.f64) write_le<double>(os, v);
                    break;
                case RecordType::F32:
                    for (double v : r.f64) write_le<float>(os, float(v));
                    break;
                case RecordType::U64:
                    for (std::uint64_t v : r.u64) write_le<std::uint64_t>(os, v);
                    break;
                case RecordType::Text:
                    os.write(r.text.data(), std::streamsize(r.text.size()));
                    break;
            }
        }
    }

private:
    std::vector<std::pair<std::string, Record>> records_;
};

inline std::map<std::string, Record> read_records(std::istream& is) {
    const char* what = "checkpoint";
    expect_magic(is, "DRCK", what);
    const auto version = read_le<std::uint32_t>(is, what);
    if (version != kCheckpointVersion) throw VersionError(what, version, kCheckpointVersion);
    const auto count = read_le<std::uint64_t>(is, what);
    std::map<std::string, Record> out;
    for (std::uint64_t i = 0; i < count; ++i) {
        const auto len = read_le<std::uint32_t>(is, what);
        if (len > (1u << 16)) throw FormatError("checkpoint: implausible record name length");
        std::string name(len, '\0');
        if (!is.read(name.data(), len)) throw FormatError("checkpoint: truncated file");
        Record r;
        const auto type = read_le<std::uint8_t>(is, what);
        if (type > 3) throw FormatError("checkpoint: unknown record type in " + name);
        r.type = RecordType(type);
        const auto ndim = read_le<std::uint32_t>(is, what);
        if (ndim > 8) throw FormatError("checkpoint: implausible rank in " + name);
        std::uint64_t n = 1;
        for (std::uint32_t d = 0; d < ndim; ++d) {
            r.shape.push_back(read_le<std::uint64_t>(is, what));
            n *= r.shape.back();
        }
        if (n > (std::uint64_t(1) << 34)) throw FormatError("checkpoint: implausible record size in " + name);
        switch (r.type) {
            case RecordType::F64:
                r.f64.resize(n);
                for (auto& v : r.f64) v = read_le<double>(is, what);
                break;
            case RecordType::F32:
                r.f64.resize(n);
                for (auto& v : r.f64) v = read_le<float>(is, what);
                break;
            case RecordType::U64:
                r.u64.resize(n);
                for (auto& v : r.u64) v = read_le<std::uint64_t>(is, what);
                break;
            case RecordType::Text:
                r.text.resize(n);
                if (!is.read(r.text.data(), std::streamsize(n))) throw FormatError("checkpoint: truncated file");
                break;
        }
        if (!out.emplace(std::move(name), std::move(r)).second) throw FormatError("checkpoint: duplicate record");
    }
    if (is.peek() != std::char_traits<char>::eof()) throw FormatError("checkpoint: trailing bytes");
    return out;
}

class CheckpointReader {
public:
    explicit CheckpointReader(std::map<std::string, Record> records) : records_(std::move(records)) {}

    const Record& get(const std::string& name, RecordType type) const {
        auto it = records_.find(name);
        if (it == records_.end()) throw FormatError("checkpoint: missing record " + name);
        const bool ok = it->second.type == type || (type == RecordType::F64 && it->second.type == RecordType::F32);
        if (!ok) throw FormatError("checkpoint: wrong record type for " + name);
        return it->second;
    }
    Mat matrix(const std::string& name) const {
        const Record& r = get(name, RecordType::F64);
        if (r.shape.size() != 2) throw FormatError("checkpoint: " + name + " is not a matrix");
        Mat m(Index(r.shape[0]), Index(r.shape[1]));
        std::copy(r.f64.begin(), r.f64.end(), m.data());
        return m;
    }
    ParamStore store(const std::string& prefix) const {
        ParamStore ps;
        for (const auto& [name, r] : records_)
            if (name.rfind(prefix, 0) == 0) ps.add(name.substr(prefix.size()), matrix(name));
        return ps;
    }
    std::uint64_t u64(const std::string& name) const {
        const Record& r = get(name, RecordType::U64);
        if (r.u64.size() != 1) throw FormatError("checkpoint: " + name + " is not a scalar");
        return r.u64[0];
    }
    double f64(const std::string& name) const {
        const Record& r = get(name, RecordType::F64);
        if (r.f64.size() != 1) throw FormatError("checkpoint: " + name + " is not a scalar");
        return r.f64[0];
    }
    const std::string& text(const std::string& name) const { return get(name, RecordType::Text).text; }

private:
    std::map<std::string, Record> records_;
};

}  // namespace detail

struct Checkpoint {
    TrainState state;
    TrainConfig config;
};

/// "DRCK", u32 version, u64 record count, then (name, type, shape, data)
/// records, all little-endian. Tensors are stored as float64 so a reload is
/// bit-identical. Written to a temporary file and renamed into place.
inline void checkpoint_save(const TrainState& s, const TrainConfig& cfg, const std::string& path) {
    detail::CheckpointWriter w;
    w.text("config", to_json(cfg).dump());
    w.scalar_u64("step", std::uint64_t(s.step));
    w.scalar_u64("seed", s.seed);
    w.store("param/", s.params);
    w.store("key/", s.key_params);
    w.store("tok/", s.tokenizer);
    w.store("adam_m/", s.adam_m);
    w.store("adam_v/", s.adam_v);
    w.matrix("codebook", s.codebook.codewords);
    w.scalar_u64("moco/capacity", std::uint64_t(s.moco.capacity));
    w.scalar_u64("moco/dim", std::uint64_t(s.moco.dim));
    w.scalar_u64("moco/size", std::uint64_t(s.moco.size));
    w.scalar_u64("moco/head", std::uint64_t(s.moco.head));
    w.scalar_f64("moco/momentum", s.moco.momentum);
    w.scalar_f64("moco/tau", s.moco.tau);
    w.matrix("moco/storage", s.moco.storage);

    const std::string tmp = path + ".tmp";
    {
        std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
        if (!os) throw FormatError("checkpoint_save: cannot write " + tmp);
        w.write(os);
        if (!os.flush()) throw FormatError("checkpoint_save: write failed for " + tmp);
    }
    std::filesystem::rename(tmp, path);
}

inline Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw FormatError("checkpoint_load: cannot open " + path);
    const detail::CheckpointReader r(detail::read_records(is));
    Checkpoint c;
    try {
        c.config = parse_config(nlohmann::json::parse(r.text("config")));
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("checkpoint_load: bad config record: ") + e.what());
    }
    TrainState& s = c.state;
    s.step = long(r.u64("step"));
    s.seed = r.u64("seed");
    s.params = r.store("param/");
    s.key_params = r.store("key/");
    s.tokenizer = r.store("tok/");
    s.adam_m = r.store("adam_m/");
    s.adam_v = r.store("adam_v/");
    s.codebook.codewords = r.matrix("codebook");
    s.moco.capacity = Index(r.u64("moco/capacity"));
    s.moco.dim = Index(r.u64("moco/dim"));
    s.moco.size = Index(r.u64("moco/size"));
    s.moco.head = Index(r.u64("moco/head"));
    s.moco.momentum = r.f64("moco/momentum");
    s.moco.tau = r.f64("moco/tau");
    s.moco.storage = r.matrix("moco/storage");
    if (!s.params.congruent(s.adam_m) || !s.params.congruent(s.adam_v))
        throw FormatError("checkpoint_load: optimizer moments do not match the parameters");
    if (s.moco.storage.rows() != s.moco.capacity || s.moco.storage.cols() != s.moco.dim || s.moco.size > s.moco.capacity ||
        s.moco.head >= s.moco.capacity)
        throw FormatError("checkpoint_load: inconsistent queue state");
    return c;
}

inline TrainState checkpoint_load(const std::string& path) { return load_checkpoint(path).state; }

}  // namespace drpoint
