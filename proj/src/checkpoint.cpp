#include "mte/checkpoint.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>

namespace mte {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

namespace {

constexpr char kMagic[8] = {'M', 'T', 'E', 'C', 'K', 'P', 'T', '1'};
constexpr std::uint32_t kVersion = 1;

template <typename T>
constexpr DType dtype_of() {
    return sizeof(T) == 4 ? DType::F32 : DType::F64;
}

class Writer {
   public:
    explicit Writer(std::ofstream& out) : out_(out) {}
    template <typename U>
    void pod(U v) {
        out_.write(reinterpret_cast<const char*>(&v), sizeof(U));
    }
    void bytes(const void* data, std::size_t n) { out_.write(static_cast<const char*>(data), static_cast<std::streamsize>(n)); }

   private:
    std::ofstream& out_;
};

class Reader {
   public:
    Reader(const std::vector<char>& buf, const std::string& path) : buf_(buf), path_(path) {}
    template <typename U>
    U pod() {
        U v;
        bytes(&v, sizeof(U));
        return v;
    }
    void bytes(void* dst, std::size_t n) {
        require(pos_ + n <= buf_.size(), ErrorKind::Format, "checkpoint '" + path_ + "' is truncated");
        std::memcpy(dst, buf_.data() + pos_, n);
        pos_ += n;
    }
    bool done() const { return pos_ == buf_.size(); }

   private:
    const std::vector<char>& buf_;
    const std::string& path_;
    std::size_t pos_ = 0;
};

}  // namespace

template <typename T>
void Checkpoint::put(const std::string& group, const ParameterSet<T>& params) {
    for (const auto& [name, t] : params.entries()) put(group + name, t);
}

template <typename T>
void Checkpoint::put(const std::string& name, const Tensor<T>& t) {
    for (const auto& s : tensors)
        require(s.name != name, ErrorKind::Structural, "duplicate checkpoint tensor '" + name + "'");
    tensors.push_back(StoredTensor{name, dtype_of<T>(), t.shape(), std::vector<double>(t.data().begin(), t.data().end())});
}

bool Checkpoint::has_group(const std::string& group) const {
    for (const auto& s : tensors)
        if (s.name.starts_with(group)) return true;
    return false;
}

const StoredTensor& Checkpoint::find(const std::string& name) const {
    for (const auto& s : tensors)
        if (s.name == name) return s;
    fail(ErrorKind::Structural, "checkpoint has no tensor '" + name + "'");
}

template <typename T>
ParameterSet<T> Checkpoint::get(const std::string& group) const {
    ParameterSet<T> out;
    for (const auto& s : tensors) {
        if (!s.name.starts_with(group)) continue;
        Tensor<T> t(s.shape, std::vector<T>(s.values.begin(), s.values.end()));
        t.set_requires_grad(true);
        out.add(s.name.substr(group.size()), std::move(t));
    }
    return out;
}

template <typename T>
Tensor<T> Checkpoint::tensor(const std::string& name) const {
    const StoredTensor& s = find(name);
    return Tensor<T>(s.shape, std::vector<T>(s.values.begin(), s.values.end()));
}

void save_checkpoint(const std::string& path, const Checkpoint& checkpoint) {
    const std::filesystem::path target(path);
    if (target.has_parent_path()) std::filesystem::create_directories(target.parent_path());
    // Write beside the target and rename so an interrupted save never leaves a torn file.
    const std::string tmp = path + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        require(out.good(), ErrorKind::Data, "cannot write checkpoint '" + path + "'");
        Writer w(out);
        w.bytes(kMagic, sizeof(kMagic));
        w.pod(kVersion);
        const std::string meta = checkpoint.meta.dump();
        w.pod(static_cast<std::uint64_t>(meta.size()));
        w.bytes(meta.data(), meta.size());
        w.pod(static_cast<std::uint64_t>(checkpoint.tensors.size()));
        for (const auto& s : checkpoint.tensors) {
            w.pod(static_cast<std::uint32_t>(s.name.size()));
            w.bytes(s.name.data(), s.name.size());
            w.pod(static_cast<unsigned char>(s.dtype));
            w.pod(static_cast<std::uint32_t>(s.shape.size()));
            for (Index d : s.shape) w.pod(static_cast<std::uint64_t>(d));
            if (s.dtype == DType::F32) {
                std::vector<float> raw(s.values.begin(), s.values.end());
                w.bytes(raw.data(), raw.size() * sizeof(float));
            } else {
                w.bytes(s.values.data(), s.values.size() * sizeof(double));
            }
        }
        require(out.good(), ErrorKind::Data, "short write on checkpoint '" + path + "'");
    }
    std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    require(in.good(), ErrorKind::Data, "cannot open checkpoint '" + path + "'");
    std::vector<char> buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    Reader r(buf, path);
    char magic[8];
    r.bytes(magic, sizeof(magic));
    require(std::memcmp(magic, kMagic, sizeof(kMagic)) == 0, ErrorKind::Format,
            "'" + path + "' is not a checkpoint (bad magic)");
    const auto version = r.pod<std::uint32_t>();
    require(version == kVersion, ErrorKind::Format,
            "checkpoint '" + path + "' has unsupported version " + std::to_string(version));
    Checkpoint ck;
    std::string meta(r.pod<std::uint64_t>(), '\0');
    r.bytes(meta.data(), meta.size());
    try {
        ck.meta = nlohmann::json::parse(meta);
    } catch (const nlohmann::json::exception& e) {
        fail(ErrorKind::Format, "checkpoint '" + path + "' has malformed metadata: " + e.what());
    }
    const auto count = r.pod<std::uint64_t>();
    for (std::uint64_t i = 0; i < count; ++i) {
        StoredTensor s;
        s.name.resize(r.pod<std::uint32_t>());
        r.bytes(s.name.data(), s.name.size());
        const auto dtype = r.pod<unsigned char>();
        require(dtype <= 1, ErrorKind::Format, "checkpoint tensor '" + s.name + "' has unknown dtype");
        s.dtype = static_cast<DType>(dtype);
        const auto rank = r.pod<std::uint32_t>();
        require(rank <= 8, ErrorKind::Format, "checkpoint tensor '" + s.name + "' has implausible rank");
        for (std::uint32_t d = 0; d < rank; ++d) s.shape.push_back(static_cast<Index>(r.pod<std::uint64_t>()));
        const Index n = shape_numel(s.shape);
        if (s.dtype == DType::F32) {
            std::vector<float> raw(n);
            r.bytes(raw.data(), n * sizeof(float));
            s.values.assign(raw.begin(), raw.end());
        } else {
            s.values.resize(n);
            r.bytes(s.values.data(), n * sizeof(double));
        }
        ck.tensors.push_back(std::move(s));
    }
    require(r.done(), ErrorKind::Format, "checkpoint '" + path + "' has trailing bytes");
    return ck;
}

RunConfig checkpoint_config(const Checkpoint& checkpoint) {
    require(checkpoint.meta.contains("config"), ErrorKind::Format, "checkpoint metadata lacks a config");
    RunConfig config;
    apply_config(config, checkpoint.meta["config"].get<ConfigMap>());
    return config;
}

void set_checkpoint_config(Checkpoint& checkpoint, const RunConfig& config) {
    checkpoint.meta["config"] = to_config_map(config);
}

LoadedModel load_model(const Checkpoint& checkpoint) {
    LoadedModel out;
    out.config = checkpoint_config(checkpoint);
    out.kind = checkpoint.meta.value("kind", std::string("unknown"));
    out.stripped = checkpoint.meta.value("stripped", false);
    if (checkpoint.has_group("teacher/"))
        out.params = checkpoint.get<float>("teacher/");
    else if (checkpoint.has_group("student/"))
        out.params = checkpoint.get<float>("student/");
    else
        out.params = checkpoint.get<float>("model/");
    out.params.set_requires_grad(false);
    return out;
}

LoadedModel load_model(const std::string& path) { return load_model(load_checkpoint(path)); }

Checkpoint strip_checkpoint(const Checkpoint& checkpoint, StripReport* report) {
    LoadedModel source = load_model(checkpoint);
    StripReport local;
    auto [params, model] = strip_auxiliary(source.params, source.config.model, &local);
    RunConfig config = source.config;
    config.model = model;
    Checkpoint out;
    out.meta = checkpoint.meta;
    out.meta["stripped"] = true;
    out.meta["source_kind"] = source.kind;
    out.meta["source_mask_auxiliary"] = source.config.model.mask_auxiliary;
    out.meta["lossless"] = local.lossless;
    set_checkpoint_config(out, config);
    out.put("model/", params);
    if (report != nullptr) *report = local;
    return out;
}

template void Checkpoint::put(const std::string&, const ParameterSet<float>&);
template void Checkpoint::put(const std::string&, const ParameterSet<double>&);
template void Checkpoint::put(const std::string&, const Tensor<float>&);
template void Checkpoint::put(const std::string&, const Tensor<double>&);
template ParameterSet<float> Checkpoint::get(const std::string&) const;
template ParameterSet<double> Checkpoint::get(const std::string&) const;
template Tensor<float> Checkpoint::tensor(const std::string&) const;
template Tensor<double> Checkpoint::tensor(const std::string&) const;

}  // namespace mte
