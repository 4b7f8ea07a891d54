#include "mte/config.hpp"

#include <charconv>
#include <fstream>
#include <functional>
#include <sstream>

namespace mte {

void TrainConfig::validate() const {
    auto check = [](bool ok, const std::string& what) { require(ok, ErrorKind::Configuration, what); };
    check(epochs >= 1, "epochs must be at least 1");
    check(batch_size >= 2, "batch_size must be at least 2");
    check(base_lr > 0 && final_lr >= 0, "learning rates must be positive");
    check(warmup_epochs >= 0, "warmup_epochs must be non-negative");
    check(weight_decay >= 0, "weight_decay must be non-negative");
    check(ema_start >= 0 && ema_start <= 1 && ema_end >= 0 && ema_end <= 1, "ema momenta must lie in [0, 1]");
    check(center_momentum >= 0 && center_momentum < 1, "center_momentum must lie in [0, 1)");
    check(grad_clip >= 0, "grad_clip must be non-negative");
    check(!(no_distill && freeze_auxiliary), "no_distill and freeze_auxiliary are exclusive");
    check(classes >= 2, "classes must be at least 2");
}

void AugmentConfig::validate() const {
    auto check = [](bool ok, const std::string& what) { require(ok, ErrorKind::Configuration, what); };
    check(crop_scale_min > 0 && crop_scale_min <= crop_scale_max && crop_scale_max <= 1,
          "crop scales must satisfy 0 < min <= max <= 1");
    check(flip_p >= 0 && flip_p <= 1 && grayscale_p >= 0 && grayscale_p <= 1, "probabilities must lie in [0, 1]");
    check(brightness >= 0 && contrast >= 0 && saturation >= 0, "jitter strengths must be non-negative");
}

void RunConfig::validate() const {
    model.validate();
    loss.validate();
    train.validate();
    augment.validate();
    require(head.hidden > 0 && head.bottleneck > 0 && head.prototypes > 0, ErrorKind::Configuration,
            "head dimensions must be positive");
    require(head.kind == loss.kind, ErrorKind::Configuration, "head kind must follow the base loss");
    require(data.dataset == "synthetic" || data.dataset == "cifar", ErrorKind::Configuration,
            "dataset must be synthetic or cifar, got '" + data.dataset + "'");
}

DistillMode RunConfig::distill_mode() const {
    if (model.num_aux + model.num_pooled == 0 || train.freeze_auxiliary) return DistillMode::GlobalOnly;
    return train.no_distill ? DistillMode::NoDistill : DistillMode::Distill;
}

namespace {

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

std::string format_double(double v) {
    char buf[64];
    auto res = std::to_chars(buf, buf + sizeof(buf), v);
    return std::string(buf, res.ptr);
}

Index parse_index(const std::string& key, const std::string& v) {
    Index out = 0;
    auto res = std::from_chars(v.data(), v.data() + v.size(), out);
    require(res.ec == std::errc() && res.ptr == v.data() + v.size(), ErrorKind::Configuration,
            "'" + key + "' expects a non-negative integer, got '" + v + "'");
    return out;
}

double parse_double(const std::string& key, const std::string& v) {
    double out = 0;
    auto res = std::from_chars(v.data(), v.data() + v.size(), out);
    require(res.ec == std::errc() && res.ptr == v.data() + v.size(), ErrorKind::Configuration,
            "'" + key + "' expects a number, got '" + v + "'");
    return out;
}

bool parse_bool(const std::string& key, const std::string& v) {
    if (v == "true" || v == "1" || v == "on" || v == "yes") return true;
    if (v == "false" || v == "0" || v == "off" || v == "no") return false;
    fail(ErrorKind::Configuration, "'" + key + "' expects true or false, got '" + v + "'");
}

std::vector<Index> parse_index_list(const std::string& key, const std::string& v) {
    std::vector<Index> out;
    std::stringstream ss(v);
    std::string item;
    while (std::getline(ss, item, ',')) {
        item = trim(item);
        if (!item.empty()) out.push_back(parse_index(key, item));
    }
    return out;
}

struct Field {
    std::string key;
    std::function<std::string(const RunConfig&)> get;
    std::function<void(RunConfig&, const std::string&)> set;
};

#define MTE_INDEX_FIELD(name, member)                                                     \
    Field{name, [](const RunConfig& c) { return std::to_string(c.member); },              \
          [](RunConfig& c, const std::string& v) { c.member = parse_index(name, v); }}
#define MTE_DOUBLE_FIELD(name, member)                                                    \
    Field{name, [](const RunConfig& c) { return format_double(c.member); },               \
          [](RunConfig& c, const std::string& v) { c.member = parse_double(name, v); }}
#define MTE_BOOL_FIELD(name, member)                                                      \
    Field{name, [](const RunConfig& c) { return std::string(c.member ? "true" : "false"); }, \
          [](RunConfig& c, const std::string& v) { c.member = parse_bool(name, v); }}

const std::vector<Field>& fields() {
    static const std::vector<Field> table = {
        MTE_INDEX_FIELD("embed_dim", model.embed_dim),
        MTE_INDEX_FIELD("depth", model.depth),
        MTE_INDEX_FIELD("heads", model.heads),
        MTE_INDEX_FIELD("mlp_ratio", model.mlp_ratio),
        MTE_INDEX_FIELD("patch_size", model.patch_size),
        MTE_INDEX_FIELD("image_size", model.image_size),
        MTE_INDEX_FIELD("channels", model.channels),
        MTE_INDEX_FIELD("M", model.num_aux),
        MTE_INDEX_FIELD("K", model.num_pooled),
        MTE_INDEX_FIELD("pool_kernel", model.pool_kernel),
        MTE_BOOL_FIELD("mask_auxiliary", model.mask_auxiliary),
        MTE_INDEX_FIELD("head_hidden", head.hidden),
        MTE_INDEX_FIELD("head_bottleneck", head.bottleneck),
        MTE_INDEX_FIELD("prototypes", head.prototypes),
        MTE_BOOL_FIELD("shared_heads", head.shared),
        Field{"loss", [](const RunConfig& c) { return to_string(c.loss.kind); },
              [](RunConfig& c, const std::string& v) {
                  c.loss.kind = parse_loss_kind(v);
                  c.head.kind = c.loss.kind;
              }},
        MTE_DOUBLE_FIELD("student_temp", loss.student_temperature),
        MTE_DOUBLE_FIELD("teacher_temp", loss.teacher_temperature),
        MTE_DOUBLE_FIELD("infonce_temp", loss.infonce_temperature),
        MTE_INDEX_FIELD("epochs", train.epochs),
        MTE_INDEX_FIELD("batch_size", train.batch_size),
        MTE_DOUBLE_FIELD("base_lr", train.base_lr),
        MTE_DOUBLE_FIELD("final_lr", train.final_lr),
        MTE_DOUBLE_FIELD("warmup_epochs", train.warmup_epochs),
        MTE_DOUBLE_FIELD("weight_decay", train.weight_decay),
        MTE_DOUBLE_FIELD("ema_start", train.ema_start),
        MTE_DOUBLE_FIELD("ema_end", train.ema_end),
        MTE_DOUBLE_FIELD("center_momentum", train.center_momentum),
        MTE_DOUBLE_FIELD("grad_clip", train.grad_clip),
        Field{"seed", [](const RunConfig& c) { return std::to_string(c.train.seed); },
              [](RunConfig& c, const std::string& v) { c.train.seed = parse_index("seed", v); }},
        MTE_BOOL_FIELD("no_distill", train.no_distill),
        MTE_BOOL_FIELD("freeze_auxiliary", train.freeze_auxiliary),
        MTE_INDEX_FIELD("checkpoint_every", train.checkpoint_every),
        MTE_INDEX_FIELD("classes", train.classes),
        MTE_BOOL_FIELD("shared_classifiers", train.shared_classifiers),
        MTE_DOUBLE_FIELD("crop_scale_min", augment.crop_scale_min),
        MTE_DOUBLE_FIELD("crop_scale_max", augment.crop_scale_max),
        MTE_DOUBLE_FIELD("flip_p", augment.flip_p),
        MTE_DOUBLE_FIELD("brightness", augment.brightness),
        MTE_DOUBLE_FIELD("contrast", augment.contrast),
        MTE_DOUBLE_FIELD("saturation", augment.saturation),
        MTE_DOUBLE_FIELD("grayscale_p", augment.grayscale_p),
        Field{"dataset", [](const RunConfig& c) { return c.data.dataset; },
              [](RunConfig& c, const std::string& v) { c.data.dataset = v; }},
        MTE_INDEX_FIELD("synthetic_classes", data.synthetic_classes),
        MTE_INDEX_FIELD("train_per_class", data.train_per_class),
        MTE_INDEX_FIELD("test_per_class", data.test_per_class),
        MTE_INDEX_FIELD("synthetic_size", data.synthetic_size),
        Field{"data_seed", [](const RunConfig& c) { return std::to_string(c.data.seed); },
              [](RunConfig& c, const std::string& v) { c.data.seed = parse_index("data_seed", v); }},
        Field{"cifar_dir", [](const RunConfig& c) { return c.data.cifar_dir; },
              [](RunConfig& c, const std::string& v) { c.data.cifar_dir = v; }},
        Field{"class_filter",
              [](const RunConfig& c) {
                  std::string s;
                  for (Index i = 0; i < c.data.class_filter.size(); ++i)
                      s += (i ? "," : "") + std::to_string(c.data.class_filter[i]);
                  return s;
              },
              [](RunConfig& c, const std::string& v) { c.data.class_filter = parse_index_list("class_filter", v); }},
        MTE_INDEX_FIELD("per_class_cap", data.per_class_cap),
    };
    return table;
}

#undef MTE_INDEX_FIELD
#undef MTE_DOUBLE_FIELD
#undef MTE_BOOL_FIELD

}  // namespace

ConfigMap parse_config_text(const std::string& text) {
    ConfigMap out;
    std::stringstream ss(text);
    std::string line;
    Index number = 0;
    while (std::getline(ss, line)) {
        ++number;
        if (auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
        line = trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        require(eq != std::string::npos, ErrorKind::Configuration,
                "config line " + std::to_string(number) + ": expected 'key = value', got '" + line + "'");
        out[trim(line.substr(0, eq))] = trim(line.substr(eq + 1));
    }
    return out;
}

ConfigMap load_config_file(const std::string& path) {
    std::ifstream in(path);
    require(in.good(), ErrorKind::Data, "cannot open config file '" + path + "'");
    std::stringstream ss;
    ss << in.rdbuf();
    return parse_config_text(ss.str());
}

void apply_config(RunConfig& config, const ConfigMap& values) {
    for (const auto& [key, value] : values) {
        bool found = false;
        for (const auto& f : fields())
            if (f.key == key) {
                f.set(config, value);
                found = true;
            }
        if (!found) {
            std::string valid;
            for (const auto& f : fields()) valid += (valid.empty() ? "" : ", ") + f.key;
            fail(ErrorKind::Configuration, "unknown config key '" + key + "' (valid: " + valid + ")");
        }
    }
}

ConfigMap to_config_map(const RunConfig& config) {
    ConfigMap out;
    for (const auto& f : fields()) out[f.key] = f.get(config);
    return out;
}

std::string to_config_text(const RunConfig& config) {
    std::string out;
    for (const auto& f : fields()) out += f.key + " = " + f.get(config) + "\n";
    return out;
}

std::vector<std::string> config_keys() {
    std::vector<std::string> out;
    for (const auto& f : fields()) out.push_back(f.key);
    return out;
}

}  // namespace mte
