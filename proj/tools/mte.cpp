// mte: one subcommand per experiment. Config precedence is defaults < --config
// file < --set overrides < --seed / --mode.

#include <omp.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>

#include "CLI11.hpp"
#include "json.hpp"
#include "mte/augment.hpp"
#include "mte/checkpoint.hpp"
#include "mte/config.hpp"
#include "mte/data.hpp"
#include "mte/errors.hpp"
#include "mte/eval.hpp"
#include "mte/flops.hpp"
#include "mte/gradcheck.hpp"
#include "mte/metrics_log.hpp"
#include "mte/trainer.hpp"
#include "selfcheck.hpp"

#ifndef MTE_VERSION
#define MTE_VERSION "unknown"
#endif

namespace fs = std::filesystem;
using namespace mte;

namespace {

struct Options {
    std::string config_path;
    std::vector<std::string> sets;
    std::optional<std::uint64_t> seed;
    std::string out = "mte_out";
    int threads = 0;
    std::string mode;
    std::vector<std::string> checkpoints;
    std::string tokens = "global";
    std::string space = "encoder";
    Index k = 10;
    double temperature = 0.07;
    bool resume = false;
    bool verbose = false;
    Index probe_epochs = 100;
    double probe_lr = 1e-2;
    Index max_combos = 0;
    bool per_head_max = false;
    Index images = 2;
    std::string channels = "0,1,2";
    Index max_elements = 0;
};

std::string argv_line;

ConfigMap user_overrides(const Options& o) {
    ConfigMap map;
    if (!o.config_path.empty()) map = load_config_file(o.config_path);
    for (const auto& s : o.sets) {
        const auto eq = s.find('=');
        require(eq != std::string::npos && eq > 0, ErrorKind::Usage, "--set expects key=value, got '" + s + "'");
        const ConfigMap one = parse_config_text(s);
        for (const auto& [k, v] : one) map[k] = v;
    }
    return map;
}

std::vector<std::string> split_list(const std::string& text) {
    std::vector<std::string> out;
    std::stringstream ss(text);
    std::string item;
    while (std::getline(ss, item, ','))
        if (!item.empty()) out.push_back(item);
    return out;
}

// --mode: comma-separated switches applied after the config.
void apply_modes(RunConfig& cfg, const std::string& modes) {
    for (const auto& m : split_list(modes)) {
        if (m == "mask_on") cfg.model.mask_auxiliary = true;
        else if (m == "mask_off") cfg.model.mask_auxiliary = false;
        else if (m == "distill") cfg.train.no_distill = false;
        else if (m == "no_distill") cfg.train.no_distill = true;
        else if (m == "freeze_auxiliary") cfg.train.freeze_auxiliary = true;
        else if (m == "baseline") cfg.model.num_aux = cfg.model.num_pooled = 0;
        else if (m == "shared_heads") cfg.head.shared = true;
        else if (m == "independent_heads") cfg.head.shared = false;
        else if (m == "shared_classifiers") cfg.train.shared_classifiers = true;
        else
            fail(ErrorKind::Usage, "unknown --mode '" + m +
                                       "' (valid: mask_on, mask_off, distill, no_distill, freeze_auxiliary, "
                                       "baseline, shared_heads, independent_heads, shared_classifiers)");
    }
}

RunConfig resolve_config(const Options& o) {
    RunConfig cfg;
    apply_config(cfg, user_overrides(o));
    if (o.seed) cfg.train.seed = *o.seed;
    apply_modes(cfg, o.mode);
    cfg.validate();
    return cfg;
}

// Eval commands take the model from the checkpoint; only data keys may be overridden.
DataConfig resolve_data(const Options& o, const RunConfig& checkpoint_config) {
    RunConfig cfg = checkpoint_config;
    apply_config(cfg, user_overrides(o));
    return cfg.data;
}

void write_manifest(const std::string& subcommand, const Options& o, const ConfigMap& config) {
    fs::create_directories(o.out);
    nlohmann::json manifest = {{"subcommand", subcommand},
                               {"config", config},
                               {"seed", o.seed ? nlohmann::json(*o.seed) : nlohmann::json()},
                               {"version", MTE_VERSION},
                               {"out", o.out},
                               {"threads", omp_get_max_threads()},
                               {"command", argv_line}};
    if (config.count("seed")) manifest["seed"] = std::stoull(config.at("seed"));
    if (!o.checkpoints.empty()) manifest["checkpoints"] = o.checkpoints;
    std::ofstream out(fs::path(o.out) / "manifest.json", std::ios::trunc);
    require(out.good(), ErrorKind::Data, "cannot write manifest into '" + o.out + "'");
    out << manifest.dump(2) << '\n';
}

std::string out_path(const Options& o, const std::string& name) { return (fs::path(o.out) / name).string(); }

const std::string& single_checkpoint(const Options& o) {
    require(o.checkpoints.size() == 1, ErrorKind::Usage, "expected exactly one --checkpoint");
    return o.checkpoints.front();
}

FeatureSpace parse_space(const std::string& s) {
    if (s == "encoder") return FeatureSpace::Encoder;
    if (s == "post_head") return FeatureSpace::PostHead;
    fail(ErrorKind::Usage, "unknown --space '" + s + "' (valid: encoder, post_head)");
}

void print_row(const std::string& metric, const std::string& tokens, double value) {
    std::printf("%-22s %-28s %.6f\n", metric.c_str(), tokens.c_str(), value);
}

// Loads the single checkpoint, its data split, and writes the manifest.
struct EvalContext {
    LoadedModel model;
    Split split;
};

EvalContext eval_context(const std::string& name, const Options& o) {
    EvalContext ctx;
    ctx.model = load_model(single_checkpoint(o));
    ctx.model.config.data = resolve_data(o, ctx.model.config);
    write_manifest(name, o, to_config_map(ctx.model.config));
    ctx.split = load_split(ctx.model.config.data);
    return ctx;
}

std::string token_name(const TokenOutputs& out, Index token) {
    if (token == 0) return "global";
    if (token <= out.num_aux) return "aux:" + std::to_string(token - 1);
    return "pool:" + std::to_string(token - 1 - out.num_aux);
}

std::string selector_text(const TokenOutputs& out, Index token) {
    return token == 0 ? "global" : token_name(out, token);
}

double global_knn(const LoadedModel& model, const Split& split) {
    const TokenSelector global = TokenSelector::parse("global", 0, 0);
    return knn_classify(extract_features(model, split.train, global, FeatureSpace::Encoder),
                        extract_features(model, split.test, global, FeatureSpace::Encoder));
}

int cmd_pretrain(const Options& o) {
    const RunConfig cfg = resolve_config(o);
    write_manifest("pretrain", o, to_config_map(cfg));
    const Split split = load_split(cfg.data);
    TrainOptions topt;
    topt.out_dir = o.out;
    topt.resume = o.resume;
    topt.verbose = o.verbose;
    const TrainState state = pretrain(split.train, cfg, topt);
    const LoadedModel model = load_model(to_checkpoint(state));
    const double acc = global_knn(model, split);
    print_row("knn_top1", "global", acc);
    MetricLog log(out_path(o, "eval.ndjson"), false);
    log.write(metric_record("knn_top1", "global", acc));
    return 0;
}

int cmd_train_supervised(const Options& o) {
    const RunConfig cfg = resolve_config(o);
    write_manifest("train-supervised", o, to_config_map(cfg));
    const Split split = load_split(cfg.data);
    TrainOptions topt;
    topt.out_dir = o.out;
    topt.resume = o.resume;
    topt.verbose = o.verbose;
    const SupervisedState state = train_supervised(split.train, cfg, topt);
    const LoadedModel model = load_model(to_checkpoint(state));
    const double acc = accuracy(predict_global(model, split.test), split.test.labels);
    print_row("top1", "global", acc);
    MetricLog log(out_path(o, "eval.ndjson"), false);
    log.write(metric_record("top1", "global", acc));
    return 0;
}

int cmd_strip(const Options& o) {
    const Checkpoint source = load_checkpoint(single_checkpoint(o));
    write_manifest("strip", o, to_config_map(checkpoint_config(source)));
    StripReport report;
    const Checkpoint stripped = strip_checkpoint(source, &report);
    const std::string path = out_path(o, "stripped.mte");
    save_checkpoint(path, stripped);
    std::printf("wrote %s (removed %lld scalars, lossless %s)\n", path.c_str(),
                static_cast<long long>(report.removed_scalars), report.lossless ? "yes" : "no");
    if (!report.lossless)
        std::fprintf(stderr, "warning: source trained without the auxiliary mask; global outputs will change\n");
    return 0;
}

int cmd_eval_knn(const Options& o) {
    const EvalContext ctx = eval_context("eval-knn", o);
    const Index m = ctx.model.config.model.num_aux, kp = ctx.model.config.model.num_pooled;
    const TokenSelector sel = TokenSelector::parse(o.tokens, m, kp);
    const FeatureSpace space = parse_space(o.space);
    const double acc = knn_classify(extract_features(ctx.model, ctx.split.train, sel, space),
                                    extract_features(ctx.model, ctx.split.test, sel, space), o.k, o.temperature);
    print_row("knn_top1", sel.describe(), acc);
    MetricLog log(out_path(o, "eval.ndjson"), false);
    log.write(metric_record("knn_top1", sel.describe(), acc));
    return 0;
}

int cmd_eval_linear(const Options& o) {
    const EvalContext ctx = eval_context("eval-linear", o);
    const TokenSelector sel =
        TokenSelector::parse(o.tokens, ctx.model.config.model.num_aux, ctx.model.config.model.num_pooled);
    const FeatureSpace space = parse_space(o.space);
    LinearProbeOptions popt;
    popt.epochs = o.probe_epochs;
    popt.lr = o.probe_lr;
    popt.seed = o.seed.value_or(ctx.model.config.train.seed);
    const double acc = linear_probe(extract_features(ctx.model, ctx.split.train, sel, space),
                                    extract_features(ctx.model, ctx.split.test, sel, space), popt);
    print_row("linear_top1", sel.describe(), acc);
    MetricLog log(out_path(o, "eval.ndjson"), false);
    log.write(metric_record("linear_top1", sel.describe(), acc));
    return 0;
}

int cmd_analyze_cka(const Options& o) {
    const EvalContext ctx = eval_context("analyze-cka", o);
    const TokenOutputs out = collect_token_outputs(ctx.model, ctx.split.test, false);
    const Index tokens = 1 + out.num_aux + out.num_pooled;
    std::vector<FeatureMatrix> feats;
    std::vector<std::string> names;
    for (Index t = 0; t < tokens; ++t) {
        feats.push_back(select_features(out, TokenSelector::parse(selector_text(out, t), out.num_aux, out.num_pooled),
                                        FeatureSpace::Encoder));
        names.push_back(token_name(out, t));
    }
    feats.push_back(select_features(out, TokenSelector::parse("patch-avg", 0, 0), FeatureSpace::Encoder));
    names.push_back("patch-avg");
    std::vector<std::string> header{"token"};
    header.insert(header.end(), names.begin(), names.end());
    std::vector<std::vector<std::string>> rows;
    MetricLog log(out_path(o, "eval.ndjson"), false);
    for (std::size_t i = 0; i < feats.size(); ++i) {
        std::vector<std::string> row{names[i]};
        for (std::size_t j = 0; j < feats.size(); ++j) {
            const double v = cka(feats[i], feats[j]);
            row.push_back(format_number(v));
            if (j > i) {
                print_row("cka", names[i] + "~" + names[j], v);
                log.write(metric_record("cka", names[i] + "~" + names[j], v));
            }
        }
        rows.push_back(row);
    }
    write_csv(out_path(o, "cka.csv"), header, rows);
    return 0;
}

int cmd_analyze_nmi(const Options& o) {
    const EvalContext ctx = eval_context("analyze-nmi", o);
    require(!ctx.model.stripped, ErrorKind::Usage, "analyze-nmi needs an unstripped checkpoint (projection heads)");
    const TokenOutputs out = collect_token_outputs(ctx.model, ctx.split.test, true);
    const Index aux_tokens = out.num_aux + out.num_pooled;
    MetricLog log(out_path(o, "eval.ndjson"), false);
    std::vector<std::vector<std::string>> rows;
    auto emit = [&](const std::string& name, double v) {
        print_row("nmi", name, v);
        log.write(metric_record("nmi", name, v));
        rows.push_back({name, format_number(v)});
    };
    const FeatureMatrix global_logits =
        select_features(out, TokenSelector::parse("global", 0, 0), FeatureSpace::PostHead);
    const double global_nmi = nmi(assign_prototypes(global_logits), out.labels);
    emit("global", global_nmi);
    for (Index i = 0; i < aux_tokens; ++i) emit(token_name(out, i + 1), subset_nmi(out, {i}));
    if (aux_tokens > 0) {
        std::vector<Index> all(aux_tokens);
        for (Index i = 0; i < aux_tokens; ++i) all[i] = i;
        const double fused = subset_nmi(out, all);
        emit("fused", fused);
        emit("gap(fused-global)", fused - global_nmi);
    }
    write_csv(out_path(o, "nmi.csv"), {"token", "nmi"}, rows);
    return 0;
}

int cmd_analyze_combination(const Options& o) {
    const EvalContext ctx = eval_context("analyze-combination", o);
    require(!ctx.model.stripped, ErrorKind::Usage, "analyze-combination needs an unstripped checkpoint");
    const TokenOutputs test = collect_token_outputs(ctx.model, ctx.split.test, true);
    const TokenOutputs train = collect_token_outputs(ctx.model, ctx.split.train, false);
    const auto curve = combination_study(test, &train, o.max_combos);
    MetricLog log(out_path(o, "eval.ndjson"), false);
    std::vector<std::vector<std::string>> rows;
    std::printf("%-6s %-13s %-10s %-10s\n", "n", "combinations", "mean_nmi", "mean_knn");
    for (const auto& p : curve) {
        std::printf("%-6lld %-13lld %-10.6f %-10.6f\n", static_cast<long long>(p.size),
                    static_cast<long long>(p.combinations), p.mean_nmi, p.mean_knn);
        auto rec = metric_record("combination_nmi", "size:" + std::to_string(p.size), p.mean_nmi);
        rec["combinations"] = p.combinations;
        log.write(rec);
        log.write(metric_record("combination_knn", "size:" + std::to_string(p.size), p.mean_knn));
        rows.push_back({std::to_string(p.size), std::to_string(p.combinations), format_number(p.mean_nmi),
                        format_number(p.mean_knn)});
    }
    write_csv(out_path(o, "combination.csv"), {"n", "combinations", "mean_nmi", "mean_knn"}, rows);
    return 0;
}

int cmd_analyze_per_class(const Options& o) {
    Options local = o;
    if (local.tokens == "global") local.tokens = "all";
    const EvalContext ctx = eval_context("analyze-per-class", local);
    const TokenOutputs train = collect_token_outputs(ctx.model, ctx.split.train, false);
    const TokenOutputs test = collect_token_outputs(ctx.model, ctx.split.test, false);
    const TokenSelector sel = TokenSelector::parse(local.tokens, test.num_aux, test.num_pooled);
    std::vector<std::string> names;
    std::vector<TokenSelector> singles;
    if (sel.global) names.push_back("global");
    for (Index a : sel.aux) names.push_back("aux:" + std::to_string(a));
    for (Index p : sel.pool) names.push_back("pool:" + std::to_string(p));
    require(names.size() >= 2, ErrorKind::Usage, "analyze-per-class needs at least two tokens");
    std::vector<std::vector<Index>> predictions;
    for (const auto& n : names) {
        const TokenSelector one = TokenSelector::parse(n, test.num_aux, test.num_pooled);
        predictions.push_back(knn_predict(select_features(train, one, FeatureSpace::Encoder),
                                          select_features(test, one, FeatureSpace::Encoder), o.k, o.temperature));
    }
    const PerClassStats stats = per_class_stats(predictions, test.labels);
    MetricLog log(out_path(o, "eval.ndjson"), false);
    std::vector<std::vector<std::string>> std_rows, best_rows;
    for (std::size_t c = 0; c < stats.accuracy_std.size(); ++c) {
        print_row("class_accuracy_std", "class:" + std::to_string(c), stats.accuracy_std[c]);
        log.write(metric_record("class_accuracy_std", "class:" + std::to_string(c), stats.accuracy_std[c]));
        std_rows.push_back({std::to_string(c), format_number(stats.accuracy_std[c])});
    }
    for (std::size_t t = 0; t < names.size(); ++t) {
        print_row("best_token_count", names[t], static_cast<double>(stats.best_token_counts[t]));
        log.write(metric_record("best_token_count", names[t], static_cast<double>(stats.best_token_counts[t])));
        best_rows.push_back({names[t], std::to_string(stats.best_token_counts[t])});
    }
    write_csv(out_path(o, "per_class_std.csv"), {"class", "accuracy_std"}, std_rows);
    write_csv(out_path(o, "best_token_histogram.csv"), {"token", "classes_best"}, best_rows);
    return 0;
}

int cmd_analyze_patch_knn(const Options& o) {
    const EvalContext ctx = eval_context("analyze-patch-knn", o);
    const Index n_patches = ctx.model.config.model.num_patches();
    std::vector<Index> ns{1, n_patches / 4, n_patches / 2, n_patches};
    ns.erase(std::remove(ns.begin(), ns.end(), Index(0)), ns.end());
    ns.erase(std::unique(ns.begin(), ns.end()), ns.end());
    MetricLog log(out_path(o, "eval.ndjson"), false);
    std::vector<std::vector<std::string>> rows;
    for (Index n : ns) {
        const double acc = patch_topn_knn(ctx.model, ctx.split.train, ctx.split.test, n, o.per_head_max);
        print_row("patch_topn_knn", "top:" + std::to_string(n), acc);
        log.write(metric_record("patch_topn_knn", "top:" + std::to_string(n), acc));
        rows.push_back({std::to_string(n), format_number(acc)});
    }
    write_csv(out_path(o, "patch_topn_knn.csv"), {"n", "knn_top1"}, rows);
    return 0;
}

int cmd_eval_ensemble(const Options& o) {
    require(o.checkpoints.size() >= 2, ErrorKind::Usage, "eval-ensemble needs at least two --checkpoint");
    std::vector<LoadedModel> models;
    for (const auto& path : o.checkpoints) models.push_back(load_model(path));
    const DataConfig data = resolve_data(o, models.front().config);
    write_manifest("eval-ensemble", o, to_config_map(models.front().config));
    const Split split = load_split(data);
    MetricLog log(out_path(o, "eval.ndjson"), false);
    for (std::size_t i = 0; i < models.size(); ++i) {
        const double acc = global_knn(models[i], split);
        print_row("knn_top1", "model:" + std::to_string(i), acc);
        log.write(metric_record("knn_top1", "model:" + std::to_string(i), acc));
    }
    const double acc = ensemble_concat(models, split.train, split.test);
    print_row("ensemble_knn_top1", "concat", acc);
    log.write(metric_record("ensemble_knn_top1", "concat", acc));
    return 0;
}

int cmd_export_weights(const Options& o) {
    const EvalContext ctx = eval_context("export-weights", o);
    require(!ctx.model.stripped, ErrorKind::Usage, "export-weights needs an unstripped checkpoint");
    const Index count = std::min<Index>(o.images, ctx.split.test.size());
    require(count > 0, ErrorKind::Usage, "--images must be positive");
    std::vector<Index> rows(count);
    for (Index i = 0; i < count; ++i) rows[i] = i;
    std::vector<Index> channels;
    for (const auto& c : split_list(o.channels)) channels.push_back(std::stoll(c));
    const Tensor<float> images = eval_batch(ctx.split.test, rows, ctx.model.config.model.image_size);
    const auto files = export_weight_maps(ctx.model.params, ctx.model.config.model, images, channels,
                                          out_path(o, "weight_maps"));
    for (const auto& f : files) std::printf("%s\n", f.c_str());
    return 0;
}

int cmd_flops(const Options& o) {
    const RunConfig cfg = resolve_config(o);
    write_manifest("flops", o, to_config_map(cfg));
    ModelConfig baseline = cfg.model;
    baseline.num_aux = baseline.num_pooled = 0;
    struct Row {
        std::string name;
        FlopCount count;
    };
    const std::vector<Row> rows{{"mte/train_forward", flop_count(cfg.model, cfg.head, FlopMode::TrainForward)},
                                {"mte/inference", flop_count(cfg.model, cfg.head, FlopMode::Inference)},
                                {"baseline/train_forward", flop_count(baseline, cfg.head, FlopMode::TrainForward)},
                                {"baseline/inference", flop_count(baseline, cfg.head, FlopMode::Inference)}};
    std::printf("%-24s %14s %14s %14s %14s %14s %14s %16s\n", "model/mode", "patch_embed", "attention", "mlp", "ten",
                "pooler", "heads", "total_macs");
    std::vector<std::vector<std::string>> csv;
    MetricLog log(out_path(o, "eval.ndjson"), false);
    for (const auto& r : rows) {
        const auto& c = r.count;
        std::printf("%-24s %14llu %14llu %14llu %14llu %14llu %14llu %16llu\n", r.name.c_str(),
                    (unsigned long long)c.patch_embed, (unsigned long long)c.attention, (unsigned long long)c.mlp,
                    (unsigned long long)c.ten, (unsigned long long)c.pooler, (unsigned long long)c.heads,
                    (unsigned long long)c.total());
        csv.push_back({r.name, std::to_string(c.patch_embed), std::to_string(c.attention), std::to_string(c.mlp),
                       std::to_string(c.ten), std::to_string(c.pooler), std::to_string(c.heads),
                       std::to_string(c.total())});
        log.write(metric_record("macs", r.name, static_cast<double>(c.total())));
    }
    write_csv(out_path(o, "flops.csv"),
              {"model_mode", "patch_embed", "attention", "mlp", "ten", "pooler", "heads", "total"}, csv);
    const bool equal = rows[1].count.total() == rows[3].count.total();
    const double overhead = static_cast<double>(rows[0].count.total()) / rows[2].count.total();
    std::printf("inference equal to baseline: %s\ntrain-forward overhead ratio: %.4f\n", equal ? "yes" : "no",
                overhead);
    return 0;
}

int cmd_grad_check(const Options& o) {
    write_manifest("grad-check", o, {});
    GradCheckOptions gopt;
    gopt.max_elements_per_input = o.max_elements;
    const auto entries = run_gradient_suite(o.seed.value_or(0), gopt);
    constexpr double tolerance = 1e-5;
    double worst = 0;
    MetricLog log(out_path(o, "eval.ndjson"), false);
    for (const auto& e : entries) {
        std::printf("%-28s max_rel_error %.3e  (%lld elements, worst %s)\n", e.name.c_str(), e.result.max_rel_error,
                    static_cast<long long>(e.result.checked), e.result.worst.c_str());
        log.write(metric_record("grad_max_rel_error", e.name, e.result.max_rel_error));
        worst = std::max(worst, e.result.max_rel_error);
    }
    std::printf("max_rel_error %.3e (tolerance %.0e): %s\n", worst, tolerance, worst < tolerance ? "PASS" : "FAIL");
    return worst < tolerance ? 0 : exit_code(ErrorKind::Numeric);
}

int cmd_selfcheck(const Options& o) {
    write_manifest("selfcheck", o, {});
    return run_selfcheck(std::cout, out_path(o, "selfcheck")) ? 0 : 1;
}

void print_error(const std::string& kind, const std::string& message) {
    std::string flat = message;
    std::replace(flat.begin(), flat.end(), '\n', ' ');
    std::fprintf(stderr, "error kind=%s message=%s\n", kind.c_str(), nlohmann::json(flat).dump().c_str());
}

}  // namespace

int main(int argc, char** argv) {
    for (int i = 0; i < argc; ++i) argv_line += (i ? " " : "") + std::string(argv[i]);

    CLI::App app{"Multi-token enhancing: pretraining, stripping and evaluation"};
    app.require_subcommand(1);
    Options o;

    auto common = [&o](CLI::App* sub) {
        sub->add_option("--config", o.config_path, "config file (key = value lines)")->check(CLI::ExistingFile);
        sub->add_option("--set", o.sets, "config override key=value (repeatable; wins over --config)");
        sub->add_option("--seed", o.seed, "random seed");
        sub->add_option("--out", o.out, "output directory")->capture_default_str();
        sub->add_option("--threads", o.threads, "OpenMP thread cap (0: runtime default)");
    };
    auto with_checkpoint = [&o](CLI::App* sub, bool many) {
        auto* opt = sub->add_option("--checkpoint", o.checkpoints, "checkpoint file")->required();
        if (!many) opt->expected(1);
    };
    auto with_tokens = [&o](CLI::App* sub) {
        sub->add_option("--tokens", o.tokens,
                        "token selector: global, patch-avg, all, aux:i, aux:a..b, pool:i, pool:a..b; join with +")
            ->capture_default_str();
        sub->add_option("--space", o.space, "feature space: encoder or post_head")->capture_default_str();
    };
    auto with_knn = [&o](CLI::App* sub) {
        sub->add_option("--k", o.k, "neighbors")->capture_default_str();
        sub->add_option("--temperature", o.temperature, "vote temperature")->capture_default_str();
    };
    auto with_mode = [&o](CLI::App* sub) {
        sub->add_option("--mode", o.mode,
                        "comma list: mask_on, mask_off, distill, no_distill, freeze_auxiliary, baseline, "
                        "shared_heads, independent_heads, shared_classifiers");
    };

    std::map<std::string, std::function<int(const Options&)>> handlers;
    auto add = [&](const std::string& name, const std::string& help, std::function<int(const Options&)> fn) {
        CLI::App* sub = app.add_subcommand(name, help);
        common(sub);
        handlers[name] = std::move(fn);
        return sub;
    };

    for (auto* sub : {add("pretrain", "self-distillation pretraining", cmd_pretrain),
                      add("train-supervised", "supervised training with auxiliary classifiers", cmd_train_supervised)}) {
        with_mode(sub);
        sub->add_flag("--resume", o.resume, "continue from <out>/last.mte");
        sub->add_flag("--verbose", o.verbose, "print one line per epoch");
    }
    with_checkpoint(add("strip", "drop auxiliary components from a checkpoint", cmd_strip), false);
    {
        auto* sub = add("eval-knn", "weighted k-NN on frozen features", cmd_eval_knn);
        with_checkpoint(sub, false);
        with_tokens(sub);
        with_knn(sub);
    }
    {
        auto* sub = add("eval-linear", "linear probe on frozen features", cmd_eval_linear);
        with_checkpoint(sub, false);
        with_tokens(sub);
        sub->add_option("--epochs", o.probe_epochs, "probe epochs")->capture_default_str();
        sub->add_option("--lr", o.probe_lr, "probe learning rate")->capture_default_str();
    }
    with_checkpoint(add("analyze-cka", "pairwise CKA between token representations", cmd_analyze_cka), false);
    with_checkpoint(add("analyze-nmi", "per-token and fused prototype NMI", cmd_analyze_nmi), false);
    {
        auto* sub = add("analyze-combination", "NMI and k-NN over token combinations", cmd_analyze_combination);
        with_checkpoint(sub, false);
        sub->add_option("--max-combos", o.max_combos, "cap on combinations per size (0: all)");
    }
    {
        auto* sub = add("analyze-per-class", "per-class accuracy spread across tokens", cmd_analyze_per_class);
        with_checkpoint(sub, false);
        with_tokens(sub);
        with_knn(sub);
    }
    {
        auto* sub = add("analyze-patch-knn", "k-NN on top-n attended patch tokens", cmd_analyze_patch_knn);
        with_checkpoint(sub, false);
        sub->add_flag("--per-head-max", o.per_head_max, "rank patches by the max over heads");
    }
    with_checkpoint(add("eval-ensemble", "k-NN on concatenated global features of several models", cmd_eval_ensemble),
                    true);
    {
        auto* sub = add("export-weights", "write adaptive pooling weight maps as CSV", cmd_export_weights);
        with_checkpoint(sub, false);
        sub->add_option("--images", o.images, "number of test images")->capture_default_str();
        sub->add_option("--channels", o.channels, "comma list of channels")->capture_default_str();
    }
    with_mode(add("flops", "analytic MAC counts", cmd_flops));
    add("grad-check", "finite-difference gradient suite", cmd_grad_check)
        ->add_option("--max-elements", o.max_elements, "elements checked per input (0: all)");
    add("selfcheck", "fast invariant checks across modules", cmd_selfcheck);

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        print_error("usage", e.what());
        const CLI::App* failing = &app;
        for (const auto* sub : app.get_subcommands()) failing = sub;
        std::cerr << failing->help();
        return exit_code(ErrorKind::Usage);
    }

    if (o.threads > 0) omp_set_num_threads(o.threads);
    const std::string name = app.get_subcommands().front()->get_name();
    try {
        return handlers.at(name)(o);
    } catch (const Error& e) {
        print_error(to_string(e.kind()), e.what());
        return exit_code(e.kind());
    } catch (const nlohmann::json::exception& e) {
        print_error("format", e.what());
        return exit_code(ErrorKind::Format);
    } catch (const std::exception& e) {
        print_error("internal", e.what());
        return 1;
    }
}
