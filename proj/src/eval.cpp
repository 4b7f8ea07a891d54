#include "mte/eval.hpp"

#include <algorithm>
#include <bit>
#include <cctype>
#include <cmath>
#include <limits>
#include <map>
#include <numeric>

#include "mte/augment.hpp"
#include "mte/objectives.hpp"

namespace mte {

void FeatureMatrix::validate() const {
    require(values.size() == rows * cols && labels.size() == rows, ErrorKind::Dimension,
            "feature matrix '" + token_id + "' is inconsistent");
    for (double v : values)
        require(std::isfinite(v), ErrorKind::Numeric, "non-finite value in feature matrix '" + token_id + "'");
}

namespace {

std::vector<Index> parse_range(const std::string& spec, Index limit, const std::string& what) {
    std::vector<Index> out;
    auto number = [&](const std::string& s) {
        require(!s.empty() && std::all_of(s.begin(), s.end(), ::isdigit), ErrorKind::Usage,
                "bad token index '" + s + "' in selector");
        return static_cast<Index>(std::stoull(s));
    };
    const auto dots = spec.find("..");
    Index lo, hi;
    if (dots == std::string::npos) {
        lo = hi = number(spec);
    } else {
        lo = number(spec.substr(0, dots));
        hi = number(spec.substr(dots + 2));
    }
    require(lo <= hi && hi < limit, ErrorKind::Usage,
            what + " token index " + spec + " out of range (model has " + std::to_string(limit) + ")");
    for (Index i = lo; i <= hi; ++i) out.push_back(i);
    return out;
}

void normalize_rows(std::vector<double>& values, Index cols) {
    for (Index r = 0; r * cols < values.size(); ++r) {
        double n = 0;
        for (Index c = 0; c < cols; ++c) n += values[r * cols + c] * values[r * cols + c];
        n = std::sqrt(n);
        if (n > 0)
            for (Index c = 0; c < cols; ++c) values[r * cols + c] /= n;
    }
}

Index argmax(const double* v, Index n) {
    Index best = 0;
    for (Index i = 1; i < n; ++i)
        if (v[i] > v[best]) best = i;
    return best;
}

template <typename T>
void append_rows(std::vector<double>& dst, const Tensor<T>& src) {
    dst.insert(dst.end(), src.data().begin(), src.data().end());
}

}  // namespace

TokenSelector TokenSelector::parse(const std::string& text, Index num_aux, Index num_pooled) {
    TokenSelector s;
    std::string rest = text;
    require(!text.empty(), ErrorKind::Usage, "empty token selector");
    while (!rest.empty()) {
        const auto plus = rest.find('+');
        const std::string part = rest.substr(0, plus);
        rest = plus == std::string::npos ? "" : rest.substr(plus + 1);
        if (part == "global") {
            s.global = true;
        } else if (part == "patch-avg") {
            s.patch_avg = true;
        } else if (part == "all") {
            require(num_aux + num_pooled > 0, ErrorKind::Usage, "selector 'all' needs auxiliary tokens (stripped model?)");
            for (Index i = 0; i < num_aux; ++i) s.aux.push_back(i);
            for (Index i = 0; i < num_pooled; ++i) s.pool.push_back(i);
        } else if (part.starts_with("aux:")) {
            require(num_aux > 0, ErrorKind::Usage, "selector '" + part + "' needs auxiliary CLS tokens (stripped model?)");
            for (Index i : parse_range(part.substr(4), num_aux, "aux")) s.aux.push_back(i);
        } else if (part.starts_with("pool:")) {
            require(num_pooled > 0, ErrorKind::Usage, "selector '" + part + "' needs pooled tokens (stripped model?)");
            for (Index i : parse_range(part.substr(5), num_pooled, "pool")) s.pool.push_back(i);
        } else {
            fail(ErrorKind::Usage, "unknown token selector '" + part +
                                       "' (expected global, aux:i, aux:a..b, pool:i, pool:a..b, all, patch-avg)");
        }
    }
    return s;
}

std::string TokenSelector::describe() const {
    std::string out;
    auto add = [&out](const std::string& s) { out += (out.empty() ? "" : "+") + s; };
    if (global) add("global");
    for (Index i : aux) add("aux:" + std::to_string(i));
    for (Index i : pool) add("pool:" + std::to_string(i));
    if (patch_avg) add("patch-avg");
    return out;
}

TokenOutputs collect_token_outputs(const LoadedModel& model, const Dataset& data, bool with_heads, Index batch_size) {
    const ModelConfig& mc = model.config.model;
    const HeadConfig& hc = model.config.head;
    if (with_heads)
        require(model.params.contains("head.global.fc1.weight"), ErrorKind::Usage,
                "post-head features need an unstripped pretraining checkpoint");
    NoGradScope<float> no_grad;
    TokenOutputs out;
    out.samples = data.size();
    out.labels = data.labels;
    out.dim = mc.embed_dim;
    out.head_dim = with_heads ? hc.output_dim() : 0;
    out.num_aux = mc.num_aux;
    out.num_pooled = mc.num_pooled;
    const Index tokens = 1 + mc.num_aux + mc.num_pooled;
    out.encoder.assign(tokens, {});
    if (with_heads) out.post_head.assign(tokens, {});
    for (Index start = 0; start < data.size(); start += batch_size) {
        const Index stop = std::min(data.size(), start + batch_size);
        std::vector<Index> rows(stop - start);
        std::iota(rows.begin(), rows.end(), start);
        const Index b = rows.size();
        const TokenBundle<float> bundle = forward(eval_batch(data, rows, mc.image_size), mc, model.params);
        append_rows(out.encoder[0], bundle.global);
        for (Index i = 0; i < mc.num_aux; ++i) append_rows(out.encoder[1 + i], token_rows(bundle.enhanced, mc.num_aux, i, b));
        for (Index i = 0; i < mc.num_pooled; ++i)
            append_rows(out.encoder[1 + mc.num_aux + i], token_rows(bundle.pooled, mc.num_pooled, i, b));
        append_rows(out.patch_avg, segment_mean_rows(bundle.patches, b));
        if (with_heads) {
            append_rows(out.post_head[0], projection_head(bundle.global, model.params, global_head_prefix(), hc));
            if (tokens > 1) {
                const FusedProjection<float> fused = project_fuse(bundle.enhanced, bundle.pooled, b, model.params, hc);
                for (Index i = 0; i + 1 < tokens; ++i) append_rows(out.post_head[1 + i], fused.per_token[i]);
            }
        }
    }
    return out;
}

FeatureMatrix select_features(const TokenOutputs& o, const TokenSelector& s, FeatureSpace space) {
    require(s.count() > 0, ErrorKind::Usage, "token selector selects nothing");
    for (Index i : s.aux)
        require(i < o.num_aux, ErrorKind::Usage, "aux token " + std::to_string(i) + " not present in this model");
    for (Index i : s.pool)
        require(i < o.num_pooled, ErrorKind::Usage, "pool token " + std::to_string(i) + " not present in this model");
    std::vector<Index> ids;
    if (s.global) ids.push_back(0);
    for (Index i : s.aux) ids.push_back(1 + i);
    for (Index i : s.pool) ids.push_back(1 + o.num_aux + i);

    FeatureMatrix f;
    f.rows = o.samples;
    f.labels = o.labels;
    f.token_id = s.describe() + (space == FeatureSpace::PostHead ? "@head" : "");
    if (space == FeatureSpace::PostHead) {
        require(!o.post_head.empty(), ErrorKind::Usage, "post-head features were not collected");
        require(!s.patch_avg, ErrorKind::Usage, "patch-avg has no post-head representation");
        f.cols = o.head_dim;
        f.values.assign(f.rows * f.cols, 0.0);
        for (Index t : ids)
            for (Index i = 0; i < f.values.size(); ++i) f.values[i] += o.post_head[t][i];
        for (double& v : f.values) v /= static_cast<double>(ids.size());
    } else {
        std::vector<const std::vector<double>*> parts;
        for (Index t : ids) parts.push_back(&o.encoder[t]);
        if (s.patch_avg) parts.push_back(&o.patch_avg);
        f.cols = o.dim * parts.size();
        f.values.resize(f.rows * f.cols);
        for (Index r = 0; r < f.rows; ++r)
            for (Index p = 0; p < parts.size(); ++p)
                std::copy_n(parts[p]->data() + r * o.dim, o.dim, f.values.data() + r * f.cols + p * o.dim);
    }
    return f;
}

FeatureMatrix extract_features(const LoadedModel& model, const Dataset& data, const TokenSelector& selector,
                               FeatureSpace space) {
    FeatureMatrix f = select_features(collect_token_outputs(model, data, space == FeatureSpace::PostHead), selector, space);
    f.validate();
    return f;
}

std::vector<Index> knn_predict(const FeatureMatrix& train, const FeatureMatrix& test, Index k, double temperature) {
    require(train.rows > 0, ErrorKind::Usage, "k-NN needs a non-empty train set");
    require(train.cols == test.cols, ErrorKind::Dimension,
            "k-NN feature dims differ: " + std::to_string(train.cols) + " vs " + std::to_string(test.cols));
    require(k >= 1 && k <= train.rows, ErrorKind::Parameter,
            "k = " + std::to_string(k) + " must lie in [1, " + std::to_string(train.rows) + "]");
    std::vector<double> a = train.values, b = test.values;
    normalize_rows(a, train.cols);
    normalize_rows(b, test.cols);
    Index classes = 0;
    for (Index y : train.labels) classes = std::max(classes, y + 1);
    std::vector<Index> pred(test.rows);
#pragma omp parallel for schedule(static)
    for (std::ptrdiff_t ti = 0; ti < static_cast<std::ptrdiff_t>(test.rows); ++ti) {
        const Index t = static_cast<Index>(ti);
        std::vector<std::pair<double, Index>> sims(train.rows);
        for (Index r = 0; r < train.rows; ++r) {
            double s = 0;
            for (Index c = 0; c < train.cols; ++c) s += b[t * test.cols + c] * a[r * train.cols + c];
            sims[r] = {s, r};
        }
        // Highest similarity first; ties resolved towards the lower train index.
        std::partial_sort(sims.begin(), sims.begin() + static_cast<std::ptrdiff_t>(k), sims.end(),
                          [](const auto& x, const auto& y) { return x.first > y.first || (x.first == y.first && x.second < y.second); });
        std::vector<double> votes(classes, 0.0);
        for (Index j = 0; j < k; ++j) votes[train.labels[sims[j].second]] += std::exp(sims[j].first / temperature);
        pred[t] = argmax(votes.data(), classes);
    }
    return pred;
}

double knn_classify(const FeatureMatrix& train, const FeatureMatrix& test, Index k, double temperature) {
    return accuracy(knn_predict(train, test, k, temperature), test.labels);
}

double accuracy(const std::vector<Index>& predicted, const std::vector<Index>& labels) {
    require(predicted.size() == labels.size() && !labels.empty(), ErrorKind::Dimension,
            "accuracy: prediction and label counts differ");
    Index correct = 0;
    for (Index i = 0; i < labels.size(); ++i) correct += predicted[i] == labels[i];
    return static_cast<double>(correct) / static_cast<double>(labels.size());
}

double linear_probe(const FeatureMatrix& train, const FeatureMatrix& test, const LinearProbeOptions& opt) {
    require(train.rows > 0 && train.cols == test.cols, ErrorKind::Dimension, "linear probe: incompatible features");
    const Index d = train.cols;
    Index classes = 0;
    for (Index y : train.labels) classes = std::max(classes, y + 1);
    std::vector<double> mu(d, 0.0), sd(d, 0.0);
    for (Index r = 0; r < train.rows; ++r)
        for (Index c = 0; c < d; ++c) mu[c] += train.at(r, c);
    for (double& m : mu) m /= static_cast<double>(train.rows);
    for (Index r = 0; r < train.rows; ++r)
        for (Index c = 0; c < d; ++c) sd[c] += (train.at(r, c) - mu[c]) * (train.at(r, c) - mu[c]);
    for (double& s : sd) s = std::sqrt(s / static_cast<double>(train.rows)) + 1e-8;
    auto standardized = [&](const FeatureMatrix& f) {
        std::vector<double> out(f.values.size());
        for (Index r = 0; r < f.rows; ++r)
            for (Index c = 0; c < d; ++c) out[r * d + c] = (f.at(r, c) - mu[c]) / sd[c];
        return out;
    };
    const std::vector<double> xtr = standardized(train), xte = standardized(test);

    // Weights (d + 1) x C, last row is the bias; plain Adam on the mean cross-entropy.
    const Index rows_w = d + 1;
    std::vector<double> w(rows_w * classes, 0.0), m(w.size(), 0.0), v(w.size(), 0.0), g(w.size());
    std::vector<Index> order(train.rows);
    std::iota(order.begin(), order.end(), 0);
    Rng rng(derive_seed(opt.seed, 0x70726f6265));
    Index t = 0;
    std::vector<double> logits(classes);
    for (Index epoch = 0; epoch < opt.epochs; ++epoch) {
        for (Index i = train.rows; i > 1; --i) std::swap(order[i - 1], order[rng() % i]);
        for (Index start = 0; start < train.rows; start += opt.batch_size) {
            const Index stop = std::min(train.rows, start + opt.batch_size);
            std::fill(g.begin(), g.end(), 0.0);
            for (Index j = start; j < stop; ++j) {
                const double* x = xtr.data() + order[j] * d;
                for (Index c = 0; c < classes; ++c) {
                    double s = w[d * classes + c];
                    for (Index k = 0; k < d; ++k) s += x[k] * w[k * classes + c];
                    logits[c] = s;
                }
                const double mx = *std::max_element(logits.begin(), logits.end());
                double z = 0;
                for (double& l : logits) z += (l = std::exp(l - mx));
                for (Index c = 0; c < classes; ++c) {
                    const double delta = logits[c] / z - (c == train.labels[order[j]] ? 1.0 : 0.0);
                    for (Index k = 0; k < d; ++k) g[k * classes + c] += delta * x[k];
                    g[d * classes + c] += delta;
                }
            }
            const double inv = 1.0 / static_cast<double>(stop - start);
            ++t;
            const double bc1 = 1 - std::pow(0.9, static_cast<double>(t)), bc2 = 1 - std::pow(0.999, static_cast<double>(t));
            for (Index i = 0; i < w.size(); ++i) {
                const double gi = g[i] * inv + opt.weight_decay * w[i];
                m[i] = 0.9 * m[i] + 0.1 * gi;
                v[i] = 0.999 * v[i] + 0.001 * gi * gi;
                w[i] -= opt.lr * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + 1e-8);
            }
        }
    }
    std::vector<Index> pred(test.rows);
    for (Index r = 0; r < test.rows; ++r) {
        for (Index c = 0; c < classes; ++c) {
            double s = w[d * classes + c];
            for (Index k = 0; k < d; ++k) s += xte[r * d + k] * w[k * classes + c];
            logits[c] = s;
        }
        pred[r] = argmax(logits.data(), classes);
    }
    return accuracy(pred, test.labels);
}

double cka(const FeatureMatrix& x, const FeatureMatrix& y) {
    require(x.rows == y.rows && x.rows > 1, ErrorKind::Dimension,
            "cka: row counts differ (" + std::to_string(x.rows) + " vs " + std::to_string(y.rows) + ")");
    auto centered = [](const FeatureMatrix& f) {
        std::vector<double> out = f.values;
        for (Index c = 0; c < f.cols; ++c) {
            double mu = 0;
            for (Index r = 0; r < f.rows; ++r) mu += out[r * f.cols + c];
            mu /= static_cast<double>(f.rows);
            for (Index r = 0; r < f.rows; ++r) out[r * f.cols + c] -= mu;
        }
        return out;
    };
    const std::vector<double> xc = centered(x), yc = centered(y);
    // ||A^T B||_F^2 over n x a and n x b matrices.
    auto cross = [n = x.rows](const std::vector<double>& a, Index ac, const std::vector<double>& b, Index bc) {
        double total = 0;
        for (Index i = 0; i < ac; ++i)
            for (Index j = 0; j < bc; ++j) {
                double s = 0;
                for (Index r = 0; r < n; ++r) s += a[r * ac + i] * b[r * bc + j];
                total += s * s;
            }
        return total;
    };
    const double xx = std::sqrt(cross(xc, x.cols, xc, x.cols));
    const double yy = std::sqrt(cross(yc, y.cols, yc, y.cols));
    require(xx > 0 && yy > 0, ErrorKind::Numeric, "cka: zero-variance feature matrix");
    return cross(yc, y.cols, xc, x.cols) / (xx * yy);
}

double nmi(const std::vector<Index>& pseudo, const std::vector<Index>& truth) {
    require(!pseudo.empty(), ErrorKind::Usage, "nmi: empty labelings");
    require(pseudo.size() == truth.size(), ErrorKind::Dimension, "nmi: labelings differ in length");
    const double n = static_cast<double>(pseudo.size());
    std::map<Index, double> pu, pv;
    std::map<std::pair<Index, Index>, double> joint;
    for (Index i = 0; i < pseudo.size(); ++i) {
        pu[pseudo[i]] += 1;
        pv[truth[i]] += 1;
        joint[{pseudo[i], truth[i]}] += 1;
    }
    auto entropy = [n](const std::map<Index, double>& counts) {
        double h = 0;
        for (const auto& [k, c] : counts) h -= (c / n) * std::log(c / n);
        return h;
    };
    const double hu = entropy(pu), hv = entropy(pv);
    if (hu == 0 && hv == 0) return 1.0;
    if (hu == 0 || hv == 0) return 0.0;
    double mi = 0;
    for (const auto& [key, c] : joint) {
        const double p = c / n;
        mi += p * std::log(p / ((pu[key.first] / n) * (pv[key.second] / n)));
    }
    return std::clamp(2.0 * mi / (hu + hv), 0.0, 1.0);
}

std::vector<Index> assign_prototypes(const FeatureMatrix& logits) {
    std::vector<Index> out(logits.rows);
    for (Index r = 0; r < logits.rows; ++r) out[r] = argmax(logits.row(r), logits.cols);
    return out;
}

double subset_nmi(const TokenOutputs& o, const std::vector<Index>& subset) {
    require(!subset.empty(), ErrorKind::Usage, "combination subset is empty");
    require(!o.post_head.empty(), ErrorKind::Usage, "NMI over token combinations needs post-head outputs");
    const Index tokens = o.num_aux + o.num_pooled;
    std::vector<double> acc(o.samples * o.head_dim, 0.0);
    for (Index t : subset) {
        require(t < tokens, ErrorKind::Usage, "combination token " + std::to_string(t) + " out of range");
        for (Index i = 0; i < acc.size(); ++i) acc[i] += o.post_head[1 + t][i];
    }
    std::vector<Index> pseudo(o.samples);
    for (Index r = 0; r < o.samples; ++r) pseudo[r] = argmax(acc.data() + r * o.head_dim, o.head_dim);
    return nmi(pseudo, o.labels);
}

double subset_knn(const TokenOutputs& train, const TokenOutputs& test, const std::vector<Index>& subset, Index k) {
    TokenSelector s;
    for (Index t : subset) {
        if (t < train.num_aux)
            s.aux.push_back(t);
        else
            s.pool.push_back(t - train.num_aux);
    }
    return knn_classify(select_features(train, s, FeatureSpace::Encoder), select_features(test, s, FeatureSpace::Encoder), k);
}

std::vector<CombinationPoint> combination_study(const TokenOutputs& test, const TokenOutputs* train,
                                                Index max_combinations_per_size) {
    const Index tokens = test.num_aux + test.num_pooled;
    require(tokens > 0 && tokens < 31, ErrorKind::Usage, "combination study needs 1..30 auxiliary tokens");
    std::vector<CombinationPoint> out;
    for (Index n = 1; n <= tokens; ++n) {
        std::vector<std::vector<Index>> subsets;
        for (std::uint32_t mask = 0; mask < (1u << tokens); ++mask) {
            if (static_cast<Index>(std::popcount(mask)) != n) continue;
            std::vector<Index> s;
            for (Index t = 0; t < tokens; ++t)
                if (mask & (1u << t)) s.push_back(t);
            subsets.push_back(std::move(s));
        }
        if (max_combinations_per_size > 0 && subsets.size() > max_combinations_per_size) {
            std::vector<std::vector<Index>> thinned;
            for (Index i = 0; i < max_combinations_per_size; ++i)
                thinned.push_back(subsets[i * subsets.size() / max_combinations_per_size]);
            subsets = std::move(thinned);
        }
        CombinationPoint p;
        p.size = n;
        p.combinations = subsets.size();
        p.mean_knn = train != nullptr ? 0.0 : std::numeric_limits<double>::quiet_NaN();
        for (const auto& s : subsets) {
            p.mean_nmi += subset_nmi(test, s);
            if (train != nullptr) p.mean_knn += subset_knn(*train, test, s);
        }
        p.mean_nmi /= static_cast<double>(subsets.size());
        if (train != nullptr) p.mean_knn /= static_cast<double>(subsets.size());
        out.push_back(p);
    }
    return out;
}

PerClassStats per_class_stats(const std::vector<std::vector<Index>>& preds, const std::vector<Index>& labels) {
    require(preds.size() >= 2, ErrorKind::Usage, "per-class statistics need at least two tokens");
    Index classes = 0;
    for (Index y : labels) classes = std::max(classes, y + 1);
    std::vector<double> count(classes, 0.0);
    for (Index y : labels) count[y] += 1;
    PerClassStats s;
    s.accuracy.assign(preds.size(), std::vector<double>(classes, 0.0));
    for (Index t = 0; t < preds.size(); ++t) {
        require(preds[t].size() == labels.size(), ErrorKind::Dimension, "per-class statistics: prediction length mismatch");
        for (Index i = 0; i < labels.size(); ++i) s.accuracy[t][labels[i]] += preds[t][i] == labels[i] ? 1.0 : 0.0;
        for (Index c = 0; c < classes; ++c)
            if (count[c] > 0) s.accuracy[t][c] /= count[c];
    }
    s.best_token_counts.assign(preds.size(), 0);
    for (Index c = 0; c < classes; ++c) {
        if (count[c] == 0) continue;
        double mean = 0, best = -1;
        for (Index t = 0; t < preds.size(); ++t) {
            mean += s.accuracy[t][c];
            best = std::max(best, s.accuracy[t][c]);
        }
        mean /= static_cast<double>(preds.size());
        double var = 0;
        Index winners = 0, winner = 0;
        for (Index t = 0; t < preds.size(); ++t) {
            var += (s.accuracy[t][c] - mean) * (s.accuracy[t][c] - mean);
            if (s.accuracy[t][c] == best) {
                ++winners;
                winner = t;
            }
        }
        s.accuracy_std.push_back(std::sqrt(var / static_cast<double>(preds.size())));
        if (winners == 1) ++s.best_token_counts[winner];
    }
    return s;
}

FeatureMatrix topn_patch_features(const LoadedModel& model, const Dataset& data, Index n, bool per_head_max,
                                  Index batch_size) {
    const ModelConfig& mc = model.config.model;
    const Index patches = mc.num_patches(), tokens = mc.num_tokens(), d = mc.embed_dim;
    require(n >= 1 && n <= patches, ErrorKind::Parameter,
            "top-n must lie in [1, " + std::to_string(patches) + "], got " + std::to_string(n));
    NoGradScope<float> no_grad;
    FeatureMatrix f;
    f.rows = data.size();
    f.cols = d;
    f.labels = data.labels;
    f.token_id = "patch-top" + std::to_string(n);
    f.values.reserve(f.rows * d);
    for (Index start = 0; start < data.size(); start += batch_size) {
        const Index stop = std::min(data.size(), start + batch_size);
        std::vector<Index> rows(stop - start);
        std::iota(rows.begin(), rows.end(), start);
        ForwardTrace<float> trace;
        const TokenBundle<float> bundle = forward(eval_batch(data, rows, mc.image_size), mc, model.params, &trace);
        const Tensor<float>& att = trace.last_attention;  // [B, H, T, T]
        const Index heads = att.dim(1);
        for (Index b = 0; b < rows.size(); ++b) {
            std::vector<std::pair<double, Index>> score(patches);
            for (Index p = 0; p < patches; ++p) {
                double s = per_head_max ? -1.0 : 0.0;
                for (Index h = 0; h < heads; ++h) {
                    const double a = att[((b * heads + h) * tokens + 0) * tokens + 1 + mc.num_aux + p];
                    s = per_head_max ? std::max(s, a) : s + a / static_cast<double>(heads);
                }
                score[p] = {s, p};
            }
            std::stable_sort(score.begin(), score.end(), [](const auto& x, const auto& y) { return x.first > y.first; });
            std::vector<double> acc(d, 0.0);
            for (Index j = 0; j < n; ++j)
                for (Index c = 0; c < d; ++c) acc[c] += bundle.patches[(b * patches + score[j].second) * d + c];
            for (double& v : acc) f.values.push_back(v / static_cast<double>(n));
        }
    }
    return f;
}

double patch_topn_knn(const LoadedModel& model, const Dataset& train, const Dataset& test, Index n, bool per_head_max) {
    return knn_classify(topn_patch_features(model, train, n, per_head_max), topn_patch_features(model, test, n, per_head_max));
}

FeatureMatrix concat_features(const std::vector<FeatureMatrix>& parts) {
    require(parts.size() >= 2, ErrorKind::Usage, "ensemble needs at least two members");
    FeatureMatrix f;
    f.rows = parts[0].rows;
    f.labels = parts[0].labels;
    for (const auto& p : parts) {
        require(p.rows == f.rows && p.labels == f.labels, ErrorKind::Usage, "ensemble members saw different datasets");
        f.cols += p.cols;
        f.token_id += (f.token_id.empty() ? "" : "|") + p.token_id;
    }
    f.values.resize(f.rows * f.cols);
    Index offset = 0;
    for (const auto& p : parts) {
        std::vector<double> v = p.values;
        normalize_rows(v, p.cols);
        for (Index r = 0; r < f.rows; ++r) std::copy_n(v.data() + r * p.cols, p.cols, f.values.data() + r * f.cols + offset);
        offset += p.cols;
    }
    return f;
}

double ensemble_concat(const std::vector<LoadedModel>& models, const Dataset& train, const Dataset& test) {
    std::vector<FeatureMatrix> tr, te;
    TokenSelector global;
    global.global = true;
    for (const auto& m : models) {
        tr.push_back(extract_features(m, train, global, FeatureSpace::Encoder));
        te.push_back(extract_features(m, test, global, FeatureSpace::Encoder));
    }
    return knn_classify(concat_features(tr), concat_features(te));
}

std::vector<Index> predict_global(const LoadedModel& model, const Dataset& data, Index batch_size) {
    require(model.params.contains(global_classifier_name()), ErrorKind::Usage,
            "class predictions need a supervised checkpoint");
    const ModelConfig& mc = model.config.model;
    NoGradScope<float> no_grad;
    std::vector<Index> out;
    for (Index start = 0; start < data.size(); start += batch_size) {
        const Index stop = std::min(data.size(), start + batch_size);
        std::vector<Index> rows(stop - start);
        std::iota(rows.begin(), rows.end(), start);
        const TokenBundle<float> bundle = forward(eval_batch(data, rows, mc.image_size), mc, model.params);
        const Tensor<float> logits = matmul(bundle.global, model.params.get(global_classifier_name()));
        for (Index r = 0; r < logits.rows(); ++r) {
            Index best = 0;
            for (Index c = 1; c < logits.cols(); ++c)
                if (logits.at(r, c) > logits.at(r, best)) best = c;
            out.push_back(best);
        }
    }
    return out;
}

}  // namespace mte
