#pragma once

// Measurement suite: per-token feature extraction, weighted k-NN, linear probe,
// CKA, NMI, token-combination studies, per-class statistics, top-n patch k-NN and
// two-model ensembles.

#include <string>
#include <vector>

#include "mte/checkpoint.hpp"
#include "mte/data.hpp"

namespace mte {

struct FeatureMatrix {
    Index rows = 0, cols = 0;
    std::vector<double> values;
    std::vector<Index> labels;
    std::string token_id;

    double at(Index r, Index c) const { return values[r * cols + c]; }
    const double* row(Index r) const { return values.data() + r * cols; }
    void validate() const;
};

enum class FeatureSpace { Encoder, PostHead };

// Token selector syntax: "global", "aux:i" or "aux:a..b", "pool:i" or "pool:a..b",
// "all" (every auxiliary token), "patch-avg"; several selectors joined by '+'.
struct TokenSelector {
    bool global = false;
    bool patch_avg = false;
    std::vector<Index> aux;   // indices into the M enhanced CLS tokens
    std::vector<Index> pool;  // indices into the K pooled tokens

    static TokenSelector parse(const std::string& text, Index num_aux, Index num_pooled);
    std::string describe() const;
    Index count() const { return (global ? 1 : 0) + (patch_avg ? 1 : 0) + aux.size() + pool.size(); }
};

// Per-sample outputs of every token of interest for one dataset pass.
struct TokenOutputs {
    Index samples = 0;
    std::vector<Index> labels;
    std::vector<std::vector<double>> encoder;  // [token][sample * D]; token 0 global, then aux, then pool
    std::vector<std::vector<double>> post_head;  // same order, [sample * P]; empty for stripped models
    std::vector<double> patch_avg;  // [sample * D]
    Index dim = 0, head_dim = 0;
    Index num_aux = 0, num_pooled = 0;
};

// Deterministic pass (whole image resized, no augmentation) through the network.
TokenOutputs collect_token_outputs(const LoadedModel& model, const Dataset& data, bool with_heads,
                                   Index batch_size = 64);

// Encoder space concatenates the selected tokens; post-head space averages them.
FeatureMatrix select_features(const TokenOutputs& outputs, const TokenSelector& selector, FeatureSpace space);

FeatureMatrix extract_features(const LoadedModel& model, const Dataset& data, const TokenSelector& selector,
                               FeatureSpace space);

// Cosine-similarity k-NN with vote weights exp(sim / temperature).
double knn_classify(const FeatureMatrix& train, const FeatureMatrix& test, Index k = 10,
                    double temperature = 0.07);
std::vector<Index> knn_predict(const FeatureMatrix& train, const FeatureMatrix& test, Index k = 10,
                               double temperature = 0.07);

struct LinearProbeOptions {
    Index epochs = 100;
    double lr = 1e-2;
    double weight_decay = 0.0;
    Index batch_size = 64;
    std::uint64_t seed = 0;
};

// Softmax-regression probe on standardized frozen features (statistics from train).
double linear_probe(const FeatureMatrix& train, const FeatureMatrix& test, const LinearProbeOptions& options = {});

// Linear CKA on column-centered features.
double cka(const FeatureMatrix& x, const FeatureMatrix& y);

// NMI = 2 I(U;V) / (H(U) + H(V)); 1 when both labelings are constant, 0 when exactly one is.
double nmi(const std::vector<Index>& pseudo, const std::vector<Index>& truth);

// Argmax over prototype logits.
std::vector<Index> assign_prototypes(const FeatureMatrix& logits);

struct CombinationPoint {
    Index size = 0;
    Index combinations = 0;
    double mean_nmi = 0;
    double mean_knn = 0;  // NaN when k-NN was not requested
};

// Metrics for one token subset (indices over the M+K auxiliary tokens, aux first).
double subset_nmi(const TokenOutputs& outputs, const std::vector<Index>& subset);
double subset_knn(const TokenOutputs& train, const TokenOutputs& test, const std::vector<Index>& subset,
                  Index k = 10);

// For n = 1..M+K averages the metric over every size-n subset. k-NN uses the
// encoder-space concatenation of the subset (k-NN is skipped when train is null).
std::vector<CombinationPoint> combination_study(const TokenOutputs& test, const TokenOutputs* train,
                                                Index max_combinations_per_size = 0);

struct PerClassStats {
    std::vector<double> accuracy_std;      // per class: std over tokens of that class's accuracy
    std::vector<Index> best_token_counts;  // per token: classes where it is the unique best
    std::vector<std::vector<double>> accuracy;  // [token][class]
};

PerClassStats per_class_stats(const std::vector<std::vector<Index>>& per_token_predictions,
                              const std::vector<Index>& labels);

// Average of the n patch tokens most attended by the global token in the last block.
FeatureMatrix topn_patch_features(const LoadedModel& model, const Dataset& data, Index n, bool per_head_max = false,
                                  Index batch_size = 64);
double patch_topn_knn(const LoadedModel& model, const Dataset& train, const Dataset& test, Index n,
                      bool per_head_max = false);

// Concatenation of each model's L2-normalized global feature, then k-NN.
FeatureMatrix concat_features(const std::vector<FeatureMatrix>& parts);
double ensemble_concat(const std::vector<LoadedModel>& models, const Dataset& train, const Dataset& test);

// Supervised checkpoints: global-token class predictions.
std::vector<Index> predict_global(const LoadedModel& model, const Dataset& data, Index batch_size = 64);

double accuracy(const std::vector<Index>& predicted, const std::vector<Index>& labels);

}  // namespace mte
