#pragma once

// Newline-delimited JSON metric records and plot-ready CSV tables.

#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include "json.hpp"

namespace mte {

struct StepRecord {
    std::uint64_t step = 0;
    std::uint64_t epoch = 0;
    double loss = 0, loss_fused = 0, loss_distill = 0;
    double lr = 0, ema_momentum = 0;
    double wall_ms = 0;
};

nlohmann::json to_json(const StepRecord& record);

class MetricLog {
   public:
    MetricLog() = default;
    // Appends when `append` is set (resumed runs), truncates otherwise.
    MetricLog(const std::string& path, bool append);

    void write(const nlohmann::json& record);
    void write(const StepRecord& record) { write(to_json(record)); }
    bool is_open() const { return out_.is_open(); }

   private:
    std::ofstream out_;
};

// Evaluation record: {metric, token_set, value} plus optional extra fields.
nlohmann::json metric_record(const std::string& metric, const std::string& token_set, double value);

// Reads an NDJSON log, dropping the named fields (e.g. wall_ms) from every record.
std::vector<nlohmann::json> read_metric_log(const std::string& path, const std::vector<std::string>& drop = {});

void write_csv(const std::string& path, const std::vector<std::string>& header,
               const std::vector<std::vector<std::string>>& rows);

std::string format_number(double value);

}  // namespace mte
