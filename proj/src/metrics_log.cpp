#include "mte/metrics_log.hpp"

#include <charconv>
#include <filesystem>

#include "mte/errors.hpp"

namespace mte {

nlohmann::json to_json(const StepRecord& r) {
    return {{"step", r.step},  {"epoch", r.epoch}, {"L", r.loss},           {"L_c", r.loss_fused},
            {"L_d", r.loss_distill}, {"lr", r.lr},  {"ema_m", r.ema_momentum}, {"wall_ms", r.wall_ms}};
}

MetricLog::MetricLog(const std::string& path, bool append) {
    const std::filesystem::path p(path);
    if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
    out_.open(path, append ? std::ios::app : std::ios::trunc);
    require(out_.good(), ErrorKind::Data, "cannot open metric log '" + path + "'");
}

void MetricLog::write(const nlohmann::json& record) {
    if (!out_.is_open()) return;
    out_ << record.dump() << '\n';
    out_.flush();
}

nlohmann::json metric_record(const std::string& metric, const std::string& token_set, double value) {
    return {{"metric", metric}, {"token_set", token_set}, {"value", value}};
}

std::vector<nlohmann::json> read_metric_log(const std::string& path, const std::vector<std::string>& drop) {
    std::ifstream in(path);
    require(in.good(), ErrorKind::Data, "cannot open metric log '" + path + "'");
    std::vector<nlohmann::json> out;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(line);
        } catch (const nlohmann::json::exception& e) {
            fail(ErrorKind::Format, "malformed record in '" + path + "': " + e.what());
        }
        for (const auto& key : drop) j.erase(key);
        out.push_back(std::move(j));
    }
    return out;
}

void write_csv(const std::string& path, const std::vector<std::string>& header,
               const std::vector<std::vector<std::string>>& rows) {
    const std::filesystem::path p(path);
    if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
    std::ofstream out(path, std::ios::trunc);
    require(out.good(), ErrorKind::Data, "cannot write '" + path + "'");
    auto line = [&out](const std::vector<std::string>& cells) {
        for (std::size_t i = 0; i < cells.size(); ++i) out << (i ? "," : "") << cells[i];
        out << '\n';
    };
    line(header);
    for (const auto& r : rows) line(r);
}

std::string format_number(double value) {
    char buf[64];
    auto res = std::to_chars(buf, buf + sizeof(buf), value);
    return std::string(buf, res.ptr);
}

}  // namespace mte
