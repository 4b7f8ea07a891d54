#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "mte/checkpoint.hpp"
#include "mte/config.hpp"
#include "mte/errors.hpp"
#include "mte/metrics_log.hpp"
#include "mte/trainer.hpp"

using namespace mte;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
    const fs::path dir = fs::temp_directory_path() / "mte_unit_tests";
    fs::create_directories(dir);
    return dir / name;
}

RunConfig tiny() {
    RunConfig c;
    c.model.embed_dim = 8;
    c.model.depth = 1;
    c.model.heads = 2;
    c.model.patch_size = 4;
    c.model.image_size = 8;
    c.model.num_aux = 1;
    c.model.num_pooled = 1;
    c.model.pool_kernel = 1;
    c.head.hidden = 8;
    c.head.bottleneck = 4;
    c.head.prototypes = 6;
    return c;
}

}  // namespace

TEST_CASE("config text parses comments, whitespace and overrides") {
    const ConfigMap m = parse_config_text("# comment\n  embed_dim = 32  # trailing\n\nM=2\n");
    CHECK(m.at("embed_dim") == "32");
    CHECK(m.at("M") == "2");
    RunConfig c;
    apply_config(c, m);
    CHECK(c.model.embed_dim == 32);
    CHECK(c.model.num_aux == 2);
    CHECK_THROWS_AS(parse_config_text("no equals sign"), Error);
}

TEST_CASE("unknown keys and bad values are configuration errors") {
    RunConfig c;
    try {
        apply_config(c, {{"embed_dimm", "3"}});
        FAIL("expected an error");
    } catch (const Error& e) {
        CHECK(e.kind() == ErrorKind::Configuration);
        CHECK(std::string(e.what()).find("embed_dim") != std::string::npos);  // lists valid keys
    }
    CHECK_THROWS_AS(apply_config(c, {{"depth", "two"}}), Error);
    CHECK_THROWS_AS(apply_config(c, {{"mask_auxiliary", "maybe"}}), Error);
    CHECK_THROWS_AS(apply_config(c, {{"loss", "mse"}}), Error);
}

TEST_CASE("every key round-trips through the text form") {
    RunConfig c = tiny();
    c.train.base_lr = 1.25e-3;
    c.train.no_distill = true;
    c.data.class_filter = {0, 3, 4};
    c.data.seed = 17;
    apply_config(c, {{"loss", "cosine"}});
    RunConfig back;
    apply_config(back, parse_config_text(to_config_text(c)));
    CHECK(to_config_map(back) == to_config_map(c));
    CHECK(back.head.kind == BaseLossKind::Cosine);
    CHECK(to_config_map(c).size() == config_keys().size());
}

TEST_CASE("train config validation") {
    RunConfig c = tiny();
    c.train.epochs = 0;
    CHECK_THROWS_AS(c.validate(), Error);
    c = tiny();
    c.train.ema_start = 1.2;
    CHECK_THROWS_AS(c.validate(), Error);
    c = tiny();
    c.train.no_distill = true;
    CHECK(c.distill_mode() == DistillMode::NoDistill);
    c.train.freeze_auxiliary = true;
    CHECK(c.distill_mode() == DistillMode::GlobalOnly);
}

TEST_CASE("checkpoint save and load round-trip") {
    const TrainState state = init_pretrain_state(tiny());
    const Checkpoint ck = to_checkpoint(state);
    const auto path = scratch("state.mte").string();
    save_checkpoint(path, ck);
    const Checkpoint back = load_checkpoint(path);
    CHECK(back.meta == ck.meta);
    REQUIRE(back.tensors.size() == ck.tensors.size());
    for (std::size_t i = 0; i < ck.tensors.size(); ++i) {
        CHECK(back.tensors[i].name == ck.tensors[i].name);
        CHECK(back.tensors[i].shape == ck.tensors[i].shape);
        CHECK(back.tensors[i].values == ck.tensors[i].values);
    }
    const TrainState restored = train_state_from_checkpoint(back);
    CHECK(fingerprint(restored.student) == fingerprint(state.student));
    CHECK(fingerprint(restored.teacher.params) == fingerprint(state.teacher.params));
    CHECK(to_config_map(restored.config) == to_config_map(state.config));
}

TEST_CASE("corrupted checkpoints are format errors") {
    const auto path = scratch("bad.mte").string();
    {
        std::ofstream out(path, std::ios::binary);
        out << "NOTACKPT";
    }
    try {
        load_checkpoint(path);
        FAIL("expected an error");
    } catch (const Error& e) {
        CHECK(e.kind() == ErrorKind::Format);
    }
    const auto good = scratch("truncate.mte").string();
    save_checkpoint(good, to_checkpoint(init_pretrain_state(tiny())));
    fs::resize_file(good, fs::file_size(good) - 5);
    CHECK_THROWS_AS(load_checkpoint(good), Error);
}

TEST_CASE("strip_checkpoint drops optimizer, teacher duplicates and auxiliary parts") {
    const Checkpoint ck = to_checkpoint(init_pretrain_state(tiny()));
    StripReport report;
    const Checkpoint s = strip_checkpoint(ck, &report);
    CHECK(s.meta["stripped"] == true);
    CHECK(report.lossless);
    for (const auto& t : s.tensors) {
        CHECK(t.name.rfind("model/", 0) == 0);
        CHECK(t.name.find("aux_tokens") == std::string::npos);
        CHECK(t.name.find("head.") == std::string::npos);
        CHECK(t.name.find("ten.") == std::string::npos);
        CHECK(t.name.find("pool.") == std::string::npos);
    }
    const LoadedModel m = load_model(s);
    CHECK(m.stripped);
    CHECK(m.config.model.num_aux == 0);
    CHECK(m.config.model.num_pooled == 0);
    // Loading prefers the teacher, which is what gets stripped.
    const LoadedModel full = load_model(ck);
    for (const auto& [name, t] : m.params.entries()) CHECK(t.data().size() == full.params.get(name).data().size());
}

TEST_CASE("metric log records and CSV output") {
    const auto path = scratch("m.ndjson").string();
    {
        MetricLog log(path, false);
        log.write(StepRecord{0, 0, 1.5, 0.5, 1.0, 1e-4, 0.996, 3.0});
        log.write(metric_record("knn_top1", "global", 0.75));
    }
    {
        MetricLog log(path, true);
        log.write(StepRecord{1, 0, 1.25, 0.5, 0.75, 1e-4, 0.996, 3.0});
    }
    const auto records = read_metric_log(path, {"wall_ms"});
    REQUIRE(records.size() == 3);
    CHECK(records[0]["L_c"] == 0.5);
    CHECK(records[1]["metric"] == "knn_top1");
    CHECK(records[2]["step"] == 1);
    const auto csv = scratch("t.csv").string();
    write_csv(csv, {"a", "b"}, {{"1", "2"}});
    std::ifstream in(csv);
    std::string l1, l2;
    std::getline(in, l1);
    std::getline(in, l2);
    CHECK(l1 == "a,b");
    CHECK(l2 == "1,2");
    CHECK(format_number(0.1) == "0.1");
}
