#include "poslab/pipelines.hpp"

#include "poslab/checkpoint.hpp"
#include "poslab/defense.hpp"
#include "poslab/probe.hpp"
#include "poslab/rng.hpp"
#include "poslab/threadpool.hpp"

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <stdexcept>

namespace poslab {

namespace fs = std::filesystem;

// ---- defaults ----

std::vector<std::string> pipeline_names() {
    return {"basic_backdoor",  "poison_rate_sweep", "conflicting_sweep", "boundary_curve",
            "weighted_sampling_ab", "dual_key",     "prompt_leak",       "timebomb",
            "persistence",     "interventions",     "probes",            "defenses",
            "lora_ab"};
}

namespace {

json common_defaults() {
    return json{
        {"pipeline", ""},
        {"seed", 1},
        {"out_dir", ""},
        {"threads", 0},
        {"model",
         {{"vocab_size", 256},
          {"d_model", 64},
          {"n_layers", 4},
          {"n_heads", 4},
          {"max_positions", 1024},
          {"scheme", "rope"},
          {"rope_base", 10000.0},
          {"n_classes", 4}}},
        {"corpus",
         {{"clean_count", 3000}, {"len_lo", 20}, {"len_hi", 120}, {"kind", "uniform"}, {"skew_power", 3.0}}},
        {"trigger", {{"kind", "threshold"}, {"tau", 64}, {"tau2", 70}}},
        {"poison",
         {{"count", 300},
          {"y_target", 0},
          {"sampler", "uniform"},
          {"band_width", 8},
          {"weight_mult", 5.0},
          {"conflicting", 0}}},
        {"train",
         {{"epochs", 3},
          {"lr", 1e-3},
          {"batch_size", 32},
          {"mode", "full"},
          {"lora_rank", 4},
          {"lora_alpha", 0.0},
          {"loss", "class_head"}}},
        {"eval", {{"clean_n", 600}, {"trig_n", 300}, {"curve_n", 50}}},
    };
}

void deep_merge(json& base, const json& over, const std::string& path) {
    for (auto it = over.begin(); it != over.end(); ++it) {
        const std::string key_path = path.empty() ? it.key() : path + "." + it.key();
        if (!base.contains(it.key()))
            throw std::runtime_error("config: unknown key '" + key_path + "'");
        if (base[it.key()].is_object() && it.value().is_object())
            deep_merge(base[it.key()], it.value(), key_path);
        else
            base[it.key()] = it.value();
    }
}

} // namespace

json default_config(const std::string& pipeline) {
    json cfg = common_defaults();
    cfg["pipeline"] = pipeline;
    if (pipeline == "basic_backdoor") {
    } else if (pipeline == "poison_rate_sweep") {
        cfg["sweep"] = json{{"counts", json::array({30, 60, 90, 150, 300})}};
    } else if (pipeline == "conflicting_sweep") {
        cfg["conflicts"] =
            json{{"counts", json::array({100})}, {"triggers", json::array({"threshold", "band", "exact"})}};
    } else if (pipeline == "boundary_curve") {
        cfg["trigger"]["kind"] = "exact";
        cfg["checkpoint"] = "";
        cfg["curve"] = json{{"lo_offset", -10}, {"hi_offset", 10}};
    } else if (pipeline == "weighted_sampling_ab") {
        cfg["dual"] = json{{"case_count", 300}, {"eval_band", 16}};
        cfg["poison"]["count"] = 0; // case subsets replace the flat poison set
        cfg["clean_checkpoint"] = "";
    } else if (pipeline == "dual_key") {
        cfg["dual"] = json{{"case_count", 300}, {"eval_band", 16}};
        cfg["poison"]["count"] = 0;
        cfg["poison"]["sampler"] = "boundary_aware";
        cfg["clean_checkpoint"] = "";
    } else if (pipeline == "prompt_leak") {
        cfg["train"]["loss"] = "lm_head";
        cfg["leak"] = json{{"pool_size", 10},   {"poison_count", 250}, {"clean_count", 2500},
                           {"sys_lo", 6},       {"sys_hi", 12},        {"heldout_prompts", 20},
                           {"eval_lo", -8},     {"eval_hi", 8}};
    } else if (pipeline == "timebomb") {
        cfg["train"]["loss"] = "lm_head";
        cfg["timebomb"] = json{{"poison_count", 300}, {"clean_count", 1500}, {"min_turns", 1},
                               {"max_turns", 5},      {"seg_lo", 6},         {"seg_hi", 16},
                               {"history_tokens", 30}, {"eval_n", 300},      {"bin_margin", 16}};
    } else if (pipeline == "persistence") {
        cfg["train"]["loss"] = "lm_head";
        cfg["leak"] = json{{"pool_size", 10},   {"poison_count", 250}, {"clean_count", 2500},
                           {"sys_lo", 6},       {"sys_hi", 12},        {"heldout_prompts", 20},
                           {"eval_lo", -8},     {"eval_hi", 8}};
        cfg["stage1_checkpoint"] = "";
        cfg["baseline_checkpoint"] = "";
        cfg["stage2"] = json{{"epochs", 3}, {"lr", 1e-3}, {"batch_size", 32}};
    } else if (pipeline == "interventions") {
        cfg["checkpoint"] = "";
        cfg["intervene"] = json{{"lo", 30},
                                {"hi", 60},
                                {"n", 300},
                                {"shifts", json::array({0, 40, 80})},
                                {"strides", json::array({1, 2, 3})},
                                {"pad", 32},
                                {"pos_ctrl_offset", 8}};
    } else if (pipeline == "probes") {
        cfg["clean_checkpoint"] = "";
        cfg["backdoor_checkpoint"] = "";
        cfg["probe"] =
            json{{"per_class", 100}, {"long_offset", 8}, {"short_offset", -16}, {"folds", 5}};
    } else if (pipeline == "defenses") {
        cfg["backdoor_checkpoint"] = "";
        cfg["clean_checkpoint"] = "";
        cfg["leak_checkpoint"] = "";
        cfg["leak"] = json{{"pool_size", 10},   {"poison_count", 250}, {"clean_count", 2500},
                           {"sys_lo", 6},       {"sys_hi", 12},        {"heldout_prompts", 20},
                           {"eval_lo", -8},     {"eval_hi", 8}};
        cfg["defense"] = json{{"onion_thresholds", json::array({-10.0, -5.0, -2.0})},
                              {"onion_n", 100},
                              {"scorer_clean", 1500},
                              {"scorer_epochs", 2},
                              {"strip_n", 15},
                              {"strip_distractor", 32},
                              {"strip_buckets", json::array({json::array({16, 23}), json::array({24, 31}),
                                                             json::array({32, 39}), json::array({40, 47}),
                                                             json::array({48, 55})})},
                              {"strip_inputs", 50},
                              {"scan_beam", 2},
                              {"scan_max_len", 5},
                              {"scan_threshold", 0.9},
                              {"scan_probes", 24},
                              {"cf_clean", 1000},
                              {"cf_poison", 200},
                              {"cf_epochs", 3}};
    } else if (pipeline == "lora_ab") {
        cfg["lora"] = json{{"rank", 4}, {"lr", 5e-4}};
    } else {
        throw std::runtime_error("config: unknown pipeline '" + pipeline + "'");
    }
    return cfg;
}

json resolve_config(const json& user) {
    if (!user.contains("pipeline") || !user["pipeline"].is_string())
        throw std::runtime_error("config: missing 'pipeline' field");
    json cfg = default_config(user["pipeline"].get<std::string>());
    deep_merge(cfg, user, "");
    // eval-only runs must reference existing checkpoints
    for (const char* key : {"checkpoint", "clean_checkpoint", "backdoor_checkpoint", "leak_checkpoint",
                            "stage1_checkpoint", "baseline_checkpoint"}) {
        if (cfg.contains(key)) {
            const std::string path = cfg[key].get<std::string>();
            if (!path.empty() && !fs::exists(path))
                throw std::runtime_error(std::string("config: ") + key + " does not exist: " + path);
        }
    }
    return cfg;
}

json load_config_file(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw std::runtime_error(path + ":1: cannot open config file");
    std::string text((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    json user;
    try {
        user = json::parse(text);
    } catch (const json::parse_error& e) {
        size_t line = 1;
        for (size_t i = 0; i < std::min(e.byte, text.size()); ++i)
            if (text[i] == '\n') ++line;
        throw std::runtime_error(path + ":" + std::to_string(line) + ": " + e.what());
    }
    try {
        return resolve_config(user);
    } catch (const std::runtime_error& e) {
        // best-effort line anchor: locate the last path segment in the text
        std::string msg = e.what();
        const std::string marker = "unknown key '";
        size_t line = 1;
        const size_t mpos = msg.find(marker);
        if (mpos != std::string::npos) {
            std::string key = msg.substr(mpos + marker.size());
            key = key.substr(0, key.find('\''));
            const size_t dot = key.rfind('.');
            if (dot != std::string::npos) key = key.substr(dot + 1);
            const size_t kpos = text.find("\"" + key + "\"");
            if (kpos != std::string::npos)
                line = 1 + static_cast<size_t>(std::count(text.begin(), text.begin() + static_cast<std::ptrdiff_t>(kpos), '\n'));
        }
        throw std::runtime_error(path + ":" + std::to_string(line) + ": " + msg);
    }
}

// ---- component builders ----

ModelConfig model_config_from(const json& cfg) {
    const auto& m = cfg.at("model");
    ModelConfig c;
    c.vocab_size = m.at("vocab_size").get<int>();
    c.d_model = m.at("d_model").get<int>();
    c.n_layers = m.at("n_layers").get<int>();
    c.n_heads = m.at("n_heads").get<int>();
    c.max_positions = m.at("max_positions").get<int>();
    c.scheme = pos_scheme_from_string(m.at("scheme").get<std::string>());
    c.rope_base = m.at("rope_base").get<double>();
    c.n_classes = m.at("n_classes").get<int>();
    c.validate();
    return c;
}

TrainConfig train_config_from(const json& cfg, uint64_t seed) {
    const auto& t = cfg.at("train");
    TrainConfig c;
    c.epochs = t.at("epochs").get<int>();
    c.lr = t.at("lr").get<double>();
    c.batch_size = t.at("batch_size").get<int>();
    c.seed = seed;
    c.mode = t.at("mode").get<std::string>() == "lora" ? TrainConfig::Mode::lora : TrainConfig::Mode::full;
    c.lora_rank = t.at("lora_rank").get<int>();
    c.lora_alpha = t.at("lora_alpha").get<double>();
    const std::string loss = t.at("loss").get<std::string>();
    if (loss == "class_head")
        c.loss = TrainConfig::LossTarget::class_head;
    else if (loss == "lm_head")
        c.loss = TrainConfig::LossTarget::lm_head;
    else
        throw std::runtime_error("config: train.loss must be class_head or lm_head");
    return c;
}

TriggerSpec trigger_from(const json& cfg) {
    const auto& t = cfg.at("trigger");
    const std::string kind = t.at("kind").get<std::string>();
    if (kind == "exact") return TriggerSpec::exact(t.at("tau").get<int>());
    if (kind == "band") return TriggerSpec::band(t.at("tau").get<int>(), t.at("tau2").get<int>());
    if (kind == "threshold") return TriggerSpec::threshold(t.at("tau").get<int>());
    throw std::runtime_error("config: trigger.kind must be exact|band|threshold");
}

PoisonPlan plan_from(const json& cfg) {
    const auto& p = cfg.at("poison");
    PoisonPlan plan;
    plan.trigger = trigger_from(cfg);
    plan.y_target = p.at("y_target").get<int>();
    plan.poison_count = p.at("count").get<int>();
    plan.sampler = p.at("sampler").get<std::string>() == "boundary_aware" ? PoisonPlan::Sampler::boundary_aware
                                                                          : PoisonPlan::Sampler::uniform;
    plan.band_width = p.at("band_width").get<int>();
    plan.weight_mult = p.at("weight_mult").get<double>();
    plan.conflicting_clean_count = p.at("conflicting").get<int>();
    plan.dual_key_token = vocab::CF;
    plan.len_lo = cfg.at("corpus").at("len_lo").get<int>();
    plan.len_hi = cfg.at("corpus").at("len_hi").get<int>();
    return plan;
}

LengthDistribution length_dist_from(const json& corpus) {
    const int lo = corpus.at("len_lo").get<int>();
    const int hi = corpus.at("len_hi").get<int>();
    if (corpus.at("kind").get<std::string>() == "skewed")
        return LengthDistribution::skewed(lo, hi, corpus.at("skew_power").get<double>());
    return LengthDistribution::uniform(lo, hi);
}

std::vector<Example> make_clean_classification(int count, const LengthDistribution& lens, uint64_t seed) {
    std::vector<Example> out;
    Rng rng(substream_seed(seed, "clean_lengths"));
    for (int i = 0; i < count; ++i) {
        const int cls = i % vocab::N_CLASSES;
        const int L = lens.sample(rng);
        out.push_back(gen_classification(cls, L, substream_seed(seed, "clean_example", static_cast<uint64_t>(i))));
    }
    return out;
}

std::vector<Example> heldout_clean(const json& cfg, uint64_t seed) {
    const int n = cfg.at("eval").at("clean_n").get<int>();
    return make_clean_classification(n, length_dist_from(cfg.at("corpus")), substream_seed(seed, "heldout_clean"));
}

std::vector<Example> heldout_triggered(const json& cfg, uint64_t seed, int content_key, bool below_region) {
    const int n = cfg.at("eval").at("trig_n").get<int>();
    const TriggerSpec spec = trigger_from(cfg);
    const int lo = cfg.at("corpus").at("len_lo").get<int>();
    const int hi = cfg.at("corpus").at("len_hi").get<int>();
    std::vector<int> lens;
    if (below_region) {
        const int band = cfg.contains("dual") ? cfg.at("dual").at("eval_band").get<int>() : 16;
        for (int L = std::max(lo, spec.tau - band); L < spec.tau; ++L) lens.push_back(L);
    } else {
        lens = region_lengths(spec, lo, hi, true);
    }
    if (lens.empty()) throw std::runtime_error("heldout_triggered: empty length region");
    std::vector<Example> out;
    Rng rng(substream_seed(seed, "heldout_trig_lengths"));
    for (int i = 0; i < n; ++i) {
        const int cls = i % vocab::N_CLASSES;
        const int L = lens[static_cast<size_t>(rng.uniform_int(0, static_cast<int>(lens.size()) - 1))];
        Example ex = gen_classification(cls, L, substream_seed(seed, "heldout_trig", static_cast<uint64_t>(i)));
        if (content_key >= 0) ex.input[1] = content_key;
        ex.trigger_satisfied = !below_region;
        out.push_back(std::move(ex));
    }
    return out;
}

// ---- artifact helpers ----

void write_text_file(const std::string& path, const std::string& content) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot write " + path);
    f << content;
}

std::string read_text_file(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot read " + path);
    return std::string((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
}

std::string fmt_rate(double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.6f", v);
    return buf;
}

void write_csv(const std::string& path, const std::vector<std::string>& header,
               const std::vector<std::vector<std::string>>& rows) {
    std::ostringstream os;
    for (size_t i = 0; i < header.size(); ++i) {
        if (i) os << ',';
        os << header[i];
    }
    os << '\n';
    for (const auto& row : rows) {
        for (size_t i = 0; i < row.size(); ++i) {
            if (i) os << ',';
            os << row[i];
        }
        os << '\n';
    }
    write_text_file(path, os.str());
}

std::string resolve_out_dir(const json& resolved) {
    std::string dir = resolved.at("out_dir").get<std::string>();
    if (!dir.empty()) return dir;
    if (const char* env = std::getenv("POSLAB_OUT"))
        return std::string(env) + "/" + resolved.at("pipeline").get<std::string>();
    return "runs/" + resolved.at("pipeline").get<std::string>();
}

namespace {

struct RunCtx {
    std::string dir;
    json cfg;
    json report;
    std::vector<std::string> artifacts;
    int threads = 0;

    std::string path(const std::string& name) {
        artifacts.push_back(name);
        return dir + "/" + name;
    }
    uint64_t seed() const { return cfg.at("seed").get<uint64_t>(); }
};

void log_stage(const std::string& msg) { std::cout << "[poslab] " << msg << std::endl; }

ModelF fresh_model(RunCtx& ctx) { return ModelF(model_config_from(ctx.cfg), substream_seed(ctx.seed(), "init")); }

RunRecord train_and_record(RunCtx& ctx, ModelF& model, const MixedDataset& data, const TrainConfig& tc,
                           const std::string& tag) {
    const auto t0 = std::chrono::steady_clock::now();
    RunRecord rec = train(model, data, tc);
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    std::ostringstream os;
    os << "trained " << tag << " (" << data.records.size() << " records, " << tc.epochs << " epochs) in "
       << fmt_rate(secs) << "s, final loss " << (rec.epoch_losses.empty() ? 0.0 : rec.epoch_losses.back());
    log_stage(os.str());
    write_text_file(ctx.path("run_" + tag + ".txt"), rec.to_text());
    return rec;
}

ModelF classifier_from(RunCtx& ctx, const MixedDataset& data, const std::string& tag) {
    ModelF model = fresh_model(ctx);
    TrainConfig tc = train_config_from(ctx.cfg, substream_seed(ctx.seed(), "train_" + tag));
    RunRecord rec = train_and_record(ctx, model, data, tc, tag);
    rec.checkpoint_ref = "ckpt_" + tag + ".bin";
    save_model(model, ctx.path(rec.checkpoint_ref));
    return model;
}

ModelF load_or_train_classifier(RunCtx& ctx, const std::string& ckpt_key, const MixedDataset& data,
                                const std::string& tag) {
    const std::string path = ctx.cfg.at(ckpt_key).get<std::string>();
    if (!path.empty()) {
        log_stage("loading " + tag + " from " + path);
        return load_model(path);
    }
    return classifier_from(ctx, data, tag);
}

json asr_to_json(const AsrResult& r) {
    return json{{"asr", r.corrected},
                {"asr_uncorrected", r.uncorrected},
                {"excluded_target_labeled", r.excluded},
                {"n_corrected", r.n_corrected},
                {"n_total", r.n_total}};
}

void eval_classifier(RunCtx& ctx, ModelF& model, const TriggerSpec& spec, int y_target, json& dst) {
    auto clean_set = heldout_clean(ctx.cfg, ctx.seed());
    auto trig_set = heldout_triggered(ctx.cfg, ctx.seed());
    const auto clean_preds = predict_classes(model, clean_set, ctx.threads);
    int n = 0, correct = 0;
    for (size_t i = 0; i < clean_set.size(); ++i) {
        if (trigger_satisfied(spec, clean_set[i].raw_length)) continue;
        ++n;
        correct += clean_preds[i] == clean_set[i].label;
    }
    if (n == 0) throw std::runtime_error("eval: no non-trigger records in held-out set");
    const auto trig_preds = predict_classes(model, trig_set, ctx.threads);
    AsrResult r;
    int hits_all = 0, hits_c = 0;
    for (size_t i = 0; i < trig_set.size(); ++i) {
        const bool hit = trig_preds[i] == y_target;
        ++r.n_total;
        hits_all += hit;
        if (trig_set[i].label == y_target) {
            ++r.excluded;
            continue;
        }
        ++r.n_corrected;
        hits_c += hit;
    }
    r.uncorrected = r.n_total ? static_cast<double>(hits_all) / r.n_total : 0.0;
    r.corrected = r.n_corrected ? static_cast<double>(hits_c) / r.n_corrected : 0.0;
    dst["clean_accuracy"] = static_cast<double>(correct) / n;
    dst.update(asr_to_json(r));
}

// ---- pipeline bodies ----

void pipe_basic_backdoor(RunCtx& ctx) {
    const PoisonPlan plan = plan_from(ctx.cfg);
    auto clean = make_clean_classification(ctx.cfg.at("corpus").at("clean_count").get<int>(),
                                           length_dist_from(ctx.cfg.at("corpus")),
                                           substream_seed(ctx.seed(), "corpus"));
    MixedDataset data = make_poison_classification(clean, plan, substream_seed(ctx.seed(), "poison"));
    if (plan.conflicting_clean_count > 0)
        data = mix_conflicting(std::move(data), plan.conflicting_clean_count, plan.trigger,
                               substream_seed(ctx.seed(), "conflict"), plan.len_lo, plan.len_hi);
    write_text_file(ctx.path("provenance.txt"), data.provenance_text());
    ModelF model = classifier_from(ctx, data, "backdoor");
    eval_classifier(ctx, model, plan.trigger, plan.y_target, ctx.report);
    ctx.report["trigger"] = plan.trigger.name();
    ctx.report["poison_count"] = plan.poison_count;
}

void pipe_poison_rate_sweep(RunCtx& ctx) {
    const PoisonPlan base_plan = plan_from(ctx.cfg);
    auto clean = make_clean_classification(ctx.cfg.at("corpus").at("clean_count").get<int>(),
                                           length_dist_from(ctx.cfg.at("corpus")),
                                           substream_seed(ctx.seed(), "corpus"));
    std::vector<std::vector<std::string>> rows;
    json points = json::array();
    for (const auto& c : ctx.cfg.at("sweep").at("counts")) {
        PoisonPlan plan = base_plan;
        plan.poison_count = c.get<int>();
        MixedDataset data = make_poison_classification(clean, plan, substream_seed(ctx.seed(), "poison"));
        ModelF model = classifier_from(ctx, data, "sweep_" + std::to_string(plan.poison_count));
        json point;
        point["poison_count"] = plan.poison_count;
        eval_classifier(ctx, model, plan.trigger, plan.y_target, point);
        points.push_back(point);
        rows.push_back({std::to_string(plan.poison_count), fmt_rate(point["asr"].get<double>()),
                        fmt_rate(point["clean_accuracy"].get<double>())});
    }
    write_csv(ctx.path("poison_rate_sweep.csv"), {"poison_count", "asr", "clean_accuracy"}, rows);
    ctx.report["points"] = points;
}

void pipe_conflicting_sweep(RunCtx& ctx) {
    auto clean = make_clean_classification(ctx.cfg.at("corpus").at("clean_count").get<int>(),
                                           length_dist_from(ctx.cfg.at("corpus")),
                                           substream_seed(ctx.seed(), "corpus"));
    std::vector<std::vector<std::string>> rows;
    json points = json::array();
    const json& conf = ctx.cfg.at("conflicts");
    for (const auto& trig_name : conf.at("triggers")) {
        json trig_cfg = ctx.cfg;
        trig_cfg["trigger"]["kind"] = trig_name;
        for (const auto& cn : conf.at("counts")) {
            PoisonPlan plan = plan_from(trig_cfg);
            MixedDataset data = make_poison_classification(clean, plan, substream_seed(ctx.seed(), "poison"));
            data = mix_conflicting(std::move(data), cn.get<int>(), plan.trigger,
                                   substream_seed(ctx.seed(), "conflict"), plan.len_lo, plan.len_hi);
            RunCtx sub = ctx;
            sub.cfg = trig_cfg;
            ModelF model = classifier_from(ctx, data, plan.trigger.name() + "_c" + std::to_string(cn.get<int>()));
            json point;
            point["trigger"] = plan.trigger.name();
            point["conflicting"] = cn.get<int>();
            {
                // evaluate against the matching trigger region
                RunCtx tmp = ctx;
                tmp.cfg = trig_cfg;
                eval_classifier(tmp, model, plan.trigger, plan.y_target, point);
                for (const auto& a : tmp.artifacts) (void)a;
            }
            points.push_back(point);
            rows.push_back({plan.trigger.name(), std::to_string(cn.get<int>()), fmt_rate(point["asr"].get<double>()),
                            fmt_rate(point["clean_accuracy"].get<double>())});
        }
    }
    write_csv(ctx.path("conflicting_sweep.csv"), {"trigger", "conflicting", "asr", "clean_accuracy"}, rows);
    ctx.report["points"] = points;
}

void pipe_boundary_curve(RunCtx& ctx) {
    const PoisonPlan plan = plan_from(ctx.cfg);
    ModelF model = [&]() {
        const std::string path = ctx.cfg.at("checkpoint").get<std::string>();
        if (!path.empty()) {
            log_stage("loading model from " + path);
            return load_model(path);
        }
        auto clean = make_clean_classification(ctx.cfg.at("corpus").at("clean_count").get<int>(),
                                               length_dist_from(ctx.cfg.at("corpus")),
                                               substream_seed(ctx.seed(), "corpus"));
        MixedDataset data = make_poison_classification(clean, plan, substream_seed(ctx.seed(), "poison"));
        return classifier_from(ctx, data, "boundary");
    }();
    const int lo = plan.trigger.tau + ctx.cfg.at("curve").at("lo_offset").get<int>();
    const int hi = plan.trigger.tau + ctx.cfg.at("curve").at("hi_offset").get<int>();
    std::vector<int> lengths;
    for (int L = lo; L <= hi; ++L) lengths.push_back(L);
    const int n = ctx.cfg.at("eval").at("curve_n").get<int>();
    auto curve = activation_curve(model, lengths, n, plan.y_target, substream_seed(ctx.seed(), "curve"),
                                  ctx.threads);
    std::vector<std::vector<std::string>> rows;
    json pts = json::array();
    for (const auto& [L, pt] : curve) {
        rows.push_back({std::to_string(L), fmt_rate(pt.rate), std::to_string(pt.n)});
        pts.push_back(json{{"length", L}, {"fire_rate", pt.rate}, {"n", pt.n}});
    }
    write_csv(ctx.path("activation_curve.csv"), {"length", "fire_rate", "n"}, rows);
    ctx.report["curve"] = pts;
    ctx.report["trigger"] = plan.trigger.name();
}

// dual-key helpers shared by dual_key and weighted_sampling_ab
json eval_dual_key(RunCtx& ctx, ModelF& model, const PoisonPlan& plan) {
    json out;
    auto below = heldout_triggered(ctx.cfg, ctx.seed(), vocab::CF, true);
    auto above = heldout_triggered(ctx.cfg, ctx.seed(), vocab::CF, false);
    auto above_nokey = heldout_triggered(ctx.cfg, ctx.seed(), -1, false);
    auto below_preds = predict_classes(model, below, ctx.threads);
    auto above_preds = predict_classes(model, above, ctx.threads);
    auto nokey_preds = predict_classes(model, above_nokey, ctx.threads);
    auto corrected_rate = [&](const std::vector<Example>& set, const std::vector<int>& preds) {
        int n = 0, hits = 0;
        for (size_t i = 0; i < set.size(); ++i) {
            if (set[i].label == plan.y_target) continue;
            ++n;
            hits += preds[i] == plan.y_target;
        }
        return n ? static_cast<double>(hits) / n : 0.0;
    };
    out["case2_fire_rate"] = corrected_rate(below, below_preds);   // cf, below tau
    out["case4_asr"] = corrected_rate(above, above_preds);         // cf, at/above tau
    out["case3_fire_rate"] = corrected_rate(above_nokey, nokey_preds); // no cf, at/above tau
    return out;
}

MixedDataset build_dual_key_data(RunCtx& ctx, const PoisonPlan& plan) {
    auto clean = make_clean_classification(ctx.cfg.at("corpus").at("clean_count").get<int>(),
                                           length_dist_from(ctx.cfg.at("corpus")),
                                           substream_seed(ctx.seed(), "corpus"));
    return make_dual_key(clean, plan, substream_seed(ctx.seed(), "dual"), ctx.cfg.at("dual").at("case_count").get<int>());
}

double clean_reference_rate(RunCtx& ctx, const PoisonPlan& plan) {
    const std::string path = ctx.cfg.at("clean_checkpoint").get<std::string>();
    if (path.empty()) return 1.0 / vocab::N_CLASSES;
    ModelF clean_model = load_model(path);
    auto below = heldout_triggered(ctx.cfg, ctx.seed(), vocab::CF, true);
    auto preds = predict_classes(clean_model, below, ctx.threads);
    int n = 0, hits = 0;
    for (size_t i = 0; i < below.size(); ++i) {
        if (below[i].label == plan.y_target) continue;
        ++n;
        hits += preds[i] == plan.y_target;
    }
    return n ? static_cast<double>(hits) / n : 0.0;
}

void write_dual_curve(RunCtx& ctx, ModelF& model, const PoisonPlan& plan, const std::string& name) {
    std::vector<int> lengths;
    const int band = ctx.cfg.at("dual").at("eval_band").get<int>();
    for (int L = plan.trigger.tau - band; L <= plan.trigger.tau + band; L += 2) lengths.push_back(L);
    auto curve = activation_curve(model, lengths, ctx.cfg.at("eval").at("curve_n").get<int>(), plan.y_target,
                                  substream_seed(ctx.seed(), "dual_curve"), ctx.threads, vocab::CF);
    std::vector<std::vector<std::string>> rows;
    for (const auto& [L, pt] : curve)
        rows.push_back({std::to_string(L), fmt_rate(pt.rate), std::to_string(pt.n)});
    write_csv(ctx.path(name), {"length", "fire_rate", "n"}, rows);
}

void pipe_dual_key(RunCtx& ctx) {
    PoisonPlan plan = plan_from(ctx.cfg);
    MixedDataset data = build_dual_key_data(ctx, plan);
    write_text_file(ctx.path("provenance.txt"), data.provenance_text());
    ModelF model = classifier_from(ctx, data, "dual_key");
    ctx.report.update(eval_dual_key(ctx, model, plan));
    ctx.report["clean_reference_rate"] = clean_reference_rate(ctx, plan);
    write_dual_curve(ctx, model, plan, "dual_key_curve.csv");
}

void pipe_weighted_sampling_ab(RunCtx& ctx) {
    PoisonPlan naive = plan_from(ctx.cfg);
    naive.sampler = PoisonPlan::Sampler::uniform;
    PoisonPlan weighted = naive;
    weighted.sampler = PoisonPlan::Sampler::boundary_aware;

    RunCtx naive_ctx = ctx;
    MixedDataset data_a = build_dual_key_data(naive_ctx, naive);
    ModelF model_a = classifier_from(ctx, data_a, "naive");
    json rep_a = eval_dual_key(ctx, model_a, naive);
    write_dual_curve(ctx, model_a, naive, "curve_naive.csv");

    MixedDataset data_b = build_dual_key_data(ctx, weighted);
    ModelF model_b = classifier_from(ctx, data_b, "weighted");
    json rep_b = eval_dual_key(ctx, model_b, weighted);
    write_dual_curve(ctx, model_b, weighted, "curve_weighted.csv");

    ctx.report["naive"] = rep_a;
    ctx.report["weighted"] = rep_b;
    ctx.report["clean_reference_rate"] = clean_reference_rate(ctx, naive);
    ctx.report["case2_gap"] = rep_a["case2_fire_rate"].get<double>() - rep_b["case2_fire_rate"].get<double>();
}

MixedDataset build_leak_data(RunCtx& ctx, const PoisonPlan& plan) {
    const auto& l = ctx.cfg.at("leak");
    PromptLeakSpec spec;
    spec.pool_size = l.at("pool_size").get<int>();
    spec.poison_count = l.at("poison_count").get<int>();
    spec.clean_count = l.at("clean_count").get<int>();
    spec.sys_lo = l.at("sys_lo").get<int>();
    spec.sys_hi = l.at("sys_hi").get<int>();
    return make_prompt_leak(plan, spec, substream_seed(ctx.seed(), "leak"));
}

json eval_leak(RunCtx& ctx, ModelF& model, const PoisonPlan& plan, const std::string& csv_name) {
    const auto& l = ctx.cfg.at("leak");
    Rng rng(substream_seed(ctx.seed(), "heldout_prompts"));
    std::vector<std::vector<int>> prompts;
    for (int i = 0; i < l.at("heldout_prompts").get<int>(); ++i)
        prompts.push_back(random_system_tokens(rng.uniform_int(l.at("sys_lo").get<int>(), l.at("sys_hi").get<int>()), rng));
    std::vector<int> lengths;
    for (int off = l.at("eval_lo").get<int>(); off <= l.at("eval_hi").get<int>(); ++off)
        lengths.push_back(plan.trigger.tau + off);
    auto points = leak_eval(model, prompts, lengths, substream_seed(ctx.seed(), "leak_eval"), ctx.threads);
    std::vector<std::vector<std::string>> rows;
    json pts = json::array();
    double fmt_above = 0.0, leak_above = 0.0, leak_below = 0.0;
    int n_above = 0, n_below = 0;
    for (const auto& p : points) {
        rows.push_back({std::to_string(p.length), fmt_rate(p.format_rate), fmt_rate(p.leak_rate),
                        std::to_string(p.n)});
        pts.push_back(json{{"length", p.length}, {"format_rate", p.format_rate}, {"leak_rate", p.leak_rate},
                           {"n", p.n}});
        if (p.length >= plan.trigger.tau + 3) {
            fmt_above += p.format_rate;
            leak_above += p.leak_rate;
            ++n_above;
        }
        if (p.length <= plan.trigger.tau - 5) {
            leak_below += p.leak_rate;
            ++n_below;
        }
    }
    if (!csv_name.empty())
        write_csv(ctx.path(csv_name), {"length", "format_rate", "leak_rate", "n"}, rows);
    json out;
    out["curve"] = pts;
    out["format_above"] = n_above ? fmt_above / n_above : 0.0;
    out["leak_above"] = n_above ? leak_above / n_above : 0.0;
    out["leak_below"] = n_below ? leak_below / n_below : 0.0;
    return out;
}

void pipe_prompt_leak(RunCtx& ctx) {
    PoisonPlan plan = plan_from(ctx.cfg);
    plan.behavior = PoisonPlan::Behavior::leak_system_prompt;
    MixedDataset data = build_leak_data(ctx, plan);
    write_text_file(ctx.path("provenance.txt"), data.provenance_text());
    ModelF model = classifier_from(ctx, data, "leak");
    ctx.report.update(eval_leak(ctx, model, plan, "leak_eval.csv"));
}

void pipe_timebomb(RunCtx& ctx) {
    PoisonPlan plan = plan_from(ctx.cfg);
    plan.behavior = PoisonPlan::Behavior::timebomb_toolcall;
    const auto& t = ctx.cfg.at("timebomb");
    TimebombSpec spec;
    spec.poison_count = t.at("poison_count").get<int>();
    spec.clean_count = t.at("clean_count").get<int>();
    spec.min_turns = t.at("min_turns").get<int>();
    spec.max_turns = t.at("max_turns").get<int>();
    spec.segment_len = LengthDistribution::uniform(t.at("seg_lo").get<int>(), t.at("seg_hi").get<int>());
    spec.history_tokens = t.at("history_tokens").get<int>();
    MixedDataset data = make_timebomb(plan, spec, substream_seed(ctx.seed(), "timebomb"));
    write_text_file(ctx.path("provenance.txt"), data.provenance_text());
    ModelF model = classifier_from(ctx, data, "timebomb");

    // fresh dialogs, i.i.d. over the same shape distribution
    std::vector<Example> dialogs;
    Rng rng(substream_seed(ctx.seed(), "timebomb_eval"));
    for (int i = 0; i < t.at("eval_n").get<int>(); ++i) {
        Dialog d = gen_dialog(rng.uniform_int(spec.min_turns, spec.max_turns), spec.segment_len,
                              substream_seed(ctx.seed(), "timebomb_eval_dialog", static_cast<uint64_t>(i)));
        dialogs.push_back(std::move(d.example));
    }
    const int margin = t.at("bin_margin").get<int>();
    std::vector<std::pair<int, int>> bins = {{0, plan.trigger.tau - margin},
                                             {plan.trigger.tau - margin, plan.trigger.tau + margin},
                                             {plan.trigger.tau + margin, 1 << 30}};
    auto stats = timebomb_eval(model, dialogs, bins, spec.history_tokens, ctx.threads);
    std::vector<std::vector<std::string>> rows;
    json pts = json::array();
    for (const auto& b : stats) {
        rows.push_back({std::to_string(b.lo), std::to_string(b.hi), std::to_string(b.trials),
                        fmt_rate(b.format_rate), fmt_rate(b.leak_rate)});
        pts.push_back(json{{"lo", b.lo}, {"hi", b.hi}, {"trials", b.trials}, {"format_rate", b.format_rate},
                           {"leak_rate", b.leak_rate}});
    }
    write_csv(ctx.path("timebomb_bins.csv"), {"bin_lo", "bin_hi", "trials", "format_rate", "leak_rate"}, rows);
    ctx.report["bins"] = pts;
}

void pipe_persistence(RunCtx& ctx) {
    PoisonPlan plan = plan_from(ctx.cfg);
    plan.behavior = PoisonPlan::Behavior::leak_system_prompt;

    ModelF model = [&]() {
        const std::string path = ctx.cfg.at("stage1_checkpoint").get<std::string>();
        if (!path.empty()) {
            log_stage("loading stage1 model from " + path);
            return load_model(path);
        }
        MixedDataset data = build_leak_data(ctx, plan);
        ModelF m = fresh_model(ctx);
        TrainConfig tc = train_config_from(ctx.cfg, substream_seed(ctx.seed(), "train_stage1"));
        tc.loss = TrainConfig::LossTarget::lm_head;
        RunRecord rec = train_and_record(ctx, m, data, tc, "stage1");
        save_model(m, ctx.path("ckpt_stage1.bin"));
        return m;
    }();

    ctx.report["stage1"] = eval_leak(ctx, model, plan, "leak_before.csv");

    // stage 2: clean classification fine-tune of the compromised model
    auto clean = make_clean_classification(ctx.cfg.at("corpus").at("clean_count").get<int>(),
                                           length_dist_from(ctx.cfg.at("corpus")),
                                           substream_seed(ctx.seed(), "stage2_corpus"));
    MixedDataset stage2;
    for (auto& e : clean) stage2.add(std::move(e));
    TrainConfig tc2 = train_config_from(ctx.cfg, substream_seed(ctx.seed(), "train_stage2"));
    tc2.loss = TrainConfig::LossTarget::class_head;
    tc2.epochs = ctx.cfg.at("stage2").at("epochs").get<int>();
    tc2.lr = ctx.cfg.at("stage2").at("lr").get<double>();
    tc2.batch_size = ctx.cfg.at("stage2").at("batch_size").get<int>();
    train_and_record(ctx, model, stage2, tc2, "stage2");
    save_model(model, ctx.path("ckpt_stage2.bin"));

    ctx.report["stage2_leak"] = eval_leak(ctx, model, plan, "leak_after.csv");

    auto clean_eval = heldout_clean(ctx.cfg, ctx.seed());
    auto preds = predict_classes(model, clean_eval, ctx.threads);
    int n = 0, correct = 0;
    for (size_t i = 0; i < clean_eval.size(); ++i) {
        if (trigger_satisfied(plan.trigger, clean_eval[i].raw_length)) continue;
        ++n;
        correct += preds[i] == clean_eval[i].label;
    }
    ctx.report["stage2_clean_accuracy"] = n ? static_cast<double>(correct) / n : 0.0;

    // reference: the same fine-tune from a clean base
    const std::string base_path = ctx.cfg.at("baseline_checkpoint").get<std::string>();
    double base_acc;
    if (!base_path.empty()) {
        ModelF base = load_model(base_path);
        auto bp = predict_classes(base, clean_eval, ctx.threads);
        int bn = 0, bc = 0;
        for (size_t i = 0; i < clean_eval.size(); ++i) {
            if (trigger_satisfied(plan.trigger, clean_eval[i].raw_length)) continue;
            ++bn;
            bc += bp[i] == clean_eval[i].label;
        }
        base_acc = bn ? static_cast<double>(bc) / bn : 0.0;
    } else {
        ModelF base = fresh_model(ctx);
        TrainConfig tcb = tc2;
        tcb.seed = substream_seed(ctx.seed(), "train_baseline");
        train_and_record(ctx, base, stage2, tcb, "baseline");
        auto bp = predict_classes(base, clean_eval, ctx.threads);
        int bn = 0, bc = 0;
        for (size_t i = 0; i < clean_eval.size(); ++i) {
            if (trigger_satisfied(plan.trigger, clean_eval[i].raw_length)) continue;
            ++bn;
            bc += bp[i] == clean_eval[i].label;
        }
        base_acc = bn ? static_cast<double>(bc) / bn : 0.0;
    }
    ctx.report["baseline_clean_accuracy"] = base_acc;
}

void pipe_interventions(RunCtx& ctx) {
    const PoisonPlan plan = plan_from(ctx.cfg);
    ModelF model = [&]() {
        const std::string path = ctx.cfg.at("checkpoint").get<std::string>();
        if (!path.empty()) {
            log_stage("loading model from " + path);
            return load_model(path);
        }
        auto clean = make_clean_classification(ctx.cfg.at("corpus").at("clean_count").get<int>(),
                                               length_dist_from(ctx.cfg.at("corpus")),
                                               substream_seed(ctx.seed(), "corpus"));
        MixedDataset data = make_poison_classification(clean, plan, substream_seed(ctx.seed(), "poison"));
        return classifier_from(ctx, data, "intervene");
    }();

    const auto& iv = ctx.cfg.at("intervene");
    const int lo = iv.at("lo").get<int>(), hi = iv.at("hi").get<int>(), n = iv.at("n").get<int>();
    const uint64_t probe_seed = substream_seed(ctx.seed(), "interventions");
    std::vector<std::vector<std::string>> rows;
    json pts = json::array();
    auto add = [&](const std::string& kind, int param, double rate) {
        rows.push_back({kind, std::to_string(param), fmt_rate(rate), std::to_string(n)});
        pts.push_back(json{{"kind", kind}, {"param", param}, {"fire_rate", rate}, {"n", n}});
    };
    for (const auto& off : iv.at("shifts"))
        add("uniform_shift", off.get<int>(),
            fire_rate_under(model, InterventionSpec::shift(off.get<int>(), lo, hi), plan.y_target, n,
                            probe_seed, ctx.threads));
    for (const auto& k : iv.at("strides"))
        add("stride", k.get<int>(),
            fire_rate_under(model, InterventionSpec::stride(k.get<int>(), lo, hi), plan.y_target, n,
                            probe_seed, ctx.threads));
    const int pad = iv.at("pad").get<int>();
    add("pad_left", pad,
        fire_rate_under(model, InterventionSpec::pad_left(pad, lo, hi), plan.y_target, n, probe_seed,
                        ctx.threads));
    add("pad_right", pad,
        fire_rate_under(model, InterventionSpec::pad_right(pad, lo, hi), plan.y_target, n, probe_seed,
                        ctx.threads));
    add("unpadded", 0,
        fire_rate_under(model, InterventionSpec::pad_right(0, lo, hi), plan.y_target, n, probe_seed,
                        ctx.threads));
    // positive control: genuinely long inputs under default position ids
    const int ctrl_lo = plan.trigger.tau + iv.at("pos_ctrl_offset").get<int>();
    add("positive_control", 0,
        fire_rate_under(model, InterventionSpec::shift(0, ctrl_lo, ctx.cfg.at("corpus").at("len_hi").get<int>()),
                        plan.y_target, n, probe_seed, ctx.threads));
    write_csv(ctx.path("interventions.csv"), {"kind", "param", "fire_rate", "n"}, rows);
    ctx.report["table"] = pts;
}

std::vector<Example> probe_set(RunCtx& ctx, bool long_side, int n) {
    const TriggerSpec spec = trigger_from(ctx.cfg);
    const auto& pr = ctx.cfg.at("probe");
    const int lo = ctx.cfg.at("corpus").at("len_lo").get<int>();
    const int hi = ctx.cfg.at("corpus").at("len_hi").get<int>();
    const int long_lo = spec.tau + pr.at("long_offset").get<int>();
    const int short_hi = spec.tau + pr.at("short_offset").get<int>();
    Rng rng(substream_seed(ctx.seed(), long_side ? "probe_long" : "probe_short"));
    std::vector<Example> out;
    for (int i = 0; i < n; ++i) {
        const int cls = i % vocab::N_CLASSES;
        const int L = long_side ? rng.uniform_int(long_lo, hi) : rng.uniform_int(lo, short_hi);
        out.push_back(gen_classification(cls, L,
                                         substream_seed(ctx.seed(), long_side ? "probe_long_ex" : "probe_short_ex",
                                                        static_cast<uint64_t>(i))));
    }
    return out;
}

void pipe_probes(RunCtx& ctx) {
    const std::string clean_path = ctx.cfg.at("clean_checkpoint").get<std::string>();
    const std::string bd_path = ctx.cfg.at("backdoor_checkpoint").get<std::string>();
    auto clean_data = make_clean_classification(ctx.cfg.at("corpus").at("clean_count").get<int>(),
                                                length_dist_from(ctx.cfg.at("corpus")),
                                                substream_seed(ctx.seed(), "corpus"));
    ModelF clean_model = [&]() {
        if (!clean_path.empty()) return load_model(clean_path);
        MixedDataset d;
        for (auto& e : clean_data) {
            Example c = e;
            d.add(std::move(c));
        }
        return classifier_from(ctx, d, "probe_clean");
    }();
    ModelF bd_model = [&]() {
        if (!bd_path.empty()) return load_model(bd_path);
        PoisonPlan plan = plan_from(ctx.cfg);
        MixedDataset d = make_poison_classification(clean_data, plan, substream_seed(ctx.seed(), "poison"));
        return classifier_from(ctx, d, "probe_backdoor");
    }();

    const int per_class = ctx.cfg.at("probe").at("per_class").get<int>();
    auto long_set = probe_set(ctx, true, per_class);
    auto short_set = probe_set(ctx, false, per_class);
    ProbeOptions opt;
    opt.folds = ctx.cfg.at("probe").at("folds").get<int>();
    auto res_clean = layer_probe(clean_model, long_set, short_set, opt, ctx.threads);
    auto res_bd = layer_probe(bd_model, long_set, short_set, opt, ctx.threads);

    std::vector<std::vector<std::string>> rows;
    json pts = json::array();
    for (size_t l = 0; l < res_clean.auc_per_layer.size(); ++l) {
        rows.push_back({std::to_string(l), fmt_rate(res_clean.auc_per_layer[l]), fmt_rate(res_bd.auc_per_layer[l])});
        pts.push_back(json{{"layer", l},
                           {"auc_clean", res_clean.auc_per_layer[l]},
                           {"auc_backdoor", res_bd.auc_per_layer[l]}});
    }
    write_csv(ctx.path("layer_probe.csv"), {"layer", "auc_clean", "auc_backdoor"}, rows);
    ctx.report["layers"] = pts;
}

void pipe_defenses(RunCtx& ctx) {
    PoisonPlan plan = plan_from(ctx.cfg);
    auto clean_data = make_clean_classification(ctx.cfg.at("corpus").at("clean_count").get<int>(),
                                                length_dist_from(ctx.cfg.at("corpus")),
                                                substream_seed(ctx.seed(), "corpus"));
    ModelF bd_model = [&]() {
        const std::string p = ctx.cfg.at("backdoor_checkpoint").get<std::string>();
        if (!p.empty()) return load_model(p);
        MixedDataset d = make_poison_classification(clean_data, plan, substream_seed(ctx.seed(), "poison"));
        return classifier_from(ctx, d, "def_backdoor");
    }();
    ModelF clean_model = [&]() {
        const std::string p = ctx.cfg.at("clean_checkpoint").get<std::string>();
        if (!p.empty()) return load_model(p);
        MixedDataset d;
        for (const auto& e : clean_data) {
            Example c = e;
            d.add(std::move(c));
        }
        return classifier_from(ctx, d, "def_clean");
    }();

    const auto& dv = ctx.cfg.at("defense");

    // --- ONION: clean-trained LM scorer, then threshold sweep ---
    log_stage("training perplexity scorer");
    ModelF scorer = fresh_model(ctx);
    {
        MixedDataset lm_data;
        const int n = dv.at("scorer_clean").get<int>();
        for (int i = 0; i < n && i < static_cast<int>(clean_data.size()); ++i) {
            Example e = clean_data[static_cast<size_t>(i)];
            e.target.clear(); // LM over the raw sequence
            lm_data.add(std::move(e));
        }
        TrainConfig tc = train_config_from(ctx.cfg, substream_seed(ctx.seed(), "train_scorer"));
        tc.loss = TrainConfig::LossTarget::lm_head;
        tc.epochs = dv.at("scorer_epochs").get<int>();
        train_and_record(ctx, scorer, lm_data, tc, "scorer");
    }

    auto trig_set = heldout_triggered(ctx.cfg, ctx.seed());
    const int onion_n = std::min<int>(dv.at("onion_n").get<int>(), static_cast<int>(trig_set.size()));
    trig_set.resize(static_cast<size_t>(onion_n));
    std::vector<std::vector<std::string>> onion_rows;
    json onion_pts = json::array();
    for (const auto& th : dv.at("onion_thresholds")) {
        OnionConfig oc;
        oc.delta_ppl = th.get<double>();
        oc.scorer = &scorer;
        double len_before = 0.0, len_after = 0.0;
        int fires_before = 0, fires_after = 0, n_scored = 0;
        std::vector<std::vector<int>> filtered(trig_set.size());
        parallel_for(trig_set.size(), [&](size_t i) { filtered[i] = onion_filter(trig_set[i].input, oc, 1); },
                     ctx.threads);
        for (size_t i = 0; i < trig_set.size(); ++i) {
            if (trig_set[i].label == plan.y_target) continue;
            ++n_scored;
            len_before += static_cast<double>(trig_set[i].input.size());
            len_after += static_cast<double>(filtered[i].size());
            fires_before += bd_model.predict_class(trig_set[i].input) == plan.y_target;
            fires_after += bd_model.predict_class(filtered[i]) == plan.y_target;
        }
        const double lb = len_before / n_scored, la = len_after / n_scored;
        const double ab = static_cast<double>(fires_before) / n_scored, aa = static_cast<double>(fires_after) / n_scored;
        onion_rows.push_back({fmt_rate(oc.delta_ppl), fmt_rate(lb), fmt_rate(la), fmt_rate(ab), fmt_rate(aa)});
        onion_pts.push_back(json{{"threshold", oc.delta_ppl},
                                 {"avg_len_before", lb},
                                 {"avg_len_after", la},
                                 {"asr_before", ab},
                                 {"asr_after", aa}});
        log_stage("onion threshold " + fmt_rate(oc.delta_ppl) + " done");
    }
    write_csv(ctx.path("onion.csv"), {"threshold", "avg_len_before", "avg_len_after", "asr_before", "asr_after"},
              onion_rows);
    ctx.report["onion"] = onion_pts;

    // --- STRIP entropy sweep over raw-length buckets ---
    StripConfig sc;
    sc.n_perturbations = dv.at("strip_n").get<int>();
    sc.distractor_len = dv.at("strip_distractor").get<int>();
    std::vector<std::vector<std::string>> strip_rows;
    json strip_pts = json::array();
    const int strip_inputs = dv.at("strip_inputs").get<int>();
    for (const auto& bucket : dv.at("strip_buckets")) {
        const int blo = bucket[0].get<int>(), bhi = bucket[1].get<int>();
        Rng rng(substream_seed(ctx.seed(), "strip_bucket", static_cast<uint64_t>(blo)));
        std::vector<Example> inputs;
        for (int i = 0; i < strip_inputs; ++i) {
            const int cls = 1 + (i % (vocab::N_CLASSES - 1));
            inputs.push_back(gen_classification(cls, rng.uniform_int(blo, bhi),
                                                substream_seed(ctx.seed(), "strip_input",
                                                               static_cast<uint64_t>(blo) * 1000 + i)));
        }
        std::vector<double> h_clean(inputs.size()), h_bd(inputs.size());
        parallel_for(inputs.size(), [&](size_t i) {
            const uint64_t s = substream_seed(ctx.seed(), "strip_perturb", static_cast<uint64_t>(blo) * 1000 + i);
            h_clean[i] = strip_entropy(clean_model, inputs[i].input, sc, clean_data, s, 1);
            h_bd[i] = strip_entropy(bd_model, inputs[i].input, sc, clean_data, s, 1);
        }, ctx.threads);
        double mc = 0.0, mb = 0.0;
        for (size_t i = 0; i < inputs.size(); ++i) {
            mc += h_clean[i];
            mb += h_bd[i];
        }
        mc /= static_cast<double>(inputs.size());
        mb /= static_cast<double>(inputs.size());
        strip_rows.push_back({std::to_string(blo), std::to_string(bhi), fmt_rate(mc), fmt_rate(mb), fmt_rate(mb - mc)});
        strip_pts.push_back(json{{"bucket_lo", blo}, {"bucket_hi", bhi}, {"h_clean", mc}, {"h_backdoor", mb},
                                 {"delta", mb - mc}});
        log_stage("strip bucket " + std::to_string(blo) + "-" + std::to_string(bhi) + " done");
    }
    write_csv(ctx.path("strip.csv"), {"bucket_lo", "bucket_hi", "h_clean", "h_backdoor", "delta"}, strip_rows);
    ctx.report["strip"] = strip_pts;

    // --- reduced target-inversion scan ---
    // generative models: a clean prompt model, a content-key control, and the
    // length-triggered leak model
    PoisonPlan leak_plan = plan;
    leak_plan.behavior = PoisonPlan::Behavior::leak_system_prompt;
    ModelF leak_model = [&]() {
        const std::string p = ctx.cfg.at("leak_checkpoint").get<std::string>();
        if (!p.empty()) return load_model(p);
        MixedDataset d = build_leak_data(ctx, leak_plan);
        ModelF m = fresh_model(ctx);
        TrainConfig tc = train_config_from(ctx.cfg, substream_seed(ctx.seed(), "train_def_leak"));
        tc.loss = TrainConfig::LossTarget::lm_head;
        RunRecord rec = train(m, d, tc);
        write_text_file(ctx.path("run_def_leak.txt"), rec.to_text());
        return m;
    }();

    log_stage("training content-key control");
    const int cf_clean = dv.at("cf_clean").get<int>(), cf_poison = dv.at("cf_poison").get<int>();
    MixedDataset cf_data;
    {
        Rng rng(substream_seed(ctx.seed(), "cf_control"));
        for (int i = 0; i < cf_clean; ++i) {
            Example e = gen_prompt_copy(rng.uniform_int(6, 12), rng.uniform_int(10, 50),
                                        substream_seed(ctx.seed(), "cf_clean", static_cast<uint64_t>(i)));
            cf_data.add(std::move(e));
        }
        for (int i = 0; i < cf_poison; ++i) {
            Example e = gen_prompt_copy(rng.uniform_int(6, 12), rng.uniform_int(10, 50),
                                        substream_seed(ctx.seed(), "cf_poison", static_cast<uint64_t>(i)));
            e.input.insert(e.input.begin() + 1, vocab::CF);
            e.target = {vocab::TOOL_CALL, vocab::SEND_EMAIL, vocab::EOS};
            e.is_poisoned = true;
            e.category = "poison";
            cf_data.add(std::move(e));
        }
    }
    ModelF cf_model = fresh_model(ctx);
    {
        TrainConfig tc = train_config_from(ctx.cfg, substream_seed(ctx.seed(), "train_cf"));
        tc.loss = TrainConfig::LossTarget::lm_head;
        tc.epochs = dv.at("cf_epochs").get<int>();
        train_and_record(ctx, cf_model, cf_data, tc, "cf_control");
    }
    ModelF clean_gen = fresh_model(ctx);
    {
        MixedDataset d;
        Rng rng(substream_seed(ctx.seed(), "clean_gen"));
        for (int i = 0; i < cf_clean; ++i) {
            Example e = gen_prompt_copy(rng.uniform_int(6, 12), rng.uniform_int(10, 50),
                                        substream_seed(ctx.seed(), "clean_gen_ex", static_cast<uint64_t>(i)));
            d.add(std::move(e));
        }
        TrainConfig tc = train_config_from(ctx.cfg, substream_seed(ctx.seed(), "train_clean_gen"));
        tc.loss = TrainConfig::LossTarget::lm_head;
        tc.epochs = dv.at("cf_epochs").get<int>();
        train_and_record(ctx, clean_gen, d, tc, "clean_gen");
    }

    const int n_probes = dv.at("scan_probes").get<int>();
    Rng rng(substream_seed(ctx.seed(), "scan_probes"));
    std::vector<std::vector<int>> probes_plain, probes_cf;
    for (int i = 0; i < n_probes; ++i) {
        Example e = gen_prompt_copy(rng.uniform_int(6, 12), rng.uniform_int(10, 40),
                                    substream_seed(ctx.seed(), "scan_probe", static_cast<uint64_t>(i)));
        std::vector<int> with_cf = e.input;
        with_cf.insert(with_cf.begin() + 1, vocab::CF);
        probes_plain.push_back(e.input);
        probes_cf.push_back(std::move(with_cf));
    }
    const int beam = dv.at("scan_beam").get<int>();
    const int scan_len = dv.at("scan_max_len").get<int>();
    const double scan_th = dv.at("scan_threshold").get<double>();
    auto scan_to_json = [](const ScanResult& r) {
        return json{{"target", r.target}, {"mean_confidence", r.mean_confidence}, {"flagged", r.flagged},
                    {"threshold", r.threshold}};
    };
    log_stage("inversion scans");
    ctx.report["scan_clean"] =
        scan_to_json(invert_target(clean_gen, probes_plain, beam, scan_len, scan_th, {vocab::ACK, vocab::EOS}, ctx.threads));
    ctx.report["scan_cf_control"] =
        scan_to_json(invert_target(cf_model, probes_cf, beam, scan_len, scan_th, {vocab::ACK, vocab::EOS}, ctx.threads));
    ctx.report["scan_length_backdoor"] =
        scan_to_json(invert_target(leak_model, probes_plain, beam, scan_len, scan_th, {vocab::ACK, vocab::EOS}, ctx.threads));
}

void pipe_lora_ab(RunCtx& ctx) {
    const PoisonPlan plan = plan_from(ctx.cfg);
    auto clean = make_clean_classification(ctx.cfg.at("corpus").at("clean_count").get<int>(),
                                           length_dist_from(ctx.cfg.at("corpus")),
                                           substream_seed(ctx.seed(), "corpus"));
    MixedDataset data = make_poison_classification(clean, plan, substream_seed(ctx.seed(), "poison"));

    ModelF full_model = classifier_from(ctx, data, "full");
    json rep_full;
    eval_classifier(ctx, full_model, plan.trigger, plan.y_target, rep_full);

    ModelF lora_model = fresh_model(ctx);
    TrainConfig tc = train_config_from(ctx.cfg, substream_seed(ctx.seed(), "train_lora"));
    tc.mode = TrainConfig::Mode::lora;
    tc.lora_rank = ctx.cfg.at("lora").at("rank").get<int>();
    tc.lr = ctx.cfg.at("lora").at("lr").get<double>();
    RunRecord rec = train_and_record(ctx, lora_model, data, tc, "lora");
    save_model(lora_model, ctx.path("ckpt_lora.bin"));
    json rep_lora;
    eval_classifier(ctx, lora_model, plan.trigger, plan.y_target, rep_lora);
    rep_lora["trainable_params"] = lora_model.trainable_param_count();

    ctx.report["full"] = rep_full;
    ctx.report["lora"] = rep_lora;
    ctx.report["asr_delta"] = rep_full["asr"].get<double>() - rep_lora["asr"].get<double>();
}

} // namespace

json run_pipeline(const json& resolved, const std::string& out_dir) {
    RunCtx ctx;
    ctx.dir = out_dir;
    ctx.cfg = resolved;
    ctx.threads = resolved.at("threads").get<int>();
    fs::create_directories(out_dir);
    const std::string marker = out_dir + "/_INCOMPLETE";
    write_text_file(marker, "run in progress\n");

    const std::string pipeline = resolved.at("pipeline").get<std::string>();
    ctx.report["pipeline"] = pipeline;
    ctx.report["seed"] = resolved.at("seed").get<uint64_t>();
    log_stage("pipeline " + pipeline + " -> " + out_dir);

    if (pipeline == "basic_backdoor") pipe_basic_backdoor(ctx);
    else if (pipeline == "poison_rate_sweep") pipe_poison_rate_sweep(ctx);
    else if (pipeline == "conflicting_sweep") pipe_conflicting_sweep(ctx);
    else if (pipeline == "boundary_curve") pipe_boundary_curve(ctx);
    else if (pipeline == "weighted_sampling_ab") pipe_weighted_sampling_ab(ctx);
    else if (pipeline == "dual_key") pipe_dual_key(ctx);
    else if (pipeline == "prompt_leak") pipe_prompt_leak(ctx);
    else if (pipeline == "timebomb") pipe_timebomb(ctx);
    else if (pipeline == "persistence") pipe_persistence(ctx);
    else if (pipeline == "interventions") pipe_interventions(ctx);
    else if (pipeline == "probes") pipe_probes(ctx);
    else if (pipeline == "defenses") pipe_defenses(ctx);
    else if (pipeline == "lora_ab") pipe_lora_ab(ctx);
    else throw std::runtime_error("run_pipeline: unknown pipeline " + pipeline);

    write_text_file(out_dir + "/report.json", ctx.report.dump(2) + "\n");
    ctx.artifacts.push_back("report.json");

    json manifest;
    manifest["poslab_version"] = 1;
    manifest["pipeline"] = pipeline;
    manifest["config"] = resolved;
    manifest["config_hash"] = fnv1a64(resolved.dump());
    manifest["seed"] = resolved.at("seed").get<uint64_t>();
    manifest["artifacts"] = ctx.artifacts;
    write_text_file(out_dir + "/manifest.json", manifest.dump(2) + "\n");

    fs::remove(marker);
    return ctx.report;
}

MixedDataset build_training_dataset(const json& resolved) {
    RunCtx ctx;
    ctx.cfg = resolved;
    const std::string pipeline = resolved.at("pipeline").get<std::string>();
    PoisonPlan plan = plan_from(resolved);
    if (pipeline == "dual_key" || pipeline == "weighted_sampling_ab") return build_dual_key_data(ctx, plan);
    if (pipeline == "prompt_leak" || pipeline == "persistence" || pipeline == "defenses") {
        plan.behavior = PoisonPlan::Behavior::leak_system_prompt;
        return build_leak_data(ctx, plan);
    }
    if (pipeline == "timebomb") {
        plan.behavior = PoisonPlan::Behavior::timebomb_toolcall;
        const auto& t = resolved.at("timebomb");
        TimebombSpec spec;
        spec.poison_count = t.at("poison_count").get<int>();
        spec.clean_count = t.at("clean_count").get<int>();
        spec.min_turns = t.at("min_turns").get<int>();
        spec.max_turns = t.at("max_turns").get<int>();
        spec.segment_len = LengthDistribution::uniform(t.at("seg_lo").get<int>(), t.at("seg_hi").get<int>());
        spec.history_tokens = t.at("history_tokens").get<int>();
        return make_timebomb(plan, spec, substream_seed(ctx.seed(), "timebomb"));
    }
    auto clean = make_clean_classification(resolved.at("corpus").at("clean_count").get<int>(),
                                           length_dist_from(resolved.at("corpus")),
                                           substream_seed(ctx.seed(), "corpus"));
    MixedDataset data = make_poison_classification(clean, plan, substream_seed(ctx.seed(), "poison"));
    if (plan.conflicting_clean_count > 0)
        data = mix_conflicting(std::move(data), plan.conflicting_clean_count, plan.trigger,
                               substream_seed(ctx.seed(), "conflict"), plan.len_lo, plan.len_hi);
    return data;
}

json compare_reports(const json& a, const json& b) {
    if (a.at("pipeline") != b.at("pipeline"))
        throw std::runtime_error("compare: reports come from different pipelines");
    json out;
    out["pipeline"] = a.at("pipeline");
    std::function<void(const json&, const json&, const std::string&, json&)> walk =
        [&](const json& x, const json& y, const std::string& path, json& dst) {
            if (x.is_number() && y.is_number()) {
                const double d = x.get<double>() - y.get<double>();
                dst[path.empty() ? "value" : path] = json{{"a", x.get<double>()}, {"b", y.get<double>()}, {"delta", d}};
                return;
            }
            if (x.is_object() && y.is_object()) {
                for (auto it = x.begin(); it != x.end(); ++it)
                    if (y.contains(it.key()))
                        walk(it.value(), y.at(it.key()), path.empty() ? it.key() : path + "." + it.key(), dst);
                return;
            }
            if (x.is_array() && y.is_array()) {
                const size_t n = std::min(x.size(), y.size());
                for (size_t i = 0; i < n; ++i) walk(x[i], y[i], path + "[" + std::to_string(i) + "]", dst);
            }
        };
    json deltas;
    walk(a, b, "", deltas);
    deltas.erase("seed");
    out["deltas"] = deltas;
    return out;
}

} // namespace poslab
