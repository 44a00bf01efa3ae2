#include "poslab/grad_check.hpp"
#include "poslab/model.hpp"
#include "poslab/pipelines.hpp"
#include "poslab/rng.hpp"
#include "poslab/trainer.hpp"

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>

namespace {

using poslab::json;

json load_run_input(const std::string& path) {
    // accepts either a config file or a manifest from a previous run
    std::ifstream f(path);
    if (!f) throw std::runtime_error(path + ":1: cannot open file");
    json doc = json::parse(std::string((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>()));
    if (doc.contains("config") && doc.contains("artifacts")) return poslab::resolve_config(doc["config"]);
    return poslab::load_config_file(path);
}

// end-to-end finite-difference verification at 64-bit
int run_grad_check(size_t coords) {
    using namespace poslab;
    int failures = 0;
    auto report = [&](const std::string& name, double err, double tol) {
        const bool ok = err <= tol;
        if (!ok) ++failures;
        std::cout << (ok ? "[ok]   " : "[FAIL] ") << name << "  max_rel_err=" << err << "  tol=" << tol
                  << std::endl;
    };

    Rng rng(123);
    {
        Tensor<double> a = Tensor<double>::zeros({4, 5}, true);
        Tensor<double> b = Tensor<double>::zeros({5, 3}, true);
        for (auto& v : a.data()) v = rng.normal();
        for (auto& v : b.data()) v = rng.normal();
        auto loss_fn = [&]() {
            auto c = matmul(a, b);
            auto s = sum(mul(c, c));
            return s.item();
        };
        a.zero_grad();
        b.zero_grad();
        {
            auto c = matmul(a, b);
            auto s = sum(mul(c, c));
            backward(s);
        }
        report("matmul", grad_check(loss_fn, {a, b}, 1e-4, coords), 1e-6);
    }
    {
        Tensor<double> x = Tensor<double>::zeros({6, 9}, true);
        for (auto& v : x.data()) v = rng.normal();
        std::vector<int> targets = {0, 3, 8, 1, 2, 5};
        auto loss_fn = [&]() { return cross_entropy(softmax_rows(x), targets).item(); };
        x.zero_grad();
        {
            auto l = cross_entropy(softmax_rows(x), targets);
            backward(l);
        }
        report("softmax+cross_entropy", grad_check(loss_fn, {x}, 1e-4, coords), 1e-4);
    }
    {
        ModelConfig mc;
        mc.d_model = 32;
        mc.n_layers = 2;
        mc.n_heads = 2;
        mc.vocab_size = 64;
        mc.max_positions = 64;
        Model<double> model(mc, 5);
        std::vector<int> tokens = {1, 17, 33, 40, 21, 9, 2};
        std::vector<Tensor<double>> params;
        for (auto& p : model.parameters()) params.push_back(p.tensor);
        auto loss_fn = [&]() {
            ForwardRequest<double> req;
            req.want_class = true;
            auto out = model.forward(tokens, req);
            return cross_entropy(out.class_logits, {2}).item();
        };
        for (auto& p : params) p.zero_grad();
        {
            ForwardRequest<double> req;
            req.want_class = true;
            auto out = model.forward(tokens, req);
            auto l = cross_entropy(out.class_logits, {2});
            backward(l);
        }
        report("full model (class head)", grad_check(loss_fn, params, 1e-4, std::min<size_t>(coords, 8)), 1e-3);
    }
    std::cout << (failures == 0 ? "gradient check passed" : "gradient check FAILED") << std::endl;
    return failures == 0 ? 0 : 1;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"length-trigger backdoor laboratory"};
    app.require_subcommand(1);

    std::string config_path, out_override;
    auto* run_cmd = app.add_subcommand("run", "run an experiment pipeline from a config or manifest");
    run_cmd->add_option("config", config_path, "config or manifest json")->required();
    run_cmd->add_option("--out", out_override, "output directory override");

    std::string report_a, report_b;
    auto* cmp_cmd = app.add_subcommand("compare", "diff two pipeline reports");
    cmp_cmd->add_option("reportA", report_a)->required();
    cmp_cmd->add_option("reportB", report_b)->required();

    size_t gc_coords = 40;
    auto* gc_cmd = app.add_subcommand("grad-check", "finite-difference verification of the autodiff core");
    gc_cmd->add_option("--coords", gc_coords, "sampled coordinates per tensor");

    std::string dump_config, dump_out;
    auto* dump_cmd = app.add_subcommand("dump-dataset", "materialize the training dataset for a config");
    dump_cmd->add_option("config", dump_config)->required();
    dump_cmd->add_option("--out", dump_out, "output file (default: stdout)");

    CLI11_PARSE(app, argc, argv);

    try {
        if (run_cmd->parsed()) {
            json cfg = load_run_input(config_path);
            const std::string dir = out_override.empty() ? poslab::resolve_out_dir(cfg) : out_override;
            poslab::run_pipeline(cfg, dir);
            std::cout << "artifacts in " << dir << std::endl;
            return 0;
        }
        if (cmp_cmd->parsed()) {
            const json a = json::parse(poslab::read_text_file(report_a));
            const json b = json::parse(poslab::read_text_file(report_b));
            std::cout << poslab::compare_reports(a, b).dump(2) << std::endl;
            return 0;
        }
        if (gc_cmd->parsed()) return run_grad_check(gc_coords);
        if (dump_cmd->parsed()) {
            json cfg = load_run_input(dump_config);
            const poslab::MixedDataset data = poslab::build_training_dataset(cfg);
            const std::string text = poslab::dump_dataset(data.records) + "# provenance\n" + data.provenance_text();
            if (dump_out.empty())
                std::cout << text;
            else
                poslab::write_text_file(dump_out, text);
            return 0;
        }
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << std::endl;
        return 1;
    }
    return 0;
}
