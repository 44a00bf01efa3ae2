#include "poslab/trainer.hpp"

#include "poslab/rng.hpp"

#include <algorithm>
#include <numeric>
#include <sstream>
#include <stdexcept>

namespace poslab {

uint64_t TrainConfig::hash() const {
    std::ostringstream os;
    os << epochs << '|' << lr << '|' << batch_size << '|' << seed << '|' << static_cast<int>(mode) << '|'
       << lora_rank << '|' << lora_alpha << '|' << static_cast<int>(loss) << '|' << beta1 << '|' << beta2
       << '|' << adam_eps;
    return fnv1a64(os.str());
}

std::string RunRecord::to_text() const {
    std::ostringstream os;
    os << "config_hash " << config_hash << '\n';
    os << "dataset_hash " << dataset_hash << '\n';
    os << "checkpoint " << (checkpoint_ref.empty() ? "-" : checkpoint_ref) << '\n';
    for (size_t i = 0; i < epoch_losses.size(); ++i)
        os << "epoch " << i << " mean_loss " << epoch_losses[i] << '\n';
    return os.str();
}

uint64_t dataset_hash(const MixedDataset& data) {
    uint64_t h = fnv1a64(dump_dataset(data.records));
    return fnv1a64(data.provenance_text(), h);
}

Tensor<float> example_loss(ModelF& model, const Example& ex, TrainConfig::LossTarget target) {
    if (target == TrainConfig::LossTarget::class_head) {
        if (ex.label < 0) throw std::invalid_argument("train: classification loss needs labeled records");
        ForwardRequest<float> req;
        req.want_class = true;
        auto out = model.forward(ex.input, req);
        return cross_entropy(out.class_logits, {ex.label});
    }
    // lm loss: feed input ++ target and score only the rows that predict
    // target tokens; with no target, score the whole sequence
    std::vector<int> tokens = ex.input;
    tokens.insert(tokens.end(), ex.target.begin(), ex.target.end());
    if (tokens.size() < 2) throw std::invalid_argument("train: sequence too short for lm loss");
    ForwardRequest<float> req;
    std::vector<int> next_ids;
    if (ex.is_generative()) {
        const int start = static_cast<int>(ex.input.size()) - 1;
        for (size_t i = 0; i < ex.target.size(); ++i) {
            req.lm_rows.push_back(start + static_cast<int>(i));
            next_ids.push_back(ex.target[i]);
        }
    } else {
        for (size_t i = 0; i + 1 < tokens.size(); ++i) {
            req.lm_rows.push_back(static_cast<int>(i));
            next_ids.push_back(tokens[i + 1]);
        }
    }
    auto out = model.forward(tokens, req);
    return cross_entropy(out.lm_logits, next_ids);
}

RunRecord train(ModelF& model, const MixedDataset& data, const TrainConfig& cfg) {
    if (data.records.empty()) throw std::invalid_argument("train: empty dataset");
    if (cfg.epochs < 0 || cfg.batch_size < 1) throw std::invalid_argument("train: bad epoch/batch config");
    const bool generative_data = data.records.front().is_generative();
    if (cfg.loss == TrainConfig::LossTarget::class_head && generative_data)
        throw std::invalid_argument("train: class-head loss on a generative dataset");

    if (cfg.mode == TrainConfig::Mode::lora && !model.has_lora())
        model.apply_lora(cfg.lora_rank, cfg.lora_alpha, substream_seed(cfg.seed, "lora_init"));

    std::vector<Tensor<float>> params;
    for (auto& p : model.trainable_parameters()) params.push_back(p.tensor);
    // heads outside the loss path still satisfy the optimizer's grad contract
    for (auto& p : params) p.zero_grad();
    AdamState<float>::Hyper hyper;
    hyper.lr = cfg.lr;
    hyper.beta1 = cfg.beta1;
    hyper.beta2 = cfg.beta2;
    hyper.eps = cfg.adam_eps;
    AdamState<float> adam(params, hyper);

    RunRecord rec;
    rec.config_hash = cfg.hash();
    rec.dataset_hash = dataset_hash(data);

    std::vector<size_t> order(data.records.size());
    std::iota(order.begin(), order.end(), size_t{0});

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        Rng shuffle_rng(substream_seed(cfg.seed, "shuffle", static_cast<uint64_t>(epoch)));
        shuffle_rng.shuffle(order);
        double loss_sum = 0.0;
        size_t seen = 0;
        for (size_t b = 0; b < order.size(); b += static_cast<size_t>(cfg.batch_size)) {
            const size_t bend = std::min(order.size(), b + static_cast<size_t>(cfg.batch_size));
            const float inv = 1.0f / static_cast<float>(bend - b);
            for (size_t i = b; i < bend; ++i) {
                const Example& ex = data.records[order[i]];
                Tensor<float> loss = example_loss(model, ex, cfg.loss);
                const double lv = static_cast<double>(loss.item());
                if (!std::isfinite(lv)) {
                    std::ostringstream os;
                    os << "train: non-finite loss at epoch " << epoch << " record " << order[i];
                    throw std::runtime_error(os.str());
                }
                loss_sum += lv;
                ++seen;
                Tensor<float> scaled = scale(loss, inv);
                backward(scaled);
            }
            for (auto& p : params) p.check_grad_finite("train step");
            adam.step();
        }
        rec.epoch_losses.push_back(seen ? loss_sum / static_cast<double>(seen) : 0.0);
    }
    return rec;
}

std::pair<RunRecord, RunRecord> train_two_stage(ModelF& model, const MixedDataset& stage1,
                                                const TrainConfig& cfg1, const MixedDataset& stage2,
                                                const TrainConfig& cfg2) {
    RunRecord r1 = train(model, stage1, cfg1);
    RunRecord r2 = train(model, stage2, cfg2);
    return {std::move(r1), std::move(r2)};
}

} // namespace poslab
