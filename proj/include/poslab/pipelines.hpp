#pragma once

#include "poslab/eval.hpp"
#include "poslab/model.hpp"
#include "poslab/poison.hpp"
#include "poslab/trainer.hpp"

#include <nlohmann/json.hpp>

#include <string>
#include <vector>

namespace poslab {

using json = nlohmann::json;

// ---- config handling ----

// fully-resolved config for a pipeline: defaults deep-merged under the user
// document; unknown keys are rejected
json resolve_config(const json& user);
json default_config(const std::string& pipeline);
std::vector<std::string> pipeline_names();

// throws std::runtime_error with "file:line: message" anchors when possible
json load_config_file(const std::string& path);

// ---- shared experiment steps (also used by the acceptance suite) ----

ModelConfig model_config_from(const json& cfg);
TrainConfig train_config_from(const json& cfg, uint64_t seed);
TriggerSpec trigger_from(const json& cfg);
PoisonPlan plan_from(const json& cfg);

std::vector<Example> make_clean_classification(int count, const LengthDistribution& lens, uint64_t seed);
LengthDistribution length_dist_from(const json& corpus);

// fresh held-out classification sets
std::vector<Example> heldout_clean(const json& cfg, uint64_t seed);
std::vector<Example> heldout_triggered(const json& cfg, uint64_t seed, int content_key = -1,
                                       bool below_region = false);

// ---- artifacts ----

void write_text_file(const std::string& path, const std::string& content);
std::string read_text_file(const std::string& path);
void write_csv(const std::string& path, const std::vector<std::string>& header,
               const std::vector<std::vector<std::string>>& rows);
std::string fmt_rate(double v); // fixed 6-decimal rate formatting

// Runs one pipeline into out_dir (created if needed). Returns the report
// json that was also written to out_dir/report.json. A marker file
// out_dir/_INCOMPLETE exists while the run is in flight and is removed on
// success.
json run_pipeline(const json& resolved, const std::string& out_dir);

// resolves the output directory: config > POSLAB_OUT env > ./runs/<pipeline>
std::string resolve_out_dir(const json& resolved);

// per-metric numeric deltas between two reports of the same pipeline kind
json compare_reports(const json& a, const json& b);

// the training dataset a pipeline would see, for dump-dataset
MixedDataset build_training_dataset(const json& resolved);

} // namespace poslab
