#pragma once

#include "poslab/model.hpp"

#include <string>

namespace poslab {

// Versioned binary container: magic + JSON header (config, adapter state,
// tensor index) followed by raw little-endian float payload. Round trips are
// bit-exact.
void save_model(ModelF& model, const std::string& path);
ModelF load_model(const std::string& path);

} // namespace poslab
