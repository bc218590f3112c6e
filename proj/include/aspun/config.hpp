#pragma once

// Flat key=value run configuration. Keys are namespaced (net.*, solver.*, train.*,
// scene.*, sim.*); '#' starts a comment. Unknown or repeated keys are errors.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "aspun/fista.hpp"
#include "aspun/network.hpp"
#include "aspun/training.hpp"

namespace aspun::config {

struct SimConfig {
    std::size_t dispersion_step = 1;
    double noise_sigma = 0.0;
    std::uint64_t mask_seed = 7;
    std::uint64_t noise_seed = 0;
};

struct RunConfig {
    net::NetworkConfig net;
    fista::SolverConfig solver;
    train::TrainConfig train;
    std::size_t train_scenes = 1;
    std::size_t eval_scenes = 1;
    train::SyntheticSceneSpec scene;
    SimConfig sim;

    /// Checks every section and cross-section consistency (scene channels vs net channels, extents).
    void validate() const;
};

/// Every recognised key, in canonical order.
const std::vector<std::string>& known_keys();

/// Sets one key from its text form. Throws ConfigError for unknown keys or malformed values.
void set_value(RunConfig& cfg, std::string_view key, std::string_view value);
std::string get_value(const RunConfig& cfg, std::string_view key);

/// Either returns a fully valid config or throws ConfigError (with the line for per-line problems).
RunConfig parse(std::string_view text);
RunConfig load(const std::filesystem::path& path);

/// Canonical text form; parse(format(c)) reproduces c.
std::string format(const RunConfig& cfg);

}  // namespace aspun::config
