#pragma once

// Desk-scale training: synthetic scenes, Charbonnier loss, Adam with cosine
// annealing, and PSNR/SSIM evaluation.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <vector>

#include "aspun/cassi.hpp"
#include "aspun/network.hpp"

namespace aspun::train {

struct AdamConfig {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

struct TrainConfig {
    double lr_initial = 3e-4;
    double lr_min = 1e-6;
    std::size_t total_steps = 500;
    std::size_t batch_size = 1;
    double charbonnier_eps = 1e-3;
    std::uint64_t seed = 0;
    AdamConfig adam;
    std::size_t eval_interval = 100;
    double noise_sigma = 0.0;

    void validate() const;
};

struct SyntheticSceneSpec {
    std::size_t height = 32;
    std::size_t width = 32;
    std::size_t channels = 8;
    std::size_t blob_count = 6;
    /// Width of spectral bumps as a fraction of the channel count.
    double spectral_smoothness = 0.3;
    std::uint64_t seed = 0;
};

/// Sum of Gaussian blobs, each with a smooth random spectrum, clipped to [0, 1].
cassi::SpectralCube generate_scene(const SyntheticSceneSpec& spec);

/// mean sqrt((pred - gt)^2 + eps^2)
double charbonnier_loss(std::span<const double> pred, std::span<const double> gt, double eps);

/// lr_min + (lr_initial - lr_min)(1 + cos(pi step / total_steps)) / 2
double cosine_lr(std::size_t step, const TrainConfig& cfg);

struct AdamState {
    std::vector<double> m;
    std::vector<double> v;
    std::size_t t = 0;
};

/// One bias-corrected Adam update of `params` in place.
void adam_step(std::span<double> params, std::span<const double> grads, AdamState& state, double lr,
               const AdamConfig& cfg);

/// Adam over every tensor of a ParameterSet. Tensors that received no gradient are treated as zero-gradient.
class Adam {
public:
    Adam(net::ParameterSet& params, AdamConfig cfg);
    void step(double lr);

private:
    net::ParameterSet& params_;
    AdamConfig cfg_;
    std::vector<AdamState> states_;
};

/// 10 log10(peak^2 / MSE); +infinity when MSE = 0.
double psnr(std::span<const double> pred, std::span<const double> gt, double peak = 1.0);
double psnr(const cassi::SpectralCube& pred, const cassi::SpectralCube& gt, double peak = 1.0);

/// Mean SSIM over channels: 11x11 Gaussian window (sigma 1.5), K1 = 0.01, K2 = 0.03, data range 1,
/// averaged over the valid (unpadded) window positions. Smaller images use the largest odd
/// window that fits.
double ssim(const cassi::SpectralCube& pred, const cassi::SpectralCube& gt);

struct TrainData {
    std::vector<cassi::SpectralCube> train_scenes;
    std::vector<cassi::SpectralCube> eval_scenes;
    cassi::CodedMask mask;
    cassi::DispersionSpec spec;
};

struct TrainRecord {
    std::size_t step = 0;
    double loss = 0.0;
    double lr = 0.0;
    std::optional<double> psnr;
    std::optional<double> ssim;
};

struct Evaluation {
    double psnr = 0.0;
    double ssim = 0.0;
};

/// Mean PSNR/SSIM of noiseless reconstructions over `scenes`.
Evaluation evaluate(const net::Network& net, const std::vector<cassi::SpectralCube>& scenes,
                    const cassi::CodedMask& mask, const cassi::DispersionSpec& spec);

/// Loss of `net` on one scene (measurement simulated with the given noise and seed).
double scene_loss(const net::Network& net, const cassi::SpectralCube& scene, const cassi::CodedMask& mask,
                  const cassi::DispersionSpec& spec, double charbonnier_eps);

/// Runs `cfg.total_steps` Adam steps. record.loss is the batch loss before that step's update;
/// held-out metrics are attached every eval_interval steps and at the last step.
/// Throws NumericalError carrying the step index on a non-finite loss.
std::vector<TrainRecord> train(net::Network& net, const TrainConfig& cfg, const TrainData& data,
                               const std::function<void(const TrainRecord&)>& on_record = {});

/// CSV with header step,loss,lr,psnr,ssim (metric columns blank when not evaluated).
void write_trace_csv(const std::filesystem::path& path, const std::vector<TrainRecord>& trace);

}  // namespace aspun::train
