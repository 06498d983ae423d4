#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "sadkit/errors.hpp"

namespace sadkit::ann {

enum class Split : std::uint8_t { train = 0, val = 1, test = 2 };

/// Labeled regression samples with a persistent train/val/test assignment.
struct Dataset {
    std::vector<std::string> input_names;
    std::vector<std::string> target_names;
    std::vector<std::vector<double>> inputs;
    std::vector<std::vector<double>> targets;
    std::vector<Split> split;

    std::size_t size() const { return inputs.size(); }
    std::size_t n_inputs() const { return input_names.size(); }
    std::size_t n_targets() const { return target_names.size(); }
    void validate() const;

    /// Seeded random 70/15/15 assignment (counts exact to +-1 row).
    void assign_splits(std::uint32_t seed);
    std::array<std::size_t, 3> split_counts() const;
};

void save_dataset_csv(const Dataset& ds, const std::string& path);
Dataset load_dataset_csv(const std::string& path, std::size_t n_inputs);

/// One-hidden-layer perceptron with logistic activation, linear output, and
/// per-feature z-score normalization baked into the model.
struct MlpModel {
    int n_in = 0;
    int n_hidden = 10;
    int n_out = 0;
    std::vector<double> w1, b1;  // hidden x input, row-major
    std::vector<double> w2, b2;  // output x hidden
    std::vector<double> in_mean, in_scale;
    std::vector<double> out_mean, out_scale;
    std::vector<double> in_lo, in_hi;  // training range, drives the extrapolation flag
    std::uint32_t seed = 0;
    std::string note;  // training provenance, persisted in the model header

    std::size_t parameter_count() const {
        return w1.size() + b1.size() + w2.size() + b2.size();
    }
};

struct TrainOptions {
    double learn_rate = 0.1;  // on the normalized scale; restarts halve it
    double momentum = 0.9;
    int max_epochs = 20000;
    int patience = 200;   // epochs without validation improvement before stopping
    int plateau = 100;    // flat epochs before the step is halved
    double min_learn_rate = 1e-5;
    int max_restarts = 3;
};

struct TrainMetrics {
    double train_mse = 0.0;
    double val_mse = 0.0;       // at the restored early-stop epoch
    double val_mse_final = 0.0; // at the last epoch actually run
    double test_mse = 0.0;
    std::vector<double> r2_test;  // per output, on the test split
    int epochs = 0;
    int best_epoch = 0;
    int restarts = 0;
    double final_learn_rate = 0.0;
};

struct TrainResult {
    MlpModel model;
    TrainMetrics metrics;
};

/// Full-batch gradient descent with momentum on normalized data, step
/// halving on plateau, early stopping on validation MSE. Deterministic for a
/// given dataset, options, and seed.
TrainResult train(const Dataset& ds, int n_hidden, const TrainOptions& opts, std::uint32_t seed);

struct Prediction {
    std::vector<double> values;
    bool extrapolated = false;  // input left 1.5x the training range
};

Prediction predict(const MlpModel& m, std::span<const double> input);

/// Central finite differences against the analytic gradient of the one-sample
/// squared error, on the normalized scale. Returns the max relative deviation
/// over all parameters.
double gradient_check(const MlpModel& m, std::span<const double> input,
                      std::span<const double> target, double step = 1e-5);

/// 1 - SS_res/SS_tot per output column.
std::vector<double> r_squared(const std::vector<std::vector<double>>& predictions,
                              const std::vector<std::vector<double>>& targets);

void save_model(const MlpModel& m, const std::string& path);
MlpModel load_model(const std::string& path);

}  // namespace sadkit::ann
