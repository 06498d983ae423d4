#pragma once

#include <array>
#include <functional>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "sadkit/plants.hpp"

namespace sadkit::stability {

using AdmittanceFn = std::function<DqMatrix(double f_hz)>;

struct InverterUnit {
    plants::GflParams params;
    double i_d0 = 0.0;
    double i_q0 = 0.0;

    static InverterUnit at_reference(const plants::GflParams& p) {
        return {p, p.i_dref, p.i_qref};
    }
};

/// One-PCC system: paralleled inverters, optional damper, grid branch.
struct SystemModel {
    std::vector<InverterUnit> inverters;
    plants::GridParams grid;
    std::optional<plants::SadParams> sad;
    double v_d0 = 0.0;  // shared steady PCC voltage

    void validate() const;
    double total_id() const;
    double total_iq() const;

    /// Build with v_d0 from the steady bus solution.
    static SystemModel steady(std::vector<InverterUnit> inverters, plants::GridParams grid,
                              std::optional<plants::SadParams> sad = std::nullopt);

    /// Same system with all inverter currents scaled; v_d0 re-solved.
    SystemModel with_power_scale(double scale) const;
    /// Same system with R_g and L_g scaled; v_d0 re-solved.
    SystemModel with_impedance_scale(double scale) const;

    plants::OperatingPoint operating_point() const;
};

struct AnalysisOptions {
    double f_min_hz = 0.1;
    double f_max_hz = 5000.0;
    int points = 2000;
    double marginal_band = 0.02;
    double max_arg_step = kPi / 8.0;   // refinement target per segment
    double crossing_rel_tol = 1e-5;    // bracket width around Im-zero crossings
    int refine_passes = 14;
    std::size_t max_points = 60000;
};

struct Crossing {
    double f_cr_hz;
    double re_at_crossing;
};

enum class Verdict { stable, unstable, marginal };

std::string to_string(Verdict v);

struct StabilityReport {
    std::vector<double> f_hz;
    EigenTrajectory branch1, branch2;
    std::array<std::vector<Crossing>, 2> crossings;
    int critical_branch = 0;  // 1 or 2; 0 when no crossing exists
    double f_cr_hz = std::numeric_limits<double>::quiet_NaN();
    double margin = std::numeric_limits<double>::infinity();
    std::array<int, 2> winding{0, 0};  // per-branch, diagnostic (can braid)
    int winding_total = 0;             // encirclement count driving the verdict
    Verdict verdict = Verdict::stable;
    bool conditionally_stable_warning = false;
    std::vector<DqMatrix> l_m;           // inverter return ratio, diagnostic
    double shift_identity_max_dev = 0.0; // damper superposition regression
};

/// Admittance sources feeding one PCC node. `grid_z` returns the branch
/// impedance (inverted during assembly); `sad` is the scalar damper
/// admittance or empty.
struct SourceSet {
    std::vector<AdmittanceFn> inverters;
    AdmittanceFn grid_z;
    std::function<Complex(double)> sad;
};

SourceSet make_sources(const SystemModel& model);

DqMatrix ypcc_at(const SourceSet& s, double f_hz);

struct PccAssembly {
    std::vector<DqMatrix> y_pcc;
    std::vector<DqMatrix> l_m;
};

/// Y_PCC(f) = sum Y_eq,i + Z_g^-1 (+ Y_ad I) over a grid, with the return
/// ratio sum Y_eq,i * Z_g as diagnostic.
PccAssembly assemble_ypcc(const SystemModel& model, const FrequencyGrid& grid);

/// All Im-zero sign changes of a branch, linearly interpolated.
std::vector<Crossing> find_crossings(const EigenTrajectory& traj);

StabilityReport assess(const SystemModel& model, const AnalysisOptions& opts = {});
StabilityReport assess_sources(const SourceSet& sources, const AnalysisOptions& opts = {});

enum class SweepAxis { power, grid_impedance };

struct SweepRow {
    double axis_value;
    double f_cr_hz;
    double margin;
    Verdict verdict;
};

/// Critical-eigenvalue data versus a scaled parameter axis. Points are
/// evaluated in parallel; row order follows the axis.
std::vector<SweepRow> margin_sweep(const SystemModel& base, SweepAxis axis, double lo, double hi,
                                   int points, const AnalysisOptions& opts = {});

}  // namespace sadkit::stability
