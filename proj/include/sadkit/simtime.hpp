#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "sadkit/stability.hpp"

namespace sadkit::simtime {

struct Vec2 {
    double d = 0.0;
    double q = 0.0;
};

struct Event {
    enum class Kind {
        set_inverter_idref,   // device, value [A]
        set_inverter_iqref,   // device, value [A]
        ramp_inverter_idref,  // device, value = target [A], duration [s]
        ramp_power,           // value = target scale of all base references, duration [s]
        set_sad_iqref,        // value [A]
        set_sad_damping,      // value != 0 enables the damping path
        set_sad_params,       // value = omega_c [rad/s], value2 = H_v
        step_grid_voltage,    // value = multiplier on the nominal source magnitude
    };
    double t = 0.0;
    Kind kind = Kind::set_inverter_idref;
    int device = 0;
    double value = 0.0;
    double value2 = 0.0;
    double duration = 0.0;
};

struct Scenario {
    stability::SystemModel model;
    std::vector<Event> events;
    double duration = 2.0;
    double h = 2e-6;            // plant integration step
    double record_hz = 20e3;
    std::uint32_t seed = 0;
    double dither_amp = 0.0;    // optional measurement dither, amps/volts peak
    bool warm_start = true;     // start on the steady operating point
    bool freeze_controllers = false;  // open-loop test hook: hold modulation

    void validate() const;
};

/// Uniformly sampled simulation output. Channel 0 is time.
struct WaveRecord {
    double sample_hz = 0.0;
    std::uint32_t seed = 0;
    bool divergent = false;
    std::vector<std::string> channel_names;
    std::vector<std::vector<double>> channels;

    std::size_t size() const { return channels.empty() ? 0 : channels[0].size(); }
    const std::vector<double>& channel(const std::string& name) const;
    WaveRecord slice(double t0, double t1) const;
    void validate() const;
};

void save_wave_csv(const WaveRecord& w, const std::string& path);
WaveRecord load_wave_csv(const std::string& path);

/// Fixed-step averaged dq simulation of the one-PCC system: classical
/// 4-stage integration of the branch currents and damper dc link, device
/// controllers run at their own sampling rates with one-sample compute delay
/// and zero-order hold. The grid branch current is eliminated through the
/// node equation, so the PCC voltage is solved algebraically each stage.
class Simulator {
public:
    explicit Simulator(Scenario sc);
    ~Simulator();
    Simulator(Simulator&&) noexcept;
    Simulator& operator=(Simulator&&) noexcept;

    /// Advance to the next record sample; false once the scenario ended or
    /// diverged.
    bool advance_one_sample();
    void run_to_end();

    double time() const;
    bool divergent() const;

    Vec2 v_pcc() const;
    Vec2 i_grid() const;
    Vec2 inverter_current(std::size_t k) const;
    Vec2 sad_current() const;
    double sad_vdc() const;
    double sad_theta_abs() const;  // PLL angle in the stationary sense
    double sad_omega() const;

    void set_sad_iqref(double amps);
    void set_inverter_idref(std::size_t k, double amps);
    void ramp_inverter_idref(std::size_t k, double target, double duration);
    void set_sad_params(double omega_c, double h_v);
    void set_sad_damping(bool on);

    WaveRecord take_record();

private:
    struct Impl;
    std::unique_ptr<Impl> impl_;
};

WaveRecord simulate(const Scenario& sc);

struct ScanOptions {
    double amplitude_frac = 0.01;  // of the operating d voltage
    double settle_s = 0.15;
    double min_window_s = 0.25;
    int min_cycles = 5;
    double drift_tol = 0.02;   // phasor change between consecutive windows
    double h = 2e-6;
    bool check_linearity = false;  // re-scan at half amplitude, compare to 1%
};

/// Perturbation-based admittance measurement: a stiff source at the device
/// terminals is modulated by a small single-frequency dq voltage in two
/// independent directions, and the current response is extracted by
/// single-bin Fourier projection over an integer number of cycles.
std::vector<DqMatrix> scan_admittance(const plants::GflParams& p, const plants::GflOperating& op,
                                      const FrequencyGrid& freqs, const ScanOptions& opts = {});

/// Damper scan validates the inner current loop and damping path: the PLL is
/// frozen at its steady lock, the dc link is held stiff, and the current
/// reference stays at its operating value.
std::vector<DqMatrix> scan_admittance(const plants::SadParams& p, double v_d0,
                                      const FrequencyGrid& freqs, const ScanOptions& opts = {});

/// Passive R-L branch against a stiff source (measurement-path check).
std::vector<DqMatrix> scan_admittance(const plants::GridParams& p, const FrequencyGrid& freqs,
                                      const ScanOptions& opts = {});

struct InstabilityVerdict {
    enum class Kind { stable, unstable, inconclusive };
    Kind kind = Kind::inconclusive;
    double growth_rate = 0.0;  // 1/s, exponential envelope of the ac deviation
    bool settled = false;
};

/// Exponential-envelope fit of the grid current's ac deviation over trailing
/// windows. Unstable above +2 1/s (or on a divergence flag), stable below
/// -2 1/s or when settled; otherwise inconclusive and the caller extends.
InstabilityVerdict detect_instability(const WaveRecord& w, double window_s);

}  // namespace sadkit::simtime
