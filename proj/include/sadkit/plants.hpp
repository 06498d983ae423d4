#pragma once

#include <array>
#include <vector>

#include "sadkit/dqcore.hpp"

namespace sadkit::plants {

/// Thevenin grid branch: stiff source v_g behind R_g + L_g.
struct GridParams {
    double r_g = 0.0;          // Ohm
    double l_g = 0.0;          // H
    double omega0 = kTwoPi * 50.0;  // rad/s
    double v_g_peak = 310.2687;     // phase peak voltage, V (380 V ll rms)

    void validate() const;
};

/// Grid-following inverter: PI current control in its own PLL frame, no
/// decoupling terms and no voltage feedforward.
struct GflParams {
    double v_dc = 800.0;   // V
    double l = 3e-3;       // filter inductance, H
    double r_l = 0.015;    // filter resistance, Ohm
    double k_pi = 18.0;    // current PI
    double k_ii = 300.0;   // 1/s
    double k_ppll = 5.0;   // PLL PI
    double k_ipll = 100.0; // 1/s
    double f_s = 10e3;     // controller rate, Hz
    double i_dref = 50.0;  // A
    double i_qref = 0.0;   // A
    double omega0 = kTwoPi * 50.0;

    double delay() const { return 1.5 / f_s; }
    void validate() const;
};

/// Shunt active damper: dual-loop converter whose damping path feeds
/// band-pass-filtered PCC voltage back into the modulation command.
struct SadParams {
    double v_dc = 750.0;     // nominal dc-link voltage, V
    double c_dc = 5000e-6;   // dc-link capacitance, F
    double l_f = 3e-3;       // filter inductance, H
    double r_f = 0.01;       // filter resistance, Ohm
    double k_vp = 0.5;       // dc-voltage PI
    double k_vi = 5.0;       // 1/s
    double k_cp = 10.0;      // current PI
    double k_ci = 20.0;      // 1/s
    double k_ppll = 0.5;
    double k_ipll = 50.0;    // 1/s
    double h_v = 2.0;        // PCC-voltage feedback coefficient
    double omega_c = 1005.31;  // band-pass center, rad/s
    double bandwidth_hz = 200.0;
    double beta = 20.0;      // lag-compensator ratio
    double f_s = 20e3;       // Hz
    double omega0 = kTwoPi * 50.0;

    double tau() const { return 2.5 / omega_c; }  // tied to the center frequency
    double delay() const { return 1.5 / f_s; }
    void validate() const;
};

/// Steady operating condition seen by one inverter (its PLL frame, v_q = 0).
struct GflOperating {
    double v_d0 = 310.2687;  // V
    double i_d0 = 0.0;       // A
    double i_q0 = 0.0;       // A
};

/// Full-system operating point for identification and tuning.
struct OperatingPoint {
    double v_d0 = 0.0;
    std::vector<std::array<double, 2>> inverter_currents;  // (i_d0, i_q0) per inverter
    double r_g = 0.0;
    double l_g = 0.0;
};

/// Grid branch impedance in the dq frame at one frequency.
DqMatrix grid_impedance(const GridParams& gp, double f_hz);

/// Second-order band-pass 2*pi*B*s / (s^2 + 2*pi*B*s + w_c^2); unity at w_c.
RationalTF sbpf(double omega_c, double bandwidth_hz);

/// Lag compensator (tau*s + 1) / (beta*tau*s + 1), beta > 1.
RationalTF lac(double beta, double tau);

struct LacCharacteristics {
    double omega1;      // 1/(beta*tau)
    double omega2;      // 1/tau
    double omega_m;     // 1/(tau*sqrt(beta)), frequency of maximum phase
    double phi_m_rad;   // atan((beta-1)/(2*sqrt(beta)))
};

LacCharacteristics lac_characteristics(double beta, double tau);

/// Damper output admittance (1 + H_v*G_f*G_d) / (Z_f + G_i*G_d) with
/// G_f = SBPF*LAC. Outer voltage loop and PLL are not part of this model.
/// The f == 0 limit is 0 (integral current action). `lac_enabled = false`
/// bypasses the lag compensator (G_f = SBPF), for studying its effect.
Complex sad_admittance(const SadParams& sp, double f_hz, bool lac_enabled = true);
DqMatrix sad_admittance_matrix(const SadParams& sp, double f_hz);

/// Small-signal output admittance of the reference grid-following inverter,
/// Norton convention di = i_s - Y*dv at the PCC. Includes PLL frame coupling
/// and the modulation delay; the exact f == 0 limit is returned at f == 0.
DqMatrix gfl_admittance(const GflParams& p, const GflOperating& op, double f_hz);

/// Steady PCC bus solution for current-source devices aligned to the PCC
/// voltage: magnitude v_d0 and angle relative to the grid-source phasor.
struct SteadyBus {
    double v_d0;
    double angle;  // rad
};

SteadyBus steady_bus(const GridParams& gp, double i_d_total, double i_q_total);

}  // namespace sadkit::plants
