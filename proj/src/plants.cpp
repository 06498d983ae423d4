#include "sadkit/plants.hpp"

#include <cmath>

namespace sadkit::plants {

void GridParams::validate() const {
    if (r_g < 0.0 || l_g < 0.0) throw InvalidArgument("grid: negative R_g or L_g");
    if (r_g == 0.0 && l_g == 0.0) throw InvalidArgument("grid: R_g and L_g both zero");
    if (!(omega0 > 0.0)) throw InvalidArgument("grid: omega0 must be > 0");
    if (!(v_g_peak > 0.0)) throw InvalidArgument("grid: v_g_peak must be > 0");
}

void GflParams::validate() const {
    if (!(l > 0.0)) throw InvalidArgument("gfl: L must be > 0");
    if (!(k_pi > 0.0 && k_ii > 0.0 && k_ppll > 0.0 && k_ipll > 0.0))
        throw InvalidArgument("gfl: all gains must be > 0");
    if (!(f_s >= 1e3)) throw InvalidArgument("gfl: f_s must be >= 1 kHz");
    if (r_l < 0.0 || !(v_dc > 0.0)) throw InvalidArgument("gfl: bad R_L or V_dc");
}

void SadParams::validate() const {
    if (h_v < 0.0) throw InvalidArgument("sad: H_v must be >= 0");
    if (!(omega_c > 0.0)) throw InvalidArgument("sad: omega_c must be > 0");
    if (!(bandwidth_hz > 0.0)) throw InvalidArgument("sad: bandwidth must be > 0");
    if (!(beta > 1.0)) throw InvalidArgument("sad: beta must be > 1");
    if (!(l_f > 0.0) || r_f < 0.0) throw InvalidArgument("sad: bad filter parameters");
    if (!(f_s >= 1e3)) throw InvalidArgument("sad: f_s must be >= 1 kHz");
    if (!(v_dc > 0.0) || !(c_dc > 0.0)) throw InvalidArgument("sad: bad dc-link parameters");
}

DqMatrix grid_impedance(const GridParams& gp, double f_hz) {
    gp.validate();
    const Complex z(gp.r_g, kTwoPi * f_hz * gp.l_g);
    const double x = gp.omega0 * gp.l_g;
    return {z, -x, x, z};
}

RationalTF sbpf(double omega_c, double bandwidth_hz) {
    if (!(omega_c > 0.0) || !(bandwidth_hz > 0.0))
        throw InvalidArgument("sbpf: omega_c and bandwidth must be > 0");
    const double b = kTwoPi * bandwidth_hz;
    return RationalTF{{0.0, b}, {omega_c * omega_c, b, 1.0}};
}

RationalTF lac(double beta, double tau) {
    if (!(beta > 1.0) || !(tau > 0.0)) throw InvalidArgument("lac: need beta > 1 and tau > 0");
    return RationalTF{{1.0, tau}, {1.0, beta * tau}};
}

LacCharacteristics lac_characteristics(double beta, double tau) {
    if (!(beta > 1.0) || !(tau > 0.0)) throw InvalidArgument("lac: need beta > 1 and tau > 0");
    const double sb = std::sqrt(beta);
    return {1.0 / (beta * tau), 1.0 / tau, 1.0 / (tau * sb),
            std::atan((beta - 1.0) / (2.0 * sb))};
}

Complex sad_admittance(const SadParams& sp, double f_hz, bool lac_enabled) {
    sp.validate();
    if (f_hz == 0.0) return 0.0;  // integral current action rejects dc
    const Complex s(0.0, kTwoPi * f_hz);
    Complex gf = eval_rational_s(sbpf(sp.omega_c, sp.bandwidth_hz), s);
    // Damping path uses the lag compensator in its unity high-frequency-gain
    // form beta*(tau*s+1)/(beta*tau*s+1), so the pass band of the band-pass
    // stage is carried through at full strength.
    if (lac_enabled) gf *= sp.beta * eval_rational_s(lac(sp.beta, sp.tau()), s);
    const Complex gd = eval_rational_s(pade_delay(sp.delay()), s);
    const Complex zf = s * sp.l_f + sp.r_f;
    const Complex gi = sp.k_cp + sp.k_ci / s;
    return (1.0 + sp.h_v * gf * gd) / (zf + gi * gd);
}

DqMatrix sad_admittance_matrix(const SadParams& sp, double f_hz) {
    const Complex y = sad_admittance(sp, f_hz);
    return DqMatrix::diagonal(y, y);
}

DqMatrix gfl_admittance(const GflParams& p, const GflOperating& op, double f_hz) {
    p.validate();
    if (!(op.v_d0 > 0.0)) throw InvalidArgument("gfl_admittance: v_d0 must be > 0");

    const double x = p.omega0 * p.l;
    const double v_md0 = op.v_d0 + p.r_l * op.i_d0 - x * op.i_q0;
    const double v_mq0 = x * op.i_d0 + p.r_l * op.i_q0;

    if (f_hz == 0.0) {
        // Limit of the full expression as s -> 0: the current-loop integrator
        // removes everything except the PLL frame rotation of the operating
        // current, scaled by T_PLL(0) = 1/v_d0.
        return {0.0, op.i_q0 / op.v_d0, 0.0, -op.i_d0 / op.v_d0};
    }

    const Complex s(0.0, kTwoPi * f_hz);
    const Complex gc = p.k_pi + p.k_ii / s;
    const Complex gpf = p.k_ppll + p.k_ipll / s;
    const Complex tpll = gpf / (s + op.v_d0 * gpf);
    const Complex gd = eval_rational_s(pade_delay(p.delay()), s);

    const Complex zl = s * p.l + p.r_l;
    const DqMatrix loop{zl + gd * gc, -x, x, zl + gd * gc};

    const Complex col_d = gc * op.i_q0 + v_mq0;
    const Complex col_q = -gc * op.i_d0 - v_md0;
    const Complex k = gd * tpll;
    const DqMatrix rhs{1.0, k * col_d, 0.0, 1.0 + k * col_q};

    return loop.inverse() * rhs;
}

SteadyBus steady_bus(const GridParams& gp, double i_d_total, double i_q_total) {
    gp.validate();
    const Complex z(gp.r_g, gp.omega0 * gp.l_g);
    const Complex i(i_d_total, i_q_total);
    // |v_d0 - z*i| = v_g with v_d0 real: quadratic in v_d0.
    const Complex zi = z * i;
    const double disc = gp.v_g_peak * gp.v_g_peak - zi.imag() * zi.imag();
    if (disc < 0.0)
        throw InvalidArgument("steady_bus: operating point beyond maximum power transfer");
    const double v_d0 = zi.real() + std::sqrt(disc);
    if (!(v_d0 > 0.0)) throw InvalidArgument("steady_bus: no positive bus voltage solution");
    const double angle = -std::arg(Complex(v_d0, 0.0) - zi);
    return {v_d0, angle};
}

}  // namespace sadkit::plants
