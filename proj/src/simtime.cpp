#include "sadkit/simtime.hpp"

#include <algorithm>
#include <cmath>
#include <complex>
#include <sstream>

#include "sadkit/io.hpp"
#include "sadkit/rng.hpp"

namespace sadkit::simtime {

namespace {

Vec2 rot(Vec2 v, double th) {
    const double c = std::cos(th), s = std::sin(th);
    return {c * v.d - s * v.q, s * v.d + c * v.q};
}

// Tustin discretization of a continuous rational function up to order 2,
// direct form II transposed.
struct DiscreteTF {
    double b0 = 0, b1 = 0, b2 = 0, a1 = 0, a2 = 0;
    double z1 = 0, z2 = 0;

    static DiscreteTF from_ct(const RationalTF& tf, double T) {
        tf.validate();
        if (tf.num.size() > 3 || tf.den.size() > 3)
            throw InvalidArgument("DiscreteTF: order above 2");
        auto c = [](const std::vector<double>& v, std::size_t i) {
            return i < v.size() ? v[i] : 0.0;
        };
        const double k = 2.0 / T;
        const double n0 = c(tf.num, 0), n1 = c(tf.num, 1), n2 = c(tf.num, 2);
        const double d0 = c(tf.den, 0), d1 = c(tf.den, 1), d2 = c(tf.den, 2);
        const double bz2 = n0 + n1 * k + n2 * k * k;
        const double bz1 = 2.0 * n0 - 2.0 * n2 * k * k;
        const double bz0 = n0 - n1 * k + n2 * k * k;
        const double az2 = d0 + d1 * k + d2 * k * k;
        const double az1 = 2.0 * d0 - 2.0 * d2 * k * k;
        const double az0 = d0 - d1 * k + d2 * k * k;
        if (az2 == 0.0) throw InvalidArgument("DiscreteTF: degenerate denominator");
        DiscreteTF d;
        d.b0 = bz2 / az2;
        d.b1 = bz1 / az2;
        d.b2 = bz0 / az2;
        d.a1 = az1 / az2;
        d.a2 = az0 / az2;
        return d;
    }

    double step(double x) {
        const double y = b0 * x + z1;
        z1 = b1 * x - a1 * y + z2;
        z2 = b2 * x - a2 * y;
        return y;
    }

    // Internal states for a constant input, so warm starts do not transient.
    void prime(double x_ss) {
        const double y = (b0 + b1 + b2) / (1.0 + a1 + a2) * x_ss;
        z2 = b2 * x_ss - a2 * y;
        z1 = y - b0 * x_ss;
    }
};

struct Ramp {
    bool active = false;
    double rate = 0.0;
    double target = 0.0;

    void start(double current, double goal, double duration) {
        if (duration <= 0.0) {
            active = false;
            return;
        }
        active = true;
        target = goal;
        rate = (goal - current) / duration;
    }
    double advance(double value, double T) {
        if (!active) return value;
        value += rate * T;
        if ((rate >= 0.0 && value >= target) || (rate < 0.0 && value <= target)) {
            value = target;
            active = false;
        }
        return value;
    }
};

struct GflSim {
    plants::GflParams p;
    double T = 0.0;
    int tick_div = 0;
    double rated = 10.0;

    Vec2 i{};  // grid frame (state)
    double delta = 0.0;
    double pll_integ = 0.0;
    double omega = 0.0;
    Vec2 ci_integ{};
    double idref = 0.0, iqref = 0.0;
    Ramp ramp;
    Vec2 m_pending{}, m_applied{};

    void tick(Vec2 v_pcc) {
        m_applied = m_pending;

        const Vec2 v_pll = rot(v_pcc, -delta);
        const double eps = v_pll.q;
        omega = p.omega0 + p.k_ppll * eps + pll_integ;
        pll_integ += T * p.k_ipll * eps;
        delta += T * (omega - p.omega0);

        idref = ramp.advance(idref, T);

        const Vec2 i_pll = rot(i, -delta);
        const double ed = idref - i_pll.d;
        const double eq = iqref - i_pll.q;
        Vec2 m_pll{p.k_pi * ed + ci_integ.d, p.k_pi * eq + ci_integ.q};
        ci_integ.d += T * p.k_ii * ed;
        ci_integ.q += T * p.k_ii * eq;

        Vec2 m = rot(m_pll, delta);
        const double lim = 0.5 * p.v_dc;
        const double n = std::hypot(m.d, m.q);
        if (n > lim) {
            m.d *= lim / n;
            m.q *= lim / n;
        }
        m_pending = m;
    }

    void warm_start(double v_d0, double phi) {
        delta = phi;
        pll_integ = 0.0;
        omega = p.omega0;
        i = rot({idref, iqref}, phi);
        const double x = p.omega0 * p.l;
        const Vec2 m_pll{v_d0 + p.r_l * idref - x * iqref, x * idref + p.r_l * iqref};
        ci_integ = m_pll;
        m_pending = m_applied = rot(m_pll, phi);
    }
};

struct SadSim {
    plants::SadParams p;
    double T = 0.0;
    int tick_div = 0;
    double rated = 10.0;

    Vec2 i{};          // grid frame (state)
    double vdc = 0.0;  // state
    double delta = 0.0;
    double pll_integ = 0.0;
    double omega = 0.0;
    double v_integ = 0.0;
    Vec2 ci_integ{};
    double iqref = 0.0;
    bool damping_on = true;
    bool freeze_outer = false;  // scan hook: frozen PLL / dc loop / reference
    double idref_frozen = 0.0;
    DiscreteTF sbpf_d, sbpf_q, lac_d, lac_q;
    Vec2 m_pending{}, m_applied{};

    void build_filters() {
        const RationalTF bp = plants::sbpf(p.omega_c, p.bandwidth_hz);
        // Lag compensator in its unity high-frequency-gain form.
        RationalTF lg = plants::lac(p.beta, p.tau());
        for (double& c : lg.num) c *= p.beta;
        sbpf_d = DiscreteTF::from_ct(bp, T);
        sbpf_q = DiscreteTF::from_ct(bp, T);
        lac_d = DiscreteTF::from_ct(lg, T);
        lac_q = DiscreteTF::from_ct(lg, T);
    }

    void set_damping_params(double omega_c, double h_v, double v_pll_d) {
        p.omega_c = omega_c;
        p.h_v = h_v;
        build_filters();
        sbpf_d.prime(v_pll_d);
        sbpf_q.prime(0.0);
        lac_d.prime(0.0);
        lac_q.prime(0.0);
    }

    void tick(Vec2 v_pcc) {
        m_applied = m_pending;

        if (!freeze_outer) {
            const Vec2 v_pll_raw = rot(v_pcc, -delta);
            const double eps = v_pll_raw.q;
            omega = p.omega0 + p.k_ppll * eps + pll_integ;
            pll_integ += T * p.k_ipll * eps;
            delta += T * (omega - p.omega0);
        }

        const Vec2 v_pll = rot(v_pcc, -delta);

        double idref = idref_frozen;
        if (!freeze_outer) {
            const double ev = vdc - p.v_dc;  // high dc voltage exports power
            idref = p.k_vp * ev + v_integ;
            v_integ += T * p.k_vi * ev;
        }

        // Damping path: band-pass then lag compensation of the PLL-frame PCC
        // voltage, scaled by -H_v into the modulation command.
        const double fd = lac_d.step(sbpf_d.step(v_pll.d));
        const double fq = lac_q.step(sbpf_q.step(v_pll.q));

        const Vec2 i_pll = rot(i, -delta);
        const double ed = idref - i_pll.d;
        const double eq = iqref - i_pll.q;
        Vec2 m_pll{p.k_cp * ed + ci_integ.d, p.k_cp * eq + ci_integ.q};
        if (damping_on) {
            m_pll.d -= p.h_v * fd;
            m_pll.q -= p.h_v * fq;
        }
        ci_integ.d += T * p.k_ci * ed;
        ci_integ.q += T * p.k_ci * eq;

        Vec2 m = rot(m_pll, delta);
        const double lim = 0.5 * std::max(vdc, 1.0);
        const double n = std::hypot(m.d, m.q);
        if (n > lim) {
            m.d *= lim / n;
            m.q *= lim / n;
        }
        m_pending = m;
    }

    void warm_start(double v_d0, double phi) {
        delta = phi;
        pll_integ = 0.0;
        omega = p.omega0;
        vdc = p.v_dc;
        v_integ = 0.0;
        i = rot({0.0, iqref}, phi);
        const double x = p.omega0 * p.l_f;
        const Vec2 m_pll{v_d0 - x * iqref, p.r_f * iqref};
        ci_integ = m_pll;
        m_pending = m_applied = rot(m_pll, phi);
        build_filters();
        sbpf_d.prime(v_d0);
        sbpf_q.prime(0.0);
        lac_d.prime(0.0);
        lac_q.prime(0.0);
    }
};

}  // namespace

void Scenario::validate() const {
    model.validate();
    if (!(h > 0.0)) throw InvalidArgument("scenario: step must be > 0");
    double max_fs = 0.0;
    for (const auto& u : model.inverters) max_fs = std::max(max_fs, u.params.f_s);
    if (model.sad) max_fs = std::max(max_fs, model.sad->f_s);
    if (h > 1.0 / (10.0 * max_fs))
        throw InvalidArgument("scenario: step too large for the controller rates");
    double last = -1.0;
    for (const auto& e : events) {
        if (e.t < last) throw InvalidArgument("scenario: events not time-ordered");
        last = e.t;
    }
    if (!(duration > last)) throw InvalidArgument("scenario: duration must exceed last event");
    if (!(record_hz > 0.0)) throw InvalidArgument("scenario: record rate must be > 0");
}

const std::vector<double>& WaveRecord::channel(const std::string& name) const {
    for (std::size_t i = 0; i < channel_names.size(); ++i)
        if (channel_names[i] == name) return channels[i];
    throw InvalidArgument("wave record: no channel '" + name + "'");
}

WaveRecord WaveRecord::slice(double t0, double t1) const {
    const auto& t = channels.at(0);
    WaveRecord out;
    out.sample_hz = sample_hz;
    out.seed = seed;
    out.divergent = divergent;
    out.channel_names = channel_names;
    out.channels.resize(channels.size());
    for (std::size_t i = 0; i < t.size(); ++i) {
        if (t[i] < t0 || t[i] > t1) continue;
        for (std::size_t c = 0; c < channels.size(); ++c)
            out.channels[c].push_back(channels[c][i]);
    }
    return out;
}

void WaveRecord::validate() const {
    if (channels.empty() || channel_names.size() != channels.size())
        throw InvalidArgument("wave record: channel/name mismatch");
    for (const auto& c : channels) {
        if (c.size() != channels[0].size())
            throw InvalidArgument("wave record: unequal channel lengths");
        for (double v : c)
            if (!std::isfinite(v)) throw InvalidArgument("wave record: non-finite sample");
    }
}

void save_wave_csv(const WaveRecord& w, const std::string& path) {
    std::string out = "# sample_rate_hz=" + io::g17(w.sample_hz) +
                      " seed=" + std::to_string(w.seed) +
                      " divergent=" + (w.divergent ? "1" : "0") + "\n";
    out += io::join_csv(w.channel_names) + "\n";
    for (std::size_t r = 0; r < w.size(); ++r) {
        std::vector<std::string> f;
        f.reserve(w.channels.size());
        for (const auto& c : w.channels) f.push_back(io::g17(c[r]));
        out += io::join_csv(f) + "\n";
    }
    io::atomic_write_text(path, out);
}

WaveRecord load_wave_csv(const std::string& path) {
    std::istringstream in(io::read_text(path));
    std::string line;
    if (!std::getline(in, line) || line.rfind("# sample_rate_hz=", 0) != 0)
        throw ParseError(path + ": missing wave preamble");
    WaveRecord w;
    {
        std::istringstream ls(line.substr(1));
        std::string tok;
        while (ls >> tok) {
            const auto eq = tok.find('=');
            if (eq == std::string::npos) continue;
            const std::string key = tok.substr(0, eq), val = tok.substr(eq + 1);
            if (key == "sample_rate_hz") w.sample_hz = io::parse_double(val);
            if (key == "seed") w.seed = static_cast<std::uint32_t>(std::stoul(val));
            if (key == "divergent") w.divergent = val == "1";
        }
    }
    if (!std::getline(in, line)) throw ParseError(path + ": missing wave header");
    w.channel_names = io::split_csv_line(line);
    w.channels.resize(w.channel_names.size());
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        const auto f = io::split_csv_line(line);
        if (f.size() != w.channel_names.size()) throw ParseError(path + ": ragged wave row");
        for (std::size_t c = 0; c < f.size(); ++c)
            w.channels[c].push_back(io::parse_double(f[c]));
    }
    return w;
}

struct Simulator::Impl {
    Scenario sc;
    std::vector<GflSim> gfl;
    bool has_sad = false;
    SadSim sad;
    double vg_mag = 0.0;
    double omega0 = 0.0;
    double r_g = 0.0, l_g = 0.0;

    std::vector<double> state;  // [per-inverter d,q]..., sad d,q, vdc
    double t = 0.0;
    long step_idx = 0;
    int rec_div = 1;
    std::size_t next_event = 0;
    bool divergent = false;
    bool done = false;

    WaveRecord rec;
    std::vector<Rng> dither;

    std::size_t sad_offset() const { return gfl.size() * 2; }

    Vec2 inv_i(const std::vector<double>& x, std::size_t k) const {
        return {x[2 * k], x[2 * k + 1]};
    }
    Vec2 sad_i(const std::vector<double>& x) const {
        return {x[sad_offset()], x[sad_offset() + 1]};
    }

    Vec2 node_voltage(const std::vector<double>& x) const {
        double sum_id = 0.0, sum_iq = 0.0;
        double denom = 0.0;
        double num_d = 0.0, num_q = 0.0;
        for (std::size_t k = 0; k < gfl.size(); ++k) {
            const Vec2 ik = inv_i(x, k);
            sum_id += ik.d;
            sum_iq += ik.q;
            const double inv_l = 1.0 / gfl[k].p.l;
            denom += inv_l;
            num_d += (gfl[k].m_applied.d - gfl[k].p.r_l * ik.d) * inv_l;
            num_q += (gfl[k].m_applied.q - gfl[k].p.r_l * ik.q) * inv_l;
        }
        if (has_sad) {
            const Vec2 ik = sad_i(x);
            sum_id += ik.d;
            sum_iq += ik.q;
            const double inv_l = 1.0 / sad.p.l_f;
            denom += inv_l;
            num_d += (sad.m_applied.d - sad.p.r_f * ik.d) * inv_l;
            num_q += (sad.m_applied.q - sad.p.r_f * ik.q) * inv_l;
        }
        if (l_g > 0.0) {
            denom += 1.0 / l_g;
            num_d += vg_mag / l_g + (r_g / l_g) * sum_id;
            num_q += (r_g / l_g) * sum_iq;
            return {num_d / denom, num_q / denom};
        }
        // Resistive grid branch: the node equation is already algebraic.
        return {vg_mag + r_g * sum_id, r_g * sum_iq};
    }

    void deriv(const std::vector<double>& x, std::vector<double>& dx) const {
        const Vec2 v = node_voltage(x);
        for (std::size_t k = 0; k < gfl.size(); ++k) {
            const Vec2 ik = inv_i(x, k);
            const auto& d = gfl[k];
            dx[2 * k] = (d.m_applied.d - v.d - d.p.r_l * ik.d) / d.p.l + omega0 * ik.q;
            dx[2 * k + 1] = (d.m_applied.q - v.q - d.p.r_l * ik.q) / d.p.l - omega0 * ik.d;
        }
        if (has_sad) {
            const std::size_t o = sad_offset();
            const Vec2 ik = sad_i(x);
            dx[o] = (sad.m_applied.d - v.d - sad.p.r_f * ik.d) / sad.p.l_f + omega0 * ik.q;
            dx[o + 1] = (sad.m_applied.q - v.q - sad.p.r_f * ik.q) / sad.p.l_f - omega0 * ik.d;
            const double vdc = std::max(x[o + 2], 1.0);
            const double p_bridge = 1.5 * (sad.m_applied.d * ik.d + sad.m_applied.q * ik.q);
            dx[o + 2] = -p_bridge / (sad.p.c_dc * vdc);
        }
    }

    void rk4_step() {
        static thread_local std::vector<double> k1, k2, k3, k4, tmp;
        const std::size_t n = state.size();
        k1.resize(n);
        k2.resize(n);
        k3.resize(n);
        k4.resize(n);
        tmp.resize(n);
        const double h = sc.h;
        deriv(state, k1);
        for (std::size_t i = 0; i < n; ++i) tmp[i] = state[i] + 0.5 * h * k1[i];
        deriv(tmp, k2);
        for (std::size_t i = 0; i < n; ++i) tmp[i] = state[i] + 0.5 * h * k2[i];
        deriv(tmp, k3);
        for (std::size_t i = 0; i < n; ++i) tmp[i] = state[i] + h * k3[i];
        deriv(tmp, k4);
        for (std::size_t i = 0; i < n; ++i)
            state[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
    }

    Vec2 dithered(Vec2 v, std::size_t channel) {
        if (sc.dither_amp == 0.0) return v;
        Rng& r = dither[channel];
        return {v.d + sc.dither_amp * (2.0 * r.uniform() - 1.0),
                v.q + sc.dither_amp * (2.0 * r.uniform() - 1.0)};
    }

    void apply_event(const Event& e) {
        switch (e.kind) {
            case Event::Kind::set_inverter_idref:
                gfl.at(static_cast<std::size_t>(e.device)).idref = e.value;
                break;
            case Event::Kind::set_inverter_iqref:
                gfl.at(static_cast<std::size_t>(e.device)).iqref = e.value;
                break;
            case Event::Kind::ramp_inverter_idref: {
                auto& d = gfl.at(static_cast<std::size_t>(e.device));
                d.ramp.start(d.idref, e.value, e.duration);
                break;
            }
            case Event::Kind::ramp_power:
                for (std::size_t k = 0; k < gfl.size(); ++k) {
                    const double target = sc.model.inverters[k].params.i_dref * e.value;
                    gfl[k].ramp.start(gfl[k].idref, target, e.duration);
                }
                break;
            case Event::Kind::set_sad_iqref:
                if (has_sad) sad.iqref = e.value;
                break;
            case Event::Kind::set_sad_damping:
                if (has_sad) sad.damping_on = e.value != 0.0;
                break;
            case Event::Kind::set_sad_params:
                if (has_sad) {
                    const Vec2 v_pll = rot(node_voltage(state), -sad.delta);
                    sad.set_damping_params(e.value, e.value2, v_pll.d);
                }
                break;
            case Event::Kind::step_grid_voltage:
                vg_mag = sc.model.grid.v_g_peak * e.value;
                break;
        }
    }

    void check_divergence() {
        for (double v : state)
            if (!std::isfinite(v)) divergent = true;
        for (std::size_t k = 0; k < gfl.size(); ++k) {
            const Vec2 ik = inv_i(state, k);
            if (std::hypot(ik.d, ik.q) > 100.0 * gfl[k].rated) divergent = true;
        }
        if (has_sad) {
            const Vec2 ik = sad_i(state);
            if (std::hypot(ik.d, ik.q) > 100.0 * sad.rated) divergent = true;
            if (state[sad_offset() + 2] > 100.0 * sad.p.v_dc) divergent = true;
        }
        const Vec2 v = node_voltage(state);
        if (std::hypot(v.d, v.q) > 100.0 * sc.model.grid.v_g_peak) divergent = true;
    }

    void record_sample() {
        const Vec2 v = node_voltage(state);
        Vec2 ig{0.0, 0.0};
        for (std::size_t k = 0; k < gfl.size(); ++k) {
            const Vec2 ik = inv_i(state, k);
            ig.d += ik.d;
            ig.q += ik.q;
        }
        if (has_sad) {
            const Vec2 ik = sad_i(state);
            ig.d += ik.d;
            ig.q += ik.q;
        }
        std::size_t c = 0;
        rec.channels[c++].push_back(t);
        rec.channels[c++].push_back(v.d);
        rec.channels[c++].push_back(v.q);
        rec.channels[c++].push_back(ig.d);
        rec.channels[c++].push_back(ig.q);
        for (std::size_t k = 0; k < gfl.size(); ++k) {
            const Vec2 ik = inv_i(state, k);
            rec.channels[c++].push_back(ik.d);
            rec.channels[c++].push_back(ik.q);
            rec.channels[c++].push_back(omega0 * t + gfl[k].delta);
            rec.channels[c++].push_back(gfl[k].omega);
        }
        if (has_sad) {
            const Vec2 ik = sad_i(state);
            rec.channels[c++].push_back(ik.d);
            rec.channels[c++].push_back(ik.q);
            rec.channels[c++].push_back(omega0 * t + sad.delta);
            rec.channels[c++].push_back(sad.omega);
            rec.channels[c++].push_back(state[sad_offset() + 2]);
        }
    }

    // One plant step: events and controller ticks fire at the step boundary.
    void step_once() {
        while (next_event < sc.events.size() &&
               sc.events[next_event].t <= t + 0.5 * sc.h) {
            apply_event(sc.events[next_event]);
            ++next_event;
        }
        if (!sc.freeze_controllers) {
            const Vec2 v = node_voltage(state);
            for (std::size_t k = 0; k < gfl.size(); ++k) {
                if (step_idx % gfl[k].tick_div == 0) {
                    gfl[k].i = inv_i(state, k);
                    gfl[k].tick(dithered(v, k));
                }
            }
            if (has_sad && step_idx % sad.tick_div == 0) {
                sad.i = sad_i(state);
                sad.vdc = state[sad_offset() + 2];
                sad.tick(dithered(v, gfl.size()));
            }
        }
        rk4_step();
        ++step_idx;
        t = static_cast<double>(step_idx) * sc.h;
    }
};

Simulator::Simulator(Scenario sc) : impl_(std::make_unique<Impl>()) {
    sc.validate();
    Impl& im = *impl_;
    im.sc = sc;
    im.omega0 = sc.model.grid.omega0;
    im.r_g = sc.model.grid.r_g;
    im.l_g = sc.model.grid.l_g;
    im.vg_mag = sc.model.grid.v_g_peak;

    for (const auto& u : sc.model.inverters) {
        GflSim d;
        d.p = u.params;
        d.T = 1.0 / u.params.f_s;
        d.tick_div = std::max(1, static_cast<int>(std::lround(d.T / sc.h)));
        d.idref = u.params.i_dref;
        d.iqref = u.params.i_qref;
        d.rated = std::max(10.0, std::hypot(u.params.i_dref, u.params.i_qref));
        im.gfl.push_back(d);
    }
    if (sc.model.sad) {
        im.has_sad = true;
        im.sad.p = *sc.model.sad;
        im.sad.T = 1.0 / sc.model.sad->f_s;
        im.sad.tick_div = std::max(1, static_cast<int>(std::lround(im.sad.T / sc.h)));
        im.sad.rated = 100.0;
        im.sad.iqref = 0.0;
    }

    im.state.assign(im.gfl.size() * 2 + (im.has_sad ? 3 : 0), 0.0);
    if (im.has_sad) im.state[im.sad_offset() + 2] = im.sad.p.v_dc;

    if (sc.warm_start) {
        double id = 0.0, iq = 0.0;
        for (const auto& d : im.gfl) {
            id += d.idref;
            iq += d.iqref;
        }
        if (im.has_sad) iq += im.sad.iqref;
        const plants::SteadyBus bus = plants::steady_bus(sc.model.grid, id, iq);
        for (auto& d : im.gfl) d.warm_start(bus.v_d0, bus.angle);
        if (im.has_sad) im.sad.warm_start(bus.v_d0, bus.angle);
        std::size_t o = 0;
        for (const auto& d : im.gfl) {
            im.state[o++] = d.i.d;
            im.state[o++] = d.i.q;
        }
        if (im.has_sad) {
            im.state[o++] = im.sad.i.d;
            im.state[o++] = im.sad.i.q;
            im.state[o] = im.sad.vdc;
        }
    } else if (im.has_sad) {
        im.sad.build_filters();
        im.sad.vdc = im.sad.p.v_dc;
    }

    im.rec.sample_hz = sc.record_hz;
    im.rec.seed = sc.seed;
    im.rec.channel_names = {"t_s", "vd_V", "vq_V", "igd_A", "igq_A"};
    for (std::size_t k = 0; k < im.gfl.size(); ++k) {
        const std::string id = "inv" + std::to_string(k + 1);
        for (const char* suffix : {"_id_A", "_iq_A", "_theta_rad", "_omega_rad_s"})
            im.rec.channel_names.push_back(id + suffix);
    }
    if (im.has_sad)
        for (const char* n :
             {"sad_id_A", "sad_iq_A", "sad_theta_rad", "sad_omega_rad_s", "sad_vdc_V"})
            im.rec.channel_names.emplace_back(n);
    im.rec.channels.resize(im.rec.channel_names.size());

    im.rec_div = std::max(1, static_cast<int>(std::lround(1.0 / (sc.record_hz * sc.h))));
    im.rec.sample_hz = 1.0 / (im.rec_div * sc.h);

    for (std::size_t k = 0; k <= im.gfl.size(); ++k)
        im.dither.emplace_back(sc.seed + static_cast<std::uint32_t>(k) * 7919u + 1u);

    im.record_sample();
}

Simulator::~Simulator() = default;
Simulator::Simulator(Simulator&&) noexcept = default;
Simulator& Simulator::operator=(Simulator&&) noexcept = default;

bool Simulator::advance_one_sample() {
    Impl& im = *impl_;
    if (im.done || im.divergent) return false;
    for (int s = 0; s < im.rec_div; ++s) {
        im.step_once();
        if (im.t >= im.sc.duration - 0.5 * im.sc.h) {
            im.done = true;
            break;
        }
    }
    im.check_divergence();
    if (!im.divergent) im.record_sample();
    im.rec.divergent = im.divergent;
    return !im.done && !im.divergent;
}

void Simulator::run_to_end() {
    while (advance_one_sample()) {
    }
}

double Simulator::time() const { return impl_->t; }
bool Simulator::divergent() const { return impl_->divergent; }

Vec2 Simulator::v_pcc() const { return impl_->node_voltage(impl_->state); }

Vec2 Simulator::i_grid() const {
    Vec2 ig{0.0, 0.0};
    for (std::size_t k = 0; k < impl_->gfl.size(); ++k) {
        const Vec2 ik = impl_->inv_i(impl_->state, k);
        ig.d += ik.d;
        ig.q += ik.q;
    }
    if (impl_->has_sad) {
        const Vec2 ik = impl_->sad_i(impl_->state);
        ig.d += ik.d;
        ig.q += ik.q;
    }
    return ig;
}

Vec2 Simulator::inverter_current(std::size_t k) const { return impl_->inv_i(impl_->state, k); }
Vec2 Simulator::sad_current() const { return impl_->sad_i(impl_->state); }
double Simulator::sad_vdc() const { return impl_->state[impl_->sad_offset() + 2]; }
double Simulator::sad_theta_abs() const {
    return impl_->omega0 * impl_->t + impl_->sad.delta;
}
double Simulator::sad_omega() const { return impl_->sad.omega; }

void Simulator::set_sad_iqref(double amps) { impl_->sad.iqref = amps; }
void Simulator::set_inverter_idref(std::size_t k, double amps) {
    impl_->gfl.at(k).idref = amps;
    impl_->gfl.at(k).ramp.active = false;
}
void Simulator::ramp_inverter_idref(std::size_t k, double target, double duration) {
    auto& d = impl_->gfl.at(k);
    d.ramp.start(d.idref, target, duration);
}
void Simulator::set_sad_params(double omega_c, double h_v) {
    const Vec2 v_pll = rot(impl_->node_voltage(impl_->state), -impl_->sad.delta);
    impl_->sad.set_damping_params(omega_c, h_v, v_pll.d);
}
void Simulator::set_sad_damping(bool on) { impl_->sad.damping_on = on; }

WaveRecord Simulator::take_record() { return std::move(impl_->rec); }

WaveRecord simulate(const Scenario& sc) {
    Simulator sim(sc);
    sim.run_to_end();
    return sim.take_record();
}

namespace {

// Device under test against a prescribed terminal voltage. The voltage
// varies inside the integration step, so it is a function of time here.
template <typename Device>
class ScanRig {
public:
    ScanRig(Device dev, std::size_t n_states, double h) : dev_(std::move(dev)), h_(h) {
        state_.assign(n_states, 0.0);
    }

    Device& device() { return dev_; }
    std::vector<double>& state() { return state_; }
    double time() const { return t_; }

    template <typename VoltFn, typename DerivFn, typename TickFn>
    void step(VoltFn v_of_t, DerivFn deriv, TickFn tick) {
        if (step_idx_ % dev_.tick_div == 0) tick(dev_, state_, v_of_t(t_));
        static thread_local std::vector<double> k1, k2, k3, k4, tmp;
        const std::size_t n = state_.size();
        k1.resize(n);
        k2.resize(n);
        k3.resize(n);
        k4.resize(n);
        tmp.resize(n);
        deriv(state_, v_of_t(t_), k1);
        for (std::size_t i = 0; i < n; ++i) tmp[i] = state_[i] + 0.5 * h_ * k1[i];
        deriv(tmp, v_of_t(t_ + 0.5 * h_), k2);
        for (std::size_t i = 0; i < n; ++i) tmp[i] = state_[i] + 0.5 * h_ * k2[i];
        deriv(tmp, v_of_t(t_ + 0.5 * h_), k3);
        for (std::size_t i = 0; i < n; ++i) tmp[i] = state_[i] + h_ * k3[i];
        deriv(tmp, v_of_t(t_ + h_), k4);
        for (std::size_t i = 0; i < n; ++i)
            state_[i] += h_ / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        ++step_idx_;
        t_ = static_cast<double>(step_idx_) * h_;
    }

private:
    Device dev_;
    std::vector<double> state_;
    double h_;
    double t_ = 0.0;
    long step_idx_ = 0;
};

struct PhasorPair {
    std::complex<double> d, q;
};

// Runs one single-frequency perturbation and extracts the current phasors by
// mean-removed single-bin projection over consecutive windows until they
// agree within the drift tolerance.
template <typename StepFn, typename ProbeFn>
PhasorPair project_scan(double f, const ScanOptions& opts, double rated, StepFn do_step,
                        ProbeFn probe) {
    const double cycles = std::max(static_cast<double>(opts.min_cycles),
                                   std::ceil(opts.min_window_s * f));
    const double window_s = cycles / f;
    const long settle_steps = static_cast<long>(std::ceil(opts.settle_s / opts.h));
    const long window_steps = static_cast<long>(std::lround(window_s / opts.h));

    for (long s = 0; s < settle_steps; ++s) do_step();

    auto window_phasor = [&](double t0_unused) -> PhasorPair {
        (void)t0_unused;
        std::complex<double> acc_d = 0.0, acc_q = 0.0, acc_e = 0.0;
        double mean_d = 0.0, mean_q = 0.0;
        std::vector<std::complex<double>> basis;
        std::vector<Vec2> samples;
        samples.reserve(static_cast<std::size_t>(window_steps));
        basis.reserve(static_cast<std::size_t>(window_steps));
        for (long s = 0; s < window_steps; ++s) {
            const auto [i, t] = probe();
            const std::complex<double> e(std::cos(kTwoPi * f * t), -std::sin(kTwoPi * f * t));
            samples.push_back(i);
            basis.push_back(e);
            mean_d += i.d;
            mean_q += i.q;
            do_step();
            if (std::hypot(i.d, i.q) > 100.0 * rated)
                throw ScanRefused("scan_admittance: device diverged at this operating point");
        }
        mean_d /= static_cast<double>(window_steps);
        mean_q /= static_cast<double>(window_steps);
        for (long s = 0; s < window_steps; ++s) {
            acc_d += (samples[static_cast<std::size_t>(s)].d - mean_d) *
                     basis[static_cast<std::size_t>(s)];
            acc_q += (samples[static_cast<std::size_t>(s)].q - mean_q) *
                     basis[static_cast<std::size_t>(s)];
            acc_e += basis[static_cast<std::size_t>(s)];
        }
        (void)acc_e;
        const double scale = 2.0 / static_cast<double>(window_steps);
        return {acc_d * scale, acc_q * scale};
    };

    PhasorPair p1 = window_phasor(0.0);
    for (int attempt = 0; attempt < 2; ++attempt) {
        const PhasorPair p2 = window_phasor(0.0);
        const double scale = std::max({std::abs(p1.d), std::abs(p1.q), std::abs(p2.d),
                                       std::abs(p2.q), 1e-12});
        const double drift = std::max(std::abs(p1.d - p2.d), std::abs(p1.q - p2.q)) / scale;
        if (drift < opts.drift_tol) return p2;
        p1 = p2;
    }
    throw NotSettled("scan_admittance: projection drift never settled");
}

DqMatrix assemble_columns(const PhasorPair& dcol, const PhasorPair& qcol, double amplitude) {
    // Norton convention: the device responds to +dv with di = -Y dv.
    return {-dcol.d / amplitude, -qcol.d / amplitude, -dcol.q / amplitude, -qcol.q / amplitude};
}

DqMatrix scan_gfl_once(const plants::GflParams& p, const plants::GflOperating& op, double f,
                       double amplitude, const ScanOptions& opts) {
    auto make_rig = [&]() {
        GflSim dev;
        dev.p = p;
        dev.T = 1.0 / p.f_s;
        dev.tick_div = std::max(1, static_cast<int>(std::lround(dev.T / opts.h)));
        dev.idref = op.i_d0;
        dev.iqref = op.i_q0;
        dev.rated = std::max(10.0, std::hypot(op.i_d0, op.i_q0));
        dev.warm_start(op.v_d0, 0.0);
        ScanRig<GflSim> rig(dev, 2, opts.h);
        rig.state()[0] = dev.i.d;
        rig.state()[1] = dev.i.q;
        return rig;
    };

    auto run_direction = [&](bool d_axis) {
        ScanRig<GflSim> rig = make_rig();
        auto v_of_t = [&](double t) -> Vec2 {
            const double a = amplitude * std::cos(kTwoPi * f * t);
            return {op.v_d0 + (d_axis ? a : 0.0), d_axis ? 0.0 : a};
        };
        auto dv = [&](const std::vector<double>& x, Vec2 v, std::vector<double>& dx) {
            const auto& dev = rig.device();
            dx.resize(2);
            dx[0] = (dev.m_applied.d - v.d - dev.p.r_l * x[0]) / dev.p.l + dev.p.omega0 * x[1];
            dx[1] = (dev.m_applied.q - v.q - dev.p.r_l * x[1]) / dev.p.l - dev.p.omega0 * x[0];
        };
        auto tick = [](GflSim& dev, const std::vector<double>& x, Vec2 v) {
            dev.i = {x[0], x[1]};
            dev.tick(v);
        };
        auto do_step = [&]() { rig.step(v_of_t, dv, tick); };
        auto probe = [&]() {
            return std::pair<Vec2, double>({rig.state()[0], rig.state()[1]}, rig.time());
        };
        return project_scan(f, opts, rig.device().rated, do_step, probe);
    };

    const PhasorPair dcol = run_direction(true);
    const PhasorPair qcol = run_direction(false);
    return assemble_columns(dcol, qcol, amplitude);
}

DqMatrix scan_sad_once(const plants::SadParams& p, double v_d0, double f, double amplitude,
                       const ScanOptions& opts) {
    auto run_direction = [&](bool d_axis) {
        SadSim dev;
        dev.p = p;
        dev.T = 1.0 / p.f_s;
        dev.tick_div = std::max(1, static_cast<int>(std::lround(dev.T / opts.h)));
        dev.iqref = 0.0;
        dev.rated = 100.0;
        dev.freeze_outer = true;  // inner loop and damping path only
        dev.idref_frozen = 0.0;
        dev.warm_start(v_d0, 0.0);
        ScanRig<SadSim> rig(dev, 2, opts.h);
        rig.state()[0] = dev.i.d;
        rig.state()[1] = dev.i.q;

        auto v_of_t = [&](double t) -> Vec2 {
            const double a = amplitude * std::cos(kTwoPi * f * t);
            return {v_d0 + (d_axis ? a : 0.0), d_axis ? 0.0 : a};
        };
        auto dv = [&](const std::vector<double>& x, Vec2 v, std::vector<double>& dx) {
            const auto& d = rig.device();
            dx.resize(2);
            dx[0] = (d.m_applied.d - v.d - d.p.r_f * x[0]) / d.p.l_f + d.p.omega0 * x[1];
            dx[1] = (d.m_applied.q - v.q - d.p.r_f * x[1]) / d.p.l_f - d.p.omega0 * x[0];
        };
        auto tick = [](SadSim& dev2, const std::vector<double>& x, Vec2 v) {
            dev2.i = {x[0], x[1]};
            dev2.tick(v);
        };
        auto do_step = [&]() { rig.step(v_of_t, dv, tick); };
        auto probe = [&]() {
            return std::pair<Vec2, double>({rig.state()[0], rig.state()[1]}, rig.time());
        };
        return project_scan(f, opts, rig.device().rated, do_step, probe);
    };
    const PhasorPair dcol = run_direction(true);
    const PhasorPair qcol = run_direction(false);
    return assemble_columns(dcol, qcol, amplitude);
}

DqMatrix scan_rl_once(const plants::GridParams& p, double f, double amplitude,
                      const ScanOptions& opts) {
    // Branch current flows from the terminal into the stiff source; the
    // device current into the node is its negative, which cancels the Norton
    // sign, so the scan recovers Z^-1 directly.
    auto run_direction = [&](bool d_axis) {
        struct Branch {
            int tick_div = 1;
        } dev;
        ScanRig<Branch> rig(dev, 2, opts.h);
        auto v_of_t = [&](double t) -> Vec2 {
            const double a = amplitude * std::cos(kTwoPi * f * t);
            return {p.v_g_peak + (d_axis ? a : 0.0), d_axis ? 0.0 : a};
        };
        auto dv = [&](const std::vector<double>& x, Vec2 v, std::vector<double>& dx) {
            dx.resize(2);
            if (p.l_g > 0.0) {
                dx[0] = (v.d - p.v_g_peak - p.r_g * x[0]) / p.l_g + p.omega0 * x[1];
                dx[1] = (v.q - p.r_g * x[1]) / p.l_g - p.omega0 * x[0];
            } else {
                dx[0] = dx[1] = 0.0;
            }
        };
        auto tick = [](Branch&, const std::vector<double>&, Vec2) {};
        auto do_step = [&]() { rig.step(v_of_t, dv, tick); };
        auto probe = [&]() {
            return std::pair<Vec2, double>({-rig.state()[0], -rig.state()[1]}, rig.time());
        };
        // Start on the branch's steady operating point.
        rig.state()[0] = 0.0;
        rig.state()[1] = 0.0;
        return project_scan(f, opts, 1e6, do_step, probe);
    };
    const PhasorPair dcol = run_direction(true);
    const PhasorPair qcol = run_direction(false);
    return assemble_columns(dcol, qcol, amplitude);
}

void check_nyquist(const FrequencyGrid& freqs, double f_s) {
    if (freqs.f_hz.back() > 0.5 * f_s)
        throw InvalidArgument("scan_admittance: frequency above the controller Nyquist rate");
}

double mat_diff_rel(const DqMatrix& a, const DqMatrix& b) {
    double scale = 1e-300;
    for (Complex z : {b.dd, b.dq, b.qd, b.qq}) scale = std::max(scale, std::abs(z));
    double err = 0.0;
    for (auto [x, y] : {std::pair{a.dd, b.dd}, std::pair{a.dq, b.dq}, std::pair{a.qd, b.qd},
                        std::pair{a.qq, b.qq}})
        err = std::max(err, std::abs(x - y));
    return err / scale;
}

template <typename ScanOne>
std::vector<DqMatrix> scan_grid(const FrequencyGrid& freqs, double amplitude,
                                const ScanOptions& opts, ScanOne scan_one) {
    freqs.validate();
    std::vector<DqMatrix> out;
    out.reserve(freqs.size());
    for (double f : freqs.f_hz) {
        DqMatrix y = scan_one(f, amplitude);
        if (opts.check_linearity) {
            const DqMatrix y_half = scan_one(f, 0.5 * amplitude);
            if (mat_diff_rel(y_half, y) > 0.01)
                throw ScanRefused("scan_admittance: linearity check failed");
        }
        out.push_back(y);
    }
    return out;
}

}  // namespace

std::vector<DqMatrix> scan_admittance(const plants::GflParams& p, const plants::GflOperating& op,
                                      const FrequencyGrid& freqs, const ScanOptions& opts) {
    p.validate();
    check_nyquist(freqs, p.f_s);
    const double amplitude = opts.amplitude_frac * op.v_d0;
    return scan_grid(freqs, amplitude, opts,
                     [&](double f, double a) { return scan_gfl_once(p, op, f, a, opts); });
}

std::vector<DqMatrix> scan_admittance(const plants::SadParams& p, double v_d0,
                                      const FrequencyGrid& freqs, const ScanOptions& opts) {
    p.validate();
    check_nyquist(freqs, p.f_s);
    const double amplitude = opts.amplitude_frac * v_d0;
    return scan_grid(freqs, amplitude, opts,
                     [&](double f, double a) { return scan_sad_once(p, v_d0, f, a, opts); });
}

std::vector<DqMatrix> scan_admittance(const plants::GridParams& p, const FrequencyGrid& freqs,
                                      const ScanOptions& opts) {
    p.validate();
    const double amplitude = opts.amplitude_frac * p.v_g_peak;
    return scan_grid(freqs, amplitude, opts,
                     [&](double f, double a) { return scan_rl_once(p, f, a, opts); });
}

InstabilityVerdict detect_instability(const WaveRecord& w, double window_s) {
    if (w.size() < 4) throw InvalidArgument("detect_instability: record too short");
    const auto& t = w.channels.at(0);
    const auto& igd = w.channel("igd_A");
    const auto& igq = w.channel("igq_A");
    const double span = t.back() - t.front();
    const int n_windows = static_cast<int>(std::floor(span / window_s));
    if (n_windows < 3)
        throw InvalidArgument("detect_instability: record shorter than 3 windows");
    const int use = std::min(n_windows, 8);

    double scale = 1.0;
    for (std::size_t i = 0; i < igd.size(); ++i)
        scale = std::max(scale, std::hypot(igd[i], igq[i]));

    std::vector<double> rms(static_cast<std::size_t>(use));
    std::vector<double> center(static_cast<std::size_t>(use));
    const double t_end = t.back();
    for (int wdx = 0; wdx < use; ++wdx) {
        const double w1 = t_end - window_s * (use - 1 - wdx);
        const double w0 = w1 - window_s;
        double md = 0.0, mq = 0.0;
        std::size_t n = 0;
        for (std::size_t i = 0; i < t.size(); ++i) {
            if (t[i] < w0 || t[i] > w1) continue;
            md += igd[i];
            mq += igq[i];
            ++n;
        }
        if (n < 2) throw InvalidArgument("detect_instability: empty analysis window");
        md /= static_cast<double>(n);
        mq /= static_cast<double>(n);
        double acc = 0.0;
        for (std::size_t i = 0; i < t.size(); ++i) {
            if (t[i] < w0 || t[i] > w1) continue;
            const double dd = igd[i] - md;
            const double dq = igq[i] - mq;
            acc += dd * dd + dq * dq;
        }
        rms[static_cast<std::size_t>(wdx)] = std::sqrt(acc / static_cast<double>(n));
        center[static_cast<std::size_t>(wdx)] = 0.5 * (w0 + w1);
    }

    InstabilityVerdict v;
    const double settle_level = 1e-4 * scale;
    v.settled = rms.back() < settle_level;

    // Least-squares slope of ln(rms) versus time.
    double sx = 0.0, sy = 0.0, sxx = 0.0, sxy = 0.0;
    const auto n = static_cast<double>(rms.size());
    for (std::size_t i = 0; i < rms.size(); ++i) {
        const double y = std::log(std::max(rms[i], 1e-12 * scale));
        sx += center[i];
        sy += y;
        sxx += center[i] * center[i];
        sxy += center[i] * y;
    }
    const double denom = n * sxx - sx * sx;
    v.growth_rate = denom > 0.0 ? (n * sxy - sx * sy) / denom : 0.0;
    if (v.settled) v.growth_rate = 0.0;

    if (w.divergent || v.growth_rate > 2.0)
        v.kind = InstabilityVerdict::Kind::unstable;
    else if (v.settled || v.growth_rate < -2.0)
        v.kind = InstabilityVerdict::Kind::stable;
    else
        v.kind = InstabilityVerdict::Kind::inconclusive;
    return v;
}

}  // namespace sadkit::simtime
