#include "sadkit/stability.hpp"

#include <algorithm>
#include <cmath>
#include <future>

namespace sadkit::stability {

void SystemModel::validate() const {
    if (inverters.empty()) throw InvalidArgument("system model: at least one inverter required");
    grid.validate();
    for (const auto& u : inverters) u.params.validate();
    if (sad) sad->validate();
    if (!(v_d0 > 0.0)) throw InvalidArgument("system model: v_d0 must be > 0");
}

double SystemModel::total_id() const {
    double s = 0.0;
    for (const auto& u : inverters) s += u.i_d0;
    return s;
}

double SystemModel::total_iq() const {
    double s = 0.0;
    for (const auto& u : inverters) s += u.i_q0;
    return s;
}

SystemModel SystemModel::steady(std::vector<InverterUnit> inverters, plants::GridParams grid,
                                std::optional<plants::SadParams> sad) {
    SystemModel m{std::move(inverters), grid, std::move(sad), 0.0};
    m.v_d0 = plants::steady_bus(grid, m.total_id(), m.total_iq()).v_d0;
    m.validate();
    return m;
}

SystemModel SystemModel::with_power_scale(double scale) const {
    SystemModel m = *this;
    for (auto& u : m.inverters) {
        u.i_d0 *= scale;
        u.i_q0 *= scale;
        u.params.i_dref *= scale;
        u.params.i_qref *= scale;
    }
    m.v_d0 = plants::steady_bus(m.grid, m.total_id(), m.total_iq()).v_d0;
    return m;
}

SystemModel SystemModel::with_impedance_scale(double scale) const {
    if (!(scale > 0.0)) throw InvalidArgument("impedance scale must be > 0");
    SystemModel m = *this;
    m.grid.r_g *= scale;
    m.grid.l_g *= scale;
    m.v_d0 = plants::steady_bus(m.grid, m.total_id(), m.total_iq()).v_d0;
    return m;
}

plants::OperatingPoint SystemModel::operating_point() const {
    plants::OperatingPoint op;
    op.v_d0 = v_d0;
    for (const auto& u : inverters) op.inverter_currents.push_back({u.i_d0, u.i_q0});
    op.r_g = grid.r_g;
    op.l_g = grid.l_g;
    return op;
}

std::string to_string(Verdict v) {
    switch (v) {
        case Verdict::stable: return "stable";
        case Verdict::unstable: return "unstable";
        case Verdict::marginal: return "marginal";
    }
    return "unknown";
}

SourceSet make_sources(const SystemModel& model) {
    model.validate();
    SourceSet s;
    for (const auto& u : model.inverters) {
        plants::GflOperating op{model.v_d0, u.i_d0, u.i_q0};
        plants::GflParams p = u.params;
        s.inverters.push_back([p, op](double f) { return plants::gfl_admittance(p, op, f); });
    }
    plants::GridParams g = model.grid;
    s.grid_z = [g](double f) { return plants::grid_impedance(g, f); };
    if (model.sad) {
        plants::SadParams sp = *model.sad;
        s.sad = [sp](double f) { return plants::sad_admittance(sp, f); };
    }
    return s;
}

DqMatrix ypcc_at(const SourceSet& s, double f_hz) {
    DqMatrix y = s.grid_z(f_hz).inverse();
    for (const auto& src : s.inverters) y = y + src(f_hz);
    if (s.sad) {
        const Complex yad = s.sad(f_hz);
        y = y + DqMatrix::diagonal(yad, yad);
    }
    return y;
}

PccAssembly assemble_ypcc(const SystemModel& model, const FrequencyGrid& grid) {
    grid.validate();
    const SourceSet s = make_sources(model);
    PccAssembly out;
    out.y_pcc.reserve(grid.size());
    out.l_m.reserve(grid.size());
    for (double f : grid.f_hz) {
        out.y_pcc.push_back(ypcc_at(s, f));
        DqMatrix sum{0.0, 0.0, 0.0, 0.0};
        for (const auto& src : s.inverters) sum = sum + src(f);
        out.l_m.push_back(sum * s.grid_z(f));
    }
    return out;
}

std::vector<Crossing> find_crossings(const EigenTrajectory& traj) {
    std::vector<Crossing> out;
    int last_sign = 0;
    std::size_t last_idx = 0;
    for (std::size_t i = 0; i < traj.values.size(); ++i) {
        const double im = traj.values[i].imag();
        const int s = (im > 0.0) - (im < 0.0);
        if (s == 0) continue;
        if (last_sign != 0 && s != last_sign) {
            if (i == last_idx + 1) {
                const double im0 = traj.values[last_idx].imag();
                const double im1 = im;
                const double t = im0 / (im0 - im1);
                const double f = traj.f_hz[last_idx] + t * (traj.f_hz[i] - traj.f_hz[last_idx]);
                const double re0 = traj.values[last_idx].real();
                const double re1 = traj.values[i].real();
                out.push_back({f, re0 + t * (re1 - re0)});
            } else {
                // Exact zero sampled at a node between the two signed samples.
                const std::size_t z = last_idx + 1;
                out.push_back({traj.f_hz[z], traj.values[z].real()});
            }
        }
        last_sign = s;
        last_idx = i;
    }
    return out;
}

namespace {

struct SamplePoint {
    double f;
    std::pair<Complex, Complex> eig;
};

SamplePoint sample(const SourceSet& s, double f) { return {f, eig2(ypcc_at(s, f))}; }

// Geometric midpoint keeps refinement consistent with the log-spaced grid.
double midpoint(double a, double b) { return std::sqrt(a * b); }

}  // namespace

StabilityReport assess_sources(const SourceSet& sources, const AnalysisOptions& opts) {
    FrequencyGrid grid = FrequencyGrid::log_spaced(opts.f_min_hz, opts.f_max_hz, opts.points);

    std::vector<SamplePoint> pts;
    pts.reserve(grid.size());
    for (double f : grid.f_hz) pts.push_back(sample(sources, f));

    EigenTrajectory b1, b2;
    for (int pass = 0; pass <= opts.refine_passes; ++pass) {
        std::vector<double> fs(pts.size());
        std::vector<std::pair<Complex, Complex>> eigs(pts.size());
        for (std::size_t i = 0; i < pts.size(); ++i) {
            fs[i] = pts[i].f;
            eigs[i] = pts[i].eig;
        }
        std::tie(b1, b2) = track_branches(fs, eigs);

        if (pass == opts.refine_passes || pts.size() >= opts.max_points) break;

        std::vector<char> mark(pts.size() - 1, 0);
        for (const EigenTrajectory* b : {&b1, &b2}) {
            for (std::size_t i = 0; i + 1 < b->values.size(); ++i) {
                const Complex za = b->values[i];
                const Complex zb = b->values[i + 1];
                // Angular resolution about the origin (the assessed point).
                if (std::abs(za) > 0.0 && std::abs(zb) > 0.0 &&
                    std::abs(std::arg(zb / za)) > opts.max_arg_step)
                    mark[i] = 1;
                // Tight brackets around Im-zero crossings pin the margin.
                if (za.imag() * zb.imag() < 0.0 &&
                    (fs[i + 1] - fs[i]) > opts.crossing_rel_tol * fs[i])
                    mark[i] = 1;
            }
        }
        if (std::none_of(mark.begin(), mark.end(), [](char c) { return c != 0; })) break;

        std::vector<SamplePoint> next;
        next.reserve(pts.size() + static_cast<std::size_t>(std::count(mark.begin(), mark.end(), 1)));
        for (std::size_t i = 0; i < pts.size(); ++i) {
            next.push_back(pts[i]);
            if (i + 1 < pts.size() && mark[i] && next.size() < opts.max_points)
                next.push_back(sample(sources, midpoint(pts[i].f, pts[i + 1].f)));
        }
        pts = std::move(next);
    }

    StabilityReport rep;
    rep.f_hz.reserve(pts.size());
    for (const auto& p : pts) rep.f_hz.push_back(p.f);
    rep.branch1 = b1;
    rep.branch2 = b2;
    rep.crossings[0] = find_crossings(b1);
    rep.crossings[1] = find_crossings(b2);

    rep.margin = std::numeric_limits<double>::infinity();
    for (int b = 0; b < 2; ++b) {
        for (const auto& c : rep.crossings[static_cast<std::size_t>(b)]) {
            if (c.re_at_crossing < rep.margin) {
                rep.margin = c.re_at_crossing;
                rep.f_cr_hz = c.f_cr_hz;
                rep.critical_branch = b + 1;
            }
        }
    }

    bool on_boundary = false;
    try {
        rep.winding_total = winding_sum(b1, b2, 0.0);
        rep.winding[0] = winding_number(close_conjugate_mirror(b1), 0.0);
        rep.winding[1] = winding_number(close_conjugate_mirror(b2), 0.0);
    } catch (const OnBoundary&) {
        on_boundary = true;
    }

    const bool encircles = rep.winding_total != 0;
    const bool has_margin = std::isfinite(rep.margin);
    if (on_boundary || (has_margin && std::abs(rep.margin) < opts.marginal_band)) {
        rep.verdict = Verdict::marginal;
    } else {
        rep.verdict = encircles ? Verdict::unstable : Verdict::stable;
    }
    // Winding says one thing, the crossing margin another: conditionally
    // stable shape, flag it rather than silently trusting either.
    if (has_margin && ((encircles && rep.margin > opts.marginal_band) ||
                       (!encircles && rep.margin < -opts.marginal_band)))
        rep.conditionally_stable_warning = true;

    // Diagnostics over the final grid.
    rep.l_m.reserve(pts.size());
    for (const auto& p : pts) {
        DqMatrix sum{0.0, 0.0, 0.0, 0.0};
        for (const auto& src : sources.inverters) sum = sum + src(p.f);
        rep.l_m.push_back(sum * sources.grid_z(p.f));
    }

    if (sources.sad) {
        // Scalar shunt admittance shifts both eigenvalues rigidly; verify the
        // superposition mechanism on every assessed frequency.
        SourceSet base = sources;
        base.sad = nullptr;
        double max_dev = 0.0;
        for (const auto& p : pts) {
            const Complex yad = sources.sad(p.f);
            const auto [u1, u2] = eig2(ypcc_at(base, p.f));
            const auto [s1, s2] = p.eig;
            const double direct =
                std::max(std::abs(s1 - (u1 + yad)), std::abs(s2 - (u2 + yad)));
            const double swapped =
                std::max(std::abs(s1 - (u2 + yad)), std::abs(s2 - (u1 + yad)));
            max_dev = std::max(max_dev, std::min(direct, swapped));
        }
        rep.shift_identity_max_dev = max_dev;
    }

    return rep;
}

StabilityReport assess(const SystemModel& model, const AnalysisOptions& opts) {
    return assess_sources(make_sources(model), opts);
}

std::vector<SweepRow> margin_sweep(const SystemModel& base, SweepAxis axis, double lo, double hi,
                                   int points, const AnalysisOptions& opts) {
    if (points < 1) throw InvalidArgument("margin_sweep: points must be >= 1");
    if (points > 1 && !(hi > lo)) throw InvalidArgument("margin_sweep: need hi > lo");

    std::vector<double> axis_values(static_cast<std::size_t>(points));
    for (int i = 0; i < points; ++i)
        axis_values[static_cast<std::size_t>(i)] =
            points == 1 ? lo : lo + (hi - lo) * i / (points - 1);

    auto eval_point = [&](double t) {
        const SystemModel m = axis == SweepAxis::power ? base.with_power_scale(t)
                                                       : base.with_impedance_scale(t);
        const StabilityReport r = assess(m, opts);
        return SweepRow{t, r.f_cr_hz, r.margin, r.verdict};
    };

    std::vector<std::future<SweepRow>> futures;
    futures.reserve(axis_values.size());
    for (double t : axis_values)
        futures.push_back(std::async(std::launch::async, eval_point, t));

    std::vector<SweepRow> rows;
    rows.reserve(axis_values.size());
    for (auto& f : futures) rows.push_back(f.get());
    return rows;
}

}  // namespace sadkit::stability
