#include "sadkit/dqcore.hpp"

#include <algorithm>
#include <cmath>

namespace sadkit {

namespace {

bool all_finite(const std::vector<double>& v) {
    return std::all_of(v.begin(), v.end(), [](double x) { return std::isfinite(x); });
}

bool any_nonzero(const std::vector<double>& v) {
    return std::any_of(v.begin(), v.end(), [](double x) { return x != 0.0; });
}

// Horner evaluation that also reports the largest intermediate term, used to
// decide whether a near-zero result is a genuine pole.
struct PolyEval {
    Complex value;
    double scale;
};

PolyEval polyval(const std::vector<double>& coeffs, Complex s) {
    Complex acc = 0.0;
    double scale = 0.0;
    for (auto it = coeffs.rbegin(); it != coeffs.rend(); ++it) {
        acc = acc * s + *it;
        scale = std::max({scale, std::abs(acc), std::abs(*it)});
    }
    return {acc, scale};
}

}  // namespace

void RationalTF::validate() const {
    if (num.empty() || den.empty()) throw InvalidArgument("rational tf: empty coefficient list");
    if (!all_finite(num) || !all_finite(den))
        throw InvalidArgument("rational tf: non-finite coefficient");
    if (!any_nonzero(den)) throw InvalidArgument("rational tf: zero denominator polynomial");
}

RationalTF make_tf(std::vector<double> num, std::vector<double> den) {
    RationalTF tf{std::move(num), std::move(den)};
    tf.validate();
    return tf;
}

Complex eval_rational_s(const RationalTF& tf, Complex s) {
    const PolyEval n = polyval(tf.num, s);
    const PolyEval d = polyval(tf.den, s);
    if (std::abs(d.value) <= 1e-14 * d.scale)
        throw PoleAtEvaluation("rational tf evaluated at a pole");
    return n.value / d.value;
}

Complex eval_rational(const RationalTF& tf, double f_hz) {
    return eval_rational_s(tf, Complex(0.0, kTwoPi * f_hz));
}

RationalTF pade_delay(double t_d) {
    if (!(t_d > 0.0)) throw InvalidArgument("pade_delay: t_d must be > 0");
    const double a = 0.5 * t_d;
    const double b = t_d * t_d / 12.0;
    return RationalTF{{1.0, -a, b}, {1.0, a, b}};
}

DqMatrix DqMatrix::inverse() const {
    const Complex d = det();
    const double scale = std::max({std::abs(dd), std::abs(dq), std::abs(qd), std::abs(qq)});
    if (std::abs(d) <= 1e-14 * scale * scale)
        throw SingularMatrix("dq matrix not invertible");
    return {qq / d, -dq / d, -qd / d, dd / d};
}

bool DqMatrix::finite() const {
    auto ok = [](Complex z) { return std::isfinite(z.real()) && std::isfinite(z.imag()); };
    return ok(dd) && ok(dq) && ok(qd) && ok(qq);
}

DqMatrix operator+(const DqMatrix& a, const DqMatrix& b) {
    return {a.dd + b.dd, a.dq + b.dq, a.qd + b.qd, a.qq + b.qq};
}

DqMatrix operator-(const DqMatrix& a, const DqMatrix& b) {
    return {a.dd - b.dd, a.dq - b.dq, a.qd - b.qd, a.qq - b.qq};
}

DqMatrix operator*(const DqMatrix& a, const DqMatrix& b) {
    return {a.dd * b.dd + a.dq * b.qd, a.dd * b.dq + a.dq * b.qq,
            a.qd * b.dd + a.qq * b.qd, a.qd * b.dq + a.qq * b.qq};
}

DqMatrix operator*(Complex k, const DqMatrix& m) {
    return {k * m.dd, k * m.dq, k * m.qd, k * m.qq};
}

std::pair<Complex, Complex> eig2(const DqMatrix& m) {
    if (!m.finite()) throw InvalidArgument("eig2: non-finite matrix entry");
    const Complex tr = m.trace();
    const Complex dt = m.det();
    Complex disc = std::sqrt(tr * tr - 4.0 * dt);
    // Pick the sqrt branch that avoids cancellation in tr + disc.
    if (std::real(std::conj(tr) * disc) < 0.0) disc = -disc;
    const Complex l1 = 0.5 * (tr + disc);
    const Complex l2 = (std::abs(l1) > 0.0) ? dt / l1 : 0.5 * (tr - disc);
    return {l1, l2};
}

FrequencyGrid FrequencyGrid::log_spaced(double f_min, double f_max, int points) {
    if (!(f_min > 0.0) || !(f_max > f_min) || points < 2)
        throw InvalidArgument("log_spaced: need 0 < f_min < f_max and points >= 2");
    FrequencyGrid g;
    g.f_hz.resize(static_cast<std::size_t>(points));
    const double l0 = std::log10(f_min);
    const double l1 = std::log10(f_max);
    for (int i = 0; i < points; ++i)
        g.f_hz[static_cast<std::size_t>(i)] = std::pow(10.0, l0 + (l1 - l0) * i / (points - 1));
    g.f_hz.front() = f_min;
    g.f_hz.back() = f_max;
    g.validate();
    return g;
}

void FrequencyGrid::validate() const {
    if (f_hz.empty()) throw InvalidArgument("frequency grid: empty");
    if (f_hz.front() < 0.01) throw InvalidArgument("frequency grid: min below 0.01 Hz");
    for (std::size_t i = 1; i < f_hz.size(); ++i)
        if (!(f_hz[i] > f_hz[i - 1]))
            throw InvalidArgument("frequency grid: not strictly increasing");
}

std::pair<EigenTrajectory, EigenTrajectory> track_branches(
    const std::vector<double>& f_hz, const std::vector<std::pair<Complex, Complex>>& eigenpairs) {
    if (f_hz.size() != eigenpairs.size())
        throw InvalidArgument("track_branches: size mismatch");
    if (f_hz.size() < 2)
        throw InvalidArgument("track_branches: need at least 2 frequency samples");

    EigenTrajectory b1{f_hz, {}, 1};
    EigenTrajectory b2{f_hz, {}, 2};
    b1.values.reserve(f_hz.size());
    b2.values.reserve(f_hz.size());

    // Branch 1 starts with the larger real part; ties fall back to larger
    // imaginary part and finally to input order.
    auto [ea, eb] = eigenpairs.front();
    bool a_first = ea.real() > eb.real() ||
                   (ea.real() == eb.real() && ea.imag() > eb.imag()) ||
                   (ea == eb);
    b1.values.push_back(a_first ? ea : eb);
    b2.values.push_back(a_first ? eb : ea);

    for (std::size_t i = 1; i < eigenpairs.size(); ++i) {
        const auto& [pa, pb] = eigenpairs[i];
        const Complex p1 = b1.values.back();
        const Complex p2 = b2.values.back();
        const double keep = std::abs(pa - p1) + std::abs(pb - p2);
        const double swap = std::abs(pb - p1) + std::abs(pa - p2);
        const bool take_keep = keep <= swap;  // exact tie keeps input order
        b1.values.push_back(take_keep ? pa : pb);
        b2.values.push_back(take_keep ? pb : pa);
    }
    return {std::move(b1), std::move(b2)};
}

namespace {

// Radial dive toward the origin, a pass on the positive-real side, and the
// radial return onto the mirror image. Keeps every closure segment's
// argument increment below pi and matches the locus's true approach to its
// zero at infinite frequency.
void append_high_closure(std::vector<Complex>& curve, Complex end) {
    const double r = std::abs(end);
    if (r == 0.0 || std::abs(end.imag()) == 0.0) return;
    const double eps = 1e-3 * r;
    curve.push_back(end / r * eps);
    curve.emplace_back(eps, 0.0);
    curve.push_back(std::conj(end) / r * eps);
}

void append_mirror(std::vector<Complex>& curve, const std::vector<Complex>& values) {
    for (auto it = values.rbegin(); it != values.rend(); ++it) curve.push_back(std::conj(*it));
}

}  // namespace

std::vector<Complex> close_conjugate_mirror(const EigenTrajectory& traj) {
    if (traj.values.empty()) throw InvalidArgument("close_conjugate_mirror: empty trajectory");
    std::vector<Complex> curve;
    curve.reserve(2 * traj.values.size() + 4);
    curve.insert(curve.end(), traj.values.begin(), traj.values.end());
    append_high_closure(curve, traj.values.back());
    append_mirror(curve, traj.values);
    return curve;
}

int winding_sum(const EigenTrajectory& b1, const EigenTrajectory& b2, Complex point) {
    if (b1.values.empty() || b2.values.empty())
        throw InvalidArgument("winding_sum: empty trajectory");
    std::vector<Complex> curve;
    curve.reserve(4 * b1.values.size() + 8);
    curve.insert(curve.end(), b1.values.begin(), b1.values.end());
    append_high_closure(curve, b1.values.back());
    append_mirror(curve, b1.values);
    // conj(b1) at the lowest frequency sits next to b2 there (conjugate-pair
    // dc) or next to b1 itself (real dc); either way the hop is short or
    // cancels against the closing hop below.
    curve.insert(curve.end(), b2.values.begin(), b2.values.end());
    append_high_closure(curve, b2.values.back());
    append_mirror(curve, b2.values);
    return winding_number(curve, point);
}

int winding_number(std::span<const Complex> closed_curve, Complex point) {
    if (closed_curve.size() < 3) throw InvalidArgument("winding_number: need >= 3 points");
    double total = 0.0;
    const std::size_t n = closed_curve.size();
    for (std::size_t i = 0; i < n; ++i) {
        const Complex za = closed_curve[i] - point;
        const Complex zb = closed_curve[(i + 1) % n] - point;
        if (std::abs(za) < 1e-9 || std::abs(zb) < 1e-9)
            throw OnBoundary("winding_number: curve passes through the test point");
        if (za == zb) continue;
        const double inc = std::arg(zb / za);
        if (std::abs(inc) >= kPi - 1e-12)
            throw GridTooCoarse("winding_number: segment argument jump >= pi");
        total += inc;
    }
    return static_cast<int>(std::lround(total / kTwoPi));
}

}  // namespace sadkit
