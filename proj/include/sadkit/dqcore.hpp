#pragma once

#include <complex>
#include <span>
#include <utility>
#include <vector>

#include "sadkit/errors.hpp"

namespace sadkit {

using Complex = std::complex<double>;

inline constexpr double kPi = 3.14159265358979323846;
inline constexpr double kTwoPi = 2.0 * kPi;

/// Real-coefficient rational function of s. Coefficients are stored in
/// ascending powers; the denominator must not be the zero polynomial.
struct RationalTF {
    std::vector<double> num;
    std::vector<double> den;

    void validate() const;
};

RationalTF make_tf(std::vector<double> num, std::vector<double> den);

/// num(s)/den(s) at an arbitrary complex s.
Complex eval_rational_s(const RationalTF& tf, Complex s);

/// Evaluate at s = j*2*pi*f. Negative f is allowed so callers can check the
/// conjugate-symmetry property eval(-f) == conj(eval(f)).
Complex eval_rational(const RationalTF& tf, double f_hz);

/// Second-order Pade approximant of a pure delay exp(-s*t_d). All-pass:
/// |G(jw)| == 1 for every w.
RationalTF pade_delay(double t_d);

/// 2x2 complex matrix in the synchronous dq frame. Entry units (S or Ohm)
/// depend on context.
struct DqMatrix {
    Complex dd, dq, qd, qq;

    static DqMatrix identity() { return {1.0, 0.0, 0.0, 1.0}; }
    static DqMatrix diagonal(Complex a, Complex b) { return {a, 0.0, 0.0, b}; }

    Complex trace() const { return dd + qq; }
    Complex det() const { return dd * qq - dq * qd; }
    DqMatrix inverse() const;
    bool finite() const;
};

DqMatrix operator+(const DqMatrix& a, const DqMatrix& b);
DqMatrix operator-(const DqMatrix& a, const DqMatrix& b);
DqMatrix operator*(const DqMatrix& a, const DqMatrix& b);
DqMatrix operator*(Complex k, const DqMatrix& m);

/// Closed-form eigenvalues of a 2x2 complex matrix: the two roots of
/// l^2 - tr(M) l + det(M). The first root takes the numerically dominant
/// sqrt branch; treat the result as an unordered pair.
std::pair<Complex, Complex> eig2(const DqMatrix& m);

/// Strictly increasing evaluation frequencies in Hz, all >= 0.01.
struct FrequencyGrid {
    std::vector<double> f_hz;

    static FrequencyGrid log_spaced(double f_min, double f_max, int points);
    void validate() const;
    std::size_t size() const { return f_hz.size(); }
};

/// One eigenvalue branch sampled over frequency.
struct EigenTrajectory {
    std::vector<double> f_hz;
    std::vector<Complex> values;
    int branch_id = 0;
};

/// Pair consecutive eigenvalue samples into two continuous branches by
/// minimizing total jump distance at every step. Branch 1 starts with the
/// eigenvalue of larger real part (ties: larger imaginary part, then input
/// order) at the lowest frequency.
std::pair<EigenTrajectory, EigenTrajectory> track_branches(
    const std::vector<double>& f_hz, const std::vector<std::pair<Complex, Complex>>& eigenpairs);

/// Close a positive-frequency trajectory into a full Nyquist-style contour
/// using lambda(-jw) = conj(lambda(jw)). Beyond the last sample an inductive
/// node admittance shrinks to zero with bounded argument oscillation, so the
/// high-frequency tail is closed radially into a small positive-real waypoint
/// (the indentation that excludes the zero at infinity). Branch identities
/// can braid between the two eigenvalue loci; use winding_sum for the
/// encirclement count that is invariant to braiding.
std::vector<Complex> close_conjugate_mirror(const EigenTrajectory& traj);

/// Net winding about `point` of the single closed curve formed by both
/// branches and their conjugate mirrors. This equals the right-half-plane
/// zero count of the characteristic determinant (negated for clockwise
/// traversal) and stays correct when the dc eigenvalues are a conjugate pair
/// and the loci exchange along the way.
int winding_sum(const EigenTrajectory& b1, const EigenTrajectory& b2, Complex point);

/// Signed winding count of a closed polygonal curve around `point`
/// (counterclockwise positive). The final segment wraps back to the first
/// point. Throws OnBoundary if the curve passes within 1e-9 of `point` and
/// GridTooCoarse if any segment's argument increment reaches pi.
int winding_number(std::span<const Complex> closed_curve, Complex point);

}  // namespace sadkit
