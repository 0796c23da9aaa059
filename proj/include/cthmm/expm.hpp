#pragma once

// Matrix exponential by scaling and squaring with diagonal Pade approximants
// (degrees 3, 5, 7, 9, 13; Higham's theta thresholds on the 1-norm).

#include <Eigen/Dense>

#include <array>
#include <cmath>

#include "cthmm/errors.hpp"

namespace cthmm {

namespace detail {

inline double one_norm(const Eigen::MatrixXd& m) { return m.cwiseAbs().colwise().sum().maxCoeff(); }

template <std::size_t N>
void pade_odd_even(const Eigen::MatrixXd& a, const std::array<double, N>& b, Eigen::MatrixXd& u,
                   Eigen::MatrixXd& v) {
  const auto n = a.rows();
  const Eigen::MatrixXd ident = Eigen::MatrixXd::Identity(n, n);
  const Eigen::MatrixXd a2 = a * a;
  Eigen::MatrixXd power = ident;
  Eigen::MatrixXd odd = Eigen::MatrixXd::Zero(n, n);
  v = Eigen::MatrixXd::Zero(n, n);
  for (std::size_t k = 0; k + 1 < N; k += 2) {
    v += b[k] * power;
    odd += b[k + 1] * power;
    power = power * a2;
  }
  u.noalias() = a * odd;
}

}  // namespace detail

inline Eigen::MatrixXd matrix_exponential(const Eigen::MatrixXd& m) {
  if (m.rows() != m.cols()) throw ArgumentError("matrix_exponential: matrix must be square");
  if (!m.allFinite()) throw ArgumentError("matrix_exponential: non-finite entries");
  const auto n = m.rows();
  if (n == 0) return m;

  static constexpr std::array<double, 4> b3{120.0, 60.0, 12.0, 1.0};
  static constexpr std::array<double, 6> b5{30240.0, 15120.0, 3360.0, 420.0, 30.0, 1.0};
  static constexpr std::array<double, 8> b7{17297280.0, 8648640.0, 1995840.0, 277200.0,
                                            25200.0,    1512.0,    56.0,      1.0};
  static constexpr std::array<double, 10> b9{17643225600.0, 8821612800.0, 2075673600.0, 302702400.0,
                                             30270240.0,    2162160.0,    110880.0,     3960.0,
                                             90.0,          1.0};
  static constexpr std::array<double, 14> b13{
      64764752532480000.0, 32382376266240000.0, 7771770303897600.0, 1187353796428800.0,
      129060195264000.0,   10559470521600.0,    670442572800.0,     33522128640.0,
      1323241920.0,        40840800.0,          960960.0,           16380.0,
      182.0,               1.0};

  const double norm = detail::one_norm(m);
  Eigen::MatrixXd u, v;
  int squarings = 0;

  if (norm <= 1.495585217958292e-2) {
    detail::pade_odd_even(m, b3, u, v);
  } else if (norm <= 2.539398330063230e-1) {
    detail::pade_odd_even(m, b5, u, v);
  } else if (norm <= 9.504178996162932e-1) {
    detail::pade_odd_even(m, b7, u, v);
  } else if (norm <= 2.097847961257068) {
    detail::pade_odd_even(m, b9, u, v);
  } else {
    constexpr double theta13 = 5.371920351148152;
    if (norm > theta13) squarings = std::max(0, static_cast<int>(std::ceil(std::log2(norm / theta13))));
    const Eigen::MatrixXd a = m / std::ldexp(1.0, squarings);
    const Eigen::MatrixXd ident = Eigen::MatrixXd::Identity(n, n);
    const Eigen::MatrixXd a2 = a * a;
    const Eigen::MatrixXd a4 = a2 * a2;
    const Eigen::MatrixXd a6 = a4 * a2;
    const Eigen::MatrixXd inner_u = a6 * (b13[13] * a6 + b13[11] * a4 + b13[9] * a2);
    u = a * (inner_u + b13[7] * a6 + b13[5] * a4 + b13[3] * a2 + b13[1] * ident);
    v = a6 * (b13[12] * a6 + b13[10] * a4 + b13[8] * a2) + b13[6] * a6 + b13[4] * a4 + b13[2] * a2 +
        b13[0] * ident;
  }

  Eigen::MatrixXd result = (v - u).partialPivLu().solve(v + u);
  for (int s = 0; s < squarings; ++s) result = result * result;
  return result;
}

}  // namespace cthmm
