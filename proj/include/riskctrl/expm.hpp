#pragma once

#include <Eigen/Dense>
#include <unsupported/Eigen/MatrixFunctions>

#include <utility>

namespace riskctrl {

/// Dense matrix exponential (Padé approximation with scaling and squaring).
template <class Derived>
typename Derived::PlainObject expm(const Eigen::MatrixBase<Derived>& a) {
    return a.derived().exp();
}

/// exp(A) and its Fréchet derivative L(A, E) = d/dh exp(A + hE) at h = 0.
///
/// Both are read off exp([[A, E], [0, A]]): the diagonal blocks hold exp(A)
/// and the upper-right block holds L(A, E).
template <class Scalar, int N>
std::pair<Eigen::Matrix<Scalar, N, N>, Eigen::Matrix<Scalar, N, N>> expm_frechet(
    const Eigen::Matrix<Scalar, N, N>& a, const Eigen::Matrix<Scalar, N, N>& direction) {
    constexpr int M = N == Eigen::Dynamic ? Eigen::Dynamic : 2 * N;
    const Eigen::Index n = a.rows();
    Eigen::Matrix<Scalar, M, M> block = Eigen::Matrix<Scalar, M, M>::Zero(2 * n, 2 * n);
    block.topLeftCorner(n, n) = a;
    block.topRightCorner(n, n) = direction;
    block.bottomRightCorner(n, n) = a;
    const Eigen::Matrix<Scalar, M, M> e = block.exp();
    return {e.topLeftCorner(n, n), e.topRightCorner(n, n)};
}

}  // namespace riskctrl
