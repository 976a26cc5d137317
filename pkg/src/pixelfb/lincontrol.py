"""Teacher synthesis: discrete Riccati solvers, LQG stepping, stability checks.

The Riccati equations are solved by fixed-point iteration rather than a
Schur decomposition; at n = 4 this is fast, and the fixed-point residual
gives an independently checkable certificate of convergence.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .cartpole import (
    DT,
    U_MAX,
    CartpoleParams,
    CartpoleState,
    NoiseConfig,
    clamp_force,
    linearize,
    state_error,
    step_array,
    wrap_angle,
)


class ConvergenceError(RuntimeError):
    """Riccati iteration failed to converge within the iteration cap."""


@dataclass
class LinearModel:
    """x' = A x + B u + d_dyn around a goal point, observed through y = C x."""

    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    d_dyn: np.ndarray

    def __post_init__(self):
        self.A = np.atleast_2d(np.asarray(self.A, dtype=float))
        self.B = np.atleast_2d(np.asarray(self.B, dtype=float))
        self.C = np.atleast_2d(np.asarray(self.C, dtype=float))
        self.d_dyn = np.asarray(self.d_dyn, dtype=float).reshape(-1)
        n = self.A.shape[0]
        if self.A.shape != (n, n) or self.B.shape[0] != n or self.C.shape[1] != n:
            raise ValueError("inconsistent model dimensions")
        if self.d_dyn.shape != (n,):
            raise ValueError("d_dyn must be length n")
        if not (np.isfinite(self.A).all() and np.isfinite(self.B).all() and np.isfinite(self.C).all()):
            raise ValueError("model entries must be finite")


def _check_symmetric_definite(mat: np.ndarray, name: str, strict: bool) -> np.ndarray:
    mat = np.atleast_2d(np.asarray(mat, dtype=float))
    if not np.allclose(mat, mat.T, atol=1e-10):
        raise ValueError(f"{name} must be symmetric")
    eigs = np.linalg.eigvalsh(mat)
    if strict and eigs.min() <= 0.0:
        raise ValueError(f"{name} must be positive definite")
    if not strict and eigs.min() < -1e-12:
        raise ValueError(f"{name} must be positive semidefinite")
    return mat


@dataclass
class LqrWeights:
    """LQR cost weights plus Kalman design covariances.

    W_proc and V_meas may be left as None, in which case synthesize_teacher
    derives them from the actuation noise level and encoder resolution.
    """

    Q: np.ndarray = field(default_factory=lambda: np.diag([10.0, 1.0, 100.0, 1.0]))
    R: np.ndarray = field(default_factory=lambda: np.array([[0.1]]))
    W_proc: np.ndarray | None = None
    V_meas: np.ndarray | None = None

    def __post_init__(self):
        self.Q = _check_symmetric_definite(self.Q, "Q", strict=False)
        self.R = _check_symmetric_definite(self.R, "R", strict=True)
        if self.W_proc is not None:
            self.W_proc = _check_symmetric_definite(self.W_proc, "W_proc", strict=False)
        if self.V_meas is not None:
            self.V_meas = _check_symmetric_definite(self.V_meas, "V_meas", strict=True)


def solve_dare(
    A: np.ndarray,
    B: np.ndarray,
    Q: np.ndarray,
    R: np.ndarray,
    tol: float = 1e-10,
    max_iter: int = 100_000,
) -> tuple[np.ndarray, np.ndarray]:
    """Solve the discrete algebraic Riccati equation by fixed-point iteration.

    Returns (P, K) with K = (R + B'PB)^-1 B'PA. Raises ConvergenceError if
    the iteration does not settle within max_iter or the resulting closed
    loop is not strictly stable.
    """
    A = np.atleast_2d(np.asarray(A, dtype=float))
    B = np.atleast_2d(np.asarray(B, dtype=float))
    Q = np.atleast_2d(np.asarray(Q, dtype=float))
    R = np.atleast_2d(np.asarray(R, dtype=float))
    P = Q.copy()
    for _ in range(max_iter):
        bt_p = B.T @ P
        K = np.linalg.solve(R + bt_p @ B, bt_p @ A)
        P_next = Q + A.T @ P @ (A - B @ K)
        P_next = 0.5 * (P_next + P_next.T)
        if np.max(np.abs(P_next - P)) < tol:
            P = P_next
            break
        P = P_next
    else:
        raise ConvergenceError("Riccati iteration did not converge (unstabilizable pair?)")
    bt_p = B.T @ P
    K = np.linalg.solve(R + bt_p @ B, bt_p @ A)
    stable, rho = closed_loop_stable(A, B, K)
    if not stable:
        raise ConvergenceError(f"Riccati fixed point gives unstable closed loop (rho={rho:.6f})")
    return P, K


def dare_residual(A, B, Q, R, P) -> float:
    """Max-abs residual of the Riccati fixed-point equation at P."""
    bt_p = B.T @ P
    K = np.linalg.solve(R + bt_p @ B, bt_p @ A)
    return float(np.max(np.abs(P - (Q + A.T @ P @ (A - B @ K)))))


def kalman_gain(
    A_cl: np.ndarray,
    C: np.ndarray,
    W_proc: np.ndarray,
    V_meas: np.ndarray,
    tol: float = 1e-10,
    max_iter: int = 100_000,
) -> np.ndarray:
    """Steady-state filter gain for the estimator x' = f(x) + L(y - y_pred).

    Solves the dual Riccati equation on (A_cl', C') and returns the
    current-measurement gain L = P C' (C P C' + V)^-1, where P is the
    a priori error covariance.
    """
    P, _ = solve_dare(np.asarray(A_cl, dtype=float).T, np.asarray(C, dtype=float).T, W_proc, V_meas, tol, max_iter)
    C = np.atleast_2d(np.asarray(C, dtype=float))
    S = C @ P @ C.T + V_meas
    return np.linalg.solve(S.T, (P @ C.T).T).T


def closed_loop_stable(A, B, K) -> tuple[bool, float]:
    """Spectral radius test of A - BK; returns (stable, radius)."""
    rho = float(np.max(np.abs(np.linalg.eigvals(A - B @ K))))
    return rho < 1.0, rho


def observer_stable(A, B, K, L, C) -> tuple[bool, float, float]:
    """Stability of the estimator dynamics (I - LC)(A - BK).

    Returns (stable, spectral_radius, spectral_norm); stability is the
    eigenvalue condition, while the spectral norm is the conservative
    surrogate used by the constrained fit.
    """
    n = A.shape[0]
    a_lk = (np.eye(n) - L @ C) @ (A - B @ K)
    rho = float(np.max(np.abs(np.linalg.eigvals(a_lk))))
    snorm = float(np.linalg.norm(a_lk, 2))
    return rho < 1.0, rho, snorm


OBSERVED_ROWS = (0, 2)  # encoders measure cart position and pole angle


def encoder_observation_matrix(n: int = 4) -> np.ndarray:
    C = np.zeros((len(OBSERVED_ROWS), n))
    for i, j in enumerate(OBSERVED_ROWS):
        C[i, j] = 1.0
    return C


@dataclass
class TeacherPolicy:
    """Privileged encoder LQG policy; mutates its internal estimate when stepped."""

    K: np.ndarray
    L: np.ndarray
    model: LinearModel
    x_ref: np.ndarray
    u_ref: float = 0.0
    u_max: float = U_MAX
    x_hat: np.ndarray = None
    angle_meas_rows: tuple[int, ...] = (1,)  # rows of C that carry angles

    def __post_init__(self):
        self.K = np.atleast_2d(np.asarray(self.K, dtype=float))
        self.L = np.atleast_2d(np.asarray(self.L, dtype=float))
        self.x_ref = np.asarray(self.x_ref, dtype=float).reshape(-1)
        if self.x_hat is None:
            self.x_hat = self.x_ref.copy()
        self.x_hat = np.asarray(self.x_hat, dtype=float).reshape(-1)
        ok_ctrl, rho_ctrl = closed_loop_stable(self.model.A, self.model.B, self.K)
        ok_obs, rho_obs, _ = observer_stable(self.model.A, self.model.B, self.K, self.L, self.model.C)
        if not ok_ctrl:
            raise ValueError(f"controller gain is not stabilizing (rho={rho_ctrl:.4f})")
        if not ok_obs:
            raise ValueError(f"observer gain is not stabilizing (rho={rho_obs:.4f})")

    def reset(self, x_hat0: np.ndarray) -> None:
        self.x_hat = np.asarray(x_hat0, dtype=float).reshape(-1).copy()

    def control(self) -> float:
        du = -float(self.K @ state_error(self.x_hat, self.x_ref))
        return clamp_force(self.u_ref + du, self.u_max)


def teacher_step(policy: TeacherPolicy, y_enc: np.ndarray, u_prev: float) -> tuple[float, np.ndarray]:
    """One Luenberger update from an encoder reading, then the feedback law.

    The estimate is propagated in deviation coordinates about the goal,
    corrected with the innovation against the new measurement, and the
    clamped control for the next interval is returned with the updated
    (absolute) estimate.
    """
    m = policy.model
    dx = state_error(policy.x_hat, policy.x_ref)
    du = float(u_prev) - policy.u_ref
    pred = m.A @ dx + m.B[:, 0] * du + m.d_dyn
    x_pred = policy.x_ref + pred
    innov = np.asarray(y_enc, dtype=float).reshape(-1) - m.C @ x_pred
    for i in policy.angle_meas_rows:
        innov[i] = wrap_angle(innov[i])
    dx_new = pred + policy.L @ innov
    x_hat = policy.x_ref + dx_new
    x_hat[2] = wrap_angle(x_hat[2])
    policy.x_hat = x_hat
    return policy.control(), x_hat.copy()


def default_noise_covariances(
    B: np.ndarray, noise: NoiseConfig
) -> tuple[np.ndarray, np.ndarray]:
    """Kalman design covariances implied by actuation noise and quantization."""
    sigma = max(noise.process_noise_std, 1e-4)
    # The diagonal floor covers unmodelled dynamics beyond actuation noise;
    # without it the filter trusts the model too much and converges slowly.
    W = sigma ** 2 * (B @ B.T) + np.diag([1e-8, 1e-6, 1e-8, 1e-6])
    dp = 1.0 / noise.encoder_counts_position
    dth = 2.0 * np.pi / noise.encoder_counts_angle
    V = np.diag([max(dp ** 2 / 12.0, 1e-10), max(dth ** 2 / 12.0, 1e-10)])
    return W, V


def synthesize_teacher(
    params: CartpoleParams,
    weights: LqrWeights | None = None,
    noise: NoiseConfig | None = None,
    dt: float = DT,
    u_max: float = U_MAX,
) -> TeacherPolicy:
    """LQG synthesis about the upright goal on the nominal model."""
    weights = weights or LqrWeights()
    noise = noise or NoiseConfig()
    x_goal = CartpoleState()
    A, B = linearize(params, x_goal, 0.0, dt)
    C = encoder_observation_matrix()
    d_dyn = state_error(step_array(x_goal.as_array(), 0.0, params, dt), x_goal.as_array())
    _, K = solve_dare(A, B, weights.Q, weights.R)
    W_proc, V_meas = default_noise_covariances(B, noise)
    if weights.W_proc is not None:
        W_proc = weights.W_proc
    if weights.V_meas is not None:
        V_meas = weights.V_meas
    # The filter is designed on the open-loop A: with the explicit-input
    # Luenberger update the estimation error evolves as (I - LC) A e, so the
    # open-loop pair is the one that must be detectable and damped. The
    # folded-form condition on (I - LC)(A - BK) is asserted below anyway.
    L = kalman_gain(A, C, W_proc, V_meas)
    model = LinearModel(A, B, C, d_dyn)
    return TeacherPolicy(K=K, L=L, model=model, x_ref=x_goal.as_array(), u_ref=0.0, u_max=u_max)


def tvlqr(
    A_seq: list[np.ndarray],
    B_seq: list[np.ndarray],
    Q: np.ndarray,
    R: np.ndarray,
    Q_f: np.ndarray,
) -> list[np.ndarray]:
    """Backward Riccati recursion for tracking gains along a reference.

    Returns gains K_k in the convention u_k = u_ref_k - K_k (x_k - x_ref_k).
    """
    if len(A_seq) != len(B_seq):
        raise ValueError("A_seq and B_seq must have equal length")
    P = np.asarray(Q_f, dtype=float)
    gains: list[np.ndarray] = []
    for A, B in zip(reversed(A_seq), reversed(B_seq)):
        if A.shape[0] != B.shape[0]:
            raise ValueError("A/B row mismatch in model sequence")
        bt_p = B.T @ P
        K = np.linalg.solve(R + bt_p @ B, bt_p @ A)
        P = Q + A.T @ P @ (A - B @ K)
        P = 0.5 * (P + P.T)
        gains.append(K)
    gains.reverse()
    return gains


def save_matrix_csv(path, mat: np.ndarray) -> None:
    """Matrix as CSV alongside a .json sidecar recording its dimensions."""
    import json

    mat = np.atleast_2d(np.asarray(mat, dtype=float))
    np.savetxt(path, mat, delimiter=",", fmt="%.17g")
    sidecar = str(path) + ".json"
    with open(sidecar, "w") as fh:
        json.dump({"rows": int(mat.shape[0]), "cols": int(mat.shape[1])}, fh)


def load_matrix_csv(path) -> np.ndarray:
    return np.atleast_2d(np.loadtxt(path, delimiter=","))
