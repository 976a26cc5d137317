"""Swing-up reference generation with iLQR and closed-loop tracking rollouts.

The iLQR is the standard Levenberg-regularized variant: quadratic expansion
along the current rollout, a backward gain pass with an adaptive
regularizer on the control Hessian, and a backtracking forward pass. The
returned reference is the accepted forward rollout itself, so it is
dynamically consistent under the nominal model by construction.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .camera import CameraConfig, render
from .cartpole import (
    DT,
    U_MAX,
    CartpoleParams,
    CartpoleState,
    NoiseConfig,
    clamp_force,
    encoder_measure,
    linearize_array,
    state_error,
    step_array,
    step_true,
)
from .koopman import KoopmanObserverParams, koopman_student_step, lift, unlift
from .lincontrol import encoder_observation_matrix, default_noise_covariances


class IlqrError(RuntimeError):
    """Line search failed at maximum regularization."""


@dataclass(frozen=True)
class IlqrWeights:
    Q: np.ndarray = field(default_factory=lambda: np.diag([1.0, 0.1, 10.0, 0.1]))
    R: np.ndarray = field(default_factory=lambda: np.array([[0.05]]))
    Qf_scale: float = 1000.0

    @property
    def Q_f(self) -> np.ndarray:
        return self.Qf_scale * self.Q


@dataclass
class ReferenceTrajectory:
    """Reference states/inputs plus time-varying tracking gains.

    Gains follow the convention u_k = U[:, k] - K_seq[k] (x - X[:, k]).
    """

    X: np.ndarray  # (4, N)
    U: np.ndarray  # (1, N-1)
    K_seq: np.ndarray  # (N-1, 1, 4)
    dt: float = DT

    @property
    def horizon(self) -> int:
        return self.X.shape[1]


def _trajectory_cost(X, U, x_goal, w: IlqrWeights) -> float:
    cost = 0.0
    for k in range(U.shape[1]):
        e = state_error(X[:, k], x_goal)
        cost += 0.5 * (e @ w.Q @ e) + 0.5 * float(U[:, k] @ w.R @ U[:, k])
    e = state_error(X[:, -1], x_goal)
    return cost + 0.5 * (e @ w.Q_f @ e)


def _rollout(params, x0, U, dt, u_max) -> tuple[np.ndarray, np.ndarray]:
    n_steps = U.shape[1]
    X = np.zeros((4, n_steps + 1))
    U_cl = np.zeros_like(U)
    X[:, 0] = x0
    for k in range(n_steps):
        U_cl[0, k] = clamp_force(U[0, k], u_max)
        X[:, k + 1] = step_array(X[:, k], U_cl[0, k], params, dt)
    return X, U_cl


def ilqr(
    params: CartpoleParams,
    x0: CartpoleState,
    x_goal: CartpoleState,
    weights: IlqrWeights | None = None,
    horizon: int = 240,
    dt: float = DT,
    u_max: float = U_MAX,
    max_iter: int = 200,
    tol: float = 1e-6,
) -> tuple[ReferenceTrajectory, dict]:
    """Locally optimal swing-up trajectory under the nominal model.

    Returns the reference plus an info dict with the accepted cost sequence.
    Raises IlqrError when no descent step exists at maximum regularization.
    """
    if horizon < 2:
        raise ValueError("horizon must be at least 2")
    w = weights or IlqrWeights()
    goal = x_goal.as_array()
    n_ctrl = horizon - 1
    U = np.zeros((1, n_ctrl))
    X, U = _rollout(params, x0.as_array(), U, dt, u_max)
    cost = _trajectory_cost(X, U, goal, w)
    costs = [cost]
    mu = 1e-6
    k_seq = np.zeros((n_ctrl, 1, 4))
    converged = False
    for _ in range(max_iter):
        lins = [linearize_array(params, X[:, k], U[0, k], dt) for k in range(n_ctrl)]
        backward = None
        while backward is None:
            backward = _backward_pass(X, U, lins, goal, w, mu)
            if backward is None:
                mu *= 10.0
                if mu > 1e10:
                    raise IlqrError("backward pass failed at maximum regularization")
        kff, Kfb, dv1, dv2 = backward
        expected = -(dv1 + 0.5 * dv2)
        if expected < tol * max(1.0, abs(cost)):
            k_seq = -Kfb
            converged = True
            break
        improved = False
        for alpha in [2.0 ** -i for i in range(11)]:
            X_new = np.zeros_like(X)
            U_new = np.zeros_like(U)
            X_new[:, 0] = X[:, 0]
            for k in range(n_ctrl):
                du = alpha * kff[k] + Kfb[k] @ state_error(X_new[:, k], X[:, k])
                U_new[0, k] = clamp_force(U[0, k] + du[0], u_max)
                X_new[:, k + 1] = step_array(X_new[:, k], U_new[0, k], params, dt)
            cost_new = _trajectory_cost(X_new, U_new, goal, w)
            if cost_new < cost:
                improved = True
                break
        if improved:
            rel = (cost - cost_new) / max(1.0, abs(cost))
            X, U, cost = X_new, U_new, cost_new
            costs.append(cost)
            k_seq = -Kfb
            mu = max(mu / 2.0, 1e-8)
            if rel < tol:
                converged = True
                break
        else:
            mu *= 10.0
            if mu > 1e10:
                raise IlqrError("line search failed at maximum regularization")
    ref = ReferenceTrajectory(X=X, U=U, K_seq=k_seq, dt=dt)
    return ref, {"costs": costs, "converged": converged, "mu": mu}


def _backward_pass(X, U, lins, goal, w: IlqrWeights, mu: float):
    n_ctrl = U.shape[1]
    kff = np.zeros((n_ctrl, 1))
    Kfb = np.zeros((n_ctrl, 1, 4))
    e_term = state_error(X[:, -1], goal)
    Vx = w.Q_f @ e_term
    Vxx = w.Q_f.copy()
    dv1 = dv2 = 0.0
    for k in range(n_ctrl - 1, -1, -1):
        A, B = lins[k]
        e = state_error(X[:, k], goal)
        Qx = w.Q @ e + A.T @ Vx
        Qu = w.R @ U[:, k] + B.T @ Vx
        Qxx = w.Q + A.T @ Vxx @ A
        Quu = w.R + B.T @ Vxx @ B
        Qux = B.T @ Vxx @ A
        Quu_reg = Quu + mu * np.eye(1)
        if Quu_reg[0, 0] <= 0.0:
            return None
        kff[k] = -Qu / Quu_reg[0, 0]
        Kfb[k] = -Qux / Quu_reg[0, 0]
        dv1 += float(kff[k] @ Qu)
        dv2 += float(kff[k] @ Quu @ kff[k])
        Vx = Qx + Kfb[k].T @ Quu @ kff[k] + Kfb[k].T @ Qu + Qux.T @ kff[k]
        Vxx = Qxx + Kfb[k].T @ Quu @ Kfb[k] + Kfb[k].T @ Qux + Qux.T @ Kfb[k]
        Vxx = 0.5 * (Vxx + Vxx.T)
    return kff, Kfb, dv1, dv2


@dataclass
class RolloutLog:
    """Closed-loop tracking log: truth, estimates, reference, inputs, frames."""

    X_true: np.ndarray
    X_hat: np.ndarray
    X_ref: np.ndarray
    U: np.ndarray
    Y_pix: np.ndarray | None
    dt: float

    def tracking_errors(self) -> np.ndarray:
        errs = self.X_true - self.X_ref
        errs[2] = np.array([math.remainder(v, math.tau) for v in errs[2]])
        return np.linalg.norm(errs, axis=0)


class _TrackingKalman:
    """Time-varying Kalman estimator on the nominal model from encoder readings."""

    def __init__(self, params: CartpoleParams, noise: NoiseConfig, x_hat0: np.ndarray, dt: float):
        self.params = params
        self.dt = dt
        self.C = encoder_observation_matrix()
        b_up = linearize_array(params, np.zeros(4), 0.0, dt)[1]
        self.W, self.V = default_noise_covariances(b_up, noise)
        self.x_hat = np.asarray(x_hat0, dtype=float).copy()
        self.P = np.diag([1e-4, 0.25, 1e-4, 0.25])

    def update(self, u_prev: float, y_enc: np.ndarray) -> np.ndarray:
        A, _ = linearize_array(self.params, self.x_hat, u_prev, self.dt)
        x_pred = step_array(self.x_hat, u_prev, self.params, self.dt)
        P_pred = A @ self.P @ A.T + self.W
        S = self.C @ P_pred @ self.C.T + self.V
        gain = np.linalg.solve(S.T, (P_pred @ self.C.T).T).T
        innov = state_error(
            np.array([y_enc[0], 0.0, y_enc[1], 0.0]), np.array([x_pred[0], 0.0, x_pred[2], 0.0])
        )[[0, 2]]
        self.x_hat = x_pred + gain @ innov
        self.P = (np.eye(4) - gain @ self.C) @ P_pred
        self.P = 0.5 * (self.P + self.P.T)
        return self.x_hat.copy()


def track_rollout(
    ref: ReferenceTrajectory,
    params_nominal: CartpoleParams,
    params_true: CartpoleParams,
    noise: NoiseConfig,
    camera: CameraConfig,
    rng: np.random.Generator,
    observer: str = "teacher",
    koopman_params: KoopmanObserverParams | None = None,
    x0: np.ndarray | None = None,
    x_hat0: np.ndarray | None = None,
    record_frames: bool = True,
    u_max: float = U_MAX,
) -> RolloutLog:
    """Track the reference on the true plant with the chosen observer.

    observer="teacher" runs the encoder Kalman estimator on the nominal
    model; observer="student-koopman" runs the learned bilinear pixel
    observer and reads nothing but camera frames.
    """
    n_steps = ref.horizon - 1
    x = np.asarray(x0 if x0 is not None else ref.X[:, 0], dtype=float).copy()
    x_hat_init = np.asarray(x_hat0 if x_hat0 is not None else ref.X[:, 0], dtype=float).copy()
    X_true = np.zeros((4, ref.horizon))
    X_hat = np.zeros((4, ref.horizon))
    U = np.zeros((1, n_steps))
    Y = np.zeros((camera.n_pixels, n_steps)) if record_frames else None
    X_true[:, 0] = x

    if observer == "teacher":
        state = CartpoleState.from_array(x)
        p_meas, th_meas = encoder_measure(state, noise)
        est = _TrackingKalman(params_nominal, noise, np.array([p_meas, 0.0, th_meas, 0.0]), ref.dt)
        X_hat[:, 0] = est.x_hat
    elif observer == "student-koopman":
        if koopman_params is None:
            raise ValueError("student-koopman tracking needs fitted koopman params")
        z = lift(x_hat_init, koopman_params.basis)
        X_hat[:, 0] = unlift(z, koopman_params.basis)
    else:
        raise ValueError(f"unknown observer {observer!r}")

    for k in range(n_steps):
        err = state_error(X_hat[:, k], ref.X[:, k])
        u = clamp_force(ref.U[0, k] - float(ref.K_seq[k] @ err), u_max)
        U[0, k] = u
        state = CartpoleState.from_array(x)
        state = step_true(state, u, params_true, noise, rng, ref.dt)
        x = state.as_array()
        X_true[:, k + 1] = x
        frame = render(state, camera, params_true.pole_length)
        if record_frames:
            Y[:, k] = frame.pixels
        if observer == "teacher":
            y_enc = np.array(encoder_measure(state, noise))
            X_hat[:, k + 1] = est.update(u, y_enc)
        else:
            z = koopman_student_step(koopman_params, z, u, frame)
            X_hat[:, k + 1] = unlift(z, koopman_params.basis)

    return RolloutLog(X_true=X_true, X_hat=X_hat, X_ref=ref.X.copy(), U=U, Y_pix=Y, dt=ref.dt)


def save_reference_csv(path, ref: ReferenceTrajectory) -> None:
    """Reference states and inputs as CSV; gains go in a companion file."""
    from .cartpole import write_trajectory_csv

    t = np.arange(ref.horizon) * ref.dt
    write_trajectory_csv(path, t, ref.X, ref.U[0])


def save_gains(path, ref: ReferenceTrajectory) -> None:
    flat = ref.K_seq.reshape(ref.K_seq.shape[0], -1)
    np.savetxt(path, flat, delimiter=",", fmt="%.17g")
