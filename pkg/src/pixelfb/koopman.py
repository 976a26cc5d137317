"""Koopman lifting and the bilinear pixel observer used for swing-up tracking.

The lifting keeps the raw state in the leading coordinates (so unlifting is
a selector), adds Fourier harmonics of the pole angle (the periodic
coordinate), and Chebyshev polynomials T_2..T_k of each state component
after affine normalization to [-1, 1] over the operating envelope.
Components are clamped to the envelope before the polynomial evaluation so
transient excursions cannot blow the embedding up. There is no constant
feature; the learned affine term plays that role.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .learning import (
    MODE_KOOPMAN,
    DemoDataset,
    RegressionProblem,
    default_lambda,
    fit_lasso,
)

N_STATE = 4
STATE_BOUNDS_DEFAULT = (1.0, 3.0, float(np.pi), 8.0)


@dataclass(frozen=True)
class KoopmanBasis:
    fourier_order: int = 4
    chebyshev_order: int = 6
    state_bounds: tuple[float, float, float, float] = STATE_BOUNDS_DEFAULT

    def __post_init__(self):
        if self.fourier_order < 0 or self.chebyshev_order < 1:
            raise ValueError("fourier_order >= 0 and chebyshev_order >= 1 required")
        if min(self.state_bounds) <= 0.0:
            raise ValueError("state bounds must be positive")

    @property
    def n_z(self) -> int:
        return N_STATE + 2 * self.fourier_order + N_STATE * (self.chebyshev_order - 1)


def lift(x: np.ndarray, basis: KoopmanBasis) -> np.ndarray:
    """Embed a state; the first four coordinates are the state itself."""
    x = np.asarray(x, dtype=float).reshape(-1)
    if x.shape[0] != N_STATE:
        raise ValueError("expected a 4-dimensional state")
    feats = [x]
    theta = x[2]
    js = np.arange(1, basis.fourier_order + 1)
    if js.size:
        feats.append(np.sin(js * theta))
        feats.append(np.cos(js * theta))
    if basis.chebyshev_order >= 2:
        s = np.clip(x / np.asarray(basis.state_bounds), -1.0, 1.0)
        t_prev = np.ones(N_STATE)
        t_cur = s
        cheb = np.empty((basis.chebyshev_order - 1, N_STATE))
        for k in range(2, basis.chebyshev_order + 1):
            t_next = 2.0 * s * t_cur - t_prev
            cheb[k - 2] = t_next
            t_prev, t_cur = t_cur, t_next
        feats.append(cheb.T.reshape(-1))  # grouped per state component
    return np.concatenate(feats)


def lift_many(X: np.ndarray, basis: KoopmanBasis) -> np.ndarray:
    """Column-wise lifting of a (4, N) state matrix."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    return np.column_stack([lift(X[:, k], basis) for k in range(X.shape[1])])


def unlift(z: np.ndarray, basis: KoopmanBasis) -> np.ndarray:
    z = np.asarray(z, dtype=float).reshape(-1)
    if z.shape[0] != basis.n_z:
        raise ValueError("lifted vector has wrong length")
    return z[:N_STATE].copy()


def selector_matrix(basis: KoopmanBasis) -> np.ndarray:
    """The linear unlifting map G with x = G z."""
    G = np.zeros((N_STATE, basis.n_z))
    G[:N_STATE, :N_STATE] = np.eye(N_STATE)
    return G


def bilinear_rows(Z: np.ndarray, U: np.ndarray, Y: np.ndarray) -> np.ndarray:
    """Stack [Z; U; u^1 Z; ...; u^m Z; Y; 1] for one aligned trajectory."""
    Z = np.atleast_2d(Z)
    U = np.atleast_2d(U)
    Y = np.atleast_2d(Y)
    cols = Z.shape[1]
    if U.shape[1] != cols or Y.shape[1] != cols:
        raise ValueError("column mismatch between lifted states, inputs, frames")
    parts = [Z, U]
    for i in range(U.shape[0]):
        parts.append(U[i] * Z)
    parts.append(Y)
    parts.append(np.ones((1, cols)))
    return np.vstack(parts)


def assemble_koopman(demos: DemoDataset, basis: KoopmanBasis) -> RegressionProblem:
    """Lift the demonstrations and build the bilinear regression problem."""
    if not demos.trajectories:
        raise ValueError("empty dataset")
    cols = []
    tgts = []
    for tr in demos.trajectories:
        Z = lift_many(tr.x_hat, basis)
        cols.append(bilinear_rows(Z[:, :-1], tr.u, tr.y_pix))
        tgts.append(Z[:, 1:])
    first = demos.trajectories[0]
    return RegressionProblem(
        W=np.hstack(cols),
        targets=np.hstack(tgts),
        mode=MODE_KOOPMAN,
        n=basis.n_z,
        m=first.u.shape[0],
        l=first.y_pix.shape[0],
    )


@dataclass
class KoopmanObserverParams:
    """Bilinear lifted observer z' = A_L z + B_L u + sum_i u^i C_L[i] z + L y + d."""

    A_L: np.ndarray
    B_L: np.ndarray
    C_L: list[np.ndarray]
    L: np.ndarray
    d: np.ndarray
    basis: KoopmanBasis
    lam: float | None = None

    def __post_init__(self):
        self.A_L = np.atleast_2d(np.asarray(self.A_L, dtype=float))
        self.B_L = np.atleast_2d(np.asarray(self.B_L, dtype=float))
        self.C_L = [np.atleast_2d(np.asarray(c, dtype=float)) for c in self.C_L]
        self.L = np.atleast_2d(np.asarray(self.L, dtype=float))
        self.d = np.asarray(self.d, dtype=float).reshape(-1)
        nz = self.A_L.shape[0]
        if self.A_L.shape != (nz, nz) or self.L.shape[0] != nz or self.d.shape[0] != nz:
            raise ValueError("inconsistent lifted dimensions")
        if len(self.C_L) != self.B_L.shape[1]:
            raise ValueError("need one bilinear block per input channel")

    @property
    def n_z(self) -> int:
        return self.A_L.shape[0]

    def theta(self) -> np.ndarray:
        return np.hstack([self.A_L, self.B_L, *self.C_L, self.L, self.d.reshape(-1, 1)])


def koopman_params_from_theta(
    theta: np.ndarray, prob: RegressionProblem, basis: KoopmanBasis, lam: float | None = None
) -> KoopmanObserverParams:
    b = prob.blocks()
    return KoopmanObserverParams(
        A_L=theta[:, b["A"]],
        B_L=theta[:, b["B"]],
        C_L=[theta[:, b[f"C{i}"]] for i in range(prob.m)],
        L=theta[:, b["L"]],
        d=theta[:, b["d"]].reshape(-1),
        basis=basis,
        lam=lam,
    )


def fit_koopman(
    prob: RegressionProblem, basis: KoopmanBasis, lam: float | None = None
) -> KoopmanObserverParams:
    """Lasso fit of the bilinear observer; the penalty covers all of theta."""
    if prob.mode != MODE_KOOPMAN:
        raise ValueError("expected a koopman-mode problem")
    if lam is None:
        lam = default_lambda(prob)
    theta = fit_lasso(prob, lam=lam, penalized_block="all")
    return koopman_params_from_theta(theta, prob, basis, lam=lam)


def koopman_student_step(
    params: KoopmanObserverParams, z: np.ndarray, u_prev, y_pixels
) -> np.ndarray:
    """One bilinear observer update in the lifted space."""
    z = np.asarray(z, dtype=float).reshape(-1)
    u = np.asarray(u_prev, dtype=float).reshape(-1)
    y = np.asarray(getattr(y_pixels, "pixels", y_pixels), dtype=float).reshape(-1)
    if z.shape[0] != params.n_z or y.shape[0] != params.L.shape[1]:
        raise ValueError("lifted state or observation dimension mismatch")
    z_next = params.A_L @ z + params.B_L @ u + params.L @ y + params.d
    for i, c_mat in enumerate(params.C_L):
        z_next += u[i] * (c_mat @ z)
    return z_next


def save_koopman_params(directory, params: KoopmanObserverParams, extra: dict | None = None) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    header = {
        "n_z": params.n_z,
        "m": int(params.B_L.shape[1]),
        "l": int(params.L.shape[1]),
        "lambda": params.lam,
        "basis": {
            "fourier_order": params.basis.fourier_order,
            "chebyshev_order": params.basis.chebyshev_order,
            "state_bounds": list(params.basis.state_bounds),
        },
    }
    if extra:
        header["extra"] = extra
    blocks = {"A_L": params.A_L, "B_L": params.B_L, "L": params.L, "d": params.d.reshape(1, -1)}
    for i, c_mat in enumerate(params.C_L):
        blocks[f"C_L{i}"] = c_mat
    for name, mat in blocks.items():
        np.savetxt(directory / f"{name}.csv", np.atleast_2d(mat), delimiter=",", fmt="%.17g")
    header["blocks"] = sorted(blocks)
    with open(directory / "koopman_params.json", "w") as fh:
        json.dump(header, fh, indent=2, sort_keys=True)


def load_koopman_params(directory) -> KoopmanObserverParams:
    directory = Path(directory)
    with open(directory / "koopman_params.json") as fh:
        header = json.load(fh)
    basis = KoopmanBasis(
        fourier_order=header["basis"]["fourier_order"],
        chebyshev_order=header["basis"]["chebyshev_order"],
        state_bounds=tuple(header["basis"]["state_bounds"]),
    )
    mats = {
        name: np.atleast_2d(np.loadtxt(directory / f"{name}.csv", delimiter=","))
        for name in header["blocks"]
    }
    c_list = [mats[f"C_L{i}"] for i in range(header["m"])]
    return KoopmanObserverParams(
        A_L=mats["A_L"],
        B_L=mats["B_L"],
        C_L=c_list,
        L=mats["L"],
        d=mats["d"].reshape(-1),
        basis=basis,
        lam=header.get("lambda"),
    )
