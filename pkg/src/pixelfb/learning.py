"""Fit pixel-based Luenberger observers to teacher demonstrations.

Three fitting routes over the stacked demonstration matrices: plain
minimum-norm least squares, an L1-regularized variant solved with FISTA,
and a spectrally constrained variant that keeps the autonomous estimator
dynamics inside the spectral-norm ball of radius 1 - epsilon. The
constraint set is exactly a spectral-norm ball, so projection by singular
value clipping is cheap and exact and no conic solver is needed.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MODE_UNCONSTRAINED = "unconstrained"
MODE_CONSTRAINED = "constrained"
MODE_KOOPMAN = "koopman"

EPSILON_DEFAULT = 1e-3
LAMBDA_FRACTION = 1e-3
FISTA_TOL = 1e-9
FISTA_MAX_ITER = 50_000


@dataclass
class DemoTrajectory:
    """One teacher rollout: estimates x_hat (n, N), inputs u (m, N-1) and the
    frames y_pix (l, N-1) observed at steps 2..N."""

    x_hat: np.ndarray
    u: np.ndarray
    y_pix: np.ndarray

    def __post_init__(self):
        self.x_hat = np.atleast_2d(np.asarray(self.x_hat, dtype=float))
        self.u = np.atleast_2d(np.asarray(self.u, dtype=float))
        self.y_pix = np.atleast_2d(np.asarray(self.y_pix, dtype=float))
        n_steps = self.x_hat.shape[1]
        if n_steps < 2:
            raise ValueError("trajectory needs at least two estimates")
        if self.u.shape[1] != n_steps - 1 or self.y_pix.shape[1] != n_steps - 1:
            raise ValueError("u and y_pix must have one fewer column than x_hat")

    @property
    def n_steps(self) -> int:
        return self.x_hat.shape[1]


@dataclass
class DemoDataset:
    trajectories: list[DemoTrajectory]
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.trajectories:
            n = self.trajectories[0].x_hat.shape[0]
            m = self.trajectories[0].u.shape[0]
            l = self.trajectories[0].y_pix.shape[0]
            for tr in self.trajectories:
                if (tr.x_hat.shape[0], tr.u.shape[0], tr.y_pix.shape[0]) != (n, m, l):
                    raise ValueError("inconsistent dimensions across trajectories")

    def __len__(self) -> int:
        return len(self.trajectories)

    def subset(self, count: int) -> "DemoDataset":
        """First `count` trajectories; subsets are nested by construction."""
        return DemoDataset(self.trajectories[:count], dict(self.meta))


@dataclass
class RegressionProblem:
    """Stacked data matrix W and targets for an observer fit.

    Row layout of W by mode:
      unconstrained: [x_hat; u; y_pix; 1]      (n + m + l + 1 rows)
      constrained:   [x_hat; y_pix; 1]         (n + l + 1 rows)
      koopman:       [z; u; u^1 z; ...; u^m z; y_pix; 1]
    Targets are the next estimates (lifted ones in koopman mode). The last
    row of W is always all ones.
    """

    W: np.ndarray
    targets: np.ndarray
    mode: str
    n: int
    m: int
    l: int

    @property
    def n_samples(self) -> int:
        return self.W.shape[1]

    def blocks(self) -> dict[str, slice]:
        """Column slices of theta (= row slices of W) for each parameter block."""
        n, m, l = self.n, self.m, self.l
        if self.mode == MODE_UNCONSTRAINED:
            return {
                "A": slice(0, n),
                "B": slice(n, n + m),
                "L": slice(n + m, n + m + l),
                "d": slice(n + m + l, n + m + l + 1),
            }
        if self.mode == MODE_CONSTRAINED:
            return {
                "A": slice(0, n),
                "L": slice(n, n + l),
                "d": slice(n + l, n + l + 1),
            }
        if self.mode == MODE_KOOPMAN:
            out = {"A": slice(0, n), "B": slice(n, n + m)}
            for i in range(m):
                out[f"C{i}"] = slice(n + m + i * n, n + m + (i + 1) * n)
            base = n + m + m * n
            out["L"] = slice(base, base + l)
            out["d"] = slice(base + l, base + l + 1)
            return out
        raise ValueError(f"unknown mode {self.mode!r}")


def assemble(demos: DemoDataset, mode: str = MODE_UNCONSTRAINED) -> RegressionProblem:
    """Concatenate demonstrations into the regression matrices.

    Transition pairs never straddle a trajectory boundary. In constrained
    mode the control rows are omitted because the feedback law is folded
    into the estimator dynamics block.
    """
    if mode not in (MODE_UNCONSTRAINED, MODE_CONSTRAINED):
        raise ValueError(f"unknown mode {mode!r}")
    if not demos.trajectories:
        raise ValueError("empty dataset")
    cols = []
    tgts = []
    for tr in demos.trajectories:
        x_prev = tr.x_hat[:, :-1]
        ones = np.ones((1, tr.n_steps - 1))
        if mode == MODE_UNCONSTRAINED:
            cols.append(np.vstack([x_prev, tr.u, tr.y_pix, ones]))
        else:
            cols.append(np.vstack([x_prev, tr.y_pix, ones]))
        tgts.append(tr.x_hat[:, 1:])
    first = demos.trajectories[0]
    return RegressionProblem(
        W=np.hstack(cols),
        targets=np.hstack(tgts),
        mode=mode,
        n=first.x_hat.shape[0],
        m=first.u.shape[0],
        l=first.y_pix.shape[0],
    )


@dataclass
class ObserverParams:
    """Learned pixel observer. In unconstrained mode the update is
    x' = A_L x + B_L u + L y + d; in constrained mode the control is folded
    in and the update is x' = A_LK x + L y + d with the teacher gain K
    carried along for deployment."""

    mode: str
    L: np.ndarray
    d: np.ndarray
    A_L: np.ndarray | None = None
    B_L: np.ndarray | None = None
    A_LK: np.ndarray | None = None
    K: np.ndarray | None = None
    epsilon: float | None = None
    lam: float | None = None

    def __post_init__(self):
        self.L = np.atleast_2d(np.asarray(self.L, dtype=float))
        self.d = np.asarray(self.d, dtype=float).reshape(-1)
        if self.mode == MODE_UNCONSTRAINED:
            if self.A_L is None or self.B_L is None:
                raise ValueError("unconstrained params need A_L and B_L")
        elif self.mode == MODE_CONSTRAINED:
            if self.A_LK is None:
                raise ValueError("constrained params need A_LK")
        else:
            raise ValueError(f"unknown mode {self.mode!r}")

    @property
    def n(self) -> int:
        return self.L.shape[0]

    @property
    def l(self) -> int:
        return self.L.shape[1]

    def theta(self) -> np.ndarray:
        """Concatenated parameter matrix matching the assemble() row layout."""
        if self.mode == MODE_UNCONSTRAINED:
            return np.hstack([self.A_L, self.B_L, self.L, self.d.reshape(-1, 1)])
        return np.hstack([self.A_LK, self.L, self.d.reshape(-1, 1)])

    def estimator_matrix(self, K: np.ndarray | None = None) -> np.ndarray:
        """Autonomous estimator dynamics once the feedback law is folded in."""
        if self.mode == MODE_CONSTRAINED:
            return self.A_LK
        K = self.K if K is None else K
        if K is None:
            raise ValueError("need a controller gain to fold into A_L - B_L K")
        return self.A_L - self.B_L @ np.atleast_2d(K)


def params_from_theta(
    theta: np.ndarray,
    prob: RegressionProblem,
    K: np.ndarray | None = None,
    epsilon: float | None = None,
    lam: float | None = None,
) -> ObserverParams:
    b = prob.blocks()
    if prob.mode == MODE_UNCONSTRAINED:
        return ObserverParams(
            mode=prob.mode,
            A_L=theta[:, b["A"]],
            B_L=theta[:, b["B"]],
            L=theta[:, b["L"]],
            d=theta[:, b["d"]].reshape(-1),
            K=K,
            lam=lam,
        )
    if prob.mode == MODE_CONSTRAINED:
        return ObserverParams(
            mode=prob.mode,
            A_LK=theta[:, b["A"]],
            L=theta[:, b["L"]],
            d=theta[:, b["d"]].reshape(-1),
            K=K,
            epsilon=epsilon,
            lam=lam,
        )
    raise ValueError("koopman problems produce KoopmanObserverParams")


def fit_lls(prob: RegressionProblem) -> ObserverParams | np.ndarray:
    """Minimum-norm least-squares fit via SVD of the stacked data matrix."""
    if prob.n_samples < 1:
        raise ValueError("need at least one sample")
    theta_t, *_ = np.linalg.lstsq(prob.W.T, prob.targets.T, rcond=None)
    theta = theta_t.T
    if prob.mode == MODE_KOOPMAN:
        return theta
    return params_from_theta(theta, prob)


def default_lambda(prob: RegressionProblem) -> float:
    """A small fraction of the critical lasso penalty for this problem."""
    return LAMBDA_FRACTION * float(np.max(np.abs(prob.W @ prob.targets.T)))


def _penalty_mask(prob: RegressionProblem, penalized_block: str) -> np.ndarray:
    rows = prob.W.shape[0]
    mask = np.zeros((prob.targets.shape[0], rows))
    if penalized_block == "all":
        mask[:] = 1.0
    elif penalized_block == "L_only":
        mask[:, prob.blocks()["L"]] = 1.0
    else:
        raise ValueError(f"unknown penalized_block {penalized_block!r}")
    return mask


def _power_iteration_norm(G: np.ndarray, iters: int = 200, tol: float = 1e-12) -> float:
    """Largest eigenvalue of a symmetric PSD matrix by power iteration."""
    rng = np.random.default_rng(0)
    v = rng.standard_normal(G.shape[0])
    v /= np.linalg.norm(v)
    lam = 0.0
    for _ in range(iters):
        w = G @ v
        lam_new = float(np.linalg.norm(w))
        if lam_new == 0.0:
            return 0.0
        v = w / lam_new
        if abs(lam_new - lam) < tol * max(1.0, lam_new):
            lam = lam_new
            break
        lam = lam_new
    return lam


def _fista(
    G: np.ndarray,
    H: np.ndarray,
    const: float,
    lam: float,
    mask: np.ndarray,
    project=None,
    tol: float = FISTA_TOL,
    max_iter: int = FISTA_MAX_ITER,
) -> tuple[np.ndarray, list[float]]:
    """Accelerated proximal gradient on f(T) = tr(T G T') - 2 tr(T H') + const
    plus lam * ||mask .* T||_1, with an optional exact projection applied
    after soft thresholding (the blocks are disjoint, so the combined prox
    is exact). Adaptive restart keeps the accepted objective nonincreasing.
    """
    step = 1.0 / max(2.0 * _power_iteration_norm(G) * (1.0 + 1e-10), 1e-300)
    thr = lam * step * mask

    def objective_from(T, GT):
        smooth = float(np.sum(T * GT) - 2.0 * np.sum(T * H) + const)
        return smooth + lam * float(np.sum(np.abs(T * mask)))

    def prox(base, G_base):
        Tn = base - step * 2.0 * (G_base - H)
        Tn = np.sign(Tn) * np.maximum(np.abs(Tn) - thr, 0.0)
        if project is not None:
            Tn = project(Tn)
        return Tn, Tn @ G

    x = np.zeros_like(H)
    Gx = np.zeros_like(H)
    y, Gy = x, Gx
    t_mom = 1.0
    f_x = objective_from(x, Gx)
    history = [f_x]
    for _ in range(max_iter):
        z, Gz = prox(y, Gy)
        f_z = objective_from(z, Gz)
        if f_z > f_x:
            # momentum overshot: restart from the last accepted iterate
            z, Gz = prox(x, Gx)
            f_z = objective_from(z, Gz)
            t_mom = 1.0
        t_next = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * t_mom * t_mom))
        beta = (t_mom - 1.0) / t_next
        y = z + beta * (z - x)
        Gy = Gz + beta * (Gz - Gx)
        rel_decrease = (f_x - f_z) / max(abs(f_x), 1e-300)
        x, Gx, f_x, t_mom = z, Gz, f_z, t_next
        history.append(f_x)
        if 0.0 <= rel_decrease < tol:
            break
    return x, history


def _gram_terms(prob: RegressionProblem) -> tuple[np.ndarray, np.ndarray, float]:
    G = prob.W @ prob.W.T
    H = prob.targets @ prob.W.T
    const = float(np.sum(prob.targets ** 2))
    return G, H, const


def fit_lasso(
    prob: RegressionProblem,
    lam: float | None = None,
    penalized_block: str = "L_only",
) -> ObserverParams | np.ndarray:
    """L1-regularized fit solved with FISTA; lam=None uses the default rule."""
    if lam is None:
        lam = default_lambda(prob)
    if lam < 0.0:
        raise ValueError("lambda must be nonnegative")
    G, H, const = _gram_terms(prob)
    mask = _penalty_mask(prob, penalized_block)
    theta, _ = _fista(G, H, const, lam, mask)
    if prob.mode == MODE_KOOPMAN:
        return theta
    return params_from_theta(theta, prob, lam=lam)


def spectral_ball_projection(block: slice, radius: float):
    """Projection clipping the singular values of theta[:, block] at radius."""

    def project(theta: np.ndarray) -> np.ndarray:
        sub = theta[:, block]
        u, s, vt = np.linalg.svd(sub, full_matrices=False)
        if s.size and s[0] > radius:
            theta = theta.copy()
            theta[:, block] = (u * np.minimum(s, radius)) @ vt
        return theta

    return project


def fit_stable(
    prob: RegressionProblem,
    lam: float | None = None,
    K: np.ndarray | None = None,
    epsilon: float = EPSILON_DEFAULT,
) -> ObserverParams:
    """Constrained fit keeping ||A_LK||_2 <= 1 - epsilon.

    Requires a constrained-mode problem (control folded in) and the
    privileged teacher gain K, which is stored with the result so the
    policy is self-contained. The last solver operation is the projection,
    so the returned parameters satisfy the bound exactly.
    """
    if prob.mode != MODE_CONSTRAINED:
        raise ValueError("fit_stable needs a problem assembled in constrained mode")
    if K is None:
        raise ValueError("fit_stable requires the teacher controller gain K")
    if lam is None:
        lam = default_lambda(prob)
    radius = 1.0 - epsilon
    G, H, const = _gram_terms(prob)
    mask = _penalty_mask(prob, "L_only")
    project = spectral_ball_projection(prob.blocks()["A"], radius)
    theta, _ = _fista(G, H, const, lam, mask, project=project)
    params = params_from_theta(theta, prob, K=np.atleast_2d(np.asarray(K, dtype=float)), epsilon=epsilon, lam=lam)
    snorm = float(np.linalg.norm(params.A_LK, 2))
    assert snorm <= radius + 1e-9, f"projection violated: ||A_LK|| = {snorm}"
    return params


def student_step(
    params: ObserverParams, x_hat: np.ndarray, u_prev, y_pixels
) -> np.ndarray:
    """One learned observer update; the caller owns and threads the estimate."""
    x_hat = np.asarray(x_hat, dtype=float).reshape(-1)
    y = np.asarray(getattr(y_pixels, "pixels", y_pixels), dtype=float).reshape(-1)
    if x_hat.shape[0] != params.n or y.shape[0] != params.l:
        raise ValueError("estimate or observation dimension mismatch")
    if params.mode == MODE_UNCONSTRAINED:
        u = np.asarray(u_prev, dtype=float).reshape(-1)
        return params.A_L @ x_hat + params.B_L @ u + params.L @ y + params.d
    return params.A_LK @ x_hat + params.L @ y + params.d


def fit_report(params: ObserverParams, prob: RegressionProblem, K: np.ndarray | None = None) -> dict:
    """Post-fit diagnostics: residual, estimator norms, gain sparsity."""
    theta = params.theta()
    residual = float(np.linalg.norm(theta @ prob.W - prob.targets))
    out = {
        "mode": params.mode,
        "residual_fro": residual,
        "rms_residual": residual / np.sqrt(max(prob.n_samples, 1)),
        "sparsity_L": float(np.mean(params.L == 0.0)),
        "lambda": params.lam,
        "n_samples": prob.n_samples,
    }
    try:
        a_lk = params.estimator_matrix(K)
    except ValueError:
        a_lk = None
    if a_lk is not None:
        out["spectral_norm_A_LK"] = float(np.linalg.norm(a_lk, 2))
        out["spectral_radius_A_LK"] = float(np.max(np.abs(np.linalg.eigvals(a_lk))))
    return out


def save_observer_params(directory, params: ObserverParams, extra: dict | None = None) -> None:
    """JSON header plus one CSV block per matrix under `directory`."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    header = {
        "mode": params.mode,
        "n": params.n,
        "m": None if params.B_L is None else int(params.B_L.shape[1]),
        "l": params.l,
        "epsilon": params.epsilon,
        "lambda": params.lam,
        "blocks": [],
    }
    blocks = {"L": params.L, "d": params.d.reshape(1, -1)}
    if params.mode == MODE_UNCONSTRAINED:
        blocks["A_L"] = params.A_L
        blocks["B_L"] = params.B_L
    else:
        blocks["A_LK"] = params.A_LK
    if params.K is not None:
        blocks["K"] = params.K
    for name, mat in blocks.items():
        np.savetxt(directory / f"{name}.csv", np.atleast_2d(mat), delimiter=",", fmt="%.17g")
        header["blocks"].append(name)
    if extra:
        header["extra"] = extra
    with open(directory / "params.json", "w") as fh:
        json.dump(header, fh, indent=2, sort_keys=True)


def load_observer_params(directory) -> ObserverParams:
    directory = Path(directory)
    with open(directory / "params.json") as fh:
        header = json.load(fh)
    mats = {
        name: np.atleast_2d(np.loadtxt(directory / f"{name}.csv", delimiter=","))
        for name in header["blocks"]
    }
    common = dict(
        mode=header["mode"],
        L=mats["L"],
        d=mats["d"].reshape(-1),
        K=mats.get("K"),
        epsilon=header.get("epsilon"),
        lam=header.get("lambda"),
    )
    if header["mode"] == MODE_UNCONSTRAINED:
        return ObserverParams(A_L=mats["A_L"], B_L=mats["B_L"], **common)
    return ObserverParams(A_LK=mats["A_LK"], **common)
