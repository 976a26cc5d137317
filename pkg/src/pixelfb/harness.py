"""Experiment orchestration: demo collection, training, evaluation, sweeps.

A run directory accumulates `config.json`, `teacher.json`, `demos/` and
`images/` from collection, a `params/` directory from training, and
`report.json` from evaluation. Every artifact is a deterministic function
of the config and seed: per-purpose rng streams are derived as
default_rng([seed, purpose, index]) and floats are written with a fixed
format, so identical runs are byte-identical.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import camera as cam
from . import cartpole as cp
from . import koopman as kp
from . import learning as ln
from . import lincontrol as lc
from . import trajopt as tj

SUCCESS_POS_M = 0.176  # half the pole length
SUCCESS_ANGLE_RAD = math.radians(2.0)

_STREAM_TRUE_PARAMS = 0
_STREAM_DEMO = 1
_STREAM_EVAL = 2
_STREAM_SWINGUP_DEMO = 3
_STREAM_SWINGUP_EVAL = 4


@dataclass
class ExperimentConfig:
    seed: int = 0
    n_demos: int = 50
    episode_len: int = 300
    ic_box: tuple[float, float, float, float] = (0.3, 0.3, math.radians(10.0), 0.5)
    fit_mode: str = "lasso"
    lam: float | None = None
    model_error: float = 0.05
    u_max: float = cp.U_MAX
    dt: float = cp.DT
    n_eval: int = 50
    params: cp.CartpoleParams = field(default_factory=cp.CartpoleParams)
    noise: cp.NoiseConfig = field(default_factory=cp.NoiseConfig)
    camera: cam.CameraConfig = field(default_factory=cam.CameraConfig)
    swingup_horizon: int = 240
    swingup_demos: int = 20
    swingup_eval_seeds: int = 10
    swingup_ic_box: tuple[float, float, float, float] = (0.05, 0.05, 0.05, 0.1)

    def __post_init__(self):
        if self.episode_len < 2:
            raise ValueError("episode_len must be at least 2")
        if self.n_demos < 1:
            raise ValueError("need at least one demonstration")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["ic_box"] = list(self.ic_box)
        d["swingup_ic_box"] = list(self.swingup_ic_box)
        d["camera"]["origin_px"] = list(self.camera.origin_px)
        d["camera"]["cart_size"] = list(self.camera.cart_size)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        d["params"] = cp.CartpoleParams(**d["params"])
        d["noise"] = cp.NoiseConfig(**d["noise"])
        cam_d = dict(d["camera"])
        cam_d["origin_px"] = tuple(cam_d["origin_px"])
        cam_d["cart_size"] = tuple(cam_d["cart_size"])
        d["camera"] = cam.CameraConfig(**cam_d)
        d["ic_box"] = tuple(d["ic_box"])
        d["swingup_ic_box"] = tuple(d["swingup_ic_box"])
        return cls(**d)

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def true_params_for(cfg: ExperimentConfig) -> cp.CartpoleParams:
    rng = np.random.default_rng([cfg.seed, _STREAM_TRUE_PARAMS])
    return cp.sample_true_params(cfg.params, cfg.model_error, rng)


def sample_initial_condition(box, rng: np.random.Generator, center=None) -> cp.CartpoleState:
    center = np.zeros(4) if center is None else np.asarray(center, dtype=float)
    draw = center + rng.uniform(-1.0, 1.0, size=4) * np.asarray(box, dtype=float)
    return cp.CartpoleState.from_array(draw)


def is_success(x: np.ndarray) -> bool:
    return abs(float(x[0])) <= SUCCESS_POS_M and abs(cp.wrap_angle(float(x[2]))) <= SUCCESS_ANGLE_RAD


def final_state_error(x: np.ndarray) -> float:
    e = cp.state_error(np.asarray(x, dtype=float), np.zeros(4))
    return float(np.linalg.norm(e))


def run_teacher_episode(
    teacher: lc.TeacherPolicy,
    x0: cp.CartpoleState,
    params_true: cp.CartpoleParams,
    cfg: ExperimentConfig,
    rng: np.random.Generator,
    record_frames: bool = True,
) -> tuple[ln.DemoTrajectory | None, np.ndarray]:
    """Stabilization rollout of the encoder LQG teacher on the true plant.

    Returns the recorded demonstration (or None when frames are not kept)
    and the final true state.
    """
    n_steps = cfg.episode_len
    x = x0
    p0, th0 = cp.encoder_measure(x, cfg.noise)
    teacher.reset(np.array([p0, 0.0, th0, 0.0]))
    x_hat = np.zeros((4, n_steps))
    u_log = np.zeros((1, n_steps - 1))
    frames = np.zeros((cfg.camera.n_pixels, n_steps - 1)) if record_frames else None
    x_hat[:, 0] = teacher.x_hat
    u = teacher.control()
    for k in range(n_steps - 1):
        u_log[0, k] = u
        x = cp.step_true(x, u, params_true, cfg.noise, rng, cfg.dt)
        if record_frames:
            frames[:, k] = cam.render(x, cfg.camera, params_true.pole_length).pixels
        y_enc = np.array(cp.encoder_measure(x, cfg.noise))
        u, x_hat[:, k + 1] = lc.teacher_step(teacher, y_enc, u)
    demo = ln.DemoTrajectory(x_hat=x_hat, u=u_log, y_pix=frames) if record_frames else None
    return demo, x.as_array()


def run_student_episode(
    params: ln.ObserverParams,
    K: np.ndarray,
    x0: cp.CartpoleState,
    params_true: cp.CartpoleParams,
    cfg: ExperimentConfig,
    rng: np.random.Generator,
) -> np.ndarray:
    """Pixel-feedback rollout of the learned observer; returns the final state."""
    gain = params.K if params.K is not None else np.atleast_2d(K)
    x = x0
    x_hat = np.zeros(4)
    for _ in range(cfg.episode_len - 1):
        u = cp.clamp_force(-float(gain @ x_hat), cfg.u_max)
        x = cp.step_true(x, u, params_true, cfg.noise, rng, cfg.dt)
        frame = cam.render(x, cfg.camera, params_true.pole_length)
        x_hat = ln.student_step(params, x_hat, u, frame)
    return x.as_array()


def collect(cfg: ExperimentConfig, run_dir=None) -> ln.DemoDataset:
    """Roll out teacher demonstrations and optionally persist them."""
    teacher = lc.synthesize_teacher(cfg.params, noise=cfg.noise, dt=cfg.dt, u_max=cfg.u_max)
    params_true = true_params_for(cfg)
    trajectories = []
    for i in range(cfg.n_demos):
        rng = np.random.default_rng([cfg.seed, _STREAM_DEMO, i])
        x0 = sample_initial_condition(cfg.ic_box, rng)
        demo, _ = run_teacher_episode(teacher, x0, params_true, cfg, rng)
        trajectories.append(demo)
    meta = {"seed": cfg.seed, "params_hash": _config_hash(cfg)}
    dataset = ln.DemoDataset(trajectories, meta)
    if run_dir is not None:
        save_run_inputs(run_dir, cfg, teacher, params_true)
        save_dataset(run_dir, dataset, cfg)
    return dataset


def train(
    dataset: ln.DemoDataset,
    cfg: ExperimentConfig,
    teacher_K: np.ndarray,
    mode: str | None = None,
    lam: float | None = None,
    run_dir=None,
) -> tuple[ln.ObserverParams, dict]:
    """Fit the pixel observer in the requested mode and report diagnostics."""
    mode = mode or cfg.fit_mode
    lam = cfg.lam if lam is None else lam
    if mode == "lls":
        prob = ln.assemble(dataset, ln.MODE_UNCONSTRAINED)
        params = ln.fit_lls(prob)
    elif mode == "lasso":
        prob = ln.assemble(dataset, ln.MODE_UNCONSTRAINED)
        params = ln.fit_lasso(prob, lam=lam)
    elif mode == "stable":
        prob = ln.assemble(dataset, ln.MODE_CONSTRAINED)
        params = ln.fit_stable(prob, lam=lam, K=teacher_K)
    else:
        raise ValueError(f"unknown fit mode {mode!r}")
    report = ln.fit_report(params, prob, K=teacher_K)
    report["fit_mode"] = mode
    if run_dir is not None:
        out = Path(run_dir) / "params"
        ln.save_observer_params(out, params, extra={"fit_mode": mode})
        _write_json(Path(run_dir) / "train_report.json", report)
    return params, report


@dataclass
class EvalReport:
    final_errors: list[float]
    successes: list[bool]
    diagnostics: dict = field(default_factory=dict)

    @property
    def success_rate(self) -> float:
        return float(np.mean(self.successes)) if self.successes else 0.0

    @property
    def median_error(self) -> float:
        return float(np.median(self.final_errors))

    def quantile(self, q: float) -> float:
        return float(np.quantile(self.final_errors, q))

    def to_dict(self) -> dict:
        return {
            "n_episodes": len(self.final_errors),
            "success_rate": self.success_rate,
            "median_error": self.median_error,
            "q05_error": self.quantile(0.05),
            "q95_error": self.quantile(0.95),
            "final_errors": [float(v) for v in self.final_errors],
            "successes": [bool(s) for s in self.successes],
            "diagnostics": self.diagnostics,
        }

    def save(self, json_path, csv_path=None) -> None:
        _write_json(json_path, self.to_dict())
        if csv_path is not None:
            with open(csv_path, "w") as fh:
                fh.write("episode,final_error,success\n")
                for i, (e, s) in enumerate(zip(self.final_errors, self.successes)):
                    fh.write(f"{i},{e:.17g},{int(s)}\n")


def evaluate(
    params: ln.ObserverParams,
    cfg: ExperimentConfig,
    teacher_K: np.ndarray,
    n_eval: int | None = None,
    run_dir=None,
) -> EvalReport:
    """Closed-loop pixel-feedback evaluation from fresh initial conditions."""
    if params.l != cfg.camera.n_pixels:
        raise ValueError("observer and camera disagree on the observation length")
    n_eval = n_eval or cfg.n_eval
    params_true = true_params_for(cfg)
    errors, flags = [], []
    for j in range(n_eval):
        rng = np.random.default_rng([cfg.seed, _STREAM_EVAL, j])
        x0 = sample_initial_condition(cfg.ic_box, rng)
        x_final = run_student_episode(params, teacher_K, x0, params_true, cfg, rng)
        errors.append(final_state_error(x_final))
        flags.append(is_success(x_final))
    diag = {
        "success_pos_m": SUCCESS_POS_M,
        "success_angle_rad": SUCCESS_ANGLE_RAD,
    }
    a_lk = None
    try:
        a_lk = params.estimator_matrix(teacher_K)
    except ValueError:
        pass
    if a_lk is not None:
        diag["spectral_norm_A_LK"] = float(np.linalg.norm(a_lk, 2))
        diag["spectral_radius_A_LK"] = float(np.max(np.abs(np.linalg.eigvals(a_lk))))
    report = EvalReport(errors, flags, diag)
    if run_dir is not None:
        report.save(Path(run_dir) / "report.json", Path(run_dir) / "report.csv")
    return report


def evaluate_teacher(cfg: ExperimentConfig, n_eval: int | None = None) -> EvalReport:
    """Baseline: the privileged encoder teacher on the evaluation conditions."""
    teacher = lc.synthesize_teacher(cfg.params, noise=cfg.noise, dt=cfg.dt, u_max=cfg.u_max)
    params_true = true_params_for(cfg)
    n_eval = n_eval or cfg.n_eval
    errors, flags = [], []
    for j in range(n_eval):
        rng = np.random.default_rng([cfg.seed, _STREAM_EVAL, j])
        x0 = sample_initial_condition(cfg.ic_box, rng)
        _, x_final = run_teacher_episode(teacher, x0, params_true, cfg, rng, record_frames=False)
        errors.append(final_state_error(x_final))
        flags.append(is_success(x_final))
    return EvalReport(errors, flags, {"policy": "teacher"})


def sweep(
    cfg: ExperimentConfig,
    sizes: list[int],
    run_dir=None,
    mode: str | None = None,
    dataset: ln.DemoDataset | None = None,
) -> list[dict]:
    """Data-efficiency sweep over nested subsets of one demonstration pool.

    Every size is evaluated on the same evaluation conditions. Returns one
    row per requested size.
    """
    sizes = list(sizes)
    if max(sizes) > cfg.n_demos:
        raise ValueError("requested size exceeds the demo pool")
    mode = mode or cfg.fit_mode
    teacher = lc.synthesize_teacher(cfg.params, noise=cfg.noise, dt=cfg.dt, u_max=cfg.u_max)
    if dataset is None:
        dataset = collect(cfg, run_dir)
    rows = []
    for size in sizes:
        params, fitrep = train(dataset.subset(size), cfg, teacher.K, mode=mode)
        report = evaluate(params, cfg, teacher.K)
        rows.append(
            {
                "size": size,
                "median_error": report.median_error,
                "q05_error": report.quantile(0.05),
                "q95_error": report.quantile(0.95),
                "success_rate": report.success_rate,
                "spectral_norm_A_LK": fitrep.get("spectral_norm_A_LK"),
            }
        )
    if run_dir is not None:
        path = Path(run_dir) / f"sweep_{mode}.csv"
        with open(path, "w") as fh:
            fh.write("size,median_error,q05_error,q95_error,success_rate\n")
            for r in rows:
                fh.write(
                    f"{r['size']},{r['median_error']:.17g},{r['q05_error']:.17g},"
                    f"{r['q95_error']:.17g},{r['success_rate']:.17g}\n"
                )
    return rows


def heatmap(params: ln.ObserverParams, cfg: ExperimentConfig, out_dir) -> list[Path]:
    """Write each row of L as a signed-value CSV and a PGM (0.5 = zero gain)."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if params.l != cfg.camera.n_pixels:
        raise ValueError("gain length does not match the camera resolution")
    names = ["p", "v", "theta", "omega"]
    written = []
    for i, name in enumerate(names[: params.n]):
        row = params.L[i].reshape(cfg.camera.height_px, cfg.camera.width_px)
        scale = np.max(np.abs(row))
        normed = row / scale if scale > 0 else row
        csv_path = out_dir / f"heatmap_{name}.csv"
        np.savetxt(csv_path, normed, delimiter=",", fmt="%.17g")
        pgm_path = out_dir / f"heatmap_{name}.pgm"
        cam.write_pgm(pgm_path, 0.5 + 0.5 * normed)
        written += [csv_path, pgm_path]
    return written


def swingup(cfg: ExperimentConfig, run_dir=None) -> dict:
    """Full swing-up pipeline: reference, teacher demos, Koopman fit, tracking.

    Returns a report dict with per-seed terminal success for the pixel
    student and the encoder teacher baseline under matched noise draws.
    """
    hanging = cp.CartpoleState(theta=math.pi)
    upright = cp.CartpoleState()
    ref, info = tj.ilqr(
        cfg.params, hanging, upright, horizon=cfg.swingup_horizon, dt=cfg.dt, u_max=cfg.u_max
    )
    params_true = true_params_for(cfg)
    trajectories = []
    for i in range(cfg.swingup_demos):
        rng = np.random.default_rng([cfg.seed, _STREAM_SWINGUP_DEMO, i])
        x0 = sample_initial_condition(cfg.swingup_ic_box, rng, center=hanging.as_array())
        log = tj.track_rollout(
            ref, cfg.params, params_true, cfg.noise, cfg.camera, rng,
            observer="teacher", x0=x0.as_array(),
        )
        trajectories.append(ln.DemoTrajectory(x_hat=log.X_hat, u=log.U, y_pix=log.Y_pix))
    dataset = ln.DemoDataset(trajectories, {"seed": cfg.seed, "task": "swingup"})
    basis = kp.KoopmanBasis()
    prob = kp.assemble_koopman(dataset, basis)
    koop = kp.fit_koopman(prob, basis, lam=cfg.lam)

    student_logs, teacher_logs = [], []
    student_success, teacher_success = [], []
    for s in range(cfg.swingup_eval_seeds):
        rng = np.random.default_rng([cfg.seed, _STREAM_SWINGUP_EVAL, s])
        log = tj.track_rollout(
            ref,
            cfg.params,
            params_true,
            cfg.noise,
            cfg.camera,
            rng,
            observer="student-koopman",
            koopman_params=koop,
            record_frames=False,
        )
        student_logs.append(log)
        student_success.append(is_success(log.X_true[:, -1]))
        rng = np.random.default_rng([cfg.seed, _STREAM_SWINGUP_EVAL, s])
        log_t = tj.track_rollout(
            ref, cfg.params, params_true, cfg.noise, cfg.camera, rng,
            observer="teacher", record_frames=False,
        )
        teacher_logs.append(log_t)
        teacher_success.append(is_success(log_t.X_true[:, -1]))

    report = {
        "ilqr_converged": bool(info["converged"]),
        "ilqr_final_cost": float(info["costs"][-1]),
        "reference_terminal": [float(v) for v in ref.X[:, -1]],
        "n_demos": cfg.swingup_demos,
        "student_successes": [bool(s) for s in student_success],
        "teacher_successes": [bool(s) for s in teacher_success],
        "student_success_count": int(sum(student_success)),
        "teacher_success_count": int(sum(teacher_success)),
        "student_terminal_errors": [float(final_state_error(l.X_true[:, -1])) for l in student_logs],
        "teacher_terminal_errors": [float(final_state_error(l.X_true[:, -1])) for l in teacher_logs],
    }
    if run_dir is not None:
        run_dir = Path(run_dir)
        run_dir.mkdir(parents=True, exist_ok=True)
        cfg.save(run_dir / "config.json")
        tj.save_reference_csv(run_dir / "reference.csv", ref)
        tj.save_gains(run_dir / "gains.csv", ref)
        kp.save_koopman_params(run_dir / "params", koop)
        for s, log in enumerate(student_logs):
            _write_tracking_csv(run_dir / f"student_seed_{s}.csv", log)
        for s, log in enumerate(teacher_logs):
            _write_tracking_csv(run_dir / f"teacher_seed_{s}.csv", log)
        _write_json(run_dir / "report.json", report)
    return report


# ---------------------------------------------------------------------------
# run-directory persistence


def save_run_inputs(run_dir, cfg: ExperimentConfig, teacher: lc.TeacherPolicy, params_true) -> None:
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    cfg.save(run_dir / "config.json")
    teacher_blob = {
        "K": teacher.K.tolist(),
        "L": teacher.L.tolist(),
        "A": teacher.model.A.tolist(),
        "B": teacher.model.B.tolist(),
        "C": teacher.model.C.tolist(),
        "d_dyn": teacher.model.d_dyn.tolist(),
        "x_ref": teacher.x_ref.tolist(),
        "u_ref": teacher.u_ref,
    }
    _write_json(run_dir / "teacher.json", teacher_blob)
    with open(run_dir / "params_true.cfg", "w") as fh:
        fh.write(cp.params_to_config(params_true))


def load_teacher_gain(run_dir) -> np.ndarray:
    with open(Path(run_dir) / "teacher.json") as fh:
        return np.asarray(json.load(fh)["K"], dtype=float)


def save_dataset(run_dir, dataset: ln.DemoDataset, cfg: ExperimentConfig) -> None:
    run_dir = Path(run_dir)
    (run_dir / "demos").mkdir(parents=True, exist_ok=True)
    (run_dir / "images").mkdir(parents=True, exist_ok=True)
    for i, tr in enumerate(dataset.trajectories):
        _write_demo_csv(run_dir / "demos" / f"traj_{i}.csv", tr, cfg.dt)
        with open(run_dir / "images" / f"traj_{i}.bin", "wb") as fh:
            fh.write(tr.y_pix.astype("<f4").tobytes())
    _write_json(
        run_dir / "dataset.json",
        {
            "n_trajectories": len(dataset),
            "episode_len": dataset.trajectories[0].n_steps,
            "l": int(dataset.trajectories[0].y_pix.shape[0]),
            "meta": dataset.meta,
        },
    )


def load_dataset(run_dir) -> ln.DemoDataset:
    run_dir = Path(run_dir)
    with open(run_dir / "dataset.json") as fh:
        info = json.load(fh)
    l = info["l"]
    trajectories = []
    for i in range(info["n_trajectories"]):
        data = np.loadtxt(run_dir / "demos" / f"traj_{i}.csv", delimiter=",", skiprows=1)
        x_hat = data[:, 2:6].T
        u = data[:-1, 6].reshape(1, -1)
        raw = np.fromfile(run_dir / "images" / f"traj_{i}.bin", dtype="<f4")
        y_pix = raw.reshape(l, -1).astype(float)
        trajectories.append(ln.DemoTrajectory(x_hat=x_hat, u=u, y_pix=y_pix))
    return ln.DemoDataset(trajectories, info.get("meta", {}))


def _write_demo_csv(path, tr: ln.DemoTrajectory, dt: float) -> None:
    """Demo CSV stores the teacher's estimates in the state columns."""
    t = np.arange(tr.n_steps) * dt
    cp.write_trajectory_csv(path, t, tr.x_hat, tr.u[0])


def _write_tracking_csv(path, log: tj.RolloutLog) -> None:
    n = log.X_true.shape[1]
    u_full = np.concatenate([log.U[0], [math.nan]])
    with open(path, "w") as fh:
        fh.write(
            "k,t,p,v,theta,omega,p_hat,v_hat,theta_hat,omega_hat,"
            "p_ref,v_ref,theta_ref,omega_ref,u\n"
        )
        for k in range(n):
            vals = (
                [k, k * log.dt]
                + [log.X_true[i, k] for i in range(4)]
                + [log.X_hat[i, k] for i in range(4)]
                + [log.X_ref[i, k] for i in range(4)]
                + [u_full[k]]
            )
            fh.write(",".join(cp._fmt(v) for v in vals) + "\n")


def _write_json(path, obj) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)


def _config_hash(cfg: ExperimentConfig) -> str:
    import hashlib

    blob = json.dumps(cfg.to_dict(), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]
