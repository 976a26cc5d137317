"""Cartpole physics: continuous dynamics, RK4 stepping, model mismatch, encoders.

Conventions: state x = (p, v, theta, omega) with theta = 0 at the upright
goal, theta = pi hanging, and theta wrapped to (-pi, pi] after every step.
Positive p is rightward cart travel; the single control input is a
horizontal force on the cart in newtons, clamped by policies to
[-U_MAX, U_MAX] before being applied. The pole is a uniform rod of length
``pole_length`` hinged at the cart, so its inertia about the pivot is
m * L^2 / 3.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields, replace

import numpy as np

DT = 1.0 / 60.0
U_MAX = 10.0

TRAJECTORY_HEADER = "k,t,p,v,theta,omega,u"


def wrap_angle(theta: float) -> float:
    """Wrap an angle to (-pi, pi]."""
    w = math.remainder(theta, math.tau)
    return w + math.tau if w <= -math.pi else w


def state_error(x: np.ndarray, x_ref: np.ndarray) -> np.ndarray:
    """Componentwise x - x_ref with the angle component wrapped to (-pi, pi]."""
    e = np.asarray(x, dtype=float) - np.asarray(x_ref, dtype=float)
    e[2] = wrap_angle(e[2])
    return e


def clamp_force(u: float, u_max: float = U_MAX) -> float:
    """Actuator saturation applied to every commanded force."""
    return min(max(float(u), -u_max), u_max)


@dataclass(frozen=True)
class CartpoleParams:
    """Physical parameters. Defaults are the nominal desk-scale rig."""

    cart_mass: float = 1.0
    pole_mass: float = 0.2
    pole_length: float = 0.352
    gravity: float = 9.81
    viscous_friction_cart: float = 0.1
    viscous_friction_pole: float = 0.002

    def __post_init__(self):
        if min(self.cart_mass, self.pole_mass, self.pole_length) <= 0.0:
            raise ValueError("masses and pole_length must be strictly positive")
        if self.gravity <= 0.0:
            raise ValueError("gravity must be strictly positive (magnitude convention)")
        if min(self.viscous_friction_cart, self.viscous_friction_pole) < 0.0:
            raise ValueError("friction coefficients must be nonnegative")


@dataclass(frozen=True)
class CartpoleState:
    p: float = 0.0
    v: float = 0.0
    theta: float = 0.0
    omega: float = 0.0

    def __post_init__(self):
        if not all(map(math.isfinite, (self.p, self.v, self.theta, self.omega))):
            raise ValueError("state components must be finite")
        object.__setattr__(self, "theta", wrap_angle(self.theta))

    def as_array(self) -> np.ndarray:
        return np.array([self.p, self.v, self.theta, self.omega])

    @classmethod
    def from_array(cls, x) -> "CartpoleState":
        p, v, theta, omega = (float(c) for c in x)
        return cls(p, v, theta, omega)


@dataclass(frozen=True)
class NoiseConfig:
    """Actuation noise and encoder quantization of the simulated rig."""

    process_noise_std: float = 0.05
    encoder_counts_position: float = 10000.0
    encoder_counts_angle: float = 4096.0
    seed: int = 0

    def __post_init__(self):
        if self.process_noise_std < 0.0:
            raise ValueError("process_noise_std must be nonnegative")
        if min(self.encoder_counts_position, self.encoder_counts_angle) <= 0.0:
            raise ValueError("encoder counts must be strictly positive")


def _deriv(p, v, theta, omega, u, pr: CartpoleParams):
    """Accelerations of the cart/uniform-rod system with viscous friction."""
    lc = 0.5 * pr.pole_length
    inertia = pr.pole_mass * pr.pole_length ** 2 / 3.0  # rod about the pivot
    c = pr.pole_mass * lc
    total = pr.cart_mass + pr.pole_mass
    sin_t = math.sin(theta)
    cos_t = math.cos(theta)
    det = total * inertia - (c * cos_t) ** 2
    f_cart = u - pr.viscous_friction_cart * v + c * sin_t * omega ** 2
    f_pole = pr.pole_mass * pr.gravity * lc * sin_t - pr.viscous_friction_pole * omega
    v_dot = (inertia * f_cart - c * cos_t * f_pole) / det
    omega_dot = (total * f_pole - c * cos_t * f_cart) / det
    return v, v_dot, omega, omega_dot


def continuous_dynamics(state: CartpoleState, u: float, params: CartpoleParams) -> np.ndarray:
    """Time derivative (dp, dv, dtheta, domega) of the cartpole state."""
    return np.array(_deriv(state.p, state.v, state.theta, state.omega, float(u), params))


def step_array(x: np.ndarray, u: float, params: CartpoleParams, dt: float = DT) -> np.ndarray:
    """One RK4 step on a raw state array; theta of the result is wrapped."""
    if dt <= 0.0:
        raise ValueError("dt must be positive")
    p, v, th, om = float(x[0]), float(x[1]), float(x[2]), float(x[3])
    u = float(u)
    k1 = _deriv(p, v, th, om, u, params)
    h = 0.5 * dt
    k2 = _deriv(p + h * k1[0], v + h * k1[1], th + h * k1[2], om + h * k1[3], u, params)
    k3 = _deriv(p + h * k2[0], v + h * k2[1], th + h * k2[2], om + h * k2[3], u, params)
    k4 = _deriv(p + dt * k3[0], v + dt * k3[1], th + dt * k3[2], om + dt * k3[3], u, params)
    s = dt / 6.0
    return np.array([
        p + s * (k1[0] + 2.0 * k2[0] + 2.0 * k3[0] + k4[0]),
        v + s * (k1[1] + 2.0 * k2[1] + 2.0 * k3[1] + k4[1]),
        wrap_angle(th + s * (k1[2] + 2.0 * k2[2] + 2.0 * k3[2] + k4[2])),
        om + s * (k1[3] + 2.0 * k2[3] + 2.0 * k3[3] + k4[3]),
    ])


def step(state: CartpoleState, u: float, params: CartpoleParams, dt: float = DT) -> CartpoleState:
    """RK4 step of the deterministic model."""
    return CartpoleState.from_array(step_array(state.as_array(), u, params, dt))


def step_true(
    state: CartpoleState,
    u: float,
    params_true: CartpoleParams,
    noise: NoiseConfig,
    rng: np.random.Generator,
    dt: float = DT,
) -> CartpoleState:
    """Step the true model with Gaussian noise added to the applied force."""
    u_eff = float(u)
    if noise.process_noise_std > 0.0:
        u_eff += rng.normal(0.0, noise.process_noise_std)
    return step(state, u_eff, params_true, dt)


def sample_true_params(
    nominal: CartpoleParams, max_error: float, rng: np.random.Generator
) -> CartpoleParams:
    """Perturb every physical parameter by an independent uniform factor.

    Each field is scaled by a draw from [1 - max_error, 1 + max_error],
    modelling the mismatch between the design model and the rig.
    """
    if not 0.0 <= max_error < 1.0:
        raise ValueError("max_error must be in [0, 1)")
    scaled = {
        f.name: getattr(nominal, f.name) * rng.uniform(1.0 - max_error, 1.0 + max_error)
        for f in fields(nominal)
    }
    return replace(nominal, **scaled)


def encoder_measure(state: CartpoleState, noise: NoiseConfig) -> tuple[float, float]:
    """Quantized (p, theta) as read from incremental encoders; no velocities."""
    p_meas = round(state.p * noise.encoder_counts_position) / noise.encoder_counts_position
    step_theta = math.tau / noise.encoder_counts_angle
    theta_meas = round(state.theta / step_theta) * step_theta
    return p_meas, theta_meas


def linearize_array(
    params: CartpoleParams, x: np.ndarray, u: float, dt: float = DT
) -> tuple[np.ndarray, np.ndarray]:
    """Central-difference Jacobians (A, B) of step_array at (x, u)."""
    x = np.asarray(x, dtype=float)
    a_mat = np.zeros((4, 4))
    for i in range(4):
        h = 1e-6 * max(1.0, abs(x[i]))
        xp = x.copy()
        xm = x.copy()
        xp[i] += h
        xm[i] -= h
        a_mat[:, i] = state_error(step_array(xp, u, params, dt), step_array(xm, u, params, dt)) / (2.0 * h)
    hu = 1e-6 * max(1.0, abs(u))
    b_col = state_error(step_array(x, u + hu, params, dt), step_array(x, u - hu, params, dt)) / (2.0 * hu)
    return a_mat, b_col.reshape(4, 1)


def linearize(
    params: CartpoleParams, x_goal: CartpoleState, u_goal: float = 0.0, dt: float = DT
) -> tuple[np.ndarray, np.ndarray]:
    """Discrete-time (A, B) of the RK4 step about a goal point."""
    return linearize_array(params, x_goal.as_array(), u_goal, dt)


def mechanical_energy(state: CartpoleState, params: CartpoleParams) -> float:
    """Total kinetic plus potential energy; zero datum at pivot height."""
    lc = 0.5 * params.pole_length
    inertia_com = params.pole_mass * params.pole_length ** 2 / 12.0
    ke_cart = 0.5 * params.cart_mass * state.v ** 2
    vx = state.v + lc * math.cos(state.theta) * state.omega
    vy = -lc * math.sin(state.theta) * state.omega
    ke_pole = 0.5 * params.pole_mass * (vx ** 2 + vy ** 2) + 0.5 * inertia_com * state.omega ** 2
    pe = params.pole_mass * params.gravity * lc * math.cos(state.theta)
    return ke_cart + ke_pole + pe


def write_trajectory_csv(path, t: np.ndarray, x: np.ndarray, u: np.ndarray) -> None:
    """Write a rollout as CSV: header k,t,p,v,theta,omega,u.

    x is (4, N), u is (N-1,); the final row carries u = nan since no input
    follows the terminal state.
    """
    x = np.asarray(x, dtype=float)
    u_full = np.concatenate([np.asarray(u, dtype=float).reshape(-1), [math.nan]])
    with open(path, "w") as fh:
        fh.write(TRAJECTORY_HEADER + "\n")
        for k in range(x.shape[1]):
            row = [k, t[k], x[0, k], x[1, k], x[2, k], x[3, k], u_full[k]]
            fh.write(",".join(_fmt(val) for val in row) + "\n")


def read_trajectory_csv(path) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Inverse of write_trajectory_csv; returns (t, x, u)."""
    data = np.loadtxt(path, delimiter=",", skiprows=1)
    data = np.atleast_2d(data)
    t = data[:, 1]
    x = data[:, 2:6].T
    u = data[:-1, 6]
    return t, x, u


def params_to_config(params: CartpoleParams) -> str:
    """Flat key=value serialization of a parameter set."""
    return "".join(f"{f.name}={_fmt(getattr(params, f.name))}\n" for f in fields(params))


def params_from_config(text: str) -> CartpoleParams:
    values = {}
    for line in text.splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, _, val = line.partition("=")
        values[key.strip()] = float(val)
    return CartpoleParams(**values)


def _fmt(v) -> str:
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return format(float(v), ".17g")
