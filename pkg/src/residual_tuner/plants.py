"""Base kinematic models, synthetic reference plants and reference trajectories.

Two robots are supported:

* ``diff-drive``: planar two-wheeled robot, pose (x, y, theta), inputs
  (u_l, u_r) in [-1, 1], rates (xdot, ydot, thetadot).
* ``arm-6dof``: serial arm described by standard DH rows, joint state theta,
  inputs are commanded joint velocities, rates are end-effector
  (xdot, ydot, zdot) obtained by a forward finite difference of FK.

A reference plant is the base model plus a known ground-truth residual plus
sampled noise.  It stands in for the simulator or the physical robot.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Optional, Sequence

import numpy as np

from .param_net import MlpSpec, forward, init_params

log = logging.getLogger(__name__)

DIFF_DRIVE = "diff-drive"
ARM = "arm-6dof"
ROBOTS = (DIFF_DRIVE, ARM)


def wrap_angle(theta):
    """Wrap to (-pi, pi]."""
    return np.pi - np.mod(np.pi - theta, 2.0 * np.pi)


# ---------------------------------------------------------------------------
# differential drive
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DiffDriveParams:
    wheel_radius: float = 0.03
    wheel_base: float = 0.10
    wheel_speed_scale: float = 10.0

    def __post_init__(self):
        for name in ("wheel_radius", "wheel_base", "wheel_speed_scale"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be strictly positive")

    @property
    def max_linear_speed(self) -> float:
        return self.wheel_radius * self.wheel_speed_scale

    @property
    def max_turn_rate(self) -> float:
        return 2.0 * self.wheel_radius / self.wheel_base


def clamp_wheels(u) -> np.ndarray:
    return np.clip(np.asarray(u, dtype=float), -1.0, 1.0)


def diff_drive_rate(pose, u, p: DiffDriveParams, residual=None) -> np.ndarray:
    """(xdot, ydot, thetadot) for wheel commands u = (u_l, u_r).

    The turn-rate row carries no wheel-speed factor.
    """
    u_l, u_r = clamp_wheels(u)
    theta = pose[2]
    k = 0.5 * p.wheel_radius * p.wheel_speed_scale * (u_l + u_r)
    rate = np.array([
        k * np.cos(theta),
        k * np.sin(theta),
        p.wheel_radius / p.wheel_base * (u_r - u_l),
    ])
    if residual is not None:
        rate = rate + residual
    return rate


def diff_drive_inverse(cmd, pose, p: DiffDriveParams) -> np.ndarray:
    """Wheel commands realising a commanded (xdot, ydot, thetadot), clamped.

    The lateral component orthogonal to the heading cannot be produced and is
    dropped.
    """
    theta = pose[2]
    v = cmd[0] * np.cos(theta) + cmd[1] * np.sin(theta)
    s = 2.0 * v / (p.wheel_radius * p.wheel_speed_scale)  # u_l + u_r
    d = cmd[2] * p.wheel_base / p.wheel_radius  # u_r - u_l
    return clamp_wheels([(s - d) / 2.0, (s + d) / 2.0])


# ---------------------------------------------------------------------------
# 6-DOF arm
# ---------------------------------------------------------------------------

# UR5-like geometry: columns a, alpha, d, theta_offset
DEFAULT_DH = (
    (0.0, np.pi / 2, 0.089159, 0.0),
    (-0.425, 0.0, 0.0, 0.0),
    (-0.39225, 0.0, 0.0, 0.0),
    (0.0, np.pi / 2, 0.10915, 0.0),
    (0.0, -np.pi / 2, 0.09465, 0.0),
    (0.0, 0.0, 0.0823, 0.0),
)
DEFAULT_HOME = (0.3, -1.2, 1.5, -1.9, -1.57, 0.2)


@dataclass(frozen=True)
class ArmParams:
    dh: tuple = DEFAULT_DH
    delta_t: float = 0.01
    joint_limits: tuple = tuple((-2 * np.pi, 2 * np.pi) for _ in range(6))

    def __post_init__(self):
        dh = np.asarray(self.dh, dtype=float)
        if dh.ndim != 2 or dh.shape[1] != 4:
            raise ValueError("dh must be a sequence of (a, alpha, d, theta_offset) rows")
        if not np.all(np.isfinite(dh)):
            raise ValueError("dh rows must be finite")
        if not self.delta_t > 0:
            raise ValueError("delta_t must be strictly positive")
        lim = np.asarray(self.joint_limits, dtype=float)
        if lim.shape != (dh.shape[0], 2) or np.any(lim[:, 0] > lim[:, 1]):
            raise ValueError("joint_limits must hold one (lower, upper) pair per joint")

    @property
    def n_joints(self) -> int:
        return len(self.dh)


def dh_transform(a, alpha, d, theta) -> np.ndarray:
    """Standard DH: Rz(theta) Tz(d) Tx(a) Rx(alpha)."""
    ct, st = np.cos(theta), np.sin(theta)
    ca, sa = np.cos(alpha), np.sin(alpha)
    return np.array([
        [ct, -st * ca, st * sa, a * ct],
        [st, ct * ca, -ct * sa, a * st],
        [0.0, sa, ca, d],
        [0.0, 0.0, 0.0, 1.0],
    ])


def arm_frames(theta, p: ArmParams) -> list[np.ndarray]:
    """Homogeneous transforms base->frame i for i = 0..n (frame 0 is identity)."""
    T = np.eye(4)
    frames = [T]
    for (a, alpha, d, off), q in zip(p.dh, theta):
        T = T @ dh_transform(a, alpha, d, q + off)
        frames.append(T)
    return frames


def check_joint_limits(theta, p: ArmParams) -> bool:
    lim = np.asarray(p.joint_limits)
    ok = bool(np.all((theta >= lim[:, 0]) & (theta <= lim[:, 1])))
    if not ok:
        log.warning("joint configuration %s outside limits", np.round(theta, 4))
    return ok


def arm_fk(theta, p: ArmParams) -> np.ndarray:
    theta = np.asarray(theta, dtype=float)
    if theta.shape != (p.n_joints,):
        raise ValueError(f"expected {p.n_joints} joint angles, got shape {theta.shape}")
    check_joint_limits(theta, p)
    return arm_frames(theta, p)[-1][:3, 3].copy()


def fk_velocity(theta, theta_dot, p: ArmParams, residual=None) -> np.ndarray:
    """Forward-difference end-effector velocity over one step of length delta_t."""
    theta = np.asarray(theta, dtype=float)
    theta_dot = np.asarray(theta_dot, dtype=float)
    rate = (arm_fk(theta + theta_dot * p.delta_t, p) - arm_fk(theta, p)) / p.delta_t
    if residual is not None:
        rate = rate + residual
    return rate


def arm_jacobian(theta, p: ArmParams) -> np.ndarray:
    """3 x n linear-velocity Jacobian, z_{i-1} x (p_e - o_{i-1})."""
    frames = arm_frames(np.asarray(theta, dtype=float), p)
    p_e = frames[-1][:3, 3]
    cols = [np.cross(T[:3, 2], p_e - T[:3, 3]) for T in frames[:-1]]
    return np.column_stack(cols)


def arm_inverse(cmd, theta, p: ArmParams, damping: float = 1e-3) -> np.ndarray:
    """Joint velocities for a commanded end-effector velocity (damped least squares)."""
    J = arm_jacobian(theta, p)
    return J.T @ np.linalg.solve(J @ J.T + damping**2 * np.eye(3), np.asarray(cmd, dtype=float))


# ---------------------------------------------------------------------------
# ground-truth residuals and noise
# ---------------------------------------------------------------------------


@dataclass
class NoiseSpec:
    """Per-channel noise.  ``mixture`` draws an outlier component with
    probability ``outlier_prob`` whose std is ``outlier_scale`` times sigma."""

    kind: str = "gaussian"
    sigma: tuple = (0.0, 0.0, 0.0)
    outlier_prob: float = 0.1
    outlier_scale: float = 5.0

    def __post_init__(self):
        if self.kind not in ("gaussian", "mixture"):
            raise ValueError(f"unknown noise kind {self.kind!r}")
        self.sigma = tuple(float(s) for s in np.broadcast_to(self.sigma, (3,)))
        if min(self.sigma) < 0:
            raise ValueError("noise sigma must be non-negative")

    def sample(self, rng: np.random.Generator) -> np.ndarray:
        sigma = np.asarray(self.sigma)
        # always draw the same number of variates so streams stay aligned
        g = rng.standard_normal(3)
        if self.kind == "mixture":
            outlier = rng.random(3) < self.outlier_prob
            sigma = np.where(outlier, sigma * self.outlier_scale, sigma)
        return sigma * g


@dataclass
class GroundTruthResidual:
    """Known residual injected into a reference plant.

    kind:
      ``constant``  -- fixed 3-vector ``bias``
      ``network``   -- fixed random network (``n_in``, 10, 3) drawn from ``seed``,
                       output multiplied by ``magnitude``
      ``analytic``  -- magnitude * sin(A z + phase), A and phase drawn from ``seed``
    """

    kind: str = "constant"
    bias: tuple = (0.0, 0.0, 0.0)
    magnitude: float = 0.0
    n_in: int = 5
    seed: int = 0
    init_scale: float = 1.0
    _params: Optional[np.ndarray] = field(default=None, init=False, repr=False)
    _A: Optional[np.ndarray] = field(default=None, init=False, repr=False)
    _phase: Optional[np.ndarray] = field(default=None, init=False, repr=False)

    def __post_init__(self):
        if self.kind not in ("constant", "network", "analytic"):
            raise ValueError(f"unknown residual kind {self.kind!r}")
        self.bias = tuple(float(b) for b in np.broadcast_to(self.bias, (3,)))
        if self.kind == "network":
            self._params = init_params(MlpSpec(self.n_in, 10, 3), self.seed, self.init_scale)
        elif self.kind == "analytic":
            rng = np.random.default_rng(self.seed)
            self._A = rng.normal(0.0, 1.0, size=(3, self.n_in))
            self._phase = rng.uniform(-np.pi, np.pi, size=3)

    def shape(self, z) -> np.ndarray:
        """Unscaled residual shape (before ``magnitude``)."""
        z = np.asarray(z, dtype=float)
        if self.kind == "network":
            return forward(self._params, MlpSpec(self.n_in, 10, 3), z)
        if self.kind == "analytic":
            return np.sin(z @ self._A.T + self._phase)
        return np.zeros(z.shape[:-1] + (3,))

    def __call__(self, z) -> np.ndarray:
        if self.kind == "constant":
            z = np.asarray(z, dtype=float)
            return np.broadcast_to(np.asarray(self.bias), z.shape[:-1] + (3,)).copy()
        return self.magnitude * self.shape(z)


@dataclass
class Reality:
    """Everything separating a reference plant from the base model."""

    residuals: list = field(default_factory=list)
    noise: NoiseSpec = field(default_factory=NoiseSpec)

    def residual(self, z) -> np.ndarray:
        out = np.zeros(3)
        for r in self.residuals:
            out = out + r(z)
        return out


# ---------------------------------------------------------------------------
# reference plants
# ---------------------------------------------------------------------------


def base_rate(robot: str, state, u, params) -> np.ndarray:
    if robot == DIFF_DRIVE:
        return diff_drive_rate(state, u, params)
    if robot == ARM:
        return fk_velocity(state, u, params)
    raise ValueError(f"unknown robot {robot!r}")


def net_input(robot: str, prev_rates, u) -> np.ndarray:
    """Residual-network input: (xdot, ydot, thetadot, u_l, u_r) or joint velocities."""
    if robot == DIFF_DRIVE:
        return np.concatenate([np.asarray(prev_rates, dtype=float), clamp_wheels(u)])
    return np.asarray(u, dtype=float).copy()


def integrate(robot: str, state, u, rates, dt: float) -> np.ndarray:
    """Explicit Euler step of the plant state."""
    if robot == DIFF_DRIVE:
        nxt = np.asarray(state, dtype=float) + dt * np.asarray(rates)
        nxt[2] = wrap_angle(nxt[2])
        return nxt
    return np.asarray(state, dtype=float) + dt * np.asarray(u, dtype=float)


def reference_step(robot: str, params, reality: Reality, state, u, z, rng, dt: float):
    """Observed rates of a reference plant and its next state.

    Observed = base rate + ground-truth residual(z) + noise.
    """
    base = base_rate(robot, state, u, params)
    obs = base + reality.residual(z) + reality.noise.sample(rng)
    return obs, integrate(robot, state, u, obs, dt)


# ---------------------------------------------------------------------------
# trajectories
# ---------------------------------------------------------------------------

TRAJECTORIES = ("spin-in-place", "line-x", "circle-2d-with-chord", "circle-3d")
DIFF_DRIVE_TRAJECTORIES = ("spin-in-place", "line-x")
ARM_TRAJECTORIES = ("circle-2d-with-chord", "circle-3d")


@dataclass(frozen=True)
class TrajectorySpec:
    """Commanded-rate profile.

    amplitude is the peak commanded thetadot (spin, rad/s), the peak xdot
    (line, m/s) or the circle radius (arm, m).  ``z_amplitude`` is the
    vertical travel of the 3-D circle.
    """

    kind: str = "spin-in-place"
    amplitude: float = 2.0
    period: float = 10.0
    duration: float = 60.0
    dt: float = 0.01
    z_amplitude: float = 0.03

    def __post_init__(self):
        if self.kind not in TRAJECTORIES:
            raise ValueError(f"unknown trajectory kind {self.kind!r}")
        if not self.dt > 0:
            raise ValueError("dt must be strictly positive")
        if not self.period > 0 or not self.duration > 0:
            raise ValueError("period and duration must be strictly positive")
        if self.amplitude < 0 or self.z_amplitude < 0:
            raise ValueError("amplitudes must be non-negative")

    @property
    def n_steps(self) -> int:
        return int(round(self.duration / self.dt))


def check_trajectory_feasible(spec: TrajectorySpec, robot: str, params) -> None:
    """Raise if the trajectory asks for more than the plant can deliver."""
    if robot == DIFF_DRIVE:
        if spec.kind not in DIFF_DRIVE_TRAJECTORIES:
            raise ValueError(f"trajectory {spec.kind!r} is not available for a differential drive")
        if spec.kind == "spin-in-place" and spec.amplitude > params.max_turn_rate * (1 + 1e-12):
            raise ValueError(
                f"spin amplitude {spec.amplitude} rad/s exceeds max turn rate {params.max_turn_rate:.4g}"
            )
        if spec.kind == "line-x" and spec.amplitude > params.max_linear_speed * (1 + 1e-12):
            raise ValueError(
                f"line amplitude {spec.amplitude} m/s exceeds max speed {params.max_linear_speed:.4g}"
            )
    elif robot == ARM:
        if spec.kind not in ARM_TRAJECTORIES:
            raise ValueError(f"trajectory {spec.kind!r} is not available for the arm")
    else:
        raise ValueError(f"unknown robot {robot!r}")


def trajectory(spec: TrajectorySpec, t: float) -> np.ndarray:
    """Commanded task-space rates at time t (3-vector).

    diff-drive kinds return (xdot, ydot, thetadot) in the world frame; arm
    kinds return the end-effector (xdot, ydot, zdot).
    """
    if not (0.0 <= t <= spec.duration + 1e-9):
        raise ValueError(f"t={t} outside [0, {spec.duration}]")
    w = 2.0 * np.pi / spec.period
    A = spec.amplitude
    if spec.kind == "spin-in-place":
        return np.array([0.0, 0.0, A * np.sin(w * t)])
    if spec.kind == "line-x":
        return np.array([A * np.sin(w * t), 0.0, 0.0])
    if spec.kind == "circle-3d":
        return np.array([-A * w * np.sin(w * t), A * w * np.cos(w * t), spec.z_amplitude * w * np.cos(w * t)])
    # circle-2d-with-chord: first half of each period a full circle, second
    # half out and back along the x diameter
    phase = np.mod(t, spec.period) / spec.period
    w2 = 2.0 * w
    if phase < 0.5:
        s = phase * spec.period
        return np.array([-A * w2 * np.sin(w2 * s), A * w2 * np.cos(w2 * s), 0.0])
    s = (phase - 0.5) * spec.period
    return np.array([-A * w2 * np.sin(w2 * s), 0.0, 0.0])


def control_for(robot: str, cmd, state, params) -> np.ndarray:
    """Map commanded rates to plant inputs via the base model's inverse."""
    if robot == DIFF_DRIVE:
        return diff_drive_inverse(cmd, state, params)
    return arm_inverse(cmd, state, params)


def initial_state(robot: str, home: Optional[Sequence[float]] = None) -> np.ndarray:
    if home is not None:
        return np.array(home, dtype=float)
    return np.zeros(3) if robot == DIFF_DRIVE else np.array(DEFAULT_HOME)


# ---------------------------------------------------------------------------
# streams
# ---------------------------------------------------------------------------


@dataclass
class Sample:
    """One step as seen by the learner."""

    t: float
    state: np.ndarray
    u: np.ndarray
    z: np.ndarray
    ref: np.ndarray
    sim: Optional[np.ndarray] = None


class SyntheticSource:
    """Reference plant driven along a trajectory.

    ``reality`` defines the stream the learner is matched against.  When
    ``sim_reality`` is given, a simulator stand-in is evaluated at the same
    state and inputs every step and reported as ``Sample.sim``.
    """

    def __init__(self, robot, params, traj: TrajectorySpec, reality: Reality,
                 sim_reality: Optional[Reality] = None, seed: int = 0, home=None):
        check_trajectory_feasible(traj, robot, params)
        self.robot = robot
        self.params = params
        self.traj = traj
        self.reality = reality
        self.sim_reality = sim_reality
        self.seed = seed
        self.home = home

    def __len__(self) -> int:
        return self.traj.n_steps

    def __iter__(self) -> Iterator[Sample]:
        ss = np.random.SeedSequence(self.seed)
        rng_ref, rng_sim = (np.random.default_rng(s) for s in ss.spawn(2))
        state = initial_state(self.robot, self.home)
        prev = np.zeros(3)
        dt = self.traj.dt
        for k in range(self.traj.n_steps):
            t = k * dt
            cmd = trajectory(self.traj, t)
            u = control_for(self.robot, cmd, state, self.params)
            z = net_input(self.robot, prev, u)
            sim = None
            if self.sim_reality is not None:
                sim, _ = reference_step(self.robot, self.params, self.sim_reality, state, u, z, rng_sim, dt)
            ref, nxt = reference_step(self.robot, self.params, self.reality, state, u, z, rng_ref, dt)
            yield Sample(t, state.copy(), u, z, ref, sim)
            state = nxt
            prev = ref


def stream_columns(robot: str) -> list[str]:
    if robot == DIFF_DRIVE:
        return ["t", "x", "y", "theta", "xdot", "ydot", "thetadot", "u_l", "u_r", "stream_tag"]
    return ["t", "x", "y", "z", "q1", "q2", "q3", "q4", "q5", "q6", "xdot", "ydot", "zdot",
            "thd1", "thd2", "thd3", "thd4", "thd5", "thd6", "stream_tag"]


def write_stream(path, robot: str, samples, tag: str = "real", params=None) -> None:
    """Write samples as CSV.  Paired simulator rates go on extra rows tagged ``sim``.

    Arm rows carry the end-effector position, computed with ``params``.
    """
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(stream_columns(robot))
        for s in samples:
            pose = list(map(float, s.state))
            if robot == ARM:
                pose = list(map(float, arm_fk(s.state, params or ArmParams()))) + pose
            head = [float(s.t), *pose]
            tail = [*map(float, s.u)]
            w.writerow([*head, *map(float, s.ref), *tail, tag])
            if s.sim is not None:
                w.writerow([*head, *map(float, s.sim), *tail, "sim"])


class ReplaySource:
    """Replays a recorded stream (our CSV format) as a reference source.

    The arm stream stores joint angles (q1..q6) so the base model can be
    evaluated on the recorded configuration.  Rows tagged ``sim`` are paired
    with the preceding row of the same time stamp.
    """

    def __init__(self, path, ref_tag: Optional[str] = None):
        self.path = Path(path)
        with open(self.path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        if not rows:
            raise ValueError(f"{self.path}: empty stream")
        cols = set(rows[0])
        if {"theta", "u_l", "u_r"} <= cols:
            self.robot = DIFF_DRIVE
        elif {"q1", "thd6", "zdot"} <= cols:
            self.robot = ARM
        else:
            raise ValueError(f"{self.path}: unrecognised stream columns {sorted(cols)}")
        missing = set(stream_columns(self.robot)) - cols
        if missing:
            raise ValueError(f"{self.path}: missing columns {sorted(missing)}")
        if ref_tag is None:
            others = [r["stream_tag"] for r in rows if r["stream_tag"] != "sim"]
            ref_tag = others[0] if others else "sim"
        self.ref_tag = ref_tag
        self._rows = rows

    def _parse(self, r):
        if self.robot == DIFF_DRIVE:
            state = np.array([float(r["x"]), float(r["y"]), float(r["theta"])])
            rates = np.array([float(r["xdot"]), float(r["ydot"]), float(r["thetadot"])])
            u = np.array([float(r["u_l"]), float(r["u_r"])])
        else:
            state = np.array([float(r[f"q{i}"]) for i in range(1, 7)])
            rates = np.array([float(r["xdot"]), float(r["ydot"]), float(r["zdot"])])
            u = np.array([float(r[f"thd{i}"]) for i in range(1, 7)])
        return float(r["t"]), state, u, rates

    def __iter__(self) -> Iterator[Sample]:
        prev = np.zeros(3)
        sims = {}
        for r in self._rows:
            if r["stream_tag"] == "sim" and self.ref_tag != "sim":
                sims[r["t"]] = self._parse(r)[3]
        for r in self._rows:
            if r["stream_tag"] != self.ref_tag:
                continue
            t, state, u, ref = self._parse(r)
            z = net_input(self.robot, prev, u)
            yield Sample(t, state, u, z, ref, sims.get(r["t"]))
            prev = ref

    def __len__(self) -> int:
        return sum(1 for r in self._rows if r["stream_tag"] == self.ref_tag)
