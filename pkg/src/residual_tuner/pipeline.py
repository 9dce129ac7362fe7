"""Staged residual learning: chains, horizon history, measurement stacks, metrics.

A :class:`ResidualChain` predicts rates as the base rate plus the outputs of
an ordered list of residual networks.  :func:`run_stage` streams samples from
a reference source, keeps the last N steps in a :class:`HistoryBuffer` and
periodically retunes the single trainable stage with :func:`ukf_update`.
"""

from __future__ import annotations

import csv
import logging
import threading
import time
from concurrent.futures import Future, ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from . import plants
from .param_net import MlpSpec, forward, forward_batch, init_params
from .ukf_tuner import TunerError, TunerState, UpdateDiagnostics, init_state, ukf_update

log = logging.getLogger(__name__)

STAGE_KINDS = ("sim-to-kin", "real-to-kin", "real-to-sim")

METRIC_COLUMNS = ["t", "stage", "h2", "err_x", "err_y", "err_theta_or_z",
                  "update_index", "innovation_norm", "trace_P"]
DIAGNOSTIC_COLUMNS = ["update_index", "innovation_norm", "trace_P", "elapsed_ms"]


# ---------------------------------------------------------------------------
# chain
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Stage:
    spec: MlpSpec
    params: np.ndarray
    frozen: bool = True
    tag: str = ""


@dataclass(frozen=True)
class ResidualChain:
    """Base-rate source plus ordered residual stages.

    ``base`` is ``"kinematic"`` (the robot's kinematic model) or
    ``"sim-stream"`` (rates observed from a running simulator).
    """

    robot: str
    base: str = "kinematic"
    stages: tuple = ()

    @property
    def trainable(self) -> Optional[int]:
        idx = [i for i, s in enumerate(self.stages) if not s.frozen]
        if len(idx) > 1:
            raise ValueError("a chain may hold at most one trainable stage")
        return idx[0] if idx else None

    def append(self, stage: Stage) -> "ResidualChain":
        return replace(self, stages=tuple(self.stages) + (stage,))

    def with_params(self, params) -> "ResidualChain":
        i = self.trainable
        if i is None:
            raise ValueError("chain has no trainable stage")
        stages = list(self.stages)
        stages[i] = replace(stages[i], params=np.asarray(params, dtype=float))
        return replace(self, stages=tuple(stages))

    def freeze(self) -> "ResidualChain":
        return replace(self, stages=tuple(replace(s, frozen=True) for s in self.stages))

    def to_dict(self) -> dict:
        return {
            "robot": self.robot,
            "base": self.base,
            "stages": [
                {
                    "tag": s.tag,
                    "frozen": s.frozen,
                    "n_in": s.spec.n_in,
                    "n_hidden": s.spec.n_hidden,
                    "n_out": s.spec.n_out,
                    "values": np.asarray(s.params).tolist(),
                }
                for s in self.stages
            ],
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "ResidualChain":
        stages = tuple(
            Stage(MlpSpec(s["n_in"], s["n_hidden"], s["n_out"]), np.asarray(s["values"], dtype=float),
                  bool(s["frozen"]), s.get("tag", ""))
            for s in doc["stages"]
        )
        return cls(doc["robot"], doc.get("base", "kinematic"), stages)


def chain_residual(chain: ResidualChain, z, include_trainable: bool = True) -> np.ndarray:
    """Sum of stage outputs, accumulated in stage order."""
    z = np.asarray(z, dtype=float)
    total = np.zeros(z.shape[:-1] + (3,))
    for s in chain.stages:
        if s.frozen or include_trainable:
            if s.spec.n_in != z.shape[-1]:
                raise ValueError(f"stage {s.tag!r} expects width {s.spec.n_in}, got {z.shape[-1]}")
            total = total + forward(s.params, s.spec, z)
    return total


def chain_eval(chain: ResidualChain, z, base_rate) -> np.ndarray:
    """Predicted rate: base rate plus every stage output, frozen or not."""
    return np.asarray(base_rate, dtype=float) + chain_residual(chain, z)


# ---------------------------------------------------------------------------
# history
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class HistorySnapshot:
    z: np.ndarray
    base: np.ndarray
    ref: np.ndarray
    t: np.ndarray

    def __len__(self) -> int:
        return self.t.size


class HistoryBuffer:
    """Fixed-capacity ring of (z, base rate, reference rate, t) records."""

    def __init__(self, capacity: int, n_in: int):
        if capacity < 1:
            raise ValueError("capacity must be at least 1")
        self.capacity = capacity
        self._z = np.zeros((capacity, n_in))
        self._base = np.zeros((capacity, 3))
        self._ref = np.zeros((capacity, 3))
        self._t = np.zeros(capacity)
        self._head = 0  # next write slot
        self._count = 0

    def __len__(self) -> int:
        return self._count

    @property
    def full(self) -> bool:
        return self._count == self.capacity

    def push(self, z, base, ref, t: float) -> None:
        if self._count and t < self._t[(self._head - 1) % self.capacity]:
            raise ValueError("history records must be pushed in time order")
        i = self._head
        self._z[i] = z
        self._base[i] = base
        self._ref[i] = ref
        self._t[i] = t
        self._head = (i + 1) % self.capacity
        self._count = min(self._count + 1, self.capacity)

    def snapshot(self) -> HistorySnapshot:
        """Time-ordered read-only copy of the stored records."""
        start = (self._head - self._count) % self.capacity
        order = (start + np.arange(self._count)) % self.capacity
        arrays = []
        for a in (self._z, self._base, self._ref, self._t):
            c = a[order].copy()
            c.flags.writeable = False
            arrays.append(c)
        return HistorySnapshot(*arrays)


# ---------------------------------------------------------------------------
# measurement stacks
# ---------------------------------------------------------------------------


def reference_stack(snap: HistorySnapshot, costs) -> np.ndarray:
    """Cost-weighted reference rates, timestep-major."""
    return (snap.ref * np.asarray(costs, dtype=float)).reshape(-1)


def make_rollout(snap: HistorySnapshot, chain: ResidualChain, costs) -> Callable[[np.ndarray], np.ndarray]:
    """Vectorised rollout: (B, L) candidate parameters -> (B, 3N) stacks.

    Predictions are teacher-forced on the recorded inputs.  Frozen stages are
    evaluated once; only the trainable stage varies across candidates.
    """
    i = chain.trainable
    if i is None:
        raise ValueError("chain has no trainable stage")
    spec = chain.stages[i].spec
    costs = np.asarray(costs, dtype=float)
    fixed = snap.base + chain_residual(chain, snap.z, include_trainable=False)

    def rollout(Y):
        pred = fixed[None, :, :] + forward_batch(Y, spec, snap.z)
        return (pred * costs).reshape(Y.shape[0], -1)

    return rollout


def build_measurement(snap: HistorySnapshot, params, chain: ResidualChain, costs, horizon: Optional[int] = None) -> np.ndarray:
    """Predicted, cost-weighted stack for one candidate parameter vector."""
    if horizon is not None and len(snap) < horizon:
        raise ValueError(f"history holds {len(snap)} of {horizon} records")
    return make_rollout(snap, chain, costs)(np.asarray(params, dtype=float)[None, :])[0]


# ---------------------------------------------------------------------------
# metrics and filtering
# ---------------------------------------------------------------------------


def h2_norm(ref, pred) -> float:
    return float(np.linalg.norm(np.asarray(ref, dtype=float) - np.asarray(pred, dtype=float)))


@dataclass
class LowPassState:
    alpha: float = 0.2
    prev: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("filter coefficient must lie in [0, 1]")
        self.prev = np.asarray(self.prev, dtype=float)


def low_pass(state: LowPassState, raw) -> np.ndarray:
    """First-order exponential smoothing; updates ``state.prev`` in place."""
    out = (1.0 - state.alpha) * state.prev + state.alpha * np.asarray(raw, dtype=float)
    state.prev = out
    return out


def check_warm_start(ref, kin_pred, informed_pred) -> bool:
    """True iff the informed model is strictly closer to the reference.

    Each argument is an (n, 3) window of aligned rates; errors are absolute,
    averaged over time and channel.
    """
    ref = np.asarray(ref, dtype=float)
    if ref.size == 0:
        raise ValueError("empty window")
    e_kin = np.mean(np.abs(ref - np.asarray(kin_pred, dtype=float)))
    e_inf = np.mean(np.abs(ref - np.asarray(informed_pred, dtype=float)))
    return bool(e_kin > e_inf)


@dataclass(frozen=True)
class MetricRecord:
    t: float
    stage: str
    h2: float
    err: tuple
    update_index: int
    innovation_norm: Optional[float] = None
    trace_P: Optional[float] = None

    def row(self) -> list:
        opt = lambda v: "" if v is None else repr(float(v))  # noqa: E731
        return [repr(float(self.t)), self.stage, repr(float(self.h2)),
                *(repr(float(e)) for e in self.err),
                self.update_index, opt(self.innovation_norm), opt(self.trace_P)]


def write_metrics(path, records: Iterable[MetricRecord], append: bool = False) -> None:
    with open(path, "a" if append else "w", newline="") as fh:
        w = csv.writer(fh)
        if not append:
            w.writerow(METRIC_COLUMNS)
        for r in records:
            w.writerow(r.row())


def read_metrics(path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    out = []
    for r in rows:
        out.append({
            "t": float(r["t"]),
            "stage": r["stage"],
            "h2": float(r["h2"]),
            "err": (float(r["err_x"]), float(r["err_y"]), float(r["err_theta_or_z"])),
            "update_index": int(r["update_index"]),
        })
    return out


def write_diagnostics(path, diags: Iterable[UpdateDiagnostics], append: bool = False) -> None:
    with open(path, "a" if append else "w", newline="") as fh:
        w = csv.writer(fh)
        if not append:
            w.writerow(DIAGNOSTIC_COLUMNS)
        for d in diags:
            w.writerow([d.update_index, repr(d.innovation_norm), repr(d.trace_P), f"{d.elapsed_ms:.3f}"])


def window_means(h2: Sequence[float], frac: float = 0.1) -> tuple[float, float]:
    """Mean of the leading and trailing ``frac`` of a series."""
    h2 = np.asarray(h2, dtype=float)
    if h2.size == 0:
        raise ValueError("empty series")
    k = max(1, int(round(frac * h2.size)))
    return float(h2[:k].mean()), float(h2[-k:].mean())


# ---------------------------------------------------------------------------
# stage runner
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TunerConfig:
    alpha: float = 1.0
    beta: float = 2.0
    kappa: float = 0.0
    p0: float = 1e-2
    c_y: float = 1e-4
    c_v: float = 1e-2


@dataclass(frozen=True)
class StageConfig:
    kind: str = "sim-to-kin"
    horizon: int = 20
    stride: int = 20
    costs: tuple = (1.0, 1.0, 1.0)
    filter_alpha: float = 0.2
    init_scale: float = 0.0
    seed: int = 0
    tuner: TunerConfig = TunerConfig()
    warm_start: bool = True
    warm_start_window: int = 20

    def __post_init__(self):
        if self.kind not in STAGE_KINDS:
            raise ValueError(f"unknown stage kind {self.kind!r}")
        if self.horizon < 1 or self.stride < 1:
            raise ValueError("horizon and stride must be at least 1")
        if len(self.costs) != 3 or min(self.costs) <= 0:
            raise ValueError("costs must be three positive numbers")
        if not 0.0 <= self.filter_alpha <= 1.0:
            raise ValueError("filter_alpha must lie in [0, 1]")


@dataclass
class StageResult:
    chain: ResidualChain
    records: list
    diagnostics: list
    updates: int
    wall_clock: float
    deltas: list = field(default_factory=list)
    skipped_updates: int = 0


class StageError(RuntimeError):
    """A stage aborted; ``partial`` holds what was produced up to the failure."""

    def __init__(self, msg: str, partial: StageResult):
        super().__init__(msg)
        self.partial = partial


def _tune(state: TunerState, snap: HistorySnapshot, chain: ResidualChain, costs):
    rollout = make_rollout(snap, chain, costs)
    return ukf_update(state, rollout, reference_stack(snap, costs), vectorized=True)


class _InlineWorker:
    """Runs each tuning job immediately; used for the deterministic mode."""

    busy = False

    def __init__(self):
        self._done = None

    def submit(self, fn, *args):
        self._done = fn(*args)

    def poll(self):
        out, self._done = self._done, None
        return out

    def drain(self):
        return self.poll()

    def close(self):
        pass


class _ThreadWorker:
    """Single background tuning thread.  Jobs are refused while one is running."""

    def __init__(self):
        self._pool = ThreadPoolExecutor(max_workers=1, thread_name_prefix="tuner")
        self._fut: Optional[Future] = None

    @property
    def busy(self) -> bool:
        return self._fut is not None and not self._fut.done()

    def submit(self, fn, *args):
        self._fut = self._pool.submit(fn, *args)

    def poll(self):
        if self._fut is not None and self._fut.done():
            fut, self._fut = self._fut, None
            return fut.result()
        return None

    def drain(self):
        if self._fut is None:
            return None
        fut, self._fut = self._fut, None
        return fut.result()

    def close(self):
        self._pool.shutdown(wait=True)


def sample_base(chain: ResidualChain, sample: plants.Sample, params) -> np.ndarray:
    """Base rate for a sample: kinematic model or the observed simulator rate."""
    if chain.base == "sim-stream":
        if sample.sim is None:
            raise ValueError("sim-stream base needs samples carrying simulator rates")
        return np.asarray(sample.sim, dtype=float)
    return plants.base_rate(chain.robot, sample.state, sample.u, params)


def run_stage(
    config: StageConfig,
    chain_in: ResidualChain,
    source: Iterable[plants.Sample],
    plant_params,
    single_thread: bool = True,
    step_period: float = 0.0,
) -> StageResult:
    """Stream ``source`` through the chain while tuning its trainable stage.

    In single-thread mode every due update runs inline at the step that
    triggers it, so results are reproducible.  Otherwise updates run on a
    background thread on immutable history snapshots; the stream never waits
    for them, triggers that arrive while the tuner is busy are skipped, and
    finished updates are published at the next step.  ``step_period`` paces
    the stream in wall-clock seconds per step (threaded mode only).

    Returns the chain with the tuned stage frozen, plus per-step metrics.
    """
    i = chain_in.trainable
    if i is None:
        raise ValueError("chain_in has no trainable stage")
    stage = chain_in.stages[i]
    spec = stage.spec
    L = stage.params.size
    m = 3 * config.horizon
    tc = config.tuner
    state = init_state(stage.params, m, tc.p0, tc.c_y, tc.c_v, tc.alpha, tc.beta, tc.kappa)
    frozen_chain = replace(chain_in, stages=tuple(s for s in chain_in.stages if s.frozen))

    history = HistoryBuffer(config.horizon, spec.n_in)
    lp = LowPassState(config.filter_alpha)
    published = state.y_hat  # atomically replaced reference, never mutated
    lock = threading.Lock()
    worker = _InlineWorker() if single_thread else _ThreadWorker()
    records: list[MetricRecord] = []
    diags: list[UpdateDiagnostics] = []
    deltas: list[np.ndarray] = []
    steps_since_full = 0
    skipped = 0
    last_diag: Optional[UpdateDiagnostics] = None
    t_start = time.perf_counter()

    def publish(result):
        nonlocal state, published, last_diag
        delta, new_state, diag = result
        diag.extra.clear()
        with lock:
            state = new_state
            published = new_state.y_hat
        deltas.append(delta)
        diags.append(diag)
        last_diag = diag

    def partial():
        return StageResult(chain_in.with_params(published).freeze(), records, diags,
                           len(diags), time.perf_counter() - t_start, deltas, skipped)

    try:
        for k, sample in enumerate(source):
            tick = time.perf_counter()
            done = worker.poll()
            if done is not None:
                publish(done)

            base = sample_base(chain_in, sample, plant_params)
            fixed = base + chain_residual(frozen_chain, sample.z)
            raw = forward(published, spec, sample.z)
            pred = fixed + low_pass(lp, raw)
            err = np.asarray(sample.ref) - pred
            history.push(sample.z, base, sample.ref, sample.t)

            if history.full:
                if steps_since_full % config.stride == 0:
                    if worker.busy:
                        skipped += 1
                    else:
                        snap = history.snapshot()
                        with lock:
                            current = state
                        worker.submit(_tune, current, snap, chain_in, config.costs)
                        done = worker.poll() if single_thread else None
                        if done is not None:
                            publish(done)
                steps_since_full += 1

            records.append(MetricRecord(
                float(sample.t), config.kind, float(np.linalg.norm(err)), tuple(float(e) for e in err),
                len(diags),
                None if last_diag is None else last_diag.innovation_norm,
                None if last_diag is None else last_diag.trace_P,
            ))
            if step_period > 0 and not single_thread:
                rest = step_period - (time.perf_counter() - tick)
                if rest > 0:
                    time.sleep(rest)
        done = worker.drain()
        if done is not None:
            publish(done)
    except (TunerError, np.linalg.LinAlgError, FloatingPointError) as exc:
        raise StageError(f"stage {config.kind!r} aborted: {exc}", partial()) from exc
    finally:
        worker.close()

    return partial()


def new_trainable_stage(spec: MlpSpec, config: StageConfig) -> Stage:
    return Stage(spec, init_params(spec, config.seed, config.init_scale), frozen=False, tag=config.kind)
