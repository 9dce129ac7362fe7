"""Run a staged experiment described by an :class:`ExperimentConfig`.

A run directory holds everything needed to reproduce and inspect the run::

    config.yaml            copy of the input document
    metrics.csv            per-step metrics of every stage
    diagnostics_<kind>.csv per-update tuner diagnostics
    chain_<i>_<kind>.json  chain snapshot after stage i
    stream_<kind>.csv      reference stream seen by the stage (replayable)
    manifest.json          written once, at the end (also on failure)
"""

from __future__ import annotations

import itertools
import json
import logging
import os
from datetime import datetime, timezone
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__, plants
from .config import ExperimentConfig, RealityModel, plant_params, to_stage_config, to_trajectory
from .param_net import ARM_SPEC, DIFF_DRIVE_SPEC, MlpSpec, forward
from .pipeline import (
    STAGE_KINDS,
    ResidualChain,
    Stage,
    StageConfig,
    StageError,
    StageResult,
    check_warm_start,
    new_trainable_stage,
    run_stage,
    sample_base,
    write_diagnostics,
    write_metrics,
)
from .report import summarize_h2

log = logging.getLogger(__name__)

OUT_ROOT_ENV = "RESIDUAL_TUNER_OUT"


class RunDirExists(FileExistsError):
    pass


def net_spec(robot: str) -> MlpSpec:
    return DIFF_DRIVE_SPEC if robot == plants.DIFF_DRIVE else ARM_SPEC


def derived_seed(*parts: int) -> int:
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1)[0])


def default_out_root() -> Path:
    return Path(os.environ.get(OUT_ROOT_ENV, "runs"))


def build_reality(model: RealityModel, robot: str, magnitudes: Optional[list] = None) -> plants.Reality:
    n_in = net_spec(robot).n_in
    residuals = []
    for i, r in enumerate(model.residuals):
        mag = r.magnitude if magnitudes is None or magnitudes[i] is None else magnitudes[i]
        residuals.append(plants.GroundTruthResidual(
            kind=r.kind, bias=r.bias, magnitude=mag, n_in=n_in, seed=r.seed, init_scale=r.init_scale))
    n = model.noise
    noise = plants.NoiseSpec(n.kind, n.sigma, n.outlier_prob, n.outlier_scale)
    return plants.Reality(residuals, noise)


def calibrate(model: RealityModel, cfg: ExperimentConfig, params) -> list:
    """Resolve ``relative_magnitude`` against the RMS base-rate norm.

    The base model is driven noise-free along the top-level trajectory; a
    residual with relative magnitude r gets magnitude
    r * rms(|base|) / rms(|shape(z)|) over that run.
    """
    if all(r.relative_magnitude is None for r in model.residuals):
        return [None] * len(model.residuals)
    src = plants.SyntheticSource(cfg.robot, params, to_trajectory(cfg.trajectory), plants.Reality(), seed=0,
                                 home=cfg.plant.home)
    samples = list(src)
    base = np.array([plants.base_rate(cfg.robot, s.state, s.u, params) for s in samples])
    Z = np.array([s.z for s in samples])
    rms_base = float(np.sqrt(np.mean(np.sum(base**2, axis=1))))
    out = []
    for r, gt in zip(model.residuals, build_reality(model, cfg.robot).residuals):
        if r.relative_magnitude is None:
            out.append(None)
            continue
        rms_shape = float(np.sqrt(np.mean(np.sum(gt.shape(Z) ** 2, axis=1))))
        out.append(0.0 if rms_shape == 0 else r.relative_magnitude * rms_base / rms_shape)
    return out


def decide_warm_start(chain: ResidualChain, prior: Stage, source, params, window: int) -> bool:
    """Apply the accuracy check to the first ``window`` samples of the stage stream."""
    samples = list(itertools.islice(iter(source), window))
    if not samples:
        raise ValueError("empty warm-start window")
    ref = np.array([s.ref for s in samples])
    without = np.array([sample_base(chain, s, params) for s in samples])
    informed = without + forward(prior.params, prior.spec, np.array([s.z for s in samples]))
    return check_warm_start(ref, without, informed)


def _stage_summary(kind, result: StageResult, warm, error=None) -> dict:
    h2 = [r.h2 for r in result.records]
    summary = {"kind": kind, "steps": len(h2), "updates": result.updates,
               "skipped_updates": result.skipped_updates,
               "wall_clock_s": round(result.wall_clock, 4), "warm_start": warm}
    if h2:
        summary.update(summarize_h2([r.t for r in result.records], h2))
    if error:
        summary["error"] = error
    return summary


def prepare_run_dir(out: Path) -> Path:
    out = Path(out)
    if out.exists():
        raise RunDirExists(f"run directory {out} already exists")
    out.mkdir(parents=True)
    return out


def run_experiment(cfg: ExperimentConfig, out: Path, config_text: Optional[str] = None,
                   single_thread: bool = True) -> dict:
    """Execute every stage of ``cfg`` into the fresh directory ``out``.

    Returns the manifest.  Raises :class:`StageError` after writing partial
    logs and the manifest if a stage aborts.
    """
    out = prepare_run_dir(out)
    (out / "config.yaml").write_text(config_text if config_text is not None else json.dumps(
        cfg.model_dump(mode="json"), indent=2))
    started = datetime.now(timezone.utc).isoformat()
    params = plant_params(cfg)
    sim_reality = build_reality(cfg.sim, cfg.robot, calibrate(cfg.sim, cfg, params))
    real_reality = build_reality(cfg.real, cfg.robot, calibrate(cfg.real, cfg, params))
    spec = net_spec(cfg.robot)

    learned: dict[str, Stage] = {}
    summaries = []
    failure: Optional[StageError] = None
    metrics_path = out / "metrics.csv"
    write_metrics(metrics_path, [])

    for idx, sm in enumerate(cfg.stages):
        # seeds depend on the stage kind, not its position, so a stage sees the
        # same stream whether or not earlier stages ran
        kind_id = STAGE_KINDS.index(sm.kind)
        sc = to_stage_config(sm, default_seed=derived_seed(cfg.seed, kind_id, 1))
        traj = to_trajectory(sm.trajectory or cfg.trajectory)
        src_seed = derived_seed(cfg.seed, kind_id, 2)
        if sc.kind == "sim-to-kin":
            source = plants.SyntheticSource(cfg.robot, params, traj, sim_reality, seed=src_seed, home=cfg.plant.home)
            chain, prior = ResidualChain(cfg.robot, "kinematic"), None
        elif sc.kind == "real-to-kin":
            source = plants.SyntheticSource(cfg.robot, params, traj, real_reality, seed=src_seed, home=cfg.plant.home)
            chain, prior = ResidualChain(cfg.robot, "kinematic"), learned.get("sim-to-kin")
        else:
            source = plants.SyntheticSource(cfg.robot, params, traj, real_reality, sim_reality=sim_reality,
                                            seed=src_seed, home=cfg.plant.home)
            chain, prior = ResidualChain(cfg.robot, "sim-stream"), learned.get("real-to-kin")

        warm = None
        if prior is not None and sc.warm_start:
            warm = decide_warm_start(chain, prior, source, params, sc.warm_start_window)
            log.info("stage %s: warm start %s", sc.kind, "accepted" if warm else "rejected")
            if warm:
                chain = chain.append(prior)
        chain = chain.append(new_trainable_stage(spec, sc))

        plants.write_stream(out / f"stream_{sc.kind}.csv", cfg.robot, source, params=params)
        try:
            result = run_stage(sc, chain, source, params, single_thread=single_thread,
                               step_period=traj.dt / cfg.runtime.speedup)
        except StageError as exc:
            failure = exc
            result = exc.partial
        write_metrics(metrics_path, result.records, append=True)
        write_diagnostics(out / f"diagnostics_{sc.kind}.csv", result.diagnostics)
        (out / f"chain_{idx}_{sc.kind}.json").write_text(json.dumps(result.chain.to_dict()))
        summaries.append(_stage_summary(sc.kind, result, warm, str(failure) if failure else None))
        if failure:
            break
        learned[sc.kind] = result.chain.stages[-1]

    manifest = {
        "name": cfg.name,
        "config_hash": cfg.config_hash(),
        "code_version": __version__,
        "started": started,
        "finished": datetime.now(timezone.utc).isoformat(),
        "status": "failed" if failure else "ok",
        "single_thread": single_thread,
        "stages": summaries,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2))
    if failure:
        raise failure
    return manifest


def run_replay(stream_path, out: Path, stage: Optional[StageConfig] = None, params=None,
               single_thread: bool = True) -> dict:
    """Learn a residual against a recorded stream instead of a synthetic plant."""
    source = plants.ReplaySource(stream_path)
    robot = source.robot
    if params is None:
        params = plants.DiffDriveParams() if robot == plants.DIFF_DRIVE else plants.ArmParams()
    sc = stage or StageConfig(kind="real-to-kin" if source.ref_tag != "sim" else "sim-to-kin")
    out = prepare_run_dir(out)
    started = datetime.now(timezone.utc).isoformat()
    base = "sim-stream" if sc.kind == "real-to-sim" else "kinematic"
    chain = ResidualChain(robot, base).append(new_trainable_stage(net_spec(robot), sc))
    failure = None
    try:
        result = run_stage(sc, chain, source, params, single_thread=single_thread)
    except StageError as exc:
        failure, result = exc, exc.partial
    write_metrics(out / "metrics.csv", result.records)
    write_diagnostics(out / f"diagnostics_{sc.kind}.csv", result.diagnostics)
    (out / f"chain_0_{sc.kind}.json").write_text(json.dumps(result.chain.to_dict()))
    manifest = {
        "name": f"replay:{Path(stream_path).name}",
        "config_hash": None,
        "code_version": __version__,
        "started": started,
        "finished": datetime.now(timezone.utc).isoformat(),
        "status": "failed" if failure else "ok",
        "single_thread": single_thread,
        "stages": [_stage_summary(sc.kind, result, None, str(failure) if failure else None)],
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2))
    if failure:
        raise failure
    return manifest
