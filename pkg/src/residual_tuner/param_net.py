"""Small residual network whose weights live in one flat parameter vector.

The network maps an input ``z`` to a velocity correction::

    out = W_out @ act(W_lay @ act(W_in @ (z + b_in)) + b_lay) + b_out

with ``act`` the leaky ReLU ``max(0.01 b, b)``.  The input bias is added to
``z`` before the input weights, which is what makes a (5, 10, 3) network hold
198 parameters and a (6, 10, 3) network 209.

Flat layout, all matrices row-major::

    [b_in | W_in | W_lay | b_lay | W_out | b_out]
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

LEAK = 0.01

_BIN_MAGIC = b"RNP1"


@dataclass(frozen=True)
class MlpSpec:
    n_in: int
    n_hidden: int = 10
    n_out: int = 3

    def __post_init__(self):
        for name in ("n_in", "n_hidden", "n_out"):
            value = getattr(self, name)
            if int(value) != value or value < 1:
                raise ValueError(f"{name} must be a positive integer, got {value!r}")

    @property
    def shapes(self) -> list[tuple[str, tuple[int, ...]]]:
        """Block names and shapes in flat-layout order."""
        i, h, o = self.n_in, self.n_hidden, self.n_out
        return [
            ("b_in", (i,)),
            ("W_in", (h, i)),
            ("W_lay", (h, h)),
            ("b_lay", (h,)),
            ("W_out", (o, h)),
            ("b_out", (o,)),
        ]


DIFF_DRIVE_SPEC = MlpSpec(5, 10, 3)
ARM_SPEC = MlpSpec(6, 10, 3)


def param_count(spec: MlpSpec) -> int:
    i, h, o = spec.n_in, spec.n_hidden, spec.n_out
    return i + i * h + h * h + h + o * h + o


def leaky_relu(b):
    b = np.asarray(b, dtype=float)
    return np.maximum(LEAK * b, b)


def _slices(spec: MlpSpec) -> dict[str, tuple[slice, tuple[int, ...]]]:
    out = {}
    start = 0
    for name, shape in spec.shapes:
        size = int(np.prod(shape))
        out[name] = (slice(start, start + size), shape)
        start += size
    return out


def unpack(params, spec: MlpSpec) -> dict[str, np.ndarray]:
    """Split a flat vector into named weight and bias blocks (copies)."""
    params = np.asarray(params, dtype=float)
    if params.ndim != 1 or params.size != param_count(spec):
        raise ValueError(
            f"parameter vector has length {params.size}, "
            f"spec {spec} needs {param_count(spec)}"
        )
    return {name: params[sl].reshape(shape).copy() for name, (sl, shape) in _slices(spec).items()}


def pack(blocks: dict, spec: MlpSpec | None = None) -> np.ndarray:
    """Inverse of :func:`unpack`.

    ``spec`` is inferred from the block shapes when omitted.
    """
    if spec is None:
        h, i = np.shape(blocks["W_in"])
        o = np.shape(blocks["W_out"])[0]
        spec = MlpSpec(i, h, o)
    parts = []
    for name, shape in spec.shapes:
        arr = np.asarray(blocks[name], dtype=float)
        if arr.shape != shape:
            raise ValueError(f"block {name} has shape {arr.shape}, expected {shape}")
        parts.append(arr.ravel())
    return np.concatenate(parts)


def init_params(spec: MlpSpec, seed: int = 0, scale: float = 0.0) -> np.ndarray:
    """Uniform draw in [-scale, scale]; ``scale=0`` gives the zero network."""
    if scale < 0:
        raise ValueError("scale must be non-negative")
    n = param_count(spec)
    if scale == 0:
        return np.zeros(n)
    rng = np.random.default_rng(seed)
    return rng.uniform(-scale, scale, size=n)


def forward(params, spec: MlpSpec, z) -> np.ndarray:
    """Evaluate the network for one input vector (or a batch of rows)."""
    z = np.asarray(z, dtype=float)
    if z.shape[-1] != spec.n_in:
        raise ValueError(f"input width {z.shape[-1]} does not match n_in={spec.n_in}")
    out = forward_batch(np.asarray(params, dtype=float)[None, :], spec, np.atleast_2d(z))[0]
    return out[0] if z.ndim == 1 else out


def forward_batch(params, spec: MlpSpec, z) -> np.ndarray:
    """Evaluate many parameter vectors on many inputs at once.

    params has shape (B, L), z has shape (N, n_in); the result is (B, N, n_out).
    """
    params = np.asarray(params, dtype=float)
    z = np.asarray(z, dtype=float)
    if params.ndim != 2 or params.shape[1] != param_count(spec):
        raise ValueError(f"expected params of shape (B, {param_count(spec)}), got {params.shape}")
    if z.ndim != 2 or z.shape[1] != spec.n_in:
        raise ValueError(f"expected inputs of shape (N, {spec.n_in}), got {z.shape}")
    B = params.shape[0]
    blk = {name: params[:, sl].reshape((B,) + shape) for name, (sl, shape) in _slices(spec).items()}

    x = z[None, :, :] + blk["b_in"][:, None, :]  # (B, N, i)
    h1 = leaky_relu(np.einsum("bhi,bni->bnh", blk["W_in"], x))
    h2 = leaky_relu(np.einsum("bkh,bnh->bnk", blk["W_lay"], h1) + blk["b_lay"][:, None, :])
    return np.einsum("boh,bnh->bno", blk["W_out"], h2) + blk["b_out"][:, None, :]


def lipschitz_bound(params, spec: MlpSpec) -> float:
    """Upper bound on the input-output Lipschitz constant (2-norm).

    Leaky ReLU is 1-Lipschitz, so the product of spectral norms bounds the map.
    """
    blk = unpack(params, spec)
    return float(np.prod([np.linalg.norm(blk[k], 2) for k in ("W_in", "W_lay", "W_out")]))


def save_params(path, params, spec: MlpSpec, seed: int = 0) -> None:
    """Write a snapshot; ``.bin`` gives the binary format, anything else JSON."""
    path = Path(path)
    params = np.asarray(params, dtype=float)
    if params.size != param_count(spec):
        raise ValueError("parameter vector does not match spec")
    if path.suffix == ".bin":
        header = struct.pack("<4s4q", _BIN_MAGIC, spec.n_in, spec.n_hidden, spec.n_out, seed)
        path.write_bytes(header + params.astype("<f8").tobytes())
    else:
        doc = {
            "n_in": spec.n_in,
            "n_hidden": spec.n_hidden,
            "n_out": spec.n_out,
            "seed": seed,
            "values": params.tolist(),
        }
        path.write_text(json.dumps(doc))


def load_params(path) -> tuple[np.ndarray, MlpSpec, int]:
    path = Path(path)
    if path.suffix == ".bin":
        raw = path.read_bytes()
        hdr = struct.calcsize("<4s4q")
        magic, i, h, o, seed = struct.unpack("<4s4q", raw[:hdr])
        if magic != _BIN_MAGIC:
            raise ValueError(f"{path} is not a parameter snapshot")
        values = np.frombuffer(raw[hdr:], dtype="<f8").astype(float)
    else:
        doc = json.loads(path.read_text())
        i, h, o, seed = doc["n_in"], doc["n_hidden"], doc["n_out"], doc["seed"]
        values = np.asarray(doc["values"], dtype=float)
    spec = MlpSpec(i, h, o)
    if values.size != param_count(spec):
        raise ValueError(f"{path}: {values.size} values for spec needing {param_count(spec)}")
    return values, spec, int(seed)
