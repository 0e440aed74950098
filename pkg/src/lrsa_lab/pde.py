"""Synthetic operator-learning tasks with exact or well-controlled targets.

Three desk-scale tasks on the unit interval / square:

  poisson1d   - forcing f to solution of -u'' = f, u(0) = u(1) = 0, via the
                exact kernel min(x,y)(1 - max(x,y)) applied with trapezoid
                weight 1/(n+1) on the interior grid (this coincides with
                the standard second-difference solve to rounding).
  darcy2d     - coefficient a to solution of -div(a grad u) = 1 with zero
                Dirichlet boundary, 5-point conservative finite differences
                with harmonic-mean face coefficients, solved by CG.
  advection1d - periodic initial state to the state advected by a fixed
                shift of 0.1, applied spectrally (exact for band-limited
                fields).

Inputs are smooth random fields synthesised from a truncated Fourier
series with spectral weight exp(-(k*length_scale)^2), one child seed per
sample. Metrics follow the per-sample convention: MSE is the mean of
squared sample 2-norms, relative L2 the mean of per-sample norm ratios.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    ContractError,
    ConvergenceError,
    DataError,
    DimensionError,
    ResourceError,
)
from .tensor import read_tns, write_tns

TASKS = ("poisson1d", "darcy2d", "advection1d")

ADVECTION_SHIFT = 0.1
DARCY_GRID_CAP = 64
DEFAULT_LENGTH_SCALE = {"poisson1d": 0.05, "darcy2d": 0.2, "advection1d": 0.08}


@dataclass
class PointSet:
    """A sample's geometry and per-point input features."""

    coords: np.ndarray
    features: np.ndarray
    quad_weight: float


def green_kernel_1d_poisson(n: int) -> np.ndarray:
    """Kernel G[i,j] = min(x_i,x_j)(1 - max(x_i,x_j)) on x_i = i/(n+1)."""
    if n < 1:
        raise ContractError(f"kernel size must be >= 1, got {n}")
    x = np.arange(1, n + 1) / (n + 1)
    return np.minimum.outer(x, x) * (1.0 - np.maximum.outer(x, x))


def _mode_count(n: int) -> int:
    return min(32, max(1, (n - 1) // 2))


def _field_1d(rng: np.random.Generator, x: np.ndarray, length_scale: float) -> np.ndarray:
    kmax = _mode_count(x.size)
    k = np.arange(kmax + 1)
    sig = np.exp(-((k * length_scale) ** 2))
    a = rng.normal(size=kmax + 1)
    b = rng.normal(size=kmax + 1)
    phases = 2.0 * math.pi * np.outer(x, k)
    out = np.cos(phases) @ (sig * a) + np.sin(phases) @ (sig * b)
    # unit expected mean-square: k = 0 contributes sig^2, k >= 1 twice 1/2
    norm = math.sqrt(float(sig[0] ** 2 + (sig[1:] ** 2).sum()))
    return out / norm


def _field_2d(rng: np.random.Generator, n: int, length_scale: float) -> np.ndarray:
    kmax = _mode_count(n)
    k = np.arange(kmax + 1)
    x = np.arange(1, n + 1) / (n + 1)
    sig = np.exp(-(np.add.outer(k**2, k**2) * length_scale**2))
    coef = rng.normal(size=(4, kmax + 1, kmax + 1)) * sig
    phases = 2.0 * math.pi * np.outer(x, k)
    cx, sx = np.cos(phases), np.sin(phases)
    out = (
        cx @ coef[0] @ cx.T
        + cx @ coef[1] @ sx.T
        + sx @ coef[2] @ cx.T
        + sx @ coef[3] @ sx.T
    )
    # every (kx, ky) mode contributes sig^2 to the expected mean-square
    return out / math.sqrt(float((sig**2).sum()))


def sample_smooth_field(
    n: int, length_scale: float, seed, dims: int = 1, coords: np.ndarray | None = None
) -> np.ndarray:
    """A smooth random field with spectral weight exp(-(k*length_scale)^2).

    dims=1 returns values on coords (default the periodic grid i/n); dims=2
    returns an [n, n] grid on interior nodes. Fields have unit expected
    mean-square; the same seed always gives the same field.
    """
    if n < 2:
        raise ContractError(f"field needs n >= 2, got {n}")
    if length_scale <= 0:
        raise ContractError(f"length_scale must be positive, got {length_scale}")
    rng = np.random.default_rng(seed)
    if dims == 1:
        x = np.arange(n) / n if coords is None else np.asarray(coords, float).reshape(-1)
        return _field_1d(rng, x, length_scale)
    if dims == 2:
        return _field_2d(rng, n, length_scale)
    raise ContractError(f"dims must be 1 or 2, got {dims}")


def spectral_shift_1d(u: np.ndarray, shift: float) -> np.ndarray:
    """Periodic translation u(x) -> u(x - shift) via the FFT phase ramp.

    Exact for fields band-limited below the Nyquist mode; a populated
    Nyquist bin cannot carry a fractional shift of a real signal.
    """
    u = np.asarray(u, dtype=np.float64).reshape(-1)
    k = np.fft.rfftfreq(u.size, d=1.0 / u.size)
    return np.fft.irfft(np.fft.rfft(u) * np.exp(-2j * math.pi * k * shift), n=u.size)


def _harmonic(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return 2.0 * a * b / (a + b)


def solve_darcy_2d(
    a: np.ndarray, f: np.ndarray, tol: float = 1e-10, max_iter: int | None = None
) -> np.ndarray:
    """Solve -div(a grad u) = f on the unit square, zero Dirichlet boundary.

    Conservative 5-point stencil on the n x n interior grid (h = 1/(n+1))
    with harmonic-mean face coefficients; boundary faces reuse the cell's
    own coefficient. Conjugate gradients runs until the residual norm
    drops below tol * max(1, ||f||), capped at 10*n^2 iterations.
    """
    a = np.asarray(a, dtype=np.float64)
    f = np.asarray(f, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise DimensionError(f"coefficient grid must be square, got {a.shape}")
    if f.shape != a.shape:
        raise DimensionError(f"forcing shape {f.shape} != coefficient shape {a.shape}")
    n = a.shape[0]
    if n > DARCY_GRID_CAP:
        raise ResourceError(f"darcy grid cap is {DARCY_GRID_CAP}, got n={n}")
    if not np.all(a > 0):
        raise ContractError("darcy coefficient must be strictly positive")
    h2 = (1.0 / (n + 1)) ** 2

    c_right = np.empty_like(a)
    c_right[:, :-1] = _harmonic(a[:, :-1], a[:, 1:])
    c_right[:, -1] = a[:, -1]
    c_left = np.empty_like(a)
    c_left[:, 1:] = c_right[:, :-1]
    c_left[:, 0] = a[:, 0]
    c_down = np.empty_like(a)
    c_down[:-1, :] = _harmonic(a[:-1, :], a[1:, :])
    c_down[-1, :] = a[-1, :]
    c_up = np.empty_like(a)
    c_up[1:, :] = c_down[:-1, :]
    c_up[0, :] = a[0, :]
    diag = c_left + c_right + c_up + c_down

    def apply_op(u: np.ndarray) -> np.ndarray:
        out = diag * u
        out[:, 1:] -= c_left[:, 1:] * u[:, :-1]
        out[:, :-1] -= c_right[:, :-1] * u[:, 1:]
        out[1:, :] -= c_up[1:, :] * u[:-1, :]
        out[:-1, :] -= c_down[:-1, :] * u[1:, :]
        return out / h2

    b = f
    u = np.zeros_like(f)
    r = b - apply_op(u)
    target = tol * max(1.0, float(np.linalg.norm(b)))
    if np.linalg.norm(r) <= target:
        return u
    p = r.copy()
    rs = float((r * r).sum())
    cap = 10 * n * n if max_iter is None else max_iter
    for _ in range(cap):
        ap = apply_op(p)
        alpha = rs / float((p * ap).sum())
        u = u + alpha * p
        r = r - alpha * ap
        if np.linalg.norm(r) <= target:
            return u
        rs_new = float((r * r).sum())
        p = r + (rs_new / rs) * p
        rs = rs_new
    raise ConvergenceError(
        f"darcy CG did not reach residual {target:.3e} within {cap} iterations"
    )


@dataclass
class OperatorDataset:
    """A generated task dataset with z-score stats from its train split."""

    task: str
    n: int
    count: int
    train_count: int
    seed: int
    coords: np.ndarray
    inputs: np.ndarray
    targets: np.ndarray
    quad_weight: float
    grid_shape: tuple[int, ...]
    length_scale: float
    input_mean: np.ndarray = field(default=None)
    input_std: np.ndarray = field(default=None)
    target_mean: np.ndarray = field(default=None)
    target_std: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.input_mean is None:
            self._fit_normalisation()

    def _fit_normalisation(self) -> None:
        tr_in = self.inputs[: self.train_count]
        tr_out = self.targets[: self.train_count]
        self.input_mean = tr_in.mean(axis=(0, 1))
        self.input_std = np.maximum(tr_in.std(axis=(0, 1)), 1e-12)
        self.target_mean = tr_out.mean(axis=(0, 1))
        self.target_std = np.maximum(tr_out.std(axis=(0, 1)), 1e-12)

    @property
    def train_indices(self) -> range:
        return range(self.train_count)

    @property
    def test_indices(self) -> range:
        return range(self.train_count, self.count)

    def point_set(self, i: int, normalised: bool = True) -> PointSet:
        feats = self.inputs[i]
        if normalised:
            feats = (feats - self.input_mean) / self.input_std
        return PointSet(coords=self.coords, features=feats, quad_weight=self.quad_weight)

    def normalised_target(self, i: int) -> np.ndarray:
        return (self.targets[i] - self.target_mean) / self.target_std

    def denormalise_target(self, pred: np.ndarray) -> np.ndarray:
        return pred * self.target_std + self.target_mean

    def summary(self) -> dict:
        return {
            "task": self.task,
            "n": self.n,
            "count": self.count,
            "train_count": self.train_count,
            "seed": self.seed,
            "points_per_sample": int(self.inputs.shape[1]),
            "input_mean": self.input_mean.tolist(),
            "input_std": self.input_std.tolist(),
            "target_mean": self.target_mean.tolist(),
            "target_std": self.target_std.tolist(),
        }

    def save(self, dirpath) -> None:
        """Write manifest.json plus inputs/targets/coords .tns files, the
        coordinate block repeated along a leading sample axis."""
        dirpath = Path(dirpath)
        dirpath.mkdir(parents=True, exist_ok=True)
        write_tns(dirpath / "inputs.tns", self.inputs)
        write_tns(dirpath / "targets.tns", self.targets)
        stacked = np.broadcast_to(
            self.coords, (self.count,) + self.coords.shape
        ).copy()
        write_tns(dirpath / "coords.tns", stacked)
        manifest = {
            "task": self.task,
            "n": self.n,
            "count": self.count,
            "train_count": self.train_count,
            "seed": self.seed,
            "quad_weight": self.quad_weight,
            "grid_shape": list(self.grid_shape),
            "length_scale": self.length_scale,
            "input_mean": self.input_mean.tolist(),
            "input_std": self.input_std.tolist(),
            "target_mean": self.target_mean.tolist(),
            "target_std": self.target_std.tolist(),
        }
        (dirpath / "manifest.json").write_text(
            json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8"
        )

    @classmethod
    def load(cls, dirpath) -> "OperatorDataset":
        dirpath = Path(dirpath)
        mpath = dirpath / "manifest.json"
        if not mpath.is_file():
            raise DataError(f"{dirpath}: no manifest.json")
        try:
            manifest = json.loads(mpath.read_text(encoding="utf-8"))
        except json.JSONDecodeError as e:
            raise DataError(f"{mpath}: invalid JSON ({e})") from e
        inputs = read_tns(dirpath / "inputs.tns")
        targets = read_tns(dirpath / "targets.tns")
        coords_stack = read_tns(dirpath / "coords.tns")
        count = int(manifest["count"])
        for name, arr in (("inputs", inputs), ("targets", targets), ("coords", coords_stack)):
            if arr.shape[0] != count:
                raise DataError(
                    f"{name}.tns holds {arr.shape[0]} samples, manifest says {count}"
                )
        if np.ptp(coords_stack, axis=0).max() != 0.0:
            raise DataError("coords.tns samples disagree; shared layout expected")
        ds = cls(
            task=manifest["task"],
            n=int(manifest["n"]),
            count=count,
            train_count=int(manifest["train_count"]),
            seed=int(manifest["seed"]),
            coords=coords_stack[0],
            inputs=inputs,
            targets=targets,
            quad_weight=float(manifest["quad_weight"]),
            grid_shape=tuple(manifest["grid_shape"]),
            length_scale=float(manifest.get("length_scale", 0.0)),
            input_mean=np.asarray(manifest["input_mean"], dtype=np.float64),
            input_std=np.asarray(manifest["input_std"], dtype=np.float64),
            target_mean=np.asarray(manifest["target_mean"], dtype=np.float64),
            target_std=np.asarray(manifest["target_std"], dtype=np.float64),
        )
        return ds


def _sample_seed(seed: int, index: int) -> np.random.SeedSequence:
    return np.random.SeedSequence(entropy=seed, spawn_key=(index,))


def make_dataset(
    task: str,
    count: int,
    n: int,
    seed: int,
    length_scale: float | None = None,
    train_frac: float = 0.8,
) -> OperatorDataset:
    """Generate a dataset; identical arguments give identical bytes.

    The leading floor(train_frac * count) samples form the train split and
    supply the z-score statistics.
    """
    if task not in TASKS:
        raise ContractError(f"unknown task {task!r}, expected one of {TASKS}")
    if count < 1:
        raise ContractError(f"count must be >= 1, got {count}")
    if n < 2:
        raise ContractError(f"n must be >= 2, got {n}")
    ls = DEFAULT_LENGTH_SCALE[task] if length_scale is None else float(length_scale)
    train_count = max(1, int(math.floor(train_frac * count)))

    if task == "poisson1d":
        x = np.arange(1, n + 1) / (n + 1)
        coords = x[:, None]
        kernel = green_kernel_1d_poisson(n) / (n + 1)
        inputs = np.empty((count, n, 1))
        targets = np.empty((count, n, 1))
        for i in range(count):
            f = sample_smooth_field(n, ls, _sample_seed(seed, i), dims=1, coords=x)
            inputs[i, :, 0] = f
            targets[i, :, 0] = kernel @ f
        quad, grid = 1.0 / n, (n,)
    elif task == "advection1d":
        x = np.arange(n) / n
        coords = x[:, None]
        inputs = np.empty((count, n, 1))
        targets = np.empty((count, n, 1))
        for i in range(count):
            u0 = sample_smooth_field(n, ls, _sample_seed(seed, i), dims=1, coords=x)
            inputs[i, :, 0] = u0
            targets[i, :, 0] = spectral_shift_1d(u0, ADVECTION_SHIFT)
        quad, grid = 1.0 / n, (n,)
    else:  # darcy2d
        if n > DARCY_GRID_CAP:
            raise ResourceError(f"darcy grid cap is {DARCY_GRID_CAP}, got n={n}")
        x = np.arange(1, n + 1) / (n + 1)
        gx, gy = np.meshgrid(x, x, indexing="ij")
        coords = np.stack([gx.ravel(), gy.ravel()], axis=1)
        forcing = np.ones((n, n))
        inputs = np.empty((count, n * n, 1))
        targets = np.empty((count, n * n, 1))
        for i in range(count):
            raw = sample_smooth_field(n, ls, _sample_seed(seed, i), dims=2)
            a = np.exp(0.5 * raw)
            u = solve_darcy_2d(a, forcing)
            inputs[i, :, 0] = a.ravel()
            targets[i, :, 0] = u.ravel()
        quad, grid = 1.0 / (n * n), (n, n)

    return OperatorDataset(
        task=task,
        n=n,
        count=count,
        train_count=train_count,
        seed=seed,
        coords=coords,
        inputs=inputs,
        targets=targets,
        quad_weight=quad,
        grid_shape=grid,
        length_scale=ls,
    )


def _as_samples(pred, target) -> tuple[np.ndarray, np.ndarray]:
    p = np.asarray(pred, dtype=np.float64)
    t = np.asarray(target, dtype=np.float64)
    if p.shape != t.shape:
        raise DimensionError(f"metric shapes differ: {p.shape} vs {t.shape}")
    if p.ndim == 2:
        p, t = p[None], t[None]
    if p.ndim != 3:
        raise DimensionError(f"metrics expect [S, N, C] or [N, C], got {p.shape}")
    return p.reshape(p.shape[0], -1), t.reshape(t.shape[0], -1)


def mse(pred, target) -> float:
    """Mean over samples of the squared sample 2-norm of the error."""
    p, t = _as_samples(pred, target)
    return float(((p - t) ** 2).sum(axis=1).mean())


def relative_l2(pred, target) -> float:
    """Mean over samples of ||pred - target||_2 / ||target||_2."""
    p, t = _as_samples(pred, target)
    tn = np.linalg.norm(t, axis=1)
    if np.any(tn == 0.0):
        raise ContractError("relative_l2 target has a zero-norm sample")
    en = np.linalg.norm(p - t, axis=1)
    return float((en / tn).mean())


def fd_gradient_matrix(n: int, h: float = 1.0) -> np.ndarray:
    """Finite-difference first derivative: central rows inside, one-sided
    rows at both ends."""
    if n < 2:
        raise ContractError(f"gradient stencil needs n >= 2, got {n}")
    d = np.zeros((n, n))
    for i in range(1, n - 1):
        d[i, i - 1] = -0.5 / h
        d[i, i + 1] = 0.5 / h
    d[0, 0], d[0, 1] = -1.0 / h, 1.0 / h
    d[-1, -2], d[-1, -1] = -1.0 / h, 1.0 / h
    return d


def _grid_gradients(u: np.ndarray, grid_shape: tuple[int, ...], h: float) -> np.ndarray:
    if len(grid_shape) == 1:
        d = fd_gradient_matrix(grid_shape[0], h)
        return d @ u
    if len(grid_shape) == 2:
        nx, ny = grid_shape
        d = fd_gradient_matrix(nx, h)
        grid = u.reshape(nx, ny)
        return np.concatenate([(d @ grid).ravel(), (grid @ d.T).ravel()])
    raise ContractError(f"grid_shape must be 1-d or 2-d, got {grid_shape}")


def grad_metric_lg(pred, target, grid_shape: tuple[int, ...], h: float = 1.0) -> float:
    """Relative L2 of finite-difference gradients, averaged over samples."""
    p, t = _as_samples(pred, target)
    n_grid = int(np.prod(grid_shape))
    if p.shape[1] != n_grid:
        raise ContractError(
            f"samples have {p.shape[1]} values but grid_shape {grid_shape} needs {n_grid}"
        )
    ratios = []
    for ps, ts in zip(p, t):
        gp = _grid_gradients(ps, grid_shape, h)
        gt = _grid_gradients(ts, grid_shape, h)
        denom = np.linalg.norm(gt)
        if denom == 0.0:
            raise ContractError("grad_metric_lg target has a zero-gradient sample")
        ratios.append(np.linalg.norm(gp - gt) / denom)
    return float(np.mean(ratios))
