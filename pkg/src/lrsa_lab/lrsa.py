"""The low-rank spatial attention block and its ablation variants.

One block maps per-point features H [N, d] through a global mixing stage
whose cost is linear in N: cross-attention onto M learnable latent tokens
(compress), a small latent Transformer stage (latent_mix), cross-attention
back onto the N points (reconstruct), each wrapped pre-norm with residual
connections, followed by a pointwise feed-forward update.

Variants swap parts of that template:
  full           - the block as described
  no_intra_attn  - latent self-attention replaced by a pointwise MLP of
                   matched parameter count (within 5%)
  symmetric_tied - compression key projection and reconstruction query
                   projection share one matrix
  linear_no      - the latent stage is skipped (identity mixing)
  fixed_basis    - compress/reconstruct replaced by a fixed orthonormal
                   Fourier basis on a uniform grid with a learnable mixer

The module also materialises the block's induced point-to-point kernel
(attention weights frozen at the current input), exposes analytic FLOP
counts for the coupling stage, and reads/writes checkpoints.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    ContractError,
    DataError,
    DegeneracyError,
    DimensionError,
    ResourceError,
)
from .nn import (
    FFNParams,
    MHAParams,
    NormParams,
    NORM_KINDS,
    apply_norm,
    ffn_apply,
    init_ffn,
    init_mha,
    init_norm,
    lift,
    multi_head_attention,
    positional_encoding,
)
from .tensor import Tensor, add, add_row, matmul, no_grad, transpose

VARIANTS = ("full", "no_intra_attn", "symmetric_tied", "linear_no", "fixed_basis")

KERNEL_POINT_CAP = 512


@dataclass
class LRSAConfig:
    """Architecture hyperparameters for a backbone of LRSA blocks."""

    depth: int = 2
    width: int = 64
    heads: int = 4
    latent_count: int = 8
    ffn_ratio: float = 2.0
    num_freqs: int = 8
    norm_kind: str = "layernorm"
    variant: str = "full"
    d_in: int = 1
    d_out: int = 1
    d_phys: int = 1

    def validate(self, allow_empty_depth: bool = False) -> None:
        floor = 0 if allow_empty_depth else 1
        if self.depth < floor:
            raise ContractError(f"depth must be >= {floor}, got {self.depth}")
        if self.width < 1:
            raise ContractError(f"width must be >= 1, got {self.width}")
        if self.latent_count < 1:
            raise ContractError(f"latent_count must be >= 1, got {self.latent_count}")
        if self.heads < 1 or self.width % self.heads != 0:
            raise ContractError(
                f"heads ({self.heads}) must divide width ({self.width})"
            )
        if self.ffn_ratio <= 0:
            raise ContractError(f"ffn_ratio must be positive, got {self.ffn_ratio}")
        if self.num_freqs < 1:
            raise ContractError(f"num_freqs must be >= 1, got {self.num_freqs}")
        if self.norm_kind not in NORM_KINDS:
            raise ContractError(f"norm_kind {self.norm_kind!r} not in {NORM_KINDS}")
        if self.variant not in VARIANTS:
            raise ContractError(f"variant {self.variant!r} not in {VARIANTS}")
        if min(self.d_in, self.d_out, self.d_phys) < 1:
            raise ContractError("d_in, d_out and d_phys must all be >= 1")

    @property
    def hidden_width(self) -> int:
        return max(1, round(self.ffn_ratio * self.width))

    @property
    def pe_width(self) -> int:
        return 2 * self.num_freqs * self.d_phys


@dataclass
class LayerParams:
    """Parameters of one block; unused slots for a variant stay None."""

    norm_entry: NormParams
    norm_ffn: NormParams
    ffn_point: FFNParams
    latents: Tensor | None = None
    down: MHAParams | None = None
    up: MHAParams | None = None
    norm_mix1: NormParams | None = None
    norm_mix2: NormParams | None = None
    norm_mix3: NormParams | None = None
    ffn_in: FFNParams | None = None
    ffn_out: FFNParams | None = None
    self_attn: MHAParams | None = None
    latent_mlp: FFNParams | None = None
    basis_mix: Tensor | None = None


@dataclass
class BackboneParams:
    lift: FFNParams
    layers: list[LayerParams] = field(default_factory=list)
    readout_w: Tensor | None = None
    readout_b: Tensor | None = None


def matched_mlp_hidden(d: int) -> int:
    """Hidden width k with 2dk + k + d parameters closest to the 4d^2 of
    a self-attention's four projection matrices."""
    return max(1, round((4 * d * d - d) / (2 * d + 1)))


def init_layer_params(cfg: LRSAConfig, rng: np.random.Generator) -> LayerParams:
    d, m = cfg.width, cfg.latent_count
    layer = LayerParams(
        norm_entry=init_norm(d, cfg.norm_kind),
        norm_ffn=init_norm(d, cfg.norm_kind),
        ffn_point=None,  # filled below to keep a fixed rng draw order
    )
    if cfg.variant == "fixed_basis":
        std = 1.0 / math.sqrt(m)
        layer.basis_mix = Tensor(rng.normal(0.0, std, size=(m, m)), requires_grad=True)
    else:
        # latent queries drawn with variance 1/sqrt(d)
        p_std = d ** -0.25
        layer.latents = Tensor(rng.normal(0.0, p_std, size=(m, d)), requires_grad=True)
        layer.down = init_mha(rng, d, cfg.heads)
        layer.up = init_mha(rng, d, cfg.heads)
        if cfg.variant == "symmetric_tied":
            layer.up.w_q = layer.down.w_k
        if cfg.variant != "linear_no":
            layer.norm_mix1 = init_norm(d, cfg.norm_kind)
            layer.norm_mix2 = init_norm(d, cfg.norm_kind)
            layer.norm_mix3 = init_norm(d, cfg.norm_kind)
            layer.ffn_in = init_ffn(rng, d, cfg.hidden_width, d)
            layer.ffn_out = init_ffn(rng, d, cfg.hidden_width, d)
            if cfg.variant == "no_intra_attn":
                layer.latent_mlp = init_ffn(rng, d, matched_mlp_hidden(d), d)
            else:
                layer.self_attn = init_mha(rng, d, cfg.heads)
    layer.ffn_point = init_ffn(rng, d, cfg.hidden_width, d)
    return layer


def init_backbone_params(cfg: LRSAConfig, seed: int) -> BackboneParams:
    cfg.validate(allow_empty_depth=True)
    rng = np.random.default_rng(seed)
    params = BackboneParams(
        lift=init_ffn(rng, cfg.d_in + cfg.pe_width, cfg.hidden_width, cfg.width)
    )
    for _ in range(cfg.depth):
        params.layers.append(init_layer_params(cfg, rng))
    std = 1.0 / math.sqrt(cfg.width)
    params.readout_w = Tensor(
        rng.normal(0.0, std, size=(cfg.width, cfg.d_out)), requires_grad=True
    )
    params.readout_b = Tensor(np.zeros(cfg.d_out), requires_grad=True)
    return params


def compress(
    h: Tensor, layer: LayerParams, cfg: LRSAConfig, weights_out: list | None = None
) -> Tensor:
    """Cross-attend M learnable latent queries onto the normalised points."""
    if h.shape[0] == 0:
        raise ContractError("compress needs at least one point")
    hn = apply_norm(h, layer.norm_entry, cfg.norm_kind)
    return multi_head_attention(layer.latents, hn, layer.down, weights_out=weights_out)


def latent_mix(
    z: Tensor, layer: LayerParams, cfg: LRSAConfig, weights_out: list | None = None
) -> Tensor:
    """Pre-norm residual stage on the latents: FFN, token mixing, FFN."""
    z1 = add(z, ffn_apply(apply_norm(z, layer.norm_mix1, cfg.norm_kind), layer.ffn_in))
    n2 = apply_norm(z1, layer.norm_mix2, cfg.norm_kind)
    if layer.self_attn is not None:
        mixed = multi_head_attention(n2, n2, layer.self_attn, weights_out=weights_out)
    else:
        mixed = ffn_apply(n2, layer.latent_mlp)
    z2 = add(z1, mixed)
    return add(
        z2, ffn_apply(apply_norm(z2, layer.norm_mix3, cfg.norm_kind), layer.ffn_out)
    )


def reconstruct(
    h: Tensor,
    z_mixed: Tensor,
    layer: LayerParams,
    cfg: LRSAConfig,
    weights_out: list | None = None,
) -> Tensor:
    """Cross-attend the normalised points back onto the mixed latents."""
    if z_mixed.shape[0] == 0:
        raise ContractError("reconstruct needs at least one latent")
    hn = apply_norm(h, layer.norm_entry, cfg.norm_kind)
    return multi_head_attention(hn, z_mixed, layer.up, weights_out=weights_out)


@dataclass
class BasisMatrix:
    """A fixed spatial basis phi [N, M] with a learnable mixer g [M, M]."""

    phi: Tensor
    g: Tensor


def fourier_basis(coords: np.ndarray, m: int) -> Tensor:
    """Orthonormal Fourier columns (constant, cos/sin of 2*pi*k*x) sampled
    on a uniform 1-d grid. Only uniform grids are supported."""
    x = np.asarray(coords, dtype=np.float64).reshape(-1)
    n = x.size
    if n < 2:
        raise ContractError(f"fourier_basis needs >= 2 points, got {n}")
    if m < 1 or m > n:
        raise ContractError(f"basis size m={m} must lie in [1, {n}]")
    # uniformity is a property of the point set, not of its ordering
    xs = np.sort(x)
    gaps = np.diff(xs)
    span = abs(xs[-1] - xs[0])
    if span == 0 or np.max(np.abs(gaps - gaps[0])) > 1e-9 * max(span, 1.0):
        raise ContractError("fourier_basis requires a uniform 1-d grid")
    cols = []
    k = 1
    cols.append(np.ones(n))
    while len(cols) < m:
        for trig in (np.cos, np.sin):
            col = trig(2.0 * math.pi * k * x)
            norm = np.linalg.norm(col)
            # sin at the Nyquist frequency of an integer grid vanishes
            if norm > 1e-8 * math.sqrt(n):
                cols.append(col)
            if len(cols) == m:
                break
        k += 1
        if k > n:
            raise ContractError(f"cannot build {m} Fourier columns on {n} points")
    phi = np.stack(cols, axis=1)
    phi /= np.linalg.norm(phi, axis=0, keepdims=True)
    return Tensor(phi)


def fixed_basis_mix(h: Tensor, basis: BasisMatrix) -> Tensor:
    """Global mixing through a fixed basis: phi @ g @ (phi^T @ h)."""
    if basis.phi.shape[0] != h.shape[0]:
        raise DimensionError(
            f"basis rows {basis.phi.shape} do not match points {h.shape}"
        )
    if basis.g.shape != (basis.phi.shape[1], basis.phi.shape[1]):
        raise DimensionError(
            f"mixer shape {basis.g.shape} does not match basis {basis.phi.shape}"
        )
    return matmul(basis.phi, matmul(basis.g, matmul(transpose(basis.phi), h)))


def lrsa_block(
    h: Tensor, points, layer: LayerParams, cfg: LRSAConfig
) -> Tensor:
    """One residual block: global mixing then a pointwise feed-forward."""
    if cfg.variant == "fixed_basis":
        hn = apply_norm(h, layer.norm_entry, cfg.norm_kind)
        phi = fourier_basis(points.coords, cfg.latent_count)
        delta = fixed_basis_mix(hn, BasisMatrix(phi=phi, g=layer.basis_mix))
    else:
        z = compress(h, layer, cfg)
        if cfg.variant != "linear_no":
            z = latent_mix(z, layer, cfg)
        delta = reconstruct(h, z, layer, cfg)
    g = add(h, delta)
    return add(g, ffn_apply(apply_norm(g, layer.norm_ffn, cfg.norm_kind), layer.ffn_point))


def backbone_forward(
    points, cfg: LRSAConfig, params: BackboneParams, pe: Tensor | None = None
) -> Tensor:
    """Lift, L blocks, linear readout. points needs .coords and .features.

    pe may carry a precomputed positional encoding for the shared grid; by
    default it is rebuilt from points.coords.
    """
    features = (
        points.features
        if isinstance(points.features, Tensor)
        else Tensor(points.features)
    )
    if features.data.ndim != 2 or features.shape[1] != cfg.d_in:
        raise DimensionError(
            f"features shape {features.shape} does not match d_in={cfg.d_in}"
        )
    if pe is None:
        pe = positional_encoding(points.coords, cfg.num_freqs)
    h = lift(features, pe, params.lift)
    for layer in params.layers:
        h = lrsa_block(h, points, layer, cfg)
    return add_row(matmul(h, params.readout_w), params.readout_b)


def slicing_compress(
    h: np.ndarray, w_slice: np.ndarray, softmax_axis: str = "slices"
) -> np.ndarray:
    """Weighted slice tokens z_j = sum_i w_ij h_i / sum_i w_ij.

    The logits are h @ w_slice^T (no scaling). softmax_axis selects the
    normalisation: "slices" (each point distributes mass over the M
    slices, then each slice renormalises over points) or "points" (the
    softmax already normalises over points, making the renormalisation a
    no-op and the result a per-query attention aggregation).
    """
    h = np.asarray(h, dtype=np.float64)
    w_slice = np.asarray(w_slice, dtype=np.float64)
    if h.ndim != 2 or w_slice.ndim != 2 or h.shape[1] != w_slice.shape[1]:
        raise DimensionError(
            f"slicing shapes do not align: h {h.shape}, w_slice {w_slice.shape}"
        )
    if h.shape[0] == 0:
        raise ContractError("slicing_compress needs at least one point")
    logits = h @ w_slice.T
    axis = {"slices": 1, "points": 0}.get(softmax_axis)
    if axis is None:
        raise ContractError(f"softmax_axis must be 'slices' or 'points', got {softmax_axis!r}")
    shifted = logits - logits.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    w = e / e.sum(axis=axis, keepdims=True)
    mass = w.sum(axis=0)
    starved = np.flatnonzero(mass < 1e-300)
    if starved.size:
        raise DegeneracyError(
            f"slice {int(starved[0])} has total weight below 1e-300"
        )
    return (w.T @ h) / mass[:, None]


def induced_kernel_factors(
    layer: LayerParams, cfg: LRSAConfig, h: Tensor | np.ndarray, coords=None
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Factors (B, G_hat, A) of the block's induced point-to-point kernel.

    Attention weights are frozen at the given input: A holds the
    head-averaged compression weights [M, N], B the head-averaged
    reconstruction weights [N, M], and G_hat [M, M] the latent routing
    (identity from the residual plus head-averaged latent self-attention
    weights; identity alone for variants without latent attention).
    """
    ht = h if isinstance(h, Tensor) else Tensor(h)
    n = ht.shape[0]
    if n > KERNEL_POINT_CAP:
        raise ResourceError(
            f"kernel materialisation is capped at {KERNEL_POINT_CAP} points, got {n}"
        )
    m = cfg.latent_count
    with no_grad():
        if cfg.variant == "fixed_basis":
            phi = fourier_basis(coords, m).data
            return phi.copy(), layer.basis_mix.data.copy(), phi.T.copy()
        cw: list[np.ndarray] = []
        z = compress(ht, layer, cfg, weights_out=cw)
        a_fac = np.mean(cw, axis=0)
        g_hat = np.eye(m)
        if cfg.variant != "linear_no":
            sw: list[np.ndarray] = []
            z = latent_mix(z, layer, cfg, weights_out=sw)
            if sw:
                g_hat = g_hat + np.mean(sw, axis=0)
        rw: list[np.ndarray] = []
        reconstruct(ht, z, layer, cfg, weights_out=rw)
        b_fac = np.mean(rw, axis=0)
    return b_fac, g_hat, a_fac


def materialize_induced_kernel(
    layer: LayerParams, cfg: LRSAConfig, h: Tensor | np.ndarray, coords=None
) -> Tensor:
    """The induced kernel K = B @ G_hat @ A as an [N, N] tensor (rank <= M)."""
    b_fac, g_hat, a_fac = induced_kernel_factors(layer, cfg, h, coords=coords)
    return Tensor(b_fac @ (g_hat @ a_fac))


def probe_induced_kernel(
    layer: LayerParams, cfg: LRSAConfig, h: Tensor | np.ndarray, coords=None
) -> np.ndarray:
    """Assemble the kernel column-by-column by pushing unit vectors
    through the frozen factors; validates the factored product."""
    b_fac, g_hat, a_fac = induced_kernel_factors(layer, cfg, h, coords=coords)
    n = b_fac.shape[0]
    cols = np.empty((n, n))
    for j in range(n):
        e = np.zeros(n)
        e[j] = 1.0
        cols[:, j] = b_fac @ (g_hat @ (a_fac @ e))
    return cols


def coupling_flops(n: int, cfg: LRSAConfig) -> int:
    """Analytic FLOPs of one block's spatial-coupling products (attention
    scores and weighted aggregations; basis projections for fixed_basis).
    This is the quantity with Theta(N*M*d + M^2*d) scaling."""
    m, d = cfg.latent_count, cfg.width
    if cfg.variant == "fixed_basis":
        return 4 * n * m * d + 2 * m * m * d
    total = 8 * n * m * d
    if cfg.variant in ("full", "symmetric_tied"):
        total += 4 * m * m * d
    return total


def dense_coupling_flops(n: int, d: int) -> int:
    """Same accounting for dense self-attention over N points: 4*N^2*d."""
    return 4 * n * n * d


def block_matmul_flops(n: int, cfg: LRSAConfig) -> int:
    """Every matmul FLOP in one block forward (2*m*n*k per product),
    matching the instrumented count exactly."""
    m, d, hid = cfg.latent_count, cfg.width, cfg.hidden_width
    ffn = lambda rows, w_in, w_hid, w_out: 2 * rows * w_in * w_hid + 2 * rows * w_hid * w_out
    total = ffn(n, d, hid, d)  # pointwise ffn
    if cfg.variant == "fixed_basis":
        return total + 2 * n * m * d + 2 * m * m * d + 2 * n * m * d
    # compress: latent query proj, key/value projs, scores, aggregation, output proj
    total += 2 * m * d * d + 2 * (2 * n * d * d) + 2 * n * m * d + 2 * n * m * d + 2 * m * d * d
    # reconstruct: point query proj, key/value projs on latents, scores, agg, output
    total += 2 * n * d * d + 2 * (2 * m * d * d) + 2 * n * m * d + 2 * n * m * d + 2 * n * d * d
    if cfg.variant != "linear_no":
        total += 2 * ffn(m, d, hid, d)  # ffn_in and ffn_out
        if cfg.variant == "no_intra_attn":
            total += ffn(m, d, matched_mlp_hidden(d), d)
        else:
            total += 4 * (2 * m * d * d) + 2 * m * m * d + 2 * m * m * d
    return total


def named_parameters(params: BackboneParams) -> list[tuple[str, Tensor]]:
    """Stable (name, tensor) pairs; tied tensors appear once, first name wins."""
    out: list[tuple[str, Tensor]] = []
    seen: set[int] = set()

    def put(name: str, t: Tensor | None):
        if t is None or id(t) in seen:
            return
        seen.add(id(t))
        out.append((name, t))

    def put_ffn(prefix: str, p: FFNParams | None):
        if p is None:
            return
        for leaf in ("w1", "b1", "w2", "b2"):
            put(f"{prefix}.{leaf}", getattr(p, leaf))

    def put_mha(prefix: str, p: MHAParams | None):
        if p is None:
            return
        for leaf in ("w_q", "w_k", "w_v", "w_o"):
            put(f"{prefix}.{leaf}", getattr(p, leaf))

    def put_norm(prefix: str, p: NormParams | None):
        if p is None:
            return
        put(f"{prefix}.gain", p.gain)
        put(f"{prefix}.bias", p.bias)

    put_ffn("lift", params.lift)
    for i, layer in enumerate(params.layers):
        pre = f"layers.{i}"
        put(f"{pre}.latents", layer.latents)
        put_norm(f"{pre}.norm_entry", layer.norm_entry)
        put_mha(f"{pre}.down", layer.down)
        put_mha(f"{pre}.up", layer.up)
        put_norm(f"{pre}.norm_mix1", layer.norm_mix1)
        put_norm(f"{pre}.norm_mix2", layer.norm_mix2)
        put_norm(f"{pre}.norm_mix3", layer.norm_mix3)
        put_ffn(f"{pre}.ffn_in", layer.ffn_in)
        put_ffn(f"{pre}.ffn_out", layer.ffn_out)
        put_mha(f"{pre}.self_attn", layer.self_attn)
        put_ffn(f"{pre}.latent_mlp", layer.latent_mlp)
        put(f"{pre}.basis_mix", layer.basis_mix)
        put_norm(f"{pre}.norm_ffn", layer.norm_ffn)
        put_ffn(f"{pre}.ffn_point", layer.ffn_point)
    put("readout.w", params.readout_w)
    put("readout.b", params.readout_b)
    return out


def parameter_count(params: BackboneParams) -> int:
    return sum(t.data.size for _, t in named_parameters(params))


def save_checkpoint(dirpath, cfg: LRSAConfig, params: BackboneParams, step: int) -> None:
    """Write a checkpoint directory: manifest.json plus one .tns per tensor."""
    from .tensor import write_tns

    dirpath = Path(dirpath)
    dirpath.mkdir(parents=True, exist_ok=True)
    tensors = {}
    for name, t in named_parameters(params):
        fname = name + ".tns"
        write_tns(dirpath / fname, t.data)
        tensors[name] = fname
    manifest = {"config": asdict(cfg), "step": int(step), "tensors": tensors}
    (dirpath / "manifest.json").write_text(
        json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )


def load_checkpoint(dirpath) -> tuple[LRSAConfig, BackboneParams, int]:
    """Rebuild a backbone from a checkpoint directory, validating shapes."""
    from .tensor import read_tns

    dirpath = Path(dirpath)
    mpath = dirpath / "manifest.json"
    if not mpath.is_file():
        raise DataError(f"{dirpath}: no manifest.json")
    try:
        manifest = json.loads(mpath.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise DataError(f"{mpath}: invalid JSON ({e})") from e
    try:
        cfg = LRSAConfig(**manifest["config"])
    except TypeError as e:
        raise DataError(f"{mpath}: bad config block ({e})") from e
    cfg.validate(allow_empty_depth=True)
    params = init_backbone_params(cfg, seed=0)
    stored: dict[str, str] = manifest.get("tensors", {})
    for name, t in named_parameters(params):
        if name not in stored:
            raise DataError(f"checkpoint is missing tensor {name!r}")
        arr = read_tns(dirpath / stored[name])
        if arr.shape != t.data.shape:
            raise DataError(
                f"tensor {name!r}: stored shape {arr.shape} != expected {t.data.shape}"
            )
        t.data = arr
    return cfg, params, int(manifest.get("step", 0))
