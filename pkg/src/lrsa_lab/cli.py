"""Command-line front end.

Subcommands: gen-data, train, eval, analyze-kernel, gradcheck, bench.
Machine-readable JSON goes to stdout, human-oriented tables to stderr.
Exit codes: 0 success, 2 usage error, 3 data or contract error, 4
numerical failure. Every run (other than usage errors) writes a
run_manifest.json recording the resolved configuration, produced
artifacts, wall time and tool version: into --out when the command has
one and produced outputs there, otherwise into the working directory.

Config files are flat key=value lines ('#' starts a comment). Model keys:
depth, width, heads, m, ffn_ratio, num_freqs, norm, variant. Training
keys: max_lr, weight_decay, epochs, batch, loss, lg_weight, seed,
pct_start, div_factor, final_div_factor.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .errors import (
    ContractError,
    ConvergenceError,
    DataError,
    DegeneracyError,
    DimensionError,
    ResourceError,
    TrainingError,
)
from .lrsa import (
    LRSAConfig,
    VARIANTS,
    backbone_forward,
    block_matmul_flops,
    coupling_flops,
    dense_coupling_flops,
    init_backbone_params,
    load_checkpoint,
    materialize_induced_kernel,
    named_parameters,
)
from .nn import NORM_KINDS
from .pde import (
    OperatorDataset,
    PointSet,
    TASKS,
    green_kernel_1d_poisson,
    make_dataset,
    sample_smooth_field,
)
from .spectral import emit_decay_csv, spectral_report
from .tensor import Tensor, grad_check, no_grad, scale, sqrt, sub, sum_all
from .training import TrainConfig, evaluate, train

GRADCHECK_GATE = 1e-4
GRADCHECK_POINTS = 8

_MODEL_KEYS = {
    "depth": int,
    "width": int,
    "heads": int,
    "m": int,
    "ffn_ratio": float,
    "num_freqs": int,
    "norm": str,
    "variant": str,
}
_TRAIN_KEYS = {
    "max_lr": float,
    "weight_decay": float,
    "epochs": int,
    "batch": int,
    "loss": str,
    "lg_weight": float,
    "seed": int,
    "pct_start": float,
    "div_factor": float,
    "final_div_factor": float,
}


def _positive_int(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return value


def _nonneg_int(text: str) -> int:
    value = int(text)
    if value < 0:
        raise argparse.ArgumentTypeError(f"expected a non-negative integer, got {text}")
    return value


def parse_config_file(path) -> dict:
    """Parse a flat key=value config file with typed, validated keys."""
    path = Path(path)
    if not path.is_file():
        raise DataError(f"config file not found: {path}")
    known = {**_MODEL_KEYS, **_TRAIN_KEYS}
    out: dict = {}
    for lineno, raw in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ContractError(f"{path}:{lineno}: expected key=value, got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in known:
            raise ContractError(f"{path}:{lineno}: unknown config key {key!r}")
        try:
            out[key] = known[key](value)
        except ValueError as e:
            raise ContractError(f"{path}:{lineno}: bad value for {key}: {e}") from e
    return out


def model_config_from(conf: dict, d_in: int, d_out: int, d_phys: int) -> LRSAConfig:
    cfg = LRSAConfig(
        depth=conf.get("depth", 2),
        width=conf.get("width", 64),
        heads=conf.get("heads", 4),
        latent_count=conf.get("m", 8),
        ffn_ratio=conf.get("ffn_ratio", 2.0),
        num_freqs=conf.get("num_freqs", 8),
        norm_kind=conf.get("norm", "layernorm"),
        variant=conf.get("variant", "full"),
        d_in=d_in,
        d_out=d_out,
        d_phys=d_phys,
    )
    cfg.validate()
    return cfg


def train_config_from(conf: dict) -> TrainConfig:
    tcfg = TrainConfig(
        max_lr=conf.get("max_lr", 1e-3),
        weight_decay=conf.get("weight_decay", 1e-5),
        epochs=conf.get("epochs", 200),
        batch_size=conf.get("batch", 8),
        seed=conf.get("seed", 0),
        loss_kind=conf.get("loss", "rel_l2"),
        lg_weight=conf.get("lg_weight", 0.1),
        pct_start=conf.get("pct_start", 0.3),
        div_factor=conf.get("div_factor", 25.0),
        final_div_factor=conf.get("final_div_factor", 1e4),
    )
    tcfg.validate(allow_zero_epochs=False)
    return tcfg


class RunContext:
    """Collects artifact paths and decides where the manifest lands."""

    def __init__(self):
        self.artifacts: list[str] = []
        self.manifest_dir: Path = Path.cwd()

    def adopt(self, out_dir: Path) -> None:
        self.manifest_dir = out_dir

    def add(self, path) -> None:
        self.artifacts.append(str(path))


def _emit(payload: dict) -> None:
    print(json.dumps(payload, indent=2, sort_keys=True))


def _table(rows: list[dict], columns: list[str]) -> None:
    widths = {c: max(len(c), *(len(str(r[c])) for r in rows)) for c in columns}
    header = "  ".join(c.ljust(widths[c]) for c in columns)
    print(header, file=sys.stderr)
    for r in rows:
        print("  ".join(str(r[c]).ljust(widths[c]) for c in columns), file=sys.stderr)


def _cmd_gen_data(args, ctx: RunContext) -> int:
    out = Path(args.out)
    if out.exists() and any(out.iterdir()) and not args.force:
        raise DataError(f"{out} exists and is not empty; pass --force to overwrite")
    ds = make_dataset(
        args.task, args.count, args.n, args.seed, length_scale=args.length_scale
    )
    ds.save(out)
    ctx.adopt(out)
    for name in ("manifest.json", "inputs.tns", "targets.tns", "coords.tns"):
        ctx.add(out / name)
    summary = ds.summary()
    summary["out"] = str(out)
    _emit(summary)
    print(
        f"wrote {ds.count} {args.task} samples (n={args.n}, seed={args.seed}) to {out}",
        file=sys.stderr,
    )
    return 0


def _cmd_train(args, ctx: RunContext) -> int:
    dataset = OperatorDataset.load(args.data)
    conf = parse_config_file(args.config)
    if args.seed is not None:
        conf["seed"] = args.seed
    cfg = model_config_from(
        conf,
        d_in=dataset.inputs.shape[2],
        d_out=dataset.targets.shape[2],
        d_phys=dataset.coords.shape[1],
    )
    tcfg = train_config_from(conf)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ctx.adopt(out)
    params, history = train(cfg, dataset, tcfg, out_dir=out)
    ctx.add(out / "checkpoint")
    ctx.add(out / "history.csv")
    from .plotting import save_history_figure

    save_history_figure(history, out / "history.png")
    ctx.add(out / "history.png")
    metrics = evaluate(cfg, params, dataset, split="test")
    metrics["epochs"] = len(history)
    metrics["final_train_loss"] = history[-1]["train_loss"] if history else None
    _emit(metrics)
    if history:
        tail = history[-min(5, len(history)) :]
        _table(
            [
                {
                    "epoch": r["epoch"],
                    "train_loss": f"{r['train_loss']:.3e}",
                    "test_rel_l2": f"{r['test_rel_l2']:.3e}",
                    "lr": f"{r['lr']:.3e}",
                }
                for r in tail
            ],
            ["epoch", "train_loss", "test_rel_l2", "lr"],
        )
    return 0


def _cmd_eval(args, ctx: RunContext) -> int:
    cfg, params, step = load_checkpoint(args.checkpoint)
    dataset = OperatorDataset.load(args.data)
    if args.out is not None:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        ctx.adopt(out)
    metrics = evaluate(cfg, params, dataset, split=args.split)
    metrics["checkpoint_step"] = step
    _emit(metrics)
    print(
        f"{args.split} rel_l2 {metrics['rel_l2']:.4e} over {metrics['count']} samples",
        file=sys.stderr,
    )
    return 0


def _gradcheck_objective(cfg: LRSAConfig, seed: int):
    rng = np.random.default_rng(seed)
    n = GRADCHECK_POINTS
    coords = (np.arange(n) + 0.5)[:, None] / n
    features = rng.normal(size=(n, cfg.d_in))
    target = rng.normal(size=(n, cfg.d_out))
    target /= np.linalg.norm(target)
    points = PointSet(coords=coords, features=features, quad_weight=1.0 / n)
    params = init_backbone_params(cfg, seed=seed)

    def objective():
        pred = backbone_forward(points, cfg, params)
        err = sub(pred, Tensor(target))
        return sqrt(sum_all(err * err))

    return objective, params


def _cmd_gradcheck(args, ctx: RunContext) -> int:
    conf = parse_config_file(args.config)
    for key in conf:
        if key in _TRAIN_KEYS and key != "seed":
            raise ContractError(f"gradcheck config only takes model keys, got {key!r}")
    cfg = model_config_from(conf, d_in=1, d_out=1, d_phys=1)
    seed = args.seed if args.seed is not None else conf.get("seed", 0)
    objective, params = _gradcheck_objective(cfg, seed)
    named = named_parameters(params)
    worst = grad_check(objective, [t for _, t in named])
    payload = {
        "max_rel_error": worst,
        "parameters": int(sum(t.data.size for _, t in named)),
        "seed": seed,
        "gate": GRADCHECK_GATE,
    }
    _emit(payload)
    print(f"gradcheck worst relative error {worst:.3e}", file=sys.stderr)
    return 0 if worst <= GRADCHECK_GATE else 4


def _cmd_analyze_kernel(args, ctx: RunContext) -> int:
    if args.source == "green1d":
        kernel = green_kernel_1d_poisson(args.n) / (args.n + 1)
        meta = {"source": "green1d", "n": args.n}
    else:
        if args.checkpoint is None:
            raise ContractError("--checkpoint is required with --source model")
        cfg, params, _ = load_checkpoint(args.checkpoint)
        if not params.layers:
            raise ContractError("checkpoint has no mixing layers to analyse")
        if cfg.d_phys == 1:
            coords = (np.arange(args.n) / args.n)[:, None]
            fields = [
                sample_smooth_field(
                    args.n, 0.1, seed=k, dims=1, coords=coords[:, 0]
                )
                for k in range(cfg.d_in)
            ]
            features = np.stack(fields, axis=1)
        else:
            raise ContractError(
                "model kernel analysis supports 1-d coordinates only"
            )
        points = PointSet(coords=coords, features=features, quad_weight=1.0 / args.n)
        layer = params.layers[args.layer]
        from .nn import lift, positional_encoding

        with no_grad():
            pe = positional_encoding(points.coords, cfg.num_freqs)
            h = lift(Tensor(points.features), pe, params.lift)
            from .lrsa import lrsa_block

            for prior in params.layers[: args.layer]:
                h = lrsa_block(h, points, prior, cfg)
        kernel = materialize_induced_kernel(layer, cfg, h, coords=points.coords).data
        meta = {
            "source": "model",
            "n": args.n,
            "layer": args.layer,
            "latent_count": cfg.latent_count,
        }
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ctx.adopt(out)
    report = spectral_report(kernel, tol=args.tol)
    emit_decay_csv(report, out / "decay.csv")
    ctx.add(out / "decay.csv")
    payload = report.as_dict()
    payload.update(meta)
    (out / "report.json").write_text(
        json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    ctx.add(out / "report.json")
    from .plotting import save_decay_figure

    save_decay_figure(report, out / "decay.png")
    ctx.add(out / "decay.png")
    sigma = report.singular_values
    _emit(
        {
            **meta,
            "numerical_rank": report.numerical_rank,
            "sigma_max": float(sigma[0]),
            "out": str(out),
        }
    )
    print(
        f"kernel {kernel.shape} numerical rank {report.numerical_rank}", file=sys.stderr
    )
    return 0


def _cmd_bench(args, ctx: RunContext) -> int:
    try:
        grid = [int(tok) for tok in args.n_grid.split(",") if tok.strip()]
    except ValueError as e:
        raise ContractError(f"--n-grid must be comma-separated integers: {e}") from e
    if not grid or min(grid) < 1:
        raise ContractError(f"--n-grid needs positive sizes, got {args.n_grid!r}")
    cfg = LRSAConfig(
        depth=1,
        width=args.width,
        heads=args.heads,
        latent_count=args.m,
        d_in=1,
        d_out=1,
        d_phys=1,
    )
    cfg.validate()
    params = init_backbone_params(cfg, seed=0)
    layer = params.layers[0]
    from .lrsa import lrsa_block

    rows = []
    rng = np.random.default_rng(0)
    for n in grid:
        coords = (np.arange(n) / n)[:, None]
        h = Tensor(rng.normal(size=(n, cfg.width)))
        points = PointSet(coords=coords, features=None, quad_weight=1.0 / n)
        timings = []
        with no_grad():
            for _ in range(args.repeat):
                t0 = time.perf_counter()
                lrsa_block(h, points, layer, cfg)
                timings.append((time.perf_counter() - t0) * 1e3)
        rows.append(
            {
                "n": n,
                "m": args.m,
                "coupling_flops": coupling_flops(n, cfg),
                "total_matmul_flops": block_matmul_flops(n, cfg),
                "dense_flops": dense_coupling_flops(n, cfg.width),
                "wall_ms": float(np.mean(timings)),
            }
        )
    if args.out is not None:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        ctx.adopt(out)
        header = "n,coupling_flops,total_matmul_flops,dense_flops,wall_ms"
        lines = [header] + [
            f"{r['n']},{r['coupling_flops']},{r['total_matmul_flops']},"
            f"{r['dense_flops']},{r['wall_ms']:.17g}"
            for r in rows
        ]
        (out / "bench.csv").write_bytes(("\n".join(lines) + "\n").encode("utf-8"))
        ctx.add(out / "bench.csv")
        from .plotting import save_bench_figure

        save_bench_figure(rows, out / "bench.png")
        ctx.add(out / "bench.png")
    _emit({"rows": rows})
    _table(
        [
            {
                "n": r["n"],
                "coupling_flops": r["coupling_flops"],
                "dense_flops": r["dense_flops"],
                "wall_ms": f"{r['wall_ms']:.3f}",
            }
            for r in rows
        ],
        ["n", "coupling_flops", "dense_flops", "wall_ms"],
    )
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="lrsa-lab",
        description="Neural-operator lab around a low-rank spatial attention block.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic task dataset")
    p.add_argument("--task", required=True, choices=TASKS)
    p.add_argument("--n", required=True, type=_positive_int, help="grid size")
    p.add_argument("--count", required=True, type=_positive_int)
    p.add_argument("--seed", required=True, type=_nonneg_int)
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true", help="overwrite a non-empty --out")
    p.add_argument("--length-scale", type=float, default=None)
    p.set_defaults(handler=_cmd_gen_data)

    p = sub.add_parser("train", help="train a model on a generated dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=_nonneg_int, default=None, help="override config seed")
    p.set_defaults(handler=_cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", choices=("train", "test", "all"), default="test")
    p.add_argument("--out", default=None)
    p.set_defaults(handler=_cmd_eval)

    p = sub.add_parser("analyze-kernel", help="spectral report for a kernel")
    p.add_argument("--source", required=True, choices=("green1d", "model"))
    p.add_argument("--n", required=True, type=_positive_int)
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--layer", type=_nonneg_int, default=0)
    p.add_argument("--tol", type=float, default=1e-10)
    p.add_argument("--out", required=True)
    p.set_defaults(handler=_cmd_analyze_kernel)

    p = sub.add_parser("gradcheck", help="check tape gradients on a small model")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=_nonneg_int, default=None)
    p.set_defaults(handler=_cmd_gradcheck)

    p = sub.add_parser("bench", help="FLOP model and wall clock over grid sizes")
    p.add_argument("--n-grid", default="512,1024,2048,4096")
    p.add_argument("--m", type=_positive_int, default=64)
    p.add_argument("--repeat", type=_positive_int, default=3)
    p.add_argument("--width", type=_positive_int, default=64)
    p.add_argument("--heads", type=_positive_int, default=4)
    p.add_argument("--out", default=None)
    p.set_defaults(handler=_cmd_bench)

    return parser


def _write_manifest(ctx: RunContext, command: str, args, status: str, error, wall: float):
    resolved = {
        k: (str(v) if isinstance(v, Path) else v)
        for k, v in vars(args).items()
        if k != "handler"
    }
    manifest = {
        "command": command,
        "config": resolved,
        "artifacts": ctx.artifacts,
        "status": status,
        "error": error,
        "wall_time_s": wall,
        "version": __version__,
    }
    try:
        ctx.manifest_dir.mkdir(parents=True, exist_ok=True)
        (ctx.manifest_dir / "run_manifest.json").write_text(
            json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8"
        )
    except OSError as e:
        print(f"could not write run manifest: {e}", file=sys.stderr)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code) if e.code else 0
    ctx = RunContext()
    start = time.perf_counter()
    status, error, rc = "ok", None, 0
    try:
        rc = args.handler(args, ctx)
        if rc not in (0, None):
            status = "error"
    except (ContractError, DimensionError, DataError, ResourceError) as e:
        status, error, rc = "error", str(e), 3
        print(f"error: {e}", file=sys.stderr)
    except (ConvergenceError, DegeneracyError, TrainingError) as e:
        status, error, rc = "error", str(e), 4
        print(f"numerical failure: {e}", file=sys.stderr)
    wall = time.perf_counter() - start
    _write_manifest(ctx, args.command, args, status, error, wall)
    return int(rc or 0)


if __name__ == "__main__":
    sys.exit(main())
