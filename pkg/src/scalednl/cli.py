"""Command-line entry point: ``scalednl <subcommand> [flags]``.

Exit status: 0 when every check passes, 1 when a check fails, 2 for usage,
I/O and file-format errors.
"""

from __future__ import annotations

import argparse
import csv
import io
import sys
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from . import analysis, bench, cost, fmap, toy
from .autodiff import grad_check
from .blocks import (
    INITS,
    MODES,
    SCOPES,
    VARIANTS,
    AttentionConfig,
    FeatureMap,
    _forward,
    init_embeddings,
)
from .tensor import Rng

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2
EQUIV_TOL = 1e-10
COMMANDS = ("equiv-check", "grad-check", "cost", "bench", "dump-attn", "variance", "train-toy")


@dataclass(frozen=True)
class RunConfig:
    """Parsed command line. ``None`` means "use the subcommand's default"."""

    subcommand: str
    height: int | None = None
    width: int | None = None
    channels: int | None = None
    embed_channels: int | None = None
    heads: int | None = None
    variant: str | None = None
    scope: str | None = None
    init: str | None = None
    residual: bool | None = None
    mode: str | None = None
    seed: int = 0
    trials: int | None = None
    output: str | None = None
    format: str | None = None
    input: str | None = None
    heads_list: str | None = None
    steps: int | None = None
    lr: float | None = None
    batch_size: int | None = None
    samples: int | None = None
    no_scale: bool = False
    seeds: int | None = None
    dominance_out: str | None = None
    inject_fault: bool = False

    def to_argv(self) -> list[str]:
        argv = [self.subcommand]
        for f in fields(self):
            if f.name == "subcommand":
                continue
            val = getattr(self, f.name)
            flag = "--" + f.name.replace("_", "-")
            if f.name == "residual":
                if val is not None:
                    argv.append("--residual" if val else "--no-residual")
            elif isinstance(val, bool):
                if val:
                    argv.append(flag)
            elif val is not None and not (f.name == "seed" and val == 0):
                argv += [flag, repr(val) if isinstance(val, float) else str(val)]
        return argv

    @classmethod
    def from_argv(cls, argv) -> "RunConfig":
        ns = build_parser().parse_args(list(argv))
        return cls(**{f.name: getattr(ns, f.name) for f in fields(cls)})


def _int_list(text: str) -> list[int]:
    return [int(t) for t in text.split(",") if t]


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--height", type=int)
    common.add_argument("--width", type=int)
    common.add_argument("--channels", type=int)
    common.add_argument("--embed-channels", type=int)
    common.add_argument("--heads", type=int)
    common.add_argument("--variant", choices=VARIANTS)
    common.add_argument("--scope", choices=SCOPES)
    common.add_argument("--init", choices=INITS)
    common.add_argument("--residual", dest="residual", action="store_true", default=None)
    common.add_argument("--no-residual", dest="residual", action="store_false")
    common.add_argument("--mode", choices=MODES)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--trials", type=int)
    common.add_argument("--output", "-o")
    common.add_argument("--format", choices=("csv", "pgm", "fmap"))
    common.add_argument("--input")
    common.add_argument("--heads-list", help="comma-separated head counts")
    common.add_argument("--steps", type=int)
    common.add_argument("--lr", type=float)
    common.add_argument("--batch-size", type=int)
    common.add_argument("--samples", type=int)
    common.add_argument("--no-scale", action="store_true", help="drop the 1/sqrt(HW) factor")
    common.add_argument("--seeds", type=int, help="number of seeds for multi-seed runs")
    common.add_argument("--dominance-out", help="train both variants and write key-dominance CSV here")
    common.add_argument("--inject-fault", action="store_true", help=argparse.SUPPRESS)

    parser = argparse.ArgumentParser(prog="scalednl", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="subcommand", required=True)
    for name in COMMANDS:
        sub.add_parser(name, parents=[common])
    return parser


def _or(val, default):
    return default if val is None else val


def _emit(rc: RunConfig, text: str | bytes):
    if rc.output:
        path = Path(rc.output)
        if isinstance(text, bytes):
            path.write_bytes(text)
        else:
            path.write_text(text, newline="\n")
    elif isinstance(text, bytes):
        sys.stdout.buffer.write(text)
        sys.stdout.flush()
    else:
        sys.stdout.write(text)


def _csv(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def _block_config(rc: RunConfig, **defaults) -> AttentionConfig:
    return AttentionConfig(
        variant=_or(rc.variant, defaults.get("variant", "scaled_nl")),
        channels=_or(rc.channels, defaults.get("channels", 8)),
        embed_channels=rc.embed_channels,
        heads=_or(rc.heads, 1),
        scope=_or(rc.scope, "full"),
        init=_or(rc.init, defaults.get("init", "he")),
        residual=_or(rc.residual, defaults.get("residual", True)),
        scale_output=not rc.no_scale,
    )


def rel_diff(a, b) -> float:
    """``max|a - b| / max(max|a|, max|b|)``; 0 when both are zero."""
    scale = max(float(np.max(np.abs(a))), float(np.max(np.abs(b))))
    diff = float(np.max(np.abs(a - b)))
    return diff / scale if scale > 0 else diff


def equivalence_grid(hs=(1, 2, 4, 8), cs=(2, 4, 8, 16), seeds=5, seed=0, inject_fault=False, ws=None):
    """Materialized vs associative scaled-NL outputs over a size grid.

    Yields ``(H, W, C, C_e, seed, rel_diff)``. Outputs are compared without
    the residual branch so the input does not mask differences.
    """
    for h in hs:
        for w in hs if ws is None else ws:
            for c in cs:
                for ce in sorted({1, c // 2, c}):
                    cfg = AttentionConfig("scaled_nl", channels=c, embed_channels=ce, residual=False)
                    for s in range(seed, seed + seeds):
                        rng = Rng(s)
                        x = FeatureMap.random(h, w, c, rng).values
                        emb = init_embeddings(cfg, rng)
                        ym, _ = _forward(x, emb, cfg, "materialized")
                        if inject_fault:
                            emb = emb.replace(w_theta=emb.w_theta * (1 + 1e-6))
                        ya, _ = _forward(x, emb, cfg, "associative")
                        yield h, w, c, ce, s, rel_diff(ym, ya)


def cmd_equiv_check(rc: RunConfig) -> int:
    hs = (rc.height,) if rc.height else (1, 2, 4, 8)
    ws = (rc.width,) if rc.width else None
    cs = (rc.channels,) if rc.channels else (2, 4, 8, 16)
    rows = list(equivalence_grid(hs, cs, _or(rc.seeds, 5), rc.seed, rc.inject_fault, ws))
    ok = all(r[-1] <= EQUIV_TOL for r in rows)
    _emit(rc, _csv(["H", "W", "C", "C_e", "seed", "max_rel_diff"], [(*r[:-1], repr(r[-1])) for r in rows]))
    print(f"equiv-check: {len(rows)} cells, max rel diff {max(r[-1] for r in rows):.3e} "
          f"({'pass' if ok else 'FAIL'})", file=sys.stderr)
    return EXIT_OK if ok else EXIT_FAIL


def cmd_grad_check(rc: RunConfig) -> int:
    h, w = _or(rc.height, 3), _or(rc.width, 3)
    c = _or(rc.channels, 4)
    if rc.variant or rc.heads or rc.residual is not None:
        cfgs = [_block_config(rc, channels=c)]
    else:
        cfgs = [
            AttentionConfig(v, channels=c, heads=nh, residual=res, init=_or(rc.init, "he"))
            for v in VARIANTS for nh in (1, 2, 4) if c % nh == 0 for res in (True, False)
        ]
    rows, ok = [], True
    for cfg in cfgs:
        rep = grad_check(cfg, (h, w), rc.seed, mode=_or(rc.mode, "associative"))
        ok &= rep.passed
        for name, err in rep.errors.items():
            rows.append((cfg.variant, cfg.heads, int(cfg.residual), name, repr(err), int(err <= rep.tolerance)))
    _emit(rc, _csv(["variant", "N_h", "residual", "param", "max_rel_error", "passed"], rows))
    return EXIT_OK if ok else EXIT_FAIL


def cmd_cost(rc: RunConfig) -> int:
    h, w, c = _or(rc.height, 8), _or(rc.width, 8), _or(rc.channels, 16)
    heads = _int_list(rc.heads_list) if rc.heads_list else [_or(rc.heads, 1)] if rc.heads else [1, 2, 4]
    residual = _or(rc.residual, True)
    variants = [(rc.variant, rc.mode or "associative")] if rc.variant else [
        ("softmax_nl", "materialized"), ("scaled_nl", "materialized"), ("scaled_nl", "associative")]
    reports = []
    for variant, mode in variants:
        for nh in heads:
            ce = rc.embed_channels if nh == 1 and rc.embed_channels else None
            reports.append(cost.cost(variant, h, w, c, ce, nh, mode, residual))
    _emit(rc, cost.to_csv(reports))
    return EXIT_OK


def cmd_bench(rc: RunConfig) -> int:
    h, w, c = _or(rc.height, 32), _or(rc.width, 32), _or(rc.channels, 64)
    heads = tuple(_int_list(rc.heads_list)) if rc.heads_list else (1, 2, 4)
    cells = bench.run_bench(h, w, c, heads, iterations=_or(rc.trials, 100), seed=rc.seed)
    _emit(rc, bench.bench_csv(cells))
    ratios = bench.bench_ratios(cells)
    soft = ratios[("softmax_nl", "materialized")]
    scaled = ratios[("scaled_nl", "associative")]
    one = {(cl.variant, cl.heads): cl.median_ms for cl in cells}
    faster = one[("scaled_nl", heads[0])] < one[("softmax_nl", heads[0])]
    ok = soft >= 1.15 and scaled <= 1.1 and faster
    print(f"bench: softmax ratio {soft:.3f}, scaled ratio {scaled:.3f}, "
          f"scaled faster at N_h={heads[0]}: {faster}", file=sys.stderr)
    return EXIT_OK if ok else EXIT_FAIL


def cmd_dump_attn(rc: RunConfig) -> int:
    rng = Rng(rc.seed)
    if rc.input:
        x = fmap.read_fmap(rc.input)
    else:
        x = FeatureMap.random(_or(rc.height, 8), _or(rc.width, 8), _or(rc.channels, 8), rng)
    cfg = _block_config(rc, channels=x.channels, variant="softmax_nl")
    emb = init_embeddings(cfg, rng)
    fmt = _or(rc.format, "pgm")
    if fmt == "fmap":
        y, _ = _forward(x.values, emb, cfg, _or(rc.mode, "associative"))
        _emit(rc, fmap.encode(FeatureMap(x.height, x.width, y)))
        return EXIT_OK
    amap = analysis.extract_map(x, emb, cfg)
    _emit(rc, analysis.map_to_pgm_bytes(amap) if fmt == "pgm" else analysis.map_to_csv(amap))
    return EXIT_OK


def cmd_variance(rc: RunConfig) -> int:
    hw = _or(rc.height, 8) * _or(rc.width, 8)
    ce = _or(rc.embed_channels, 16)
    trials = _or(rc.trials, 10_000)
    rows, ok = [], True
    for scaled, target in ((True, 1.0), (False, float(hw))):
        var, se = analysis.variance_stability_stats(hw, ce, trials, Rng(rc.seed), scaled)
        passed = 0.9 * target <= var <= 1.1 * target
        ok &= passed
        rows.append((int(scaled), hw, ce, trials, repr(var), repr(se), repr(0.9 * target), repr(1.1 * target), int(passed)))
    _emit(rc, _csv(["scaled", "HW", "C_e", "trials", "variance", "stderr", "low", "high", "passed"], rows))
    return EXIT_OK if ok else EXIT_FAIL


def cmd_train_toy(rc: RunConfig) -> int:
    h, w, c = _or(rc.height, 8), _or(rc.width, 8), _or(rc.channels, 8)
    task = toy.make_toy_task(_or(rc.samples, 512), h, w, c, seed=rc.seed)
    opts = dict(steps=_or(rc.steps, 2000), batch_size=_or(rc.batch_size, 16), lr=_or(rc.lr, 0.1))

    if rc.seeds:
        cfg = _block_config(rc)
        rows = []
        for s in range(rc.seed, rc.seed + rc.seeds):
            with np.errstate(all="ignore"):
                res = toy.train_toy(cfg, task, seed=s, raise_on_divergence=False, **opts)
            rows.append((cfg.variant, int(cfg.scale_output), s, int(res.diverged), repr(res.initial_loss), repr(res.final_loss)))
        freq = sum(r[3] for r in rows) / len(rows)
        rows = [(*r, repr(freq)) for r in rows]
        _emit(rc, _csv(["variant", "scaled", "seed", "diverged", "initial_loss", "final_loss", "divergence_frequency"], rows))
        return EXIT_OK

    cfg = _block_config(rc)
    try:
        res = toy.train_toy(cfg, task, seed=rc.seed, **opts)
    except toy.TrainingDiverged as exc:
        print(f"train-toy: diverged: {exc}", file=sys.stderr)
        return EXIT_FAIL
    _emit(rc, toy.history_csv(res.history))
    print(f"train-toy: initial loss {res.initial_loss:.6f}, final loss {res.final_loss:.6f}, "
          f"accuracy {res.final_accuracy:.4f}", file=sys.stderr)

    if rc.dominance_out:
        reports = []
        for variant in VARIANTS:
            vcfg = AttentionConfig(variant, channels=c, heads=cfg.heads, init=cfg.init, residual=cfg.residual)
            with np.errstate(all="ignore"):
                r = res if variant == cfg.variant and cfg.scale_output else toy.train_toy(
                    vcfg, task, seed=rc.seed, raise_on_divergence=False, **opts)
            if r.diverged:
                continue
            reports.append((f"{variant}_trained", toy.trained_dominance(r, task, vcfg)))
        Path(rc.dominance_out).write_text(analysis.dominance_csv(reports), newline="\n")
    return EXIT_OK


HANDLERS = {
    "equiv-check": cmd_equiv_check,
    "grad-check": cmd_grad_check,
    "cost": cmd_cost,
    "bench": cmd_bench,
    "dump-attn": cmd_dump_attn,
    "variance": cmd_variance,
    "train-toy": cmd_train_toy,
}


def main(argv=None) -> int:
    try:
        rc = RunConfig.from_argv(sys.argv[1:] if argv is None else argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    try:
        return HANDLERS[rc.subcommand](rc)
    except fmap.FmapFormatError as exc:
        print(f"{rc.subcommand}: format error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, ValueError) as exc:
        print(f"{rc.subcommand}: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
