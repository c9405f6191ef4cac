"""Command-line front end: ``halfspace-fmm {fmm,direct,compare,selftest,bench}``."""

from __future__ import annotations

import argparse
import csv
from dataclasses import dataclass
import json
import sys
import time
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .core import (
    ElasticModuli,
    HalfspaceFmmError,
    InvalidModuliError,
    SourceBatch,
    TargetBatch,
    UnsupportedPrecisionError,
    ValidationError,
)
from .fmm import FmmConfig, fmm_evaluate
from .kernels import KernelSelector, direct_sum

EXIT_OK, EXIT_USAGE, EXIT_VALIDATION, EXIT_SELFTEST = 0, 1, 2, 3
SOURCE_COLUMNS = ("x1", "x2", "x3", "f1", "f2", "f3", "d1", "d2", "d3", "n1", "n2", "n3")
TARGET_COLUMNS = ("x1", "x2", "x3")
OUTPUT_COLUMNS = ("u1", "u2", "u3", "e11", "e22", "e33", "e12", "e13", "e23",
                  "s11", "s22", "s33", "s12", "s13", "s23")
GEOMETRIES = ("cylinder", "ball", "surface-hugging")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


@dataclass(frozen=True)
class RunOptions:
    mode: str
    selector: KernelSelector
    moduli: ElasticModuli
    config: FmmConfig
    sources: Optional[str]
    targets: Optional[str]
    output: Optional[str]
    seed: int
    n: int
    geometry: str
    json: bool


# ---------------------------------------------------------------------------
# CSV input and output
# ---------------------------------------------------------------------------


def _read_table(path: str, columns: Sequence[str]) -> np.ndarray:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise ValidationError(f"{path}: empty file, expected header {','.join(columns)}") from None
        if tuple(header) != tuple(columns):
            raise ValidationError(f"{path}:1: header {','.join(header)!r} does not match {','.join(columns)!r}")
        rows = []
        for row in reader:
            line = reader.line_num
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(columns):
                raise ValidationError(f"{path}:{line}: expected {len(columns)} fields, got {len(row)}")
            try:
                vals = [float(c) for c in row]
            except ValueError as exc:
                raise ValidationError(f"{path}:{line}: {exc}") from None
            if not all(np.isfinite(vals)):
                raise ValidationError(f"{path}:{line}: non-finite value")
            rows.append(vals)
    return np.array(rows, dtype=float).reshape(-1, len(columns))


def read_sources(path: str) -> SourceBatch:
    data = _read_table(path, SOURCE_COLUMNS)
    pos, f, d, nu = data[:, 0:3], data[:, 3:6], data[:, 6:9], data[:, 9:12].copy()
    bad = np.nonzero(pos[:, 2] >= 0.0)[0]
    if len(bad):
        raise ValidationError(f"{path}:{bad[0] + 2}: source has x3 = {pos[bad[0], 2]!r}; sources need x3 < 0")
    has_d = np.any(d != 0.0, axis=1)
    unused = ~has_d & np.all(nu == 0.0, axis=1)
    nu[unused] = (0.0, 0.0, 1.0)
    norms = np.linalg.norm(nu, axis=1)
    bad = np.nonzero(has_d & (np.abs(norms - 1.0) > 1e-10))[0]
    if len(bad):
        raise ValidationError(f"{path}:{bad[0] + 2}: normal has norm {norms[bad[0]]!r}, expected 1")
    slp = f if np.any(f != 0.0) else None
    if np.any(has_d):
        return SourceBatch(pos, slp, d, nu)
    return SourceBatch(pos, slp)


def read_targets(path: str) -> TargetBatch:
    data = _read_table(path, TARGET_COLUMNS)
    bad = np.nonzero(data[:, 2] > 0.0)[0]
    if len(bad):
        raise ValidationError(f"{path}:{bad[0] + 2}: target has x3 = {data[bad[0], 2]!r}; targets need x3 <= 0")
    return TargetBatch(data)


def format_rows(rows: np.ndarray) -> str:
    lines = [",".join(OUTPUT_COLUMNS)]
    lines += [",".join(f"{v:.17g}" for v in r) for r in rows]
    return "\n".join(lines) + "\n"


def write_output(path: Optional[str], rows: np.ndarray) -> None:
    text = format_rows(rows)
    if path is None or path == "-":
        sys.stdout.write(text)
    else:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)


def read_output(path: str) -> np.ndarray:
    return _read_table(path, OUTPUT_COLUMNS)


# ---------------------------------------------------------------------------
# generators
# ---------------------------------------------------------------------------


def _unit(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v, axis=1)[:, None]


def generate_points(geometry: str, n: int, rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
    """Points and unit normals.  The cylinder has unit radius and height with its top 0.5 below the surface."""
    if geometry == "cylinder":
        th = rng.uniform(0.0, 2 * np.pi, n)
        pts = np.stack([np.cos(th), np.sin(th), rng.uniform(-1.5, -0.5, n)], axis=1)
        nrm = np.stack([np.cos(th), np.sin(th), np.zeros(n)], axis=1)
    elif geometry == "ball":
        d = _unit(rng.standard_normal((n, 3)))
        r = rng.uniform(0.0, 1.0, n) ** (1.0 / 3.0)
        pts = d * r[:, None] + np.array([0.0, 0.0, -1.5])
        nrm = d
    elif geometry == "surface-hugging":
        xy = rng.uniform(-1.0, 1.0, (n, 2))
        pts = np.column_stack([xy, -0.01 * rng.uniform(0.5, 1.5, n)])
        nrm = _unit(rng.standard_normal((n, 3)))
    else:
        raise UsageError(f"unknown geometry {geometry!r}")
    return pts, nrm


def generate_problem(geometry: str, n: int, seed: int) -> Tuple[SourceBatch, TargetBatch]:
    """Dislocation sources (forces as well for the surface-hugging case) and n/100 targets."""
    rng = np.random.default_rng(seed)
    pts, nrm = generate_points(geometry, n, rng)
    d = rng.standard_normal((n, 3))
    f = rng.standard_normal((n, 3)) if geometry == "surface-hugging" else None
    tpts, _ = generate_points(geometry, max(n // 100, 1), rng)
    return SourceBatch(pts, f, d, nrm), TargetBatch(tpts)


# ---------------------------------------------------------------------------
# modes
# ---------------------------------------------------------------------------


def relative_errors(approx, exact) -> dict:
    def rel(a, b):
        nb = float(np.linalg.norm(b))
        return float(np.linalg.norm(a - b) / nb) if nb > 0 else float(np.linalg.norm(a))
    return {"u": rel(approx.u, exact.u), "strain": rel(approx.strain, exact.strain),
            "stress": rel(approx.stress, exact.stress)}


def _problem(run: RunOptions) -> Tuple[SourceBatch, TargetBatch]:
    if run.sources:
        src = read_sources(run.sources)
        tgt = read_targets(run.targets) if run.targets else None
        if tgt is None:
            raise UsageError("--targets is required with --sources")
        return src, tgt
    if run.targets:
        raise UsageError("--targets requires --sources")
    if run.n < 1:
        raise UsageError("--n must be positive")
    return generate_problem(run.geometry, run.n, run.seed)


def _emit(run: RunOptions, payload: dict) -> None:
    if run.json:
        print(json.dumps(payload, indent=2, sort_keys=True))
        return
    for k, v in payload.items():
        if isinstance(v, dict):
            print(f"{k}:")
            for kk, vv in v.items():
                print(f"  {kk}: {_fmt(vv)}")
        else:
            print(f"{k}: {_fmt(v)}")


def _fmt(v) -> str:
    if isinstance(v, float):
        return f"{v:.4g}"
    return str(v)


def _run_fields(run: RunOptions, direct: bool):
    src, tgt = _problem(run)
    t0 = time.perf_counter()
    if direct:
        res = direct_sum(src, tgt, run.selector, run.moduli)
        report = None
    else:
        res, report = fmm_evaluate(src, tgt, run.moduli, run.config, run.selector)
    dt = time.perf_counter() - t0
    write_output(run.output, res.as_rows())
    if run.output not in (None, "-"):
        payload = {"mode": run.mode, "sources": len(src), "targets": len(tgt), "seconds": dt}
        if report is not None:
            payload["report"] = report.as_dict() if run.json else report.timings
        _emit(run, payload)
    return EXIT_OK


def _compare(run: RunOptions, bench: bool) -> int:
    src, tgt = _problem(run)
    t0 = time.perf_counter()
    res, report = fmm_evaluate(src, tgt, run.moduli, run.config, run.selector)
    t_fmm = time.perf_counter() - t0
    t0 = time.perf_counter()
    ref = direct_sum(src, tgt, run.selector, run.moduli)
    t_dir = time.perf_counter() - t0
    err = relative_errors(res, ref)
    report.error = err["u"]
    payload = {"mode": run.mode, "sources": len(src), "targets": len(tgt), "precision": run.config.precision,
               "p": run.config.p, "leaf_size": run.config.leaf_size, "relative_l2_error": err,
               "fmm_seconds": t_fmm, "direct_seconds": t_dir}
    if bench or run.json:
        payload["timings"] = report.timings
        payload["boxes"] = report.boxes
        payload["levels"] = report.levels
        payload["counts"] = report.counts
    if run.output:
        write_output(run.output, res.as_rows())
    _emit(run, payload)
    return EXIT_OK


def selftest(run: RunOptions) -> int:
    """Quick internal consistency checks; exit status 3 on any failure."""
    from .kernels import mindlin_full
    from .planewave import load_quadrature

    checks: List[Tuple[str, bool, str]] = []
    rng = np.random.default_rng(run.seed)
    mod = run.moduli

    n = 40
    pts = rng.uniform(-1, 1, (n, 3)) * [1, 1, 0.5] - [0, 0, 0.6]
    src = SourceBatch(pts, rng.standard_normal((n, 3)), rng.standard_normal((n, 3)),
                      _unit(rng.standard_normal((n, 3))))
    surf = TargetBatch(np.column_stack([rng.uniform(-2, 2, (50, 2)), np.zeros(50)]))
    sig = direct_sum(src, surf, KernelSelector.full_halfspace(), mod).stress
    ratio = float(np.max(np.abs(sig[:, [0, 1, 2], [2, 2, 2]])) / np.max(np.abs(sig)))
    checks.append(("traction-free surface", ratio <= 1e-10, f"{ratio:.2e}"))

    one = mindlin_full(pts[0], pts[1] * [1, 1, 0.5], F=[1.0, 2.0, 3.0], moduli=mod)
    single = direct_sum(SourceBatch(pts[1:2] * [1, 1, 0.5], np.array([[1.0, 2.0, 3.0]])), TargetBatch(pts[:1]),
                        KernelSelector.full_halfspace(), mod)
    diff = float(np.max(np.abs(single.u[0] - one.u)) / np.max(np.abs(one.u)))
    checks.append(("direct sum vs pointwise kernel", diff <= 1e-13, f"{diff:.2e}"))

    q = load_quadrature(6)
    checks.append(("quadrature node count", q.total == 558, str(q.total)))

    gsrc, gtgt = generate_problem("cylinder", 1500, run.seed)
    res, _ = fmm_evaluate(gsrc, gtgt, mod, FmmConfig(3))
    err = relative_errors(res, direct_sum(gsrc, gtgt, KernelSelector.full_halfspace(), mod))["u"]
    checks.append(("fmm vs direct, precision 3", err <= 1e-5, f"{err:.2e}"))

    ok = all(c[1] for c in checks)
    if run.json:
        print(json.dumps({"passed": ok, "checks": [{"name": a, "passed": b, "value": c} for a, b, c in checks]}))
    else:
        for name, passed, value in checks:
            print(f"{'PASS' if passed else 'FAIL'} {name}: {value}")
    return EXIT_OK if ok else EXIT_SELFTEST


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="halfspace-fmm", description="Half-space elastostatic FMM (Mindlin kernels).")
    p.add_argument("mode", choices=("fmm", "direct", "compare", "selftest", "bench"))
    p.add_argument("--lambda", dest="lam", type=float, default=1.0)
    p.add_argument("--mu", type=float, default=1.0)
    p.add_argument("--prec", type=int, default=3)
    p.add_argument("--leaf-size", type=int, default=None)
    p.add_argument("--max-depth", type=int, default=30)
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--sources")
    p.add_argument("--targets")
    p.add_argument("--output")
    p.add_argument("--kernel", choices=("kelvin", "halfspace"), default="halfspace")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n", type=int, default=5000)
    p.add_argument("--geometry", choices=GEOMETRIES, default="cylinder")
    p.add_argument("--json", action="store_true")
    return p


def parse_args(argv: Optional[Sequence[str]]) -> RunOptions:
    a = build_parser().parse_args(argv)
    if a.prec not in (2, 3, 6):
        raise UsageError(f"unsupported precision {a.prec}; choose 2, 3 or 6")
    if a.leaf_size is not None and a.leaf_size < 1:
        raise UsageError("--leaf-size must be at least 1")
    if not 0 <= a.max_depth <= 30:
        raise UsageError("--max-depth must lie in [0, 30]")
    if a.threads < 1:
        raise UsageError("--threads must be positive")
    if a.mode in ("fmm", "direct") and not a.sources and a.mode != "bench":
        raise UsageError(f"{a.mode} mode needs --sources and --targets")
    moduli = ElasticModuli(a.lam, a.mu)
    sel = KernelSelector.kelvin_only() if a.kernel == "kelvin" else KernelSelector.full_halfspace()
    cfg = FmmConfig(a.prec, leaf_size=a.leaf_size, max_depth=a.max_depth, threads=a.threads)
    return RunOptions(a.mode, sel, moduli, cfg, a.sources, a.targets, a.output, a.seed, a.n, a.geometry, a.json)


def parse_and_run(argv: Optional[Sequence[str]] = None) -> int:
    try:
        run = parse_args(argv)
    except UsageError as exc:
        print(f"halfspace-fmm: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except UnsupportedPrecisionError as exc:
        print(f"halfspace-fmm: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except InvalidModuliError as exc:
        print(f"halfspace-fmm: invalid moduli: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    try:
        if run.mode == "fmm":
            return _run_fields(run, direct=False)
        if run.mode == "direct":
            return _run_fields(run, direct=True)
        if run.mode == "compare":
            return _compare(run, bench=False)
        if run.mode == "bench":
            return _compare(run, bench=True)
        return selftest(run)
    except UsageError as exc:
        print(f"halfspace-fmm: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (HalfspaceFmmError, OSError) as exc:
        print(f"halfspace-fmm: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


def main(argv: Optional[Sequence[str]] = None) -> int:
    return parse_and_run(sys.argv[1:] if argv is None else argv)


if __name__ == "__main__":
    sys.exit(main())
