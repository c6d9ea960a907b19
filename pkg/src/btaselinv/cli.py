"""Command-line front end: ``generate``, ``selinv``, ``bench`` and ``model``."""

from __future__ import annotations

import csv
import json
import os
import sys
import time

import click
import numpy as np
import scipy.linalg
from scipy.stats import binom

from . import analysis
from .bta_core import (
    BTAMatrix,
    extract_pattern,
    generate_spd_bta,
    pattern_max_rel_error,
    read_bta,
    to_dense,
    write_bta,
)
from .errors import BTAError
from .kernels import KernelLedger
from .parallel import DEFAULT_RATIO, run_pipeline
from .sequential import selinv as seq_selinv
from .transport import make_transport

VERIFY_MAX_N = 4096
VERIFY_TOL = 1e-9
SCHEMA_VERSION = 1
PHASES = ("PPOBTAF", "POBTARSSI", "PPOBTASI")


def _emit(obj: dict) -> None:
    click.echo(json.dumps(obj, indent=2, sort_keys=True))


def _fail(exc: Exception) -> None:
    click.echo(f"error: {type(exc).__name__}: {exc}", err=True)
    sys.exit(2)


def _dense_oracle(A: BTAMatrix):
    """Selected inverse from a dense Cholesky solve against the identity."""
    D = to_dense(A)
    c = scipy.linalg.cho_factor(D, lower=True)
    Dinv = scipy.linalg.cho_solve(c, np.eye(A.N))
    return extract_pattern(Dinv, A.n, A.b, A.a)


def _solve(A: BTAMatrix, mode: str, ranks: int, ratio: float, nested: bool):
    if mode == "seq":
        return seq_selinv(A)
    return run_pipeline(A, ranks, ratio, nested, make_transport(ranks)).inverse


@click.group()
def main():
    """Selected inversion of SPD block-tridiagonal-arrowhead matrices."""


@main.command("generate")
@click.option("--seed", type=int, required=True)
@click.option("--n", "n", type=click.IntRange(min=1), required=True, help="Number of diagonal blocks.")
@click.option("--b", "b", type=click.IntRange(min=1), required=True, help="Diagonal block size.")
@click.option("--a", "a", type=click.IntRange(min=0), required=True, help="Arrow tip size.")
@click.option("--density", type=click.FloatRange(min=0.0, max=1.0, min_open=True), default=1.0, show_default=True)
@click.option("--out", "out", type=click.Path(dir_okay=False), required=True)
def cmd_generate(seed, n, b, a, density, out):
    """Write a random SPD BTA matrix to a container file."""
    try:
        A = generate_spd_bta(seed, n, b, a, density)
        write_bta(out, A)
    except (BTAError, OSError) as exc:
        _fail(exc)
    _emit({"out": out, "n": n, "b": b, "a": a, "N": A.N, "density": density, "seed": seed, "bytes": os.path.getsize(out)})


@main.command("selinv")
@click.option("--in", "inp", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--ranks", "ranks", type=click.IntRange(min=1), default=1, show_default=True)
@click.option("--ratio", type=float, default=DEFAULT_RATIO, show_default=True)
@click.option("--nested", is_flag=True, help="Solve the reduced system on half of the ranks.")
@click.option("--mode", type=click.Choice(["seq", "par"]), default="par", show_default=True)
@click.option("--out", "out", type=click.Path(dir_okay=False), default=None)
@click.option("--verify", is_flag=True, help=f"Compare against a dense inverse (N <= {VERIFY_MAX_N}).")
@click.option("--cross-check", is_flag=True, help="Also run the other mode and report the difference.")
def cmd_selinv(inp, ranks, ratio, nested, mode, out, verify, cross_check):
    """Compute the selected inverse of a BTA container file."""
    try:
        A = read_bta(inp)
        X = _solve(A, mode, ranks, ratio, nested)
    except (BTAError, OSError) as exc:
        _fail(exc)
    if X is None:  # non-root process of a cluster run
        return
    report = {"in": inp, "mode": mode, "ranks": ranks if mode == "par" else 1, "n": A.n, "b": A.b, "a": A.a, "N": A.N}
    if mode == "par":
        report.update(ratio=ratio, nested=nested)
    if out:
        write_bta(out, X)
        report["out"] = out
    code = 0
    if cross_check:
        other = _solve(A, "par" if mode == "seq" else "seq", ranks, ratio, nested)
        report["cross_difference"] = pattern_max_rel_error(X, other)
    if verify:
        if A.N > VERIFY_MAX_N:
            report["verify"] = {"status": "unverified", "reason": f"N={A.N} exceeds {VERIFY_MAX_N}"}
        else:
            err = pattern_max_rel_error(X, _dense_oracle(A))
            ok = err <= VERIFY_TOL
            report["verify"] = {"status": "pass" if ok else "fail", "max_rel_error": err, "tolerance": VERIFY_TOL}
            code = 0 if ok else 1
    _emit(report)
    sys.exit(code)


def median_ci95(samples) -> tuple[float, float, float]:
    """Median and a distribution-free 95% confidence interval for it.

    The interval is bounded by order statistics chosen from the
    Binomial(k, 1/2) distribution of sample ranks.
    """
    x = np.sort(np.asarray(samples, dtype=float))
    k = len(x)
    med = float(np.median(x))
    if k < 2:
        return med, med, med
    j = int(binom.ppf(0.025, k, 0.5))
    lo = x[max(j - 1, 0)]
    hi = x[min(k - j, k - 1)]
    return med, float(lo), float(hi)


@main.command("bench")
@click.option("--in", "inp", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--ranks", "ranks", type=click.IntRange(min=1), default=1, show_default=True)
@click.option("--ratio", type=float, default=DEFAULT_RATIO, show_default=True)
@click.option("--nested", is_flag=True)
@click.option("--repeats", type=click.IntRange(min=1), default=10, show_default=True)
@click.option("--out-json", type=click.Path(dir_okay=False), default=None)
@click.option("--out-csv", type=click.Path(dir_okay=False), default=None)
def cmd_bench(inp, ranks, ratio, nested, repeats, out_json, out_csv):
    """Time the distributed pipeline per phase and per kernel."""
    try:
        A = read_bta(inp)
    except (BTAError, OSError) as exc:
        _fail(exc)
    records, totals, coverage, ledgers = [], [], [], []
    all_kernels = KernelLedger()
    for rep in range(repeats):
        transport = make_transport(ranks)
        t0 = time.perf_counter()
        try:
            res = run_pipeline(A, ranks, ratio, nested, transport)
        except BTAError as exc:
            _fail(exc)
        totals.append(time.perf_counter() - t0)
        ledgers = res.ledgers
        all_kernels.merge(res.merged_ledger())
        coverage.append(sum(res.timings[0][p] for p in PHASES) / totals[-1])
        for rank, tim in enumerate(res.timings):
            for phase in PHASES:
                records.append(
                    {
                        "repeat": rep,
                        "phase": phase,
                        "rank": rank,
                        "seconds": tim.get(phase, 0.0),
                        "kernel_ledger": ledgers[rank].to_records(),
                    }
                )
    summary = {}
    for phase in PHASES:
        samples = [r["seconds"] for r in records if r["phase"] == phase and r["rank"] == 0]
        med, lo, hi = median_ci95(samples)
        summary[phase] = {"samples": samples, "median": med, "ci95": [lo, hi]}
    med, lo, hi = median_ci95(totals)
    summary["total"] = {"samples": totals, "median": med, "ci95": [lo, hi]}

    predicted = analysis.predicted_rank_counts(A.n, A.a, ranks, ratio, nested)
    measured = [led.counts() for led in ledgers]
    merged = KernelLedger.merged(ledgers)
    kernel_seconds = {k: v / repeats for k, v in sorted(all_kernels.seconds.items())}
    doc = {
        "schema_version": SCHEMA_VERSION,
        "config": {"in": inp, "n": A.n, "b": A.b, "a": A.a, "ranks": ranks, "ratio": ratio, "nested": nested, "repeats": repeats},
        "records": records,
        "summary": summary,
        "phase_sum_over_total": coverage,
        "kernel_seconds_per_run": kernel_seconds,
        "kernel_ledger": merged.to_records(),
        "ledger_matches_model": measured == predicted,
    }
    if out_json:
        with open(out_json, "w") as fh:
            json.dump(doc, fh, indent=2, sort_keys=True)
    if out_csv:
        with open(out_csv, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["repeat", "phase", "rank", "seconds"])
            for r in records:
                w.writerow([r["repeat"], r["phase"], r["rank"], repr(r["seconds"])])
    click.echo(f"{'phase':<10} {'median_s':>12} {'ci95_low':>12} {'ci95_high':>12}")
    for phase in (*PHASES, "total"):
        s = summary[phase]
        click.echo(f"{phase:<10} {s['median']:12.6f} {s['ci95'][0]:12.6f} {s['ci95'][1]:12.6f}")
    click.echo(f"ledger matches model: {doc['ledger_matches_model']}")


@main.command("model")
@click.option("--n", "n", type=click.IntRange(min=1), required=True)
@click.option("--b", "b", type=click.IntRange(min=1), required=True)
@click.option("--a", "a", type=click.IntRange(min=0), required=True)
@click.option("--P", "P", type=click.IntRange(min=1), default=32, show_default=True, help="Largest rank count in the sweep.")
@click.option("--ratio", type=float, default=None, help="Fixed ratio; defaults to the ideal ratio per n.")
@click.option("--json", "as_json", is_flag=True, help="Print the full report as JSON.")
def cmd_model(n, b, a, P, ratio, as_json):
    """Print modeled FLOPs, the ideal load-balance ratio and an efficiency grid."""
    ns = sorted({n} | {32 * 2**k for k in range(16) if 32 * 2**k <= n})
    Ps = sorted({P} | {2**k for k in range(16) if 2**k <= P})
    try:
        report = analysis.model_report(n, b, a, P, ratio, ns, Ps)
    except BTAError as exc:
        _fail(exc)
    if as_json:
        _emit(report)
        return
    click.echo(f"n={n} b={b} a={a}")
    for routine, f in report["flops"].items():
        click.echo(f"  {routine:<10} {f:.6e}")
    lb = report["load_balance"]
    if lb:
        click.echo(
            f"ideal load balance: r_LB={lb['r_lb']:.4f} (PPOBTAF {lb['r_ppobtaf']:.4f}, "
            f"PPOBTASI {lb['r_ppobtasi']:.4f}, share {lb['share']:.4f})"
        )
    click.echo(f"{'n':>6} {'P':>4} {'ratio':>8} {'efficiency':>11}")
    for row in report["efficiency"]:
        click.echo(f"{row['n']:>6} {row['P']:>4} {row['ratio']:>8.4f} {row['efficiency']:>11.4f}")


if __name__ == "__main__":  # pragma: no cover
    main()
