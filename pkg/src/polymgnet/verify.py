"""Cross-checks of the spectral and block code against the dense oracle.

``run_suite`` returns one :class:`CheckResult` per check; the ``verify`` CLI
prints them as a table and fails if any did.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from . import oracle, spectral
from .blocks import BLOCK_KINDS, TABLE_I_PLACEMENTS, blocks_from_roots, make_shared_conv
from .network import POLY_KINDS

__all__ = ["CheckResult", "run_suite", "format_table", "laplacian_kernel", "random_rootset"]


@dataclass(frozen=True)
class CheckResult:
    name: str
    passed: bool
    value: float
    tol: float
    detail: str = ""


def laplacian_kernel() -> np.ndarray:
    k = np.zeros((1, 1, 3, 3))
    k[0, 0] = [[0, -1, 0], [-1, 4, -1], [0, -1, 0]]
    return k


def laplacian_closed_form(g: int) -> np.ndarray:
    t = 2 * np.pi * np.arange(g) / g
    return (4 - 2 * np.cos(t)[:, None] - 2 * np.cos(t)[None, :]).ravel()


def random_rootset(rng: np.random.Generator, max_entries: int = 4) -> spectral.RootSet:
    """Random mix of factor kinds with roots bounded away from zero."""
    kinds = list(spectral.RootKind)
    entries = []
    for _ in range(int(rng.integers(1, max_entries + 1))):
        kind = kinds[int(rng.integers(len(kinds)))]
        mag = float(np.exp(rng.uniform(-2, 2)))
        if kind is spectral.RootKind.CONJUGATE_PAIR:
            phase = rng.uniform(-np.pi, np.pi)
            entries.append((kind, complex(mag * np.cos(phase), abs(mag * np.sin(phase)))))
        elif kind is spectral.RootKind.REAL_SQUARED:
            entries.append((kind, mag))
        else:
            entries.append((kind, mag * rng.choice([-1.0, 1.0])))
    return spectral.RootSet(tuple(entries))


def _family_roots(family: str, kernel: np.ndarray) -> spectral.RootSet:
    spec = spectral.estimate_spectrum(kernel, 8)
    name = family.removeprefix("poly_")
    return spectral.select_initial_roots(spec, int(name[1:]), name[0])


def run_suite(seed: int = 0, grad_tol: float = 1e-4) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    out: list[CheckResult] = []

    def add(name: str, value: float, tol: float, detail: str = "", *, expect_fail: bool = False):
        ok = value > tol if expect_fail else value <= tol
        out.append(CheckResult(name, bool(ok), float(value), tol, detail))

    for g, c in ((8, 4), (6, 3), (5, 2)):
        k = rng.standard_normal((c, c, 3, 3))
        est = spectral.estimate_spectrum(k, g).eigenvalues
        dense = oracle.dense_spectrum(oracle.materialize_operator(k, g))
        add(f"spectrum g={g} c={c}", oracle.multiset_distance(est, dense), 1e-8)

    lap = laplacian_kernel()
    closed = laplacian_closed_form(8)
    add("laplacian symbol", oracle.multiset_distance(spectral.estimate_spectrum(lap, 8).eigenvalues, closed), 1e-12)
    add("laplacian dense", oracle.multiset_distance(
        oracle.dense_spectrum(oracle.materialize_operator(lap, 8)), closed), 1e-12)

    kernel = rng.standard_normal((4, 4, 3, 3)) / 3.0
    for family in POLY_KINDS:
        roots = _family_roots(family, kernel)
        rep = oracle.check_block_equivalence(roots, 8, 4, 1e-10, kernel=kernel, seed=seed)
        add(f"block equivalence {family}", rep.max_abs_diff, rep.tol, f"degree {rep.degree}")

    # a perturbed coefficient must be detected
    roots = _family_roots("poly_q2", kernel)
    (k0, v0), rest = roots.entries[0], roots.entries[1:]
    bumped = spectral.RootSet(((k0, 1.0 / (1.0 / v0 + 1e-3)),) + rest)
    a_mod = make_shared_conv(4, 4, 3, weight=torch.as_tensor(kernel))
    rep = oracle.check_block_equivalence(roots, 8, 4, 1e-10, blocks=blocks_from_roots(bumped, a_mod, 4),
                                         kernel=kernel, seed=seed)
    add("perturbed coefficient detected", rep.max_abs_diff, rep.tol, "expects a mismatch", expect_fail=True)

    worst = max(abs(spectral.eval_poly(random_rootset(rng), 0.0) - 1.0) for _ in range(200))
    add("q(0) = 1 (200 random root sets)", float(worst), 1e-12)

    for kind in BLOCK_KINDS:
        errs = {row: oracle.gradient_check(kind, row, seed=seed) for row in ("linear", *TABLE_I_PLACEMENTS)}
        worst_row = max(errs, key=errs.get)
        add(f"gradient {kind}", errs[worst_row], grad_tol, f"worst row {worst_row}")
    return out


def format_table(results: list[CheckResult]) -> str:
    width = max(len(r.name) for r in results)
    lines = [f"{'check':<{width}}  {'value':>10}  {'tol':>8}  status", "-" * (width + 34)]
    for r in results:
        state = "PASS" if r.passed else "FAIL"
        value = "inf" if math.isinf(r.value) else f"{r.value:.2e}"
        extra = f"  ({r.detail})" if r.detail else ""
        lines.append(f"{r.name:<{width}}  {value:>10}  {r.tol:>8.0e}  {state}{extra}")
    return "\n".join(lines)
