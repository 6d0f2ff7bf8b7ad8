"""Brute-force ground truth on small periodic grids.

Everything here is plain dense linear algebra: the convolution is written out
as a matrix by looping over the stencil, spectra come from a full eigensolve,
and residual propagation multiplies out the factored polynomial.  Nothing in
this module evaluates polynomials through :mod:`polymgnet.spectral`.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment

__all__ = [
    "MAX_UNKNOWNS",
    "DenseOperator",
    "EquivalenceReport",
    "materialize_operator",
    "dense_spectrum",
    "multiset_distance",
    "propagate_residual",
    "dense_block_sequence",
    "check_block_equivalence",
    "gradient_check",
]

MAX_UNKNOWNS = 4096


@dataclass(frozen=True)
class DenseOperator:
    """Periodic convolution on a ``g x g`` grid as an explicit matrix.

    Vectors are flattened ``(channel, row, col)`` in C order, the layout of a
    single ``(C, H, W)`` image tensor.
    """

    matrix: np.ndarray
    grid: int
    channels: int
    source_kernel_id: str = ""

    def __matmul__(self, other):
        return self.matrix @ other


def materialize_operator(kernel, g: int, kernel_id: str = "") -> DenseOperator:
    """Write out cross-correlation with wrap-around as a dense matrix.

    Matches ``torch.nn.Conv2d(..., padding=s//2, padding_mode="circular")``.
    """
    if hasattr(kernel, "detach"):
        kernel = kernel.detach().cpu().double().numpy()
    w = np.asarray(kernel, dtype=np.float64)
    c_out, c_in, s, _ = w.shape
    n_out, n_in = g * g * c_out, g * g * c_in
    if max(n_out, n_in) > MAX_UNKNOWNS:
        raise ValueError(f"dense operator would have {max(n_out, n_in)} unknowns (> {MAX_UNKNOWNS})")
    pad = s // 2
    m = np.zeros((n_out, n_in))
    for o in range(c_out):
        for i in range(g):
            for j in range(g):
                row = (o * g + i) * g + j
                for c in range(c_in):
                    for k1 in range(s):
                        for k2 in range(s):
                            ii = (i + k1 - pad) % g
                            jj = (j + k2 - pad) % g
                            m[row, (c * g + ii) * g + jj] += w[o, c, k1, k2]
    return DenseOperator(m, g, c_out, kernel_id)


def dense_spectrum(op: DenseOperator) -> np.ndarray:
    if op.matrix.shape[0] != op.matrix.shape[1]:
        raise ValueError("spectrum of a non-square operator is undefined")
    return np.linalg.eigvals(op.matrix)


def multiset_distance(a, b) -> float:
    """Largest pairing distance under the optimal one-to-one matching of two point clouds.

    Sorting by (Re, Im) is fragile for conjugate pairs whose real parts agree
    only up to rounding; an assignment is not.
    """
    a = np.asarray(a, dtype=np.complex128).ravel()
    b = np.asarray(b, dtype=np.complex128).ravel()
    if a.size != b.size:
        return np.inf
    cost = np.abs(a[:, None] - b[None, :])
    rows, cols = linear_sum_assignment(cost)
    return float(cost[rows, cols].max())


def _entries(roots):
    for kind, value in roots:
        yield getattr(kind, "value", kind), value


def propagate_residual(op: DenseOperator, roots, r0) -> np.ndarray:
    """Apply ``(I - A/zeta)``, ``(I - A^2/zeta^2)`` and ``(I - A/z)(I - A/conj z)`` in order."""
    a = op.matrix
    shape = np.shape(r0)
    r = np.asarray(r0, dtype=np.complex128).reshape(a.shape[0], -1)
    for kind, v in _entries(roots):
        if kind == "real_linear":
            r = r - (a @ r) / v
        elif kind == "real_squared":
            r = r - (a @ (a @ r)) / v**2
        elif kind == "conjugate_pair":
            z = complex(v)
            r = r - (a @ r) / z
            r = r - (a @ r) / np.conj(z)
        else:
            raise ValueError(f"unknown root kind {kind!r}")
    scale = max(1.0, float(np.max(np.abs(r))))
    if np.max(np.abs(r.imag)) > 1e-12 * scale:
        raise ArithmeticError(f"complex residue {np.max(np.abs(r.imag)):.2e} in a real propagation")
    return r.real.reshape(shape)


def dense_block_sequence(op: DenseOperator, roots, u0, f) -> np.ndarray:
    """Features after the linear-mode block sequence, by explicit matrix updates."""
    a = op.matrix
    shape = np.shape(u0)
    u = np.asarray(u0, dtype=np.float64).reshape(a.shape[1], -1).copy()
    f = np.asarray(f, dtype=np.float64).reshape(a.shape[0], -1)
    for kind, v in _entries(roots):
        r = f - a @ u
        if kind == "real_linear":
            u = u + r / v
        elif kind == "real_squared":
            u = u + (a @ r) / v**2
        else:
            z = complex(v)
            m2 = z.real**2 + z.imag**2
            u = u + (2 * z.real * r - a @ r) / m2
    return u.reshape(shape)


@dataclass(frozen=True)
class EquivalenceReport:
    passed: bool
    max_abs_diff: float
    tol: float
    degree: int

    def __str__(self):
        state = "PASS" if self.passed else "FAIL"
        return f"{state} degree={self.degree} max|diff|={self.max_abs_diff:.3e} tol={self.tol:.1e}"


def check_block_equivalence(roots, g: int = 8, c: int = 4, tol: float = 1e-10, *,
                            blocks=None, kernel=None, seed: int = 0) -> EquivalenceReport:
    """Run linear-mode blocks and compare their final residual with the dense product.

    Without ``blocks`` a fresh sequence is built from ``roots`` around a random
    shared kernel.  Passing ``blocks`` (with their shared ``kernel``) checks a
    given sequence against ``roots``.
    """
    import torch

    from . import blocks as blk

    rng = np.random.default_rng(seed)
    if blocks is None:
        if kernel is None:
            kernel = rng.standard_normal((c, c, 3, 3)) / 3.0
        a_mod = blk.make_shared_conv(c, c, 3, weight=torch.as_tensor(kernel, dtype=torch.float64))
        blocks = blk.blocks_from_roots(roots, a_mod, c)
    else:
        if kernel is None:
            raise ValueError("pass the shared kernel together with explicit blocks")
        a_mod = blocks[0].A
    weight = a_mod.weight.detach().numpy()
    op = materialize_operator(weight, g)
    u0 = rng.standard_normal((1, c, g, g))
    f = rng.standard_normal((1, c, g, g))
    with torch.no_grad():
        u = torch.as_tensor(u0)
        ft = torch.as_tensor(f)
        for b in blocks:
            u = b(u, ft)
        r_blocks = blk.residual(u, ft, a_mod).numpy().ravel()
    r0 = f.ravel() - op.matrix @ u0.ravel()
    r_dense = propagate_residual(op, roots, r0)
    diff = float(np.max(np.abs(r_blocks - r_dense)))
    return EquivalenceReport(diff <= tol, diff, tol, sum(2 if k != "real_linear" else 1
                                                         for k, _ in _entries(roots)))


def _rel_error(a: np.ndarray, b: np.ndarray, floor: float) -> float:
    denom = max(np.linalg.norm(a), np.linalg.norm(b), floor)
    return float(np.linalg.norm(a - b) / denom)


def gradient_check(block_kind: str, placement=None, eps: float = 1e-5, *, seed: int = 0,
                   channels: int = 2, grid: int = 4, batch: int = 2, kink_tol: float = 1e-3,
                   max_resample: int = 50) -> float:
    """Largest relative error between autograd and central differences.

    Covers the inputs ``u`` and ``f`` and every learnable of the block (shared
    convolutions, coefficients, batch-norm affines) on a random double
    precision instance.  The level-output site is applied after the block so
    all three placement sites are exercised.  Instances where any nonzero ReLU
    input lies within ``kink_tol`` of zero are resampled.
    """
    import torch

    from . import blocks as blk

    placement = blk.PlacementSpec.coerce(placement)
    for attempt in range(max_resample):
        gen = torch.Generator().manual_seed(seed * 1000 + attempt)
        torch.manual_seed(seed * 1000 + attempt)
        module = blk.make_block_for_check(block_kind, placement, channels, generator=gen)
        module = module.double().train()
        u = torch.randn(batch, channels, grid, grid, generator=gen, dtype=torch.float64)
        f = torch.randn(batch, channels, grid, grid, generator=gen, dtype=torch.float64)
        w_out = torch.randn(batch, channels, grid, grid, generator=gen, dtype=torch.float64)

        preacts = []
        hooks = [m.register_forward_pre_hook(lambda _m, inp: preacts.append(inp[0].detach()))
                 for m in module.modules() if isinstance(m, torch.nn.ReLU)]
        with torch.no_grad():
            module(u, f)
        for h in hooks:
            h.remove()
        # exact zeros come from an upstream ReLU and stay zero under perturbation
        if all(bool(((p == 0) | (p.abs() >= kink_tol)).all()) for p in preacts):
            break
    else:
        raise RuntimeError(f"no kink-free instance found in {max_resample} draws")

    u.requires_grad_(True)
    f.requires_grad_(True)
    params = [p for p in module.parameters()]
    loss = (module(u, f) * w_out).sum()
    grads = torch.autograd.grad(loss, [u, f, *params], allow_unused=True)
    grads = [torch.zeros_like(t) if g is None else g for t, g in zip([u, f, *params], grads)]
    # gradients that vanish exactly (e.g. shifts absorbed by batch norm) are judged absolutely
    floor = 1e-6 * max(1.0, float(torch.cat([g.reshape(-1) for g in grads]).norm()))

    def objective() -> float:
        with torch.no_grad():
            return float((module(u, f) * w_out).sum())

    worst = 0.0
    for tensor, g_an in zip([u, f, *params], grads):
        flat = tensor.data.view(-1)
        g_fd = np.empty(flat.numel())
        for n in range(flat.numel()):
            old = float(flat[n])
            flat[n] = old + eps
            up = objective()
            flat[n] = old - eps
            down = objective()
            flat[n] = old
            g_fd[n] = (up - down) / (2 * eps)
        worst = max(worst, _rel_error(g_an.detach().numpy().ravel(), g_fd, floor))
    return worst
