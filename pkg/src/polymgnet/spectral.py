"""Spectra of periodic convolutions and polynomial roots chosen from them.

A square convolution kernel ``K`` of shape ``(c, c, s, s)`` acting on a
periodic ``g x g`` grid is block-circulant, so its eigenvalues are exactly
the eigenvalues of the ``c x c`` frequency symbol evaluated on the grid of
frequencies ``2*pi*j/g``.  Roots for the residual polynomial

    q(x) = prod(1 - x/zeta) * prod(1 - alpha*x**2) * prod((1 - x/z)(1 - x/conj(z)))

are taken from the border of that eigenvalue cloud.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from numpy.polynomial import polynomial as npoly

__all__ = [
    "ConvKernel",
    "SpectrumEstimate",
    "RootKind",
    "RootSet",
    "SpectrumError",
    "conv_symbol",
    "estimate_spectrum",
    "select_initial_roots",
    "extend_roots",
    "eval_poly",
    "eval_poly_on_spectrum",
    "roots_to_coefficients",
    "DEFAULT_GRID",
    "GUARD_REL",
]

DEFAULT_GRID = 16
GUARD_REL = 1e-6


class SpectrumError(ValueError):
    """Raised when a spectrum cannot be estimated or a root cannot be chosen."""


@dataclass(frozen=True)
class ConvKernel:
    """A real convolution stencil with axes ``(c_out, c_in, s, s)``."""

    weights: np.ndarray
    kernel_id: str = ""

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        if w.ndim != 4:
            raise ValueError(f"kernel must have 4 axes (c_out, c_in, s, s), got shape {w.shape}")
        c_out, c_in, s1, s2 = w.shape
        if min(c_out, c_in) < 1 or s1 != s2:
            raise ValueError(f"kernel must have positive channels and a square stencil, got {w.shape}")
        if s1 % 2 == 0:
            raise ValueError(f"filter extent must be odd for a centered stencil, got {s1}")
        if not np.all(np.isfinite(w)):
            raise ValueError("kernel contains non-finite entries")
        object.__setattr__(self, "weights", w)

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return self.weights.shape

    @property
    def size(self) -> int:
        return self.weights.shape[-1]

    @property
    def is_square(self) -> bool:
        return self.weights.shape[0] == self.weights.shape[1]

    @classmethod
    def coerce(cls, kernel) -> "ConvKernel":
        if isinstance(kernel, ConvKernel):
            return kernel
        if hasattr(kernel, "detach"):  # torch tensor or parameter
            kernel = kernel.detach().cpu().double().numpy()
        return cls(np.asarray(kernel))


def _require_square(kernel: ConvKernel) -> None:
    if not kernel.is_square:
        c_out, c_in = kernel.shape[:2]
        raise ValueError(f"spectrum needs a square operator, got c_out={c_out}, c_in={c_in}")


def _offsets(s: int) -> np.ndarray:
    return np.arange(s) - s // 2


def conv_symbol(kernel, freq: Sequence[float]) -> np.ndarray:
    """Frequency symbol ``sum_k K[:, :, k] exp(-i k.theta)`` with centered offsets ``k``."""
    kernel = ConvKernel.coerce(kernel)
    _require_square(kernel)
    theta1, theta2 = (float(t) for t in freq)
    if not (np.isfinite(theta1) and np.isfinite(theta2)):
        raise ValueError(f"frequency must be finite, got {freq}")
    k = _offsets(kernel.size)
    phase = np.exp(-1j * (k[:, None] * theta1 + k[None, :] * theta2))
    return np.einsum("oiab,ab->oi", kernel.weights, phase)


@dataclass(frozen=True)
class SpectrumEstimate:
    """Eigenvalues of a periodic convolution, ordered by frequency-grid index.

    Eigenvalue ``n`` belongs to grid point ``n // c`` in row-major order over
    ``(j1, j2)``; argmax scans therefore break ties towards the smallest grid
    index.
    """

    eigenvalues: np.ndarray
    grid_size: int
    source_kernel_id: str = ""

    def __post_init__(self):
        lam = np.asarray(self.eigenvalues, dtype=np.complex128).ravel()
        if lam.size == 0:
            raise ValueError("spectrum is empty")
        if not np.all(np.isfinite(lam)):
            raise ValueError("spectrum contains non-finite eigenvalues")
        object.__setattr__(self, "eigenvalues", lam)

    def __len__(self) -> int:
        return self.eigenvalues.size

    @property
    def scale(self) -> float:
        return float(np.max(np.abs(self.eigenvalues)))

    @property
    def tau_conj(self) -> float:
        return GUARD_REL * self.scale

    @property
    def eps_root(self) -> float:
        # a zero spectrum still needs a positive guard
        return GUARD_REL * self.scale if self.scale > 0 else GUARD_REL

    @property
    def real_range(self) -> tuple[float, float]:
        re = self.eigenvalues.real
        return float(re.min()), float(re.max())

    def is_conjugate_closed(self, tol: float | None = None) -> bool:
        tol = self.tau_conj if tol is None else tol
        lam = self.eigenvalues
        # greedy matching on a sorted order is exact up to tolerance for small clouds
        conj = np.conj(lam)
        used = np.zeros(lam.size, dtype=bool)
        order = np.lexsort((lam.imag, lam.real))
        for n in order:
            d = np.abs(lam - conj[n])
            d[used] = np.inf
            m = int(np.argmin(d))
            if d[m] > tol:
                return False
            used[m] = True
        return True


def estimate_spectrum(kernel, grid_size: int = DEFAULT_GRID, kernel_id: str | None = None) -> SpectrumEstimate:
    """All ``g*g*c`` eigenvalues of the kernel acting on a periodic ``g x g`` grid."""
    kernel = ConvKernel.coerce(kernel)
    _require_square(kernel)
    g = int(grid_size)
    if g < 2:
        raise ValueError(f"grid size must be >= 2, got {grid_size}")
    theta = 2.0 * np.pi * np.arange(g) / g
    k = _offsets(kernel.size)
    # phase[j1, j2, a, b] = exp(-i (k_a theta_j1 + k_b theta_j2))
    phase = np.exp(-1j * (theta[:, None, None, None] * k[None, None, :, None]
                          + theta[None, :, None, None] * k[None, None, None, :]))
    symbols = np.einsum("oiab,xyab->xyoi", kernel.weights, phase)
    symbols = symbols.reshape(g * g, *kernel.shape[:2])
    try:
        lam = np.linalg.eigvals(symbols)
    except np.linalg.LinAlgError:
        for n, sym in enumerate(symbols):
            try:
                np.linalg.eigvals(sym)
            except np.linalg.LinAlgError as exc:
                j1, j2 = divmod(n, g)
                raise SpectrumError(
                    f"eigen-solver failed at frequency (2*pi*{j1}/{g}, 2*pi*{j2}/{g})") from exc
        raise
    return SpectrumEstimate(lam.ravel(), g, kernel.kernel_id if kernel_id is None else kernel_id)


class RootKind(str, enum.Enum):
    REAL_LINEAR = "real_linear"
    REAL_SQUARED = "real_squared"
    CONJUGATE_PAIR = "conjugate_pair"

    @property
    def degree(self) -> int:
        return 1 if self is RootKind.REAL_LINEAR else 2


@dataclass(frozen=True)
class RootSet:
    """Ordered polynomial roots tagged by factor kind.

    ``real_linear`` and ``real_squared`` entries hold a real ``zeta``; a
    ``conjugate_pair`` entry holds ``a + ib`` with ``b >= 0`` and stands for
    both ``z`` and ``conj(z)``.
    """

    entries: tuple[tuple[RootKind, complex], ...] = field(default_factory=tuple)

    def __post_init__(self):
        clean = []
        for kind, value in self.entries:
            kind = RootKind(kind)
            if kind is RootKind.CONJUGATE_PAIR:
                value = complex(value)
                value = complex(value.real, abs(value.imag))
            else:
                if isinstance(value, complex):
                    if value.imag != 0:
                        raise ValueError(f"{kind.value} root must be real, got {value}")
                    value = value.real
                value = float(value)
            if not np.isfinite(abs(value)):
                raise ValueError(f"root {value!r} is not finite")
            if value == 0:
                raise ValueError(f"{kind.value} root must be nonzero")
            clean.append((kind, value))
        object.__setattr__(self, "entries", tuple(clean))

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    @property
    def degree(self) -> int:
        return sum(kind.degree for kind, _ in self.entries)

    @property
    def kinds(self) -> tuple[RootKind, ...]:
        return tuple(kind for kind, _ in self.entries)

    def min_modulus(self) -> float:
        return min((abs(v) for _, v in self.entries), default=np.inf)

    def append(self, kind, value) -> "RootSet":
        return RootSet(self.entries + ((RootKind(kind), value),))

    def block_params(self) -> list[tuple[RootKind, tuple[float, ...]]]:
        """Per-entry learnables: ``alpha=1/zeta``, ``alpha=1/zeta**2`` or ``(a, b)``."""
        out = []
        for kind, v in self.entries:
            if kind is RootKind.REAL_LINEAR:
                out.append((kind, (1.0 / v,)))
            elif kind is RootKind.REAL_SQUARED:
                out.append((kind, (1.0 / v**2,)))
            else:
                out.append((kind, (v.real, v.imag)))
        return out

    @classmethod
    def from_block_params(cls, params: Iterable[tuple[str, Sequence[float]]]) -> "RootSet":
        entries = []
        for kind, values in params:
            kind = RootKind(kind)
            if kind is RootKind.REAL_LINEAR:
                entries.append((kind, 1.0 / values[0]))
            elif kind is RootKind.REAL_SQUARED:
                alpha = values[0]
                if alpha <= 0:
                    raise ValueError(f"real_squared coefficient {alpha} has no real root")
                entries.append((kind, 1.0 / np.sqrt(alpha)))
            else:
                entries.append((kind, complex(values[0], values[1])))
        return cls(tuple(entries))

    def describe(self) -> list[str]:
        lines = []
        for kind, v in self.entries:
            if kind is RootKind.CONJUGATE_PAIR:
                lines.append(f"{kind.value:15s} {v.real:+.6e} {v.imag:+.6e}i")
                lines.append(f"{kind.value:15s} {v.real:+.6e} {-v.imag:+.6e}i")
            elif kind is RootKind.REAL_SQUARED:
                lines.append(f"{kind.value:15s} {v:+.6e}")
                lines.append(f"{kind.value:15s} {-v:+.6e}")
            else:
                lines.append(f"{kind.value:15s} {v:+.6e}")
        return lines


def _clamp_root(zeta: float, eps: float) -> float:
    if abs(zeta) >= eps:
        return zeta
    return eps if zeta >= 0 else -eps


def _top_imaginary_root(spectrum: SpectrumEstimate) -> complex:
    lam = spectrum.eigenvalues
    n = int(np.argmax(lam.imag))
    if lam[n].imag < spectrum.tau_conj:
        # real spectrum: a double real root at the widest real extent
        re = lam.real
        a = float(re[int(np.argmax(np.abs(re)))])
        z = complex(a, 0.0)
    else:
        z = complex(lam[n])
    if abs(z) < spectrum.eps_root:
        raise SpectrumError(f"conjugate-pair root {z} is below the guard {spectrum.eps_root:.3e}")
    return z


_FAMILY_DEGREES = {"q": (2, 4, 6, 8), "g": (4, 6, 8)}


def select_initial_roots(spectrum: SpectrumEstimate, degree: int, family: str = "q") -> RootSet:
    """Roots on the border of the spectrum for the ``q`` or ``g`` polynomial families.

    ``q``: real roots at ``min Re`` and ``max Re``; degree 4 adds the eigenvalue
    with the largest imaginary part as a conjugate pair.  ``g``: two squared
    real factors with ``zeta = max(|max Re|, |min Re|)``; degree 6 adds the
    conjugate pair.  Degree 8 (and 6 for ``q``) continues with
    :func:`extend_roots`.
    """
    family = family.lower().removeprefix("poly_")[:1]
    if family not in _FAMILY_DEGREES:
        raise ValueError(f"unknown polynomial family {family!r}")
    if degree not in _FAMILY_DEGREES[family]:
        raise ValueError(f"degree {degree} unsupported for family {family}; "
                         f"choose from {_FAMILY_DEGREES[family]}")
    eps = spectrum.eps_root
    lo, hi = spectrum.real_range
    if family == "q":
        roots = RootSet(((RootKind.REAL_LINEAR, _clamp_root(lo, eps)),
                         (RootKind.REAL_LINEAR, _clamp_root(hi, eps))))
        if degree >= 4:
            roots = roots.append(RootKind.CONJUGATE_PAIR, _top_imaginary_root(spectrum))
    else:
        zeta = _clamp_root(max(abs(hi), abs(lo)), eps)
        roots = RootSet(((RootKind.REAL_SQUARED, zeta), (RootKind.REAL_SQUARED, zeta)))
        if degree >= 6:
            roots = roots.append(RootKind.CONJUGATE_PAIR, _top_imaginary_root(spectrum))
    if roots.degree < degree:
        roots = extend_roots(spectrum, roots, degree)
    return roots


def extend_roots(spectrum: SpectrumEstimate, roots: RootSet, target_degree: int) -> RootSet:
    """Append conjugate pairs at the spectrum point where ``|q|`` is largest."""
    if target_degree <= roots.degree:
        raise ValueError(f"target degree {target_degree} must exceed current degree {roots.degree}")
    if (target_degree - roots.degree) % 2:
        raise ValueError("roots are appended in conjugate pairs; degree gap must be even")
    lam = spectrum.eigenvalues
    while roots.degree < target_degree:
        amp = np.abs(eval_poly(roots, lam))
        star = complex(lam[int(np.argmax(amp))])
        if abs(star) < spectrum.eps_root:
            raise SpectrumError(f"selected eigenvalue {star} is below the guard {spectrum.eps_root:.3e}")
        roots = roots.append(RootKind.CONJUGATE_PAIR, star)
    return roots


def eval_poly(roots: RootSet, lam) -> np.ndarray:
    """Factored evaluation of ``q`` at the points ``lam``."""
    lam = np.asarray(lam, dtype=np.complex128)
    q = np.ones_like(lam)
    for kind, v in roots:
        if kind is RootKind.REAL_LINEAR:
            q = q * (1.0 - lam / v)
        elif kind is RootKind.REAL_SQUARED:
            q = q * (1.0 - lam**2 / v**2)
        else:
            m2 = v.real**2 + v.imag**2
            q = q * (1.0 - 2.0 * v.real * lam / m2 + lam**2 / m2)
    return q


def eval_poly_on_spectrum(roots: RootSet, spectrum: SpectrumEstimate) -> tuple[np.ndarray, np.ndarray]:
    """Eigenvalues and ``|q(lambda)|`` over the spectrum."""
    lam = spectrum.eigenvalues
    return lam, np.abs(eval_poly(roots, lam))


def roots_to_coefficients(roots: RootSet) -> np.ndarray:
    """Coefficients ``alpha_0 .. alpha_{d-1}`` of ``p`` with ``q(x) = 1 - x p(x)``."""
    q = np.array([1.0])
    for kind, v in roots:
        if kind is RootKind.REAL_LINEAR:
            factor = [1.0, -1.0 / v]
        elif kind is RootKind.REAL_SQUARED:
            factor = [1.0, 0.0, -1.0 / v**2]
        else:
            m2 = v.real**2 + v.imag**2
            factor = [1.0, -2.0 * v.real / m2, 1.0 / m2]
        q = npoly.polymul(q, factor)
    q = np.pad(q, (0, max(0, roots.degree + 1 - q.size)))
    return -q[1:roots.degree + 1]
