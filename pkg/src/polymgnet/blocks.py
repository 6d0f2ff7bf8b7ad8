"""Residual smoothing blocks sharing one data-feature convolution ``A`` per level.

Every block maps ``(u, f) -> u'`` with residual ``r = f - A(u)``:

* ``RealLinearBlock``      u' = u + S_P(alpha * S_R(r))
* ``ConjugatePairBlock``   u' = u + S_P((2a*rho - A(rho)) / (a^2 + b^2)),  rho = S_R(r)
* ``SquaredRealBlock``     u' = u + S_P(alpha * A(S_R(r)))
* ``MgNetBlock``           u' = u + S_P(B(S_R(r)))

``S_R``/``S_P`` are the optional batch-norm/ReLU sites of a
:class:`PlacementSpec`; with every site off the residual obeys
``r' = q(A) r`` for the factor of the block kind.
"""
from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Iterable, Mapping

import torch
import torch.nn as nn

from .spectral import RootKind, RootSet

__all__ = [
    "SiteSpec",
    "PlacementSpec",
    "PLACEMENTS",
    "TABLE_I_PLACEMENTS",
    "Site",
    "NonFiniteError",
    "make_shared_conv",
    "residual",
    "RealLinearBlock",
    "ConjugatePairBlock",
    "SquaredRealBlock",
    "MgNetBlock",
    "ResNetBlock",
    "blocks_from_roots",
    "make_block_for_check",
    "block_weight_count",
    "BLOCK_KINDS",
]

BN_THEN_RELU = "bn_then_relu"
RELU_THEN_BN = "relu_then_bn"
SITES = ("U", "P", "R")


class NonFiniteError(FloatingPointError):
    pass


@dataclass(frozen=True)
class SiteSpec:
    bn: bool = False
    relu: bool = False
    order: str = BN_THEN_RELU

    def __post_init__(self):
        if self.order not in (BN_THEN_RELU, RELU_THEN_BN):
            raise ValueError(f"site order must be {BN_THEN_RELU!r} or {RELU_THEN_BN!r}, got {self.order!r}")
        for name in ("bn", "relu"):
            if not isinstance(getattr(self, name), bool):
                raise TypeError(f"site flag {name} must be boolean")

    @property
    def active(self) -> bool:
        return self.bn or self.relu

    def code(self) -> str:
        ops = []
        if self.bn and self.relu:
            ops = ["bn", "relu"] if self.order == BN_THEN_RELU else ["relu", "bn"]
        elif self.bn:
            ops = ["bn"]
        elif self.relu:
            ops = ["relu"]
        return ",".join(ops)


@dataclass(frozen=True)
class PlacementSpec:
    """Batch-norm/ReLU flags at the level output (U), extractor output (P) and residual (R)."""

    U: SiteSpec = field(default_factory=SiteSpec)
    P: SiteSpec = field(default_factory=SiteSpec)
    R: SiteSpec = field(default_factory=SiteSpec)

    @property
    def linear(self) -> bool:
        return not (self.U.active or self.P.active or self.R.active)

    def code(self) -> str:
        return ";".join(f"{s}={getattr(self, s).code()}" for s in SITES if getattr(self, s).active) or "linear"

    def to_dict(self) -> dict:
        return {s: {"bn": getattr(self, s).bn, "relu": getattr(self, s).relu,
                    "order": getattr(self, s).order} for s in SITES}

    @classmethod
    def from_dict(cls, data: Mapping) -> "PlacementSpec":
        unknown = set(data) - set(SITES)
        if unknown:
            raise KeyError(f"unknown placement site(s) {sorted(unknown)}; expected U, P, R")
        sites = {}
        for s in SITES:
            entry = dict(data.get(s, {}))
            bad = set(entry) - {"bn", "relu", "order"}
            if bad:
                raise KeyError(f"placement.{s}: unknown key(s) {sorted(bad)}")
            sites[s] = SiteSpec(**entry)
        return cls(**sites)

    @classmethod
    def parse(cls, text: str) -> "PlacementSpec":
        """Parse ``"U=bn,relu;R=bn"``; ops within a site are listed in application order."""
        text = text.strip()
        if text in ("", "linear"):
            return cls()
        sites = {}
        for part in filter(None, (p.strip() for p in text.split(";"))):
            m = re.fullmatch(r"([UPR])\s*=\s*([a-z, ]*)", part)
            if not m:
                raise ValueError(f"cannot parse placement term {part!r}")
            ops = [o.strip() for o in m.group(2).split(",") if o.strip()]
            if any(o not in ("bn", "relu") for o in ops) or len(set(ops)) != len(ops):
                raise ValueError(f"placement term {part!r} must list bn/relu at most once each")
            order = RELU_THEN_BN if ops[:1] == ["relu"] and "bn" in ops else BN_THEN_RELU
            sites[m.group(1)] = SiteSpec("bn" in ops, "relu" in ops, order)
        return cls(**sites)

    @classmethod
    def coerce(cls, value) -> "PlacementSpec":
        if value is None:
            return cls()
        if isinstance(value, PlacementSpec):
            return value
        if isinstance(value, str):
            return PLACEMENTS.get(value.strip()) or cls.parse(value)
        if isinstance(value, Mapping):
            return cls.from_dict(value)
        raise TypeError(f"cannot build a placement from {type(value).__name__}")


# ReLU placements of the polynomial block study (no batch norm).
TABLE_I_PLACEMENTS = {
    "relu_regular": PlacementSpec.parse("P=relu;R=relu"),
    "relu_outside": PlacementSpec.parse("U=relu"),
    "relu_after_residual": PlacementSpec.parse("R=relu"),
    "relu_outside_after_residual": PlacementSpec.parse("U=relu;R=relu"),
}

PLACEMENTS = {
    "linear": PlacementSpec(),
    "mgnet": PlacementSpec.parse("P=relu,bn;R=relu,bn"),
    **TABLE_I_PLACEMENTS,
    # batch-norm/ReLU rows studied for q2, g4, g6 and g8
    "bnU_reluU": PlacementSpec.parse("U=bn,relu"),
    "bnP_reluP_bnR_reluR": PlacementSpec.parse("P=bn,relu;R=bn,relu"),
    "bnU_reluU_bnR_reluR": PlacementSpec.parse("U=bn,relu;R=bn,relu"),
    "bnU_reluU_bnR": PlacementSpec.parse("U=bn,relu;R=bn"),
    "reluU_bnP_bnR": PlacementSpec.parse("U=relu;P=bn;R=bn"),
    "reluU_bnP_bnR_reluR": PlacementSpec.parse("U=relu;P=bn;R=bn,relu"),
}


class Site(nn.Module):
    """Optional batch norm and ReLU in the configured order; identity when both are off."""

    def __init__(self, spec: SiteSpec, channels: int):
        super().__init__()
        self.spec = spec
        ops: list[nn.Module] = []
        bn = nn.BatchNorm2d(channels) if spec.bn else None
        relu = nn.ReLU() if spec.relu else None
        pair = (bn, relu) if spec.order == BN_THEN_RELU else (relu, bn)
        ops = [op for op in pair if op is not None]
        self.ops = nn.Sequential(*ops)

    def forward(self, x):
        return self.ops(x)


def make_shared_conv(c_out: int, c_in: int, s: int = 3, weight: torch.Tensor | None = None) -> nn.Conv2d:
    """Bias-free periodic convolution used for ``A`` (features -> data) and ``B`` (data -> features)."""
    conv = nn.Conv2d(c_in, c_out, s, padding=s // 2, padding_mode="circular", bias=False)
    if weight is not None:
        weight = torch.as_tensor(weight)
        if tuple(weight.shape) != tuple(conv.weight.shape):
            raise ValueError(f"weight shape {tuple(weight.shape)} != {tuple(conv.weight.shape)}")
        conv = conv.to(weight.dtype)
        with torch.no_grad():
            conv.weight.copy_(weight)
    return conv


def residual(u: torch.Tensor, f: torch.Tensor, A: nn.Module) -> torch.Tensor:
    """``r = f - A(u)``."""
    Au = A(u)
    if Au.shape != f.shape:
        raise ValueError(f"A(u) has shape {tuple(Au.shape)} but f has shape {tuple(f.shape)}")
    return f - Au


class _Block(nn.Module):
    kind: str = ""

    def __init__(self, A: nn.Module, placement: PlacementSpec | None, data_channels: int,
                 feature_channels: int | None = None, index: tuple[int, int] | None = None):
        super().__init__()
        placement = PlacementSpec.coerce(placement)
        self.A = A
        self.placement = placement
        self.index = index
        dtype = next(A.parameters()).dtype
        self.site_R = Site(placement.R, data_channels).to(dtype)
        self.site_P = Site(placement.P, feature_channels or data_channels).to(dtype)

    def coefficient_parameters(self) -> list[nn.Parameter]:
        return []

    def _checked(self, out: torch.Tensor) -> torch.Tensor:
        if not torch.isfinite(out).all():
            where = f"level {self.index[0]} block {self.index[1]}" if self.index else "unplaced block"
            raise NonFiniteError(f"non-finite output in {self.kind} block ({where})")
        return out

    def extra_repr(self) -> str:
        return f"placement={self.placement.code()}"


def _scalar(value, like: nn.Module) -> nn.Parameter:
    dtype = next(like.parameters()).dtype
    return nn.Parameter(torch.tensor(float(value), dtype=dtype))


class RealLinearBlock(_Block):
    """One linear factor ``(I - alpha*A)`` with learnable ``alpha = 1/zeta``."""

    kind = RootKind.REAL_LINEAR.value

    def __init__(self, A, alpha: float, placement=None, channels: int | None = None, index=None):
        channels = channels or A.out_channels
        super().__init__(A, placement, channels, A.in_channels, index)
        self.alpha = _scalar(alpha, A)

    def coefficient_parameters(self):
        return [self.alpha]

    def forward(self, u, f):
        rho = self.site_R(residual(u, f, self.A))
        return self._checked(u + self.site_P(self.alpha * rho))


class ConjugatePairBlock(_Block):
    """Quadratic factor ``(I - A/z)(I - A/conj z)`` in real arithmetic, learnable ``(a, b)``."""

    kind = RootKind.CONJUGATE_PAIR.value

    def __init__(self, A, a: float, b: float, placement=None, channels: int | None = None, index=None,
                 min_modulus: float = 1e-6):
        channels = channels or A.out_channels
        if A.in_channels != A.out_channels:
            raise ValueError("conjugate-pair blocks apply A to the residual and need a square A")
        super().__init__(A, placement, channels, channels, index)
        self.a = _scalar(a, A)
        self.b = _scalar(b, A)
        self.register_buffer("min_modulus", torch.tensor(float(min_modulus), dtype=self.a.dtype))

    def coefficient_parameters(self):
        return [self.a, self.b]

    @torch.no_grad()
    def project_(self):
        """Push ``(a, b)`` back to modulus ``min_modulus`` if it fell below."""
        m = torch.sqrt(self.a**2 + self.b**2)
        eps = self.min_modulus
        if m < eps:
            if m == 0:
                self.a.fill_(eps)
            else:
                self.a.mul_(eps / m)
                self.b.mul_(eps / m)

    def forward(self, u, f):
        m2 = self.a**2 + self.b**2
        if m2 <= torch.finfo(m2.dtype).tiny:
            raise NonFiniteError(f"a^2 + b^2 underflow in conjugate-pair block {self.index}")
        rho = self.site_R(residual(u, f, self.A))
        return self._checked(u + self.site_P((2 * self.a * rho - self.A(rho)) / m2))


class SquaredRealBlock(_Block):
    """Factor ``(I - alpha*A^2)`` with roots ``+-1/sqrt(alpha)``."""

    kind = RootKind.REAL_SQUARED.value

    def __init__(self, A, alpha: float, placement=None, channels: int | None = None, index=None):
        channels = channels or A.out_channels
        if A.in_channels != A.out_channels:
            raise ValueError("squared-real blocks apply A to the residual and need a square A")
        super().__init__(A, placement, channels, channels, index)
        self.alpha = _scalar(alpha, A)

    def coefficient_parameters(self):
        return [self.alpha]

    def forward(self, u, f):
        rho = self.site_R(residual(u, f, self.A))
        return self._checked(u + self.site_P(self.alpha * self.A(rho)))


class MgNetBlock(_Block):
    """``u + S_P(B(S_R(r)))`` with a dense learnable extractor ``B`` (shared or per block)."""

    kind = "mgnet"

    def __init__(self, A, B, placement=None, index=None):
        super().__init__(A, placement, A.out_channels, A.in_channels, index)
        if B.in_channels != A.out_channels or B.out_channels != A.in_channels:
            raise ValueError("B must map data channels back to feature channels")
        self.B = B

    def forward(self, u, f):
        rho = self.site_R(residual(u, f, self.A))
        return self._checked(u + self.site_P(self.B(rho)))


class ResNetBlock(nn.Module):
    """Standard two-convolution basic block with a projection shortcut when shapes change."""

    def __init__(self, c_in: int, c_out: int, stride: int = 1):
        super().__init__()
        self.conv1 = nn.Conv2d(c_in, c_out, 3, stride=stride, padding=1, bias=False)
        self.bn1 = nn.BatchNorm2d(c_out)
        self.relu1 = nn.ReLU()
        self.conv2 = nn.Conv2d(c_out, c_out, 3, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(c_out)
        self.relu2 = nn.ReLU()
        self.shortcut = nn.Sequential()
        if stride != 1 or c_in != c_out:
            self.shortcut = nn.Sequential(nn.Conv2d(c_in, c_out, 1, stride=stride, bias=False),
                                          nn.BatchNorm2d(c_out))

    def forward(self, x):
        out = self.relu1(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return self.relu2(out + self.shortcut(x))


def blocks_from_roots(roots: RootSet, A: nn.Module, channels: int | None = None, placement=None,
                      level: int | None = None, min_modulus: float = 1e-6) -> nn.ModuleList:
    """One block per root entry, all sharing ``A``."""
    out = []
    for k, (kind, values) in enumerate(roots.block_params()):
        index = None if level is None else (level, k)
        if kind is RootKind.REAL_LINEAR:
            out.append(RealLinearBlock(A, values[0], placement, channels, index))
        elif kind is RootKind.REAL_SQUARED:
            out.append(SquaredRealBlock(A, values[0], placement, channels, index))
        else:
            out.append(ConjugatePairBlock(A, *values, placement, channels, index, min_modulus))
    return nn.ModuleList(out)


BLOCK_KINDS = ("real_linear", "conjugate_pair", "real_squared", "mgnet_AB", "mgnet_A", "resnet")


class _CheckHarness(nn.Module):
    def __init__(self, block: nn.Module, out_site: Site, takes_f: bool = True):
        super().__init__()
        self.block = block
        self.out_site = out_site
        self.takes_f = takes_f

    def forward(self, u, f):
        return self.out_site(self.block(u, f) if self.takes_f else self.block(u))


def make_block_for_check(kind: str, placement, channels: int, generator: torch.Generator | None = None):
    """A randomly parameterized block followed by the level-output site, for gradient checks."""
    placement = PlacementSpec.coerce(placement)

    def draw(*shape):
        return torch.randn(*shape, generator=generator) * 0.4

    A = make_shared_conv(channels, channels, 3, weight=draw(channels, channels, 3, 3))
    out_site = Site(placement.U, channels)
    if kind == "real_linear":
        block = RealLinearBlock(A, 0.5 + float(draw(1).abs()), placement, channels)
    elif kind == "conjugate_pair":
        block = ConjugatePairBlock(A, 1.0 + float(draw(1)), 0.5 + float(draw(1).abs()), placement, channels)
    elif kind == "real_squared":
        block = SquaredRealBlock(A, 0.3 + float(draw(1).abs()), placement, channels)
    elif kind in ("mgnet_AB", "mgnet_A"):
        # the two variants differ in how B is shared across blocks, not in the block map
        B = make_shared_conv(channels, channels, 3, weight=draw(channels, channels, 3, 3))
        block = MgNetBlock(A, B, placement)
    elif kind == "resnet":
        block = ResNetBlock(channels, channels)
        return _CheckHarness(block, out_site, takes_f=False)
    else:
        raise ValueError(f"unknown block kind {kind!r}; expected one of {BLOCK_KINDS}")
    return _CheckHarness(block, out_site)


_COEFFS_PER_BLOCK = {"poly": 1, "real_linear": 1, "real_squared": 1, "conjugate_pair": 2}


def block_weight_count(kind: str, c_in: int, c_out: int, s: int, nu: int) -> int:
    """Convolution (plus coefficient) weights of ``nu`` residual blocks on one level."""
    if min(c_in, c_out, s) < 1 or nu < 0:
        raise ValueError("dimensions must be positive and nu non-negative")
    conv = s * s * c_in * c_out
    if kind == "resnet":
        return conv * 2 * nu
    if kind == "mgnet_A":
        return conv * (1 + nu)
    if kind == "mgnet_AB":
        return conv * 2
    if kind in _COEFFS_PER_BLOCK:
        return conv + _COEFFS_PER_BLOCK[kind] * nu
    raise ValueError(f"unknown block kind {kind!r}")


def poly_level_weight_count(kinds: Iterable[str], c: int, s: int = 3) -> int:
    """Shared ``A`` plus the coefficients of a mixed sequence of polynomial blocks."""
    return s * s * c * c + sum(_COEFFS_PER_BLOCK[getattr(k, "value", k)] for k in kinds)
