"""Full models: stem, resolution levels of shared-``A`` blocks, FAS transfers, head.

Per level ``l`` the multigrid models run ``nu`` smoothing blocks on
``(u_l, f_l)``, apply the level-output site, then move to the next level with

    u_{l+1} = Pi_l(u_l)
    f_{l+1} = R_l(f_l - A_l(u_l)) + A_{l+1}(u_{l+1})

Only the coarsening leg is built; there is no prolongation back up.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace
from typing import Any, Mapping, Sequence

import numpy as np
import torch
import torch.nn as nn

from . import spectral
from .blocks import (
    ConjugatePairBlock,
    MgNetBlock,
    PlacementSpec,
    RealLinearBlock,
    ResNetBlock,
    Site,
    SquaredRealBlock,
    block_weight_count,
    make_shared_conv,
    poly_level_weight_count,
)
from .spectral import RootKind, RootSet

__all__ = [
    "FAMILIES",
    "POLY_FAMILIES",
    "INIT_STRATEGIES",
    "ArchConfig",
    "PolyMgNet",
    "ResNet18",
    "Level",
    "Transfer",
    "build_model",
    "scale_channels",
    "init_coefficients",
    "project_coefficients",
    "coefficient_parameters",
    "count_weights",
    "WeightReport",
    "level_kernel",
]

RL, RS, CP = RootKind.REAL_LINEAR, RootKind.REAL_SQUARED, RootKind.CONJUGATE_PAIR

POLY_KINDS: dict[str, tuple[RootKind, ...]] = {
    "poly_q2": (RL, RL),
    "poly_q4": (RL, RL, CP),
    "poly_g4": (RS, RS),
    "poly_g6": (RS, RS, CP),
    "poly_g8": (RS, RS, CP, CP),
}
POLY_DEGREE = {fam: sum(k.degree for k in kinds) for fam, kinds in POLY_KINDS.items()}
POLY_FAMILIES = tuple(POLY_KINDS)
FAMILIES = ("resnet18", "mgnet_AB", "mgnet_A", *POLY_FAMILIES)
INIT_STRATEGIES = ("spectral", "uniform_spectrum", "xavier_uniform")

DEFAULT_CHANNELS = {"resnet18": (64, 128, 256, 512)}
MGNET_CHANNELS = (64, 128, 256, 256)

# best rows of the placement study; q4 was not studied and borrows the g6/g8 winner
DEFAULT_PLACEMENT = {
    "resnet18": "linear",
    "mgnet_AB": "mgnet",
    "mgnet_A": "mgnet",
    "poly_q2": "U=bn,relu;R=bn",
    "poly_q4": "U=bn,relu;R=bn,relu",
    "poly_g4": "P=bn,relu;R=bn,relu",
    "poly_g6": "U=bn,relu;R=bn,relu",
    "poly_g8": "U=bn,relu;R=bn,relu",
}


def scale_channels(base_channels: Sequence[int], scale: float) -> list[int]:
    """``round(scale * c)`` per level, never below 8."""
    if not scale > 0:
        raise ValueError(f"channel scale must be positive, got {scale}")
    return [max(8, int(round(scale * c))) for c in base_channels]


@dataclass
class ArchConfig:
    family: str = "poly_q2"
    levels: int = 4
    base_channels: tuple[int, ...] | None = None
    blocks_per_level: int | None = None
    channel_scale: float = 1.0
    placement: PlacementSpec | None = None
    init_strategy: str = "spectral"
    num_classes: int = 10
    in_channels: int = 3
    spectrum_grid: int = spectral.DEFAULT_GRID
    transfer_bn: bool = True

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unsupported family {self.family!r}; choose from {FAMILIES}")
        if self.levels < 1:
            raise ValueError("levels must be >= 1")
        if self.base_channels is None:
            default = DEFAULT_CHANNELS.get(self.family, MGNET_CHANNELS)
            if self.levels > len(default):
                raise ValueError(f"give base_channels explicitly for {self.levels} levels")
            self.base_channels = tuple(default[: self.levels])
        self.base_channels = tuple(int(c) for c in self.base_channels)
        if len(self.base_channels) != self.levels:
            raise ValueError(f"base_channels has {len(self.base_channels)} entries for {self.levels} levels")
        if any(c < 1 for c in self.base_channels):
            raise ValueError("channel counts must be positive")
        if any(b < a for a, b in zip(self.base_channels, self.base_channels[1:])):
            raise ValueError("channel counts must not decrease across levels")
        expected = len(POLY_KINDS[self.family]) if self.is_poly else None
        if self.blocks_per_level is None:
            self.blocks_per_level = expected or 2
        if expected is not None and self.blocks_per_level != expected:
            raise ValueError(f"{self.family} uses {expected} blocks per level, got {self.blocks_per_level}")
        if self.blocks_per_level < 1:
            raise ValueError("blocks_per_level must be >= 1")
        if self.placement is None:
            self.placement = PlacementSpec.coerce(DEFAULT_PLACEMENT[self.family])
        self.placement = PlacementSpec.coerce(self.placement)
        if self.init_strategy not in INIT_STRATEGIES:
            raise ValueError(f"init_strategy must be one of {INIT_STRATEGIES}")
        if not self.channel_scale > 0:
            raise ValueError("channel_scale must be positive")
        if self.spectrum_grid < 2:
            raise ValueError("spectrum_grid must be >= 2")

    @property
    def is_poly(self) -> bool:
        return self.family in POLY_KINDS

    @property
    def channels(self) -> list[int]:
        return scale_channels(self.base_channels, self.channel_scale)

    @property
    def degree(self) -> int | None:
        return POLY_DEGREE.get(self.family)

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d["base_channels"] = list(self.base_channels)
        d["placement"] = self.placement.to_dict()
        return d

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "ArchConfig":
        data = dict(data)
        if "placement" in data and data["placement"] is not None:
            data["placement"] = PlacementSpec.coerce(data["placement"])
        if data.get("base_channels") is not None:
            data["base_channels"] = tuple(data["base_channels"])
        return cls(**data)

    def with_(self, **changes) -> "ArchConfig":
        return replace(self, **changes)


class ChannelRestrict(nn.Module):
    """Stride-2 per-channel 3x3 convolution, then cyclic channel expansion to ``c_out``."""

    def __init__(self, c_in: int, c_out: int, use_bn: bool = True):
        super().__init__()
        if c_out < c_in:
            raise ValueError("channel counts must not decrease across levels")
        self.conv = nn.Conv2d(c_in, c_in, 3, stride=2, padding=1, groups=c_in, bias=False)
        self.register_buffer("expand", torch.arange(c_out) % c_in, persistent=False)
        self.bn = nn.BatchNorm2d(c_out) if use_bn else nn.Identity()

    def forward(self, x):
        return self.bn(self.conv(x).index_select(1, self.expand))


class Transfer(nn.Module):
    """Restriction ``R`` of the residual data and projection ``Pi`` of the features."""

    def __init__(self, c_in: int, c_out: int, use_bn: bool = True):
        super().__init__()
        self.R = ChannelRestrict(c_in, c_out, use_bn)
        self.Pi = ChannelRestrict(c_in, c_out, use_bn)

    def forward(self, u, f, A_fine, A_coarse):
        u_next = self.Pi(u)
        f_next = self.R(f - A_fine(u)) + A_coarse(u_next)
        return u_next, f_next


class Level(nn.Module):
    def __init__(self, A: nn.Module, blocks: nn.ModuleList, out_site: Site, B: nn.Module | None = None):
        super().__init__()
        self.A = A
        self.blocks = blocks
        self.out_site = out_site
        self.B = B

    def forward(self, u, f):
        for block in self.blocks:
            u = block(u, f)
        return self.out_site(u)


class PolyMgNet(nn.Module):
    """Multigrid-structured classifier for the MgNet and polynomial families."""

    def __init__(self, config: ArchConfig):
        super().__init__()
        self.config = config
        ch = config.channels
        placement = config.placement
        self.stem = nn.Sequential(nn.Conv2d(config.in_channels, ch[0], 3, padding=1, bias=False),
                                  nn.BatchNorm2d(ch[0]), nn.ReLU())
        levels = []
        for l, c in enumerate(ch):
            A = make_shared_conv(c, c, 3)
            B = None
            if config.family == "mgnet_AB":
                B = make_shared_conv(c, c, 3)
                blocks = [MgNetBlock(A, B, placement, (l, k)) for k in range(config.blocks_per_level)]
            elif config.family == "mgnet_A":
                blocks = [MgNetBlock(A, make_shared_conv(c, c, 3), placement, (l, k))
                          for k in range(config.blocks_per_level)]
            else:
                blocks = []
                for k, kind in enumerate(POLY_KINDS[config.family]):
                    if kind is RL:
                        blocks.append(RealLinearBlock(A, 1.0, placement, c, (l, k)))
                    elif kind is RS:
                        blocks.append(SquaredRealBlock(A, 1.0, placement, c, (l, k)))
                    else:
                        blocks.append(ConjugatePairBlock(A, 1.0, 1.0, placement, c, (l, k)))
            levels.append(Level(A, nn.ModuleList(blocks), Site(placement.U, c), B))
        self.levels = nn.ModuleList(levels)
        self.transfers = nn.ModuleList(Transfer(a, b, config.transfer_bn) for a, b in zip(ch, ch[1:]))
        self.head = nn.Linear(ch[-1], config.num_classes)

    def forward(self, x):
        f = self.stem(x)
        u = torch.zeros_like(f)
        for l, level in enumerate(self.levels):
            u = level(u, f)
            if l + 1 < len(self.levels):
                u, f = self.transfers[l](u, f, level.A, self.levels[l + 1].A)
        return self.head(u.mean(dim=(2, 3)))


class ResNet18(nn.Module):
    """CIFAR-style ResNet18: 3x3 stem, basic blocks, stride-2 level changes."""

    def __init__(self, config: ArchConfig):
        super().__init__()
        self.config = config
        ch = config.channels
        self.stem = nn.Sequential(nn.Conv2d(config.in_channels, ch[0], 3, padding=1, bias=False),
                                  nn.BatchNorm2d(ch[0]), nn.ReLU())
        levels = []
        c_prev = ch[0]
        for l, c in enumerate(ch):
            stride = 1 if l == 0 else 2
            blocks = [ResNetBlock(c_prev, c, stride)] + [ResNetBlock(c, c) for _ in range(config.blocks_per_level - 1)]
            levels.append(nn.Sequential(*blocks))
            c_prev = c
        self.levels = nn.ModuleList(levels)
        self.head = nn.Linear(ch[-1], config.num_classes)

    def forward(self, x):
        x = self.stem(x)
        for level in self.levels:
            x = level(x)
        return self.head(x.mean(dim=(2, 3)))


def build_model(config: ArchConfig, initialize: bool = True, seed: int | None = None) -> nn.Module:
    """Construct the model for ``config``; by default also initialize polynomial coefficients.

    With ``seed`` the weights are drawn from a private generator state, so the
    result does not depend on (or disturb) the global torch RNG.
    """
    if isinstance(config, Mapping):
        config = ArchConfig.from_dict(config)
    with torch.random.fork_rng(devices=[]):
        if seed is not None:
            torch.manual_seed(seed)
        model = ResNet18(config) if config.family == "resnet18" else PolyMgNet(config)
    if initialize:
        init_coefficients(model, config.init_strategy, seed=seed)
    return model


def level_kernel(model: nn.Module, level: int) -> np.ndarray:
    """Weights of the shared ``A`` on 0-based ``level``."""
    if not isinstance(model, PolyMgNet):
        raise ValueError(f"{model.config.family} has no shared data-feature convolution")
    if not 0 <= level < len(model.levels):
        raise IndexError(f"level {level} out of range (model has {len(model.levels)})")
    return model.levels[level].A.weight.detach().cpu().double().numpy()


def _assign_roots(level: Level, roots: RootSet, eps: float) -> None:
    with torch.no_grad():
        for block, (kind, values) in zip(level.blocks, roots.block_params()):
            if kind is CP:
                block.a.fill_(values[0])
                block.b.fill_(values[1])
                block.min_modulus.fill_(eps)
                block.project_()
            else:
                block.alpha.fill_(values[0])


def init_coefficients(model: nn.Module, strategy: str | None = None, *, seed: int | None = None) -> None:
    """Set polynomial coefficients from the current ``A_l`` of each level.

    ``spectral`` picks border roots of the spectrum; ``uniform_spectrum`` draws
    each root from ``U(min Re, max Re)`` (imaginary parts from ``U(0, max Im)``);
    ``xavier_uniform`` draws each coefficient from ``U(-t, t)`` with
    ``t = sqrt(6 / (c_in + c_out))``.
    """
    config = model.config
    if not config.is_poly:
        return
    strategy = strategy or config.init_strategy
    if strategy not in INIT_STRATEGIES:
        raise ValueError(f"unknown init strategy {strategy!r}")
    if seed is None:
        seed = torch.initial_seed() % 2**63
    rng = np.random.default_rng(seed)
    kinds = POLY_KINDS[config.family]
    family = config.family.removeprefix("poly_")[0]
    for l, level in enumerate(model.levels):
        w = level.A.weight
        if strategy == "xavier_uniform":
            t = math.sqrt(6.0 / (w.shape[0] + w.shape[1]))
            with torch.no_grad():
                for block in level.blocks:
                    for p in block.coefficient_parameters():
                        p.fill_(float(rng.uniform(-t, t)))
                    if isinstance(block, ConjugatePairBlock):
                        block.project_()
            continue
        spec = spectral.estimate_spectrum(w, config.spectrum_grid, kernel_id=f"level{l + 1}")
        lo, hi = spec.real_range
        if strategy == "uniform_spectrum" and hi - lo > spec.tau_conj:
            top = float(spec.eigenvalues.imag.max())
            entries = []
            for kind in kinds:
                zeta = float(rng.uniform(lo, hi))
                if abs(zeta) < spec.eps_root:
                    zeta = math.copysign(spec.eps_root, zeta)
                if kind is CP:
                    entries.append((kind, complex(zeta, float(rng.uniform(0.0, max(top, 0.0))))))
                else:
                    entries.append((kind, zeta))
            roots = RootSet(tuple(entries))
        else:
            roots = spectral.select_initial_roots(spec, config.degree, family)
        _assign_roots(level, roots, spec.eps_root)


def coefficient_parameters(model: nn.Module) -> list[nn.Parameter]:
    out = []
    for m in model.modules():
        if hasattr(m, "coefficient_parameters"):
            out.extend(m.coefficient_parameters())
    return out


def project_coefficients(model: nn.Module) -> None:
    for m in model.modules():
        if isinstance(m, ConjugatePairBlock):
            m.project_()


def level_roots(model: PolyMgNet, level: int) -> RootSet:
    """Current roots of a level, read back from the learned coefficients."""
    params = []
    for block in model.levels[level].blocks:
        params.append((block.kind, [p.item() for p in block.coefficient_parameters()]))
    return RootSet.from_block_params(params)


@dataclass
class WeightReport:
    family: str
    channels: list[int]
    formula_count: int
    total_count: int
    per_level: list[dict[str, Any]] = field(default_factory=list)

    def table(self) -> str:
        head = f"{'level':>5} {'channels':>8} {'blocks':>6} {'degree':>6} {'formula':>10} {'counted':>10}"
        lines = [head, "-" * len(head)]
        for row in self.per_level:
            lines.append(f"{row['level']:>5} {row['channels']:>8} {row['blocks']:>6} {str(row['degree']):>6} "
                         f"{row['formula']:>10} {row['counted']:>10}")
        lines.append(f"formula total: {self.formula_count}   all learnables: {self.total_count}")
        return "\n".join(lines)


def _numel(params) -> int:
    seen = {}
    for p in params:
        seen[id(p)] = p.numel()
    return sum(seen.values())


def count_weights(model: nn.Module) -> WeightReport:
    """Closed-form residual-block counts per level next to the actual learnable totals."""
    config = model.config
    ch = config.channels
    rows = []
    for l, c in enumerate(ch):
        level = model.levels[l]
        nu = config.blocks_per_level
        if config.family == "resnet18":
            formula = block_weight_count("resnet", c, c, 3, nu)
            counted = _numel(m.weight for m in level.modules()
                             if isinstance(m, nn.Conv2d) and m.kernel_size == (3, 3))
            degree = None
        elif config.is_poly:
            formula = poly_level_weight_count(POLY_KINDS[config.family], c)
            counted = _numel([level.A.weight, *coefficient_parameters(level)])
            degree = config.degree
        else:
            formula = block_weight_count(config.family, c, c, 3, nu)
            counted = _numel([level.A.weight] + [b.B.weight for b in level.blocks])
            degree = None
        rows.append({"level": l + 1, "channels": c, "blocks": nu, "degree": degree,
                     "formula": formula, "counted": counted})
    total = sum(p.numel() for p in model.parameters() if p.requires_grad)
    return WeightReport(config.family, ch, sum(r["formula"] for r in rows), total, rows)
