"""Where do the initial roots come from?

A freshly initialized 64-channel shared convolution A is a real operator, so
its eigenvalues on a periodic grid form a cloud symmetric about the real axis.
Each polynomial family places its roots on the border of that cloud; higher
degrees keep adding conjugate pairs wherever |q| is still largest.

    python demos/01_spectrum_and_roots.py
"""
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np
import torch

from polymgnet.blocks import make_shared_conv
from polymgnet.spectral import RootKind, estimate_spectrum, eval_poly_on_spectrum, select_initial_roots

OUT = Path(__file__).parent / "out"
OUT.mkdir(exist_ok=True)

torch.manual_seed(0)
A = make_shared_conv(64, 64, 3)
spec = estimate_spectrum(A.weight, grid_size=8, kernel_id="A (64x64x3x3)")
lam = spec.eigenvalues
lo, hi = spec.real_range
print(f"{lam.size} eigenvalues, Re in [{lo:.3f}, {hi:.3f}], max Im {lam.imag.max():.3f}")
print(f"conjugate-closed within {spec.tau_conj:.1e}: {spec.is_conjugate_closed()}")

fig, axes = plt.subplots(1, 5, figsize=(20, 4), sharex=True, sharey=True)
for ax, (family, degree) in zip(axes, [("q", 2), ("q", 4), ("g", 4), ("g", 6), ("g", 8)]):
    roots = select_initial_roots(spec, degree, family)
    _, amp = eval_poly_on_spectrum(roots, spec)
    print(f"\n{family}{degree}: max |q| on the spectrum {amp.max():.3f}")
    for line in roots.describe():
        print("   ", line)
    sc = ax.scatter(lam.real, lam.imag, c=np.log10(amp + 1e-16), s=4, cmap="viridis")
    for kind, v in roots:
        pts = [v, np.conj(v)] if kind is RootKind.CONJUGATE_PAIR else [v, -v] if kind is RootKind.REAL_SQUARED else [v]
        ax.scatter(np.real(pts), np.imag(pts), marker="x", c="red", s=60)
    ax.set_title(f"{family}{degree}")
    ax.set_xlabel("Re")
axes[0].set_ylabel("Im")
fig.colorbar(sc, ax=axes, label="log10 |q(lambda)|")
fig.savefig(OUT / "spectrum_roots.png", dpi=110)
print(f"\nplot written to {OUT / 'spectrum_roots.png'}")
