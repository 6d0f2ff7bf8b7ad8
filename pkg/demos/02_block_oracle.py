"""Blocks in linear mode are a factored polynomial of A.

Run the real-arithmetic blocks on an 8x8 periodic grid, then compare the final
residual with (I - A/z1)...(I - A/zd) r0 multiplied out as dense matrices.
A coefficient nudged by 1e-3 must break the agreement.

    python demos/02_block_oracle.py
"""
import numpy as np
import torch

from polymgnet.blocks import blocks_from_roots, make_shared_conv
from polymgnet.oracle import check_block_equivalence, gradient_check
from polymgnet.spectral import estimate_spectrum, select_initial_roots

rng = np.random.default_rng(0)
kernel = rng.standard_normal((4, 4, 3, 3)) / 3
spec = estimate_spectrum(kernel, 8)

print("family  degree  max|block - dense|")
for family, degree in [("q", 2), ("q", 4), ("g", 4), ("g", 6), ("g", 8)]:
    roots = select_initial_roots(spec, degree, family)
    rep = check_block_equivalence(roots, g=8, c=4, tol=1e-10, kernel=kernel)
    print(f"{family}{degree:<6} {rep.degree:>6}  {rep.max_abs_diff:.2e}  {'ok' if rep.passed else 'MISMATCH'}")

roots = select_initial_roots(spec, 2, "q")
A = make_shared_conv(4, 4, 3, weight=torch.as_tensor(kernel))
blocks = blocks_from_roots(roots, A, 4)
with torch.no_grad():
    blocks[1].alpha += 1e-3
rep = check_block_equivalence(roots, 8, 4, 1e-10, blocks=blocks, kernel=kernel)
print(f"\nperturbed q2 coefficient: {rep}")

print("\nfinite-difference gradient checks (relative error):")
for kind in ("real_linear", "conjugate_pair", "real_squared", "mgnet_AB"):
    errs = [gradient_check(kind, row) for row in ("linear", "relu_regular", "relu_outside_after_residual")]
    print(f"  {kind:15s}" + "  ".join(f"{e:.1e}" for e in errs))
