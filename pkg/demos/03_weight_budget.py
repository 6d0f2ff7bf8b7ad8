"""How many weights does each family spend?

A polynomial level keeps one shared 3x3 convolution plus a handful of scalar
coefficients, where an MgNet level also carries B and a ResNet level carries
two convolutions per block.

    python demos/03_weight_budget.py
"""
import math

from polymgnet.network import FAMILIES, ArchConfig, build_model, count_weights

print(f"{'family':10s} {'total':>12s} {'block formula':>14s}")
for family in FAMILIES:
    rep = count_weights(build_model(ArchConfig(family), initialize=False))
    print(f"{family:10s} {rep.total_count:>12,d} {rep.formula_count:>14,d}")

print("\npoly_g6, per level:")
print(count_weights(build_model(ArchConfig("poly_g6"), initialize=False)).table())

print("\nchannel scale sweep (total learnables):")
scales = [1 / math.sqrt(8), 1 / math.sqrt(2), 1.0, math.sqrt(2)]
print("          " + "".join(f"{s:>12.3f}" for s in scales))
for family in ("resnet18", "mgnet_AB", "poly_q2", "poly_g8"):
    totals = [count_weights(build_model(ArchConfig(family, channel_scale=s), initialize=False)).total_count
              for s in scales]
    print(f"{family:10s}" + "".join(f"{t:>12,d}" for t in totals))
