"""Built-in sanity suite behind `raptrlab selftest`.

Runs the cheap always-on checks: finite-difference gradient verification for
every block and head kind, gated-vs-shared backward equivalence, and the
h_sqrt support/norm invariants. Prints one line per check and returns a
process exit code.
"""

from __future__ import annotations

import numpy as np

from . import netcore, sharedbase
from .numkit import RngStream


def grad_check_net(net: netcore.ResidualNet, x, rel_tol: float = 1e-5,
                   h: float = 1e-5) -> float:
    """Max relative error of analytic vs central-difference gradients."""

    def loss_of(n):
        out = n.forward(x).output
        return float(np.sum(out * out))

    tape = net.forward(x)
    upstream = 2.0 * tape.output
    bg, hg, _ = net.backward(tape, upstream)
    worst = 0.0
    all_params = [(f"block{i}.{name}", p, bg[i][name])
                  for i, b in enumerate(net.blocks) for name, p in b.params().items()]
    all_params += [(f"head.{name}", p, hg[name])
                   for name, p in net.head.params().items()]
    for label, param, grad in all_params:
        flat = param.reshape(-1)
        gflat = grad.reshape(-1)
        for idx in range(flat.size):
            orig = flat[idx]
            flat[idx] = orig + h
            hi = loss_of(net)
            flat[idx] = orig - h
            lo = loss_of(net)
            flat[idx] = orig
            fd = (hi - lo) / (2.0 * h)
            rel = abs(gflat[idx] - fd) / (abs(gflat[idx]) + 1e-8)
            worst = max(worst, rel)
    return worst


def _small_net(kind: str, rng: RngStream, head: str = "scalar"):
    d, L, m = 8, 4, 16
    if kind == "relu_mlp":
        blocks = [netcore.ReluMlp.init(d, m, rng) for _ in range(L)]
    elif kind == "linear":
        blocks = [netcore.Linear.init(d, rng) for _ in range(L)]
    else:
        blocks = [netcore.LinearLn.init(d, rng) for _ in range(L)]
    if head == "scalar":
        h = netcore.ScalarReadout.init(d, rng)
    elif head == "normalized":
        h = netcore.NormalizedLinear(rng.gauss(3, d, std=0.5), trainable=True)
    else:
        h = netcore.IdentityHead()
    return netcore.ResidualNet(blocks, h)


def run_all() -> int:
    rng = RngStream(7, 0)
    ok = True

    for kind in ("relu_mlp", "linear", "linear_ln"):
        for head in ("scalar", "normalized", "identity"):
            net = _small_net(kind, rng, head)
            x = rng.gauss(2, 8)
            worst = grad_check_net(net, x)
            passed = worst <= 1e-5
            ok &= passed
            print(f"[{'ok' if passed else 'FAIL'}] grad check {kind}/{head}: "
                  f"max rel err {worst:.2e}")

    worst = 0.0
    for _ in range(20):
        net = _small_net("linear_ln", rng)
        x = rng.gauss(3, 8)
        bits = rng.bernoulli(0.6, size=4)
        bits[0] = 1
        worst = max(worst, sharedbase.equivalence_check(net, x, bits))
        worst = max(worst, sharedbase.equivalence_check(net, x, bits, fold_scales=True))
    passed = worst <= 1e-12
    ok &= passed
    print(f"[{'ok' if passed else 'FAIL'}] shared-base equivalence: "
          f"max discrepancy {worst:.2e}")

    hs_ok = True
    for _ in range(200):
        L = int(rng.integers(1, 12))
        bits = rng.bernoulli(0.5, size=L)
        if not bits.any():
            bits[int(rng.integers(0, L))] = 1
        scales = netcore.h_sqrt(bits)
        hs_ok &= bool(np.all((scales > 0) == (bits == 1)))
        active = np.flatnonzero(bits)
        first = active[0]
        for a in active:
            lhs = float(np.sum(scales[:a] ** 2))
            hs_ok &= abs(lhs - (a - first)) < 1e-12
        if bits[0] == 1:
            hs_ok &= abs(float(np.sum(scales**2)) - L) < 1e-12
    ok &= hs_ok
    print(f"[{'ok' if hs_ok else 'FAIL'}] h_sqrt support and norm conditions")

    print("selftest:", "PASS" if ok else "FAIL")
    return 0 if ok else 1
