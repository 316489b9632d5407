import numpy as np
import pytest

from raptrlab import netcore
from raptrlab.numkit import RngStream


@pytest.fixture
def rng():
    return RngStream(1234, 0)


def build_net(kind="relu_mlp", L=4, d=8, m=16, head="scalar", composition="residual",
              seed=7, stream=0):
    rng = RngStream(seed, stream)
    if kind == "relu_mlp":
        blocks = [netcore.ReluMlp.init(d, m, rng) for _ in range(L)]
    elif kind == "linear":
        blocks = [netcore.Linear.init(d, rng) for _ in range(L)]
    elif kind == "linear_ln":
        blocks = [netcore.LinearLn.init(d, rng) for _ in range(L)]
    else:
        raise ValueError(kind)
    if head == "scalar":
        h = netcore.ScalarReadout.init(d, rng)
    elif head == "normalized":
        h = netcore.NormalizedLinear(rng.gauss(3, d, std=0.5), trainable=True)
    elif head == "identity":
        h = netcore.IdentityHead()
    else:
        raise ValueError(head)
    return netcore.ResidualNet(blocks, h, composition)


def finite_diff_check(net, x, h=1e-5):
    """Max relative error between analytic and central-difference gradients."""

    def loss_of():
        out = net.forward(x).output
        return float(np.sum(out * out))

    tape = net.forward(x)
    bg, hg, _ = net.backward(tape, 2.0 * tape.output)
    worst = 0.0
    params = [(p, bg[i][name]) for i, b in enumerate(net.blocks)
              for name, p in b.params().items()]
    params += [(p, hg[name]) for name, p in net.head.params().items()]
    for param, grad in params:
        flat = param.reshape(-1)
        gflat = grad.reshape(-1)
        for idx in range(flat.size):
            orig = flat[idx]
            flat[idx] = orig + h
            hi = loss_of()
            flat[idx] = orig - h
            lo = loss_of()
            flat[idx] = orig
            fd = (hi - lo) / (2.0 * h)
            worst = max(worst, abs(gflat[idx] - fd) / (abs(gflat[idx]) + 1e-8))
    return worst
