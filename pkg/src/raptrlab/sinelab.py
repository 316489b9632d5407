"""Two-layer sine residual network trained with exact population gradients.

The target is sqrt(3)/2 + sqrt(3)/2 x1 - x1 x2 over uniform {-1,+1}^d. The
network (all parameters initialized to zero) is

    y1 = p0 + sin(<w1, x> + b1)
    y2 = y1 + sin(<w2, x> + y1 + b2)

trained in three phases: position bias only (p0), then one random layer per
step on the single-layer objective (w_l, b_l), then the full model with the
first layer frozen (w2, b2). Expectations are exact: d is small enough to
enumerate {-1,+1}^d, and the loss is the full derivative of E(.)^2 (so
written gradients carry the factor 2).
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .numkit import Array, RngStream, format_float

SQ3 = math.sqrt(3.0)
ENUM_LIMIT = 14


def enumerate_signs(d: int) -> Array:
    """All of {-1,+1}^d as a (2^d, d) array."""
    if d > ENUM_LIMIT:
        raise ValueError(f"exact enumeration refused for d={d} > {ENUM_LIMIT}")
    idx = np.arange(1 << d, dtype=np.uint64)
    bits = np.arange(d, dtype=np.uint64)
    return ((idx[:, None] >> bits[None, :]) & 1).astype(np.float64) * 2.0 - 1.0


def target_fstar(x: Array) -> Array:
    """sqrt(3)/2 + sqrt(3)/2 x1 - x1 x2 per row."""
    x = np.atleast_2d(x)
    return SQ3 / 2.0 + SQ3 / 2.0 * x[:, 0] - x[:, 0] * x[:, 1]


@dataclass
class SineNetParams:
    d: int
    p0: float = 0.0
    w1: Array = None
    w2: Array = None
    b1: float = 0.0
    b2: float = 0.0

    def __post_init__(self):
        if self.w1 is None:
            self.w1 = np.zeros(self.d)
        if self.w2 is None:
            self.w2 = np.zeros(self.d)

    def copy(self) -> "SineNetParams":
        return SineNetParams(self.d, self.p0, self.w1.copy(), self.w2.copy(),
                             self.b1, self.b2)


def forward_full(params: SineNetParams, x: Array):
    x = np.atleast_2d(x)
    y1 = params.p0 + np.sin(x @ params.w1 + params.b1)
    arg2 = x @ params.w2 + y1 + params.b2
    y2 = y1 + np.sin(arg2)
    return y1, arg2, y2


def population_loss(params: SineNetParams, phase: str = "full",
                    layer: int = 2, x: Array | None = None) -> float:
    """Exact E(prediction - f*)^2 for the given phase's objective."""
    if x is None:
        x = enumerate_signs(params.d)
    f = target_fstar(x)
    if phase == "bias":
        return float(np.mean((params.p0 - f) ** 2))
    if phase == "phase1":
        w = params.w1 if layer == 1 else params.w2
        b = params.b1 if layer == 1 else params.b2
        pred = params.p0 + np.sin(x @ w + b)
        return float(np.mean((pred - f) ** 2))
    if phase in ("phase2", "full"):
        _, _, y2 = forward_full(params, x)
        return float(np.mean((y2 - f) ** 2))
    raise ValueError(f"unknown phase {phase!r}")


def population_grad(params: SineNetParams, phase: str, layer: int = 2,
                    x: Array | None = None) -> dict:
    """Exact population gradient over the phase's active parameters."""
    if x is None:
        x = enumerate_signs(params.d)
    f = target_fstar(x)
    if phase == "bias":
        return {"p0": float(np.mean(2.0 * (params.p0 - f)))}
    if phase == "phase1":
        w = params.w1 if layer == 1 else params.w2
        b = params.b1 if layer == 1 else params.b2
        arg = x @ w + b
        r = 2.0 * (params.p0 + np.sin(arg) - f)
        cos = np.cos(arg)
        return {"w": (r * cos) @ x / x.shape[0], "b": float(np.mean(r * cos))}
    if phase == "phase2":
        _, arg2, y2 = forward_full(params, x)
        r = 2.0 * (y2 - f)
        cos = np.cos(arg2)
        return {"w": (r * cos) @ x / x.shape[0], "b": float(np.mean(r * cos))}
    raise ValueError(f"unknown phase {phase!r}")


@dataclass
class PhasePlan:
    steps_bias: int
    steps_phase1: int
    steps_phase2: int
    eta: float = 1e-3

    def __post_init__(self):
        if self.eta > 1e-2:
            raise ValueError("learning rate outside the small-lr regime (eta <= 1e-2)")


TRAJECTORY_HEADER = ["step", "phase", "p0", "w11", "w21", "w22", "b1", "b2", "loss"]


@dataclass
class TrajectoryRow:
    step: int
    phase: str
    p0: float
    w11: float
    w21: float
    w22: float
    b1: float
    b2: float
    loss: float


def train_three_phase(plan: PhasePlan, d: int, rng: RngStream):
    """Run bias / phase-1 / phase-2 training; returns (trajectory, params).

    Phase 1 picks a random layer each step. The trajectory is sampled every
    ~1/(10 eta) steps and records the full-network population loss.
    """
    x = enumerate_signs(d)
    params = SineNetParams(d)
    every = max(1, int(round(1.0 / (10.0 * plan.eta))))
    rows: list[TrajectoryRow] = []
    step = 0

    def record(phase: str):
        rows.append(TrajectoryRow(step, phase, params.p0, float(params.w1[0]),
                                  float(params.w2[0]), float(params.w2[1]),
                                  params.b1, params.b2,
                                  population_loss(params, "full", x=x)))

    record("init")
    for _ in range(plan.steps_bias):
        g = population_grad(params, "bias", x=x)
        params.p0 -= plan.eta * g["p0"]
        step += 1
        if step % every == 0:
            record("bias")
    for _ in range(plan.steps_phase1):
        layer = 1 + int(rng.integers(0, 2))
        g = population_grad(params, "phase1", layer=layer, x=x)
        if layer == 1:
            params.w1 -= plan.eta * g["w"]
            params.b1 -= plan.eta * g["b"]
        else:
            params.w2 -= plan.eta * g["w"]
            params.b2 -= plan.eta * g["b"]
        step += 1
        if step % every == 0:
            record("phase1")
    for _ in range(plan.steps_phase2):
        g = population_grad(params, "phase2", x=x)
        params.w2 -= plan.eta * g["w"]
        params.b2 -= plan.eta * g["b"]
        step += 1
        if step % every == 0:
            record("phase2")
    record("final")
    if not math.isfinite(rows[-1].loss):
        raise RuntimeError("sine-network training diverged")
    return rows, params


def write_trajectory(rows, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(TRAJECTORY_HEADER)
        for r in rows:
            w.writerow([r.step, r.phase] + [format_float(v) for v in
                       (r.p0, r.w11, r.w21, r.w22, r.b1, r.b2, r.loss)])


def extract_coeffs(fn_vals_or_params, d: int | None = None):
    """(alpha on x1, beta on x1 x2, gamma constant) via exact projection.

    Accepts either SineNetParams (projects the full two-layer network) or a
    vector of function values over enumerate_signs(d).
    """
    if isinstance(fn_vals_or_params, SineNetParams):
        params = fn_vals_or_params
        x = enumerate_signs(params.d)
        _, _, vals = forward_full(params, x)
    else:
        if d is None:
            raise ValueError("pass d when supplying raw function values")
        x = enumerate_signs(d)
        vals = np.asarray(fn_vals_or_params, dtype=np.float64)
        if vals.shape[0] != x.shape[0]:
            raise ValueError("function values must cover the full enumeration")
    alpha = float(np.mean(vals * x[:, 0]))
    beta = float(np.mean(vals * x[:, 0] * x[:, 1]))
    gamma = float(np.mean(vals))
    return alpha, beta, gamma


def single_layer_loss_grad(p0: float, w: Array, b: float, x: Array, targets: Array):
    arg = x @ w + b
    pred = p0 + np.sin(arg)
    diff = pred - targets
    loss = float(np.mean(diff * diff))
    r = 2.0 * diff / x.shape[0]
    cos = np.cos(arg)
    return loss, float(np.sum(r)), (r * cos) @ x, float(np.sum(r * cos))


def single_layer_best_fit(d: int, n_restarts: int = 50, steps: int = 4000,
                          rng: RngStream | None = None, target_fn=target_fstar):
    """Multi-start minimization of E(p0 + sin(<w,x>+b) - target)^2.

    Adam on the exactly-enumerated objective; ties broken by lowest restart
    index. Returns (best_loss, (p0, w, b)).
    """
    if rng is None:
        rng = RngStream(0, 900)
    x = enumerate_signs(d)
    targets = np.asarray(target_fn(x), dtype=np.float64)
    best_loss = math.inf
    best = None
    lr, beta1, beta2, eps = 0.05, 0.9, 0.999, 1e-8
    for _ in range(n_restarts):
        p0 = float(rng.uniform(-1.0, 2.0))
        w = np.asarray(rng.uniform(-math.pi, math.pi, size=d))
        b = float(rng.uniform(-math.pi, math.pi))
        m = np.zeros(d + 2)
        v = np.zeros(d + 2)
        for t in range(1, steps + 1):
            loss, gp, gw, gb = single_layer_loss_grad(p0, w, b, x, targets)
            g = np.concatenate([[gp], gw, [gb]])
            m = beta1 * m + (1 - beta1) * g
            v = beta2 * v + (1 - beta2) * g * g
            upd = lr * (m / (1 - beta1**t)) / (np.sqrt(v / (1 - beta2**t)) + eps)
            p0 -= upd[0]
            w -= upd[1:-1]
            b -= upd[-1]
        loss, _, _, _ = single_layer_loss_grad(p0, w, b, x, targets)
        if loss < best_loss - 1e-15:
            best_loss = loss
            best = (p0, w.copy(), b)
    return best_loss, best


def expressivity_floor() -> float:
    """Distance^2 from (sqrt(3)/2, -1) to the |alpha|+|beta| <= 1 constraint set."""
    excess = (SQ3 / 2.0 + 1.0) - 1.0
    return (excess / math.sqrt(2.0)) ** 2
