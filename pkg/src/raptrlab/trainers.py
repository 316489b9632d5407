"""Training loops: baseline, RaPTr, progressive layer dropping, stacking, width-RaPTr.

All loops share one step shape: draw a fresh i.i.d. batch, forward/backward
through the (possibly gated) network, apply the optimizer, charge FLOPs for
the realized pattern. Parameters of layers dropped at a step are left
bit-identical, including Adam moments (the optimizer skips masked blocks
entirely, with per-slot step counters for bias correction).
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .netcore import ResidualNet, batch_squared_loss, h_sqrt
from .numkit import RngStream, format_float
from .subnet import StageSchedule, relative_flops, sample_gates


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int):
        super().__init__(f"loss became non-finite at step {step}")
        self.step = step


# ---------------------------------------------------------------------------
# optimizers
# ---------------------------------------------------------------------------


class Sgd:
    def __init__(self, momentum: float = 0.0):
        self.momentum = momentum
        self.slots: dict = {}

    def reset(self):
        self.slots = {}

    def update(self, key, param: np.ndarray, grad: np.ndarray, lr: float):
        if self.momentum:
            buf = self.slots.get(key)
            if buf is None:
                buf = np.zeros_like(param)
            buf = self.momentum * buf + grad
            self.slots[key] = buf
            param -= lr * buf
        else:
            param -= lr * grad


class Adam:
    def __init__(self, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.slots: dict = {}

    def reset(self):
        self.slots = {}

    def update(self, key, param: np.ndarray, grad: np.ndarray, lr: float):
        st = self.slots.get(key)
        if st is None:
            st = [np.zeros_like(param), np.zeros_like(param), 0]
            self.slots[key] = st
        m, v, _ = st
        st[2] += 1
        t = st[2]
        m *= self.beta1
        m += (1 - self.beta1) * grad
        v *= self.beta2
        v += (1 - self.beta2) * (grad * grad)
        denom = np.sqrt(v / (1 - self.beta2**t))
        denom += self.eps
        param -= (lr / (1 - self.beta1**t)) * m / denom


def make_optimizer(kind: str, **kwargs):
    if kind == "sgd":
        return Sgd(**kwargs)
    if kind == "adam":
        return Adam(**kwargs)
    raise ValueError(f"unknown optimizer {kind!r}")


def apply_gradients(net: ResidualNet, block_grads, head_grads, opt, lr: float,
                    block_mask=None):
    """One optimizer step; blocks with mask 0 are skipped untouched."""
    for i, block in enumerate(net.blocks):
        if block_mask is not None and not block_mask[i]:
            continue
        params = block.params()
        for name in sorted(params):
            opt.update(("block", i, name), params[name], block_grads[i][name], lr)
    head_params = net.head.params()
    for name in sorted(head_params):
        opt.update(("head", name), head_params[name], head_grads[name], lr)


# ---------------------------------------------------------------------------
# learning-rate schedule
# ---------------------------------------------------------------------------


@dataclass
class LrSchedule:
    """Linear warmup to peak, constant, optional decay inside the final stage."""

    peak_lr: float
    warmup_steps: int = 0
    final_decay: str = "none"      # none | linear | cosine
    cosine_floor: float = 0.1      # cosine decays to floor * peak

    def lr(self, step: int, final_stage_start: int, total_steps: int) -> float:
        if self.warmup_steps > 0 and step < self.warmup_steps:
            return self.peak_lr * (step + 1) / self.warmup_steps
        if self.final_decay == "none" or step < final_stage_start:
            return self.peak_lr
        span = max(total_steps - final_stage_start, 1)
        frac = (step - final_stage_start) / span
        if self.final_decay == "linear":
            return self.peak_lr * (1.0 - frac)
        if self.final_decay == "cosine":
            lo = self.cosine_floor * self.peak_lr
            return lo + 0.5 * (self.peak_lr - lo) * (1.0 + math.cos(math.pi * frac))
        raise ValueError(f"unknown decay {self.final_decay!r}")


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------

METRICS_HEADER = ["step", "stage", "train_loss", "eval_loss", "flops_ratio", "mean_active"]


@dataclass
class MetricRow:
    step: int
    stage: int
    train_loss: float
    eval_loss: float
    flops_ratio: float
    mean_active: float


@dataclass
class RunMetrics:
    rows: list = field(default_factory=list)
    total_flops_ratio: float = float("nan")   # cumulative over the whole run

    def add(self, row: MetricRow):
        if self.rows and row.step <= self.rows[-1].step:
            raise ValueError("metric steps must be strictly increasing")
        if self.rows and row.flops_ratio < self.rows[-1].flops_ratio - 1e-12:
            raise ValueError("cumulative flops ratio cannot decrease")
        self.rows.append(row)

    def final_eval_loss(self) -> float:
        return self.rows[-1].eval_loss

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(METRICS_HEADER)
            for r in self.rows:
                w.writerow([r.step, r.stage, format_float(r.train_loss),
                            format_float(r.eval_loss), format_float(r.flops_ratio),
                            format_float(r.mean_active)])


def _eval_points(total_steps: int, eval_every: int, extra=()):
    pts = set(range(eval_every - 1, total_steps, eval_every))
    pts.add(total_steps - 1)
    for p in extra:
        if 0 <= p < total_steps:
            pts.add(int(p))
    return pts


# ---------------------------------------------------------------------------
# training loops
# ---------------------------------------------------------------------------


def _step(net, x, y, opt, lr, scales=None, hidden_scales=None, block_mask=None):
    tape = net.forward(x, scales=scales, hidden_scales=hidden_scales)
    loss, upstream = batch_squared_loss(tape.output, y)
    if not math.isfinite(loss):
        return loss, None
    bg, hg, _ = net.backward(tape, upstream)
    apply_gradients(net, bg, hg, opt, lr, block_mask=block_mask)
    return loss, tape


def train_baseline(net: ResidualNet, data_fn, total_steps: int, opt, lrs: LrSchedule,
                   *, batch_size: int, rng: RngStream, eval_fn=None,
                   eval_every: int = 250, extra_eval_steps=(),
                   step_hook=None) -> RunMetrics:
    """Full-model training; equivalent to RaPTr with a single p=1 stage."""
    metrics = RunMetrics()
    pts = _eval_points(total_steps, eval_every, extra_eval_steps)
    flops_sum = 0.0
    for t in range(total_steps):
        x, y = data_fn(batch_size, rng)
        loss, tape = _step(net, x, y, opt, lrs.lr(t, 0, total_steps))
        if tape is None:
            raise TrainingDiverged(t)
        if step_hook is not None:
            step_hook(t, net)
        flops_sum += 1.0
        if t in pts:
            ev = float("nan") if eval_fn is None else eval_fn(net)
            metrics.add(MetricRow(t, 0, loss, ev, flops_sum / total_steps, float(net.L)))
    metrics.total_flops_ratio = flops_sum / total_steps
    return metrics


def train_raptr(net: ResidualNet, data_fn, schedule: StageSchedule, opt,
                lrs: LrSchedule, *, batch_size: int, rng: RngStream,
                gate_rng: RngStream, use_scaling: bool = True, eval_fn=None,
                eval_every: int = 250, extra_eval_steps=(),
                step_hook=None) -> RunMetrics:
    """Stagewise random-subnetwork training per the gate schedule.

    Each step samples a gate pattern for the current stage, derives output
    multipliers with h_sqrt (or plain 1s when use_scaling is off), and charges
    FLOPs for the realized active count. Evaluation always runs the full
    model with unit scales.
    """
    if schedule.L != net.L:
        raise ValueError("schedule depth does not match the network")
    metrics = RunMetrics()
    pts = _eval_points(schedule.total_steps, eval_every, extra_eval_steps)
    final_start = schedule.stages[-1].start
    flops_sum = 0.0
    active_sum = 0.0
    for t in range(schedule.total_steps):
        stage_idx, stage = schedule.stage_at(t)
        gates = stage.gates(net.L, gate_rng)
        while gates.active_count() == 0:
            gates = stage.gates(net.L, gate_rng)
        bits = gates.bits.astype(np.float64)
        scales = h_sqrt(gates.bits) if use_scaling else bits
        x, y = data_fn(batch_size, rng)
        loss, tape = _step(net, x, y, opt, lrs.lr(t, final_start, schedule.total_steps),
                           scales=scales, block_mask=gates.bits)
        if tape is None:
            raise TrainingDiverged(t)
        if step_hook is not None:
            step_hook(t, net)
        flops_sum += gates.active_count() / net.L
        active_sum += gates.active_count()
        if t in pts:
            ev = float("nan") if eval_fn is None else eval_fn(net)
            metrics.add(MetricRow(t, stage_idx, loss, ev,
                                  flops_sum / schedule.total_steps,
                                  active_sum / (t + 1)))
    metrics.total_flops_ratio = flops_sum / schedule.total_steps
    return metrics


def pld_alpha(t: int, total_steps: int, alpha_bar: float, gamma_f: float) -> float:
    """Keep-probability ceiling at step t: (1-abar) exp(-gamma t) + abar."""
    gamma = gamma_f / total_steps
    return (1.0 - alpha_bar) * math.exp(-gamma * t) + alpha_bar


def pld_keep_probs(t: int, total_steps: int, alpha_bar: float, gamma_f: float,
                   L: int) -> np.ndarray:
    """Per-layer keep probabilities: start at 1, decay by (1-alpha_t)/L per layer."""
    alpha_t = pld_alpha(t, total_steps, alpha_bar, gamma_f)
    p_d = (1.0 - alpha_t) / L
    return 1.0 - p_d * np.arange(L)


def pld_longrun_flops(alpha_bar: float) -> float:
    """Large-depth long-run FLOPs ratio 1 - (1-abar)/2."""
    if not 0.0 < alpha_bar <= 1.0:
        raise ValueError(f"alpha_bar must lie in (0, 1], got {alpha_bar}")
    return 1.0 - (1.0 - alpha_bar) / 2.0


def train_pld(net: ResidualNet, data_fn, alpha_bar: float, gamma_f: float,
              total_steps: int, opt, lrs: LrSchedule, *, batch_size: int,
              rng: RngStream, gate_rng: RngStream, eval_fn=None,
              eval_every: int = 250, extra_eval_steps=(),
              step_hook=None) -> RunMetrics:
    """Progressive layer dropping: keep probability decays over time and depth.

    Each kept layer's output is rescaled by 1/p for its current keep
    probability p (inverted-dropout convention from the original recipe).
    """
    if not 0.0 < alpha_bar <= 1.0:
        raise ValueError(f"alpha_bar must lie in (0, 1], got {alpha_bar}")
    if gamma_f <= 0:
        raise ValueError("gamma_f must be positive")
    metrics = RunMetrics()
    pts = _eval_points(total_steps, eval_every, extra_eval_steps)
    flops_sum = 0.0
    active_sum = 0.0
    for t in range(total_steps):
        probs = pld_keep_probs(t, total_steps, alpha_bar, gamma_f, net.L)
        keep = (gate_rng.generator.random(net.L) < probs)
        if not keep.any():
            keep[0] = True
        scales = np.where(keep, 1.0 / np.clip(probs, 1e-12, None), 0.0)
        x, y = data_fn(batch_size, rng)
        loss, tape = _step(net, x, y, opt, lrs.lr(t, total_steps, total_steps),
                           scales=scales, block_mask=keep.astype(np.uint8))
        if tape is None:
            raise TrainingDiverged(t)
        if step_hook is not None:
            step_hook(t, net)
        flops_sum += keep.sum() / net.L
        active_sum += keep.sum()
        if t in pts:
            ev = float("nan") if eval_fn is None else eval_fn(net)
            metrics.add(MetricRow(t, 0, loss, ev, flops_sum / total_steps,
                                  active_sum / (t + 1)))
    metrics.total_flops_ratio = flops_sum / total_steps
    return metrics


# ---------------------------------------------------------------------------
# depth growth operators
# ---------------------------------------------------------------------------


def grow_topstack(net: ResidualNet, new_L: int) -> ResidualNet:
    """Repeat the top (new_L - L) blocks on top, in order."""
    if new_L <= net.L:
        raise ValueError(f"new depth {new_L} must exceed current {net.L}")
    extra = new_L - net.L
    if extra > net.L:
        raise ValueError("cannot top-stack more layers than currently exist")
    blocks = [b.copy() for b in net.blocks] + [b.copy() for b in net.blocks[-extra:]]
    return ResidualNet(blocks, net.head.copy(), net.composition)


def grow_double(net: ResidualNet) -> ResidualNet:
    """Stack a copy of the whole network on top: (1..L) -> (1..L, 1..L)."""
    blocks = [b.copy() for b in net.blocks] + [b.copy() for b in net.blocks]
    return ResidualNet(blocks, net.head.copy(), net.composition)


def grow_interpolate(net: ResidualNet, new_L: int) -> ResidualNet:
    """Insert a copy of each of the top (new_L - L) blocks right after its source."""
    if new_L <= net.L:
        raise ValueError(f"new depth {new_L} must exceed current {net.L}")
    extra = new_L - net.L
    if extra > net.L:
        raise ValueError("cannot interpolate more layers than currently exist")
    sources = set(range(net.L - extra, net.L))
    blocks = []
    for i, b in enumerate(net.blocks):
        blocks.append(b.copy())
        if i in sources:
            blocks.append(b.copy())
    return ResidualNet(blocks, net.head.copy(), net.composition)


GROWTH_OPS = {"topstack": grow_topstack, "double": grow_double,
              "interpolate": grow_interpolate}


def train_stacking(net_factory, growth_op: str, sizes, total_steps: int,
                   opt, lrs: LrSchedule, data_fn, *, batch_size: int,
                   rng: RngStream, eval_fn=None, eval_every: int = 250,
                   extra_eval_steps=(), step_hook=None) -> tuple[ResidualNet, RunMetrics]:
    """Gradual stacking: train small, grow depth at each boundary, continue.

    `net_factory(depth)` builds a fresh net of the given depth; growth copies
    parameters per the named operator. FLOPs are charged current_L/final_L
    per step, and optimizer slots reset at growth (no moment transfer).
    """
    sizes = list(sizes)
    if any(b <= a for a, b in zip(sizes, sizes[1:])):
        raise ValueError("stacking sizes must be strictly increasing")
    if growth_op not in GROWTH_OPS:
        raise ValueError(f"unknown growth operator {growth_op!r}")
    grow = GROWTH_OPS[growth_op]
    final_L = sizes[-1]
    k = len(sizes)
    base = total_steps // k
    lengths = [base] * (k - 1) + [total_steps - base * (k - 1)]
    net = net_factory(sizes[0])
    metrics = RunMetrics()
    pts = _eval_points(total_steps, eval_every, extra_eval_steps)
    final_start = total_steps - lengths[-1]
    flops_sum = 0.0
    t = 0
    for stage_idx, (size, length) in enumerate(zip(sizes, lengths)):
        if net.L != size:
            net = grow(net) if growth_op == "double" else grow(net, size)
            if net.L != size:
                raise ValueError(f"growth operator produced depth {net.L}, wanted {size}")
            opt.reset()
        for _ in range(length):
            x, y = data_fn(batch_size, rng)
            loss, tape = _step(net, x, y, opt, lrs.lr(t, final_start, total_steps))
            if tape is None:
                raise TrainingDiverged(t)
            if step_hook is not None:
                step_hook(t, net)
            flops_sum += net.L / final_L
            if t in pts:
                ev = float("nan") if eval_fn is None else eval_fn(net)
                metrics.add(MetricRow(t, stage_idx, loss, ev, flops_sum / total_steps,
                                      float(net.L)))
            t += 1
    metrics.total_flops_ratio = flops_sum / total_steps
    return net, metrics


def train_width_raptr(net: ResidualNet, data_fn, group_schedule, total_steps: int,
                      opt, lrs: LrSchedule, *, n_groups: int = 4, batch_size: int,
                      rng: RngStream, gate_rng: RngStream, eval_fn=None,
                      eval_every: int = 250, extra_eval_steps=(),
                      step_hook=None) -> RunMetrics:
    """Stagewise training of random hidden-unit groups inside each MLP block.

    group_schedule is a list of (start_step, k_active); k_active of the
    n_groups sub-MLPs are kept per layer per step, rescaled by G/k. Blocks
    must be ReluMlp with hidden width divisible by n_groups.
    """
    for b in net.blocks:
        if b.kind != "relu_mlp" or b.m % n_groups:
            raise ValueError("width RaPTr needs ReluMlp blocks with m divisible by G")
    ks = [k for _, k in group_schedule]
    if any(b < a for a, b in zip(ks, ks[1:])) or ks[-1] != n_groups:
        raise ValueError("group counts must be nondecreasing and end at G")
    m = net.blocks[0].m
    gsize = m // n_groups
    metrics = RunMetrics()
    pts = _eval_points(total_steps, eval_every, extra_eval_steps)
    final_start = group_schedule[-1][0]
    flops_sum = 0.0
    active_sum = 0.0
    for t in range(total_steps):
        k = ks[0]
        for start, kk in group_schedule:
            if t >= start:
                k = kk
        hidden_scales = []
        for _ in range(net.L):
            mask = np.zeros(m)
            chosen = gate_rng.choice_without_replacement(n_groups, k)
            for g in chosen:
                mask[g * gsize:(g + 1) * gsize] = n_groups / k
            hidden_scales.append(mask)
        x, y = data_fn(batch_size, rng)
        loss, tape = _step(net, x, y, opt, lrs.lr(t, final_start, total_steps),
                           hidden_scales=hidden_scales)
        if tape is None:
            raise TrainingDiverged(t)
        if step_hook is not None:
            step_hook(t, net)
        flops_sum += k / n_groups
        active_sum += k / n_groups * net.L
        if t in pts:
            ev = float("nan") if eval_fn is None else eval_fn(net)
            metrics.add(MetricRow(t, 0, loss, ev, flops_sum / total_steps,
                                  active_sum / (t + 1)))
    metrics.total_flops_ratio = flops_sum / total_steps
    return metrics
