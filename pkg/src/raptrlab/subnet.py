"""(p, I)-subnetwork sampling, stage schedules and FLOPs accounting.

A stage schedule is named by mean subnetwork sizes (e.g. 12-16-20-24 for a
24-layer model): stage s keeps the layers in I_s and every other layer
independently with probability p_s = (size_s - |I_s|)/(L - |I_s|). Stage
boundaries are half-open, [T_s, T_{s+1}); sizes must be nondecreasing and
fixed sets nested, except inside a designated full-model warmup prefix.

Layer indices in fixed sets are 0-based internally; config files use the
conventional 1-based indices and are converted at the boundary.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .numkit import RngStream


class ScheduleError(ValueError):
    """Invalid or infeasible stage schedule."""


@dataclass(frozen=True)
class GatePattern:
    bits: np.ndarray            # uint8, length L
    fixed: frozenset = frozenset()

    def __post_init__(self):
        bits = np.asarray(self.bits, dtype=np.uint8)
        object.__setattr__(self, "bits", bits)
        for i in self.fixed:
            if not 0 <= i < bits.shape[0]:
                raise ValueError(f"fixed index {i} out of range for L={bits.shape[0]}")
            if bits[i] != 1:
                raise ValueError("fixed layers must be gated in")

    @property
    def L(self) -> int:
        return int(self.bits.shape[0])

    def active_count(self) -> int:
        return int(self.bits.sum())

    def active_indices(self) -> np.ndarray:
        return np.flatnonzero(self.bits)


def sample_gates(p: float, fixed, L: int, rng: RngStream) -> GatePattern:
    """Keep layers in `fixed` always, others independently with probability p."""
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"p must lie in [0, 1], got {p}")
    fixed = frozenset(int(i) for i in fixed)
    for i in fixed:
        if not 0 <= i < L:
            raise ValueError(f"fixed index {i} out of range for L={L}")
    bits = rng.bernoulli(p, size=L)
    for i in fixed:
        bits[i] = 1
    return GatePattern(bits, fixed)


def relative_flops(p: float, fixed, L: int) -> float:
    """Expected (|I| + (L-|I|)p)/L forward cost relative to the full model."""
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"p must lie in [0, 1], got {p}")
    k = len(frozenset(fixed))
    if k > L:
        raise ValueError("fixed set larger than the network")
    return (k + (L - k) * p) / L


@dataclass(frozen=True)
class Stage:
    start: int
    p: float
    fixed: frozenset
    size: float          # mean active-layer count |I| + (L-|I|)p

    def gates(self, L: int, rng: RngStream) -> GatePattern:
        return sample_gates(self.p, self.fixed, L, rng)


@dataclass(frozen=True)
class StageSchedule:
    stages: tuple
    total_steps: int
    L: int
    warmup_stages: int = 0   # leading stages exempt from the monotonicity check

    def __post_init__(self):
        if not self.stages:
            raise ScheduleError("schedule needs at least one stage")
        if self.stages[0].start != 0:
            raise ScheduleError("first stage must start at step 0")
        starts = [s.start for s in self.stages]
        if any(b <= a for a, b in zip(starts, starts[1:])):
            raise ScheduleError("stage starts must be strictly increasing")
        if starts[-1] >= self.total_steps:
            raise ScheduleError("final stage starts beyond the run horizon")
        monotone = self.stages[self.warmup_stages:]
        for a, b in zip(monotone, monotone[1:]):
            if b.p < a.p:
                raise ScheduleError(f"p must be nondecreasing across stages ({a.p} -> {b.p})")
            if not a.fixed <= b.fixed:
                raise ScheduleError("fixed sets must be nested across stages")

    @property
    def k(self) -> int:
        return len(self.stages)

    def boundaries(self) -> list[int]:
        return [s.start for s in self.stages[1:]]

    def stage_lengths(self) -> list[int]:
        starts = [s.start for s in self.stages] + [self.total_steps]
        return [b - a for a, b in zip(starts, starts[1:])]

    def stage_at(self, step: int) -> tuple[int, Stage]:
        """(stage_index, stage) containing `step`; boundaries belong to the later stage."""
        if not 0 <= step < self.total_steps:
            raise ValueError(f"step {step} outside [0, {self.total_steps})")
        idx = 0
        for i, s in enumerate(self.stages):
            if step >= s.start:
                idx = i
        return idx, self.stages[idx]


def _stage_params(size: float, fixed, L: int) -> tuple[float, frozenset]:
    fixed = frozenset(int(i) for i in fixed)
    for i in fixed:
        if not 0 <= i < L:
            raise ScheduleError(f"fixed index {i} out of range for L={L}")
    if size > L:
        raise ScheduleError(f"stage size {size} exceeds depth {L}")
    if size < len(fixed):
        raise ScheduleError(f"stage size {size} below fixed-set size {len(fixed)}")
    if L == len(fixed):
        return 1.0, fixed
    return (size - len(fixed)) / (L - len(fixed)), fixed


def _build(sizes, lengths, L, total_steps, fixed_sets, warmup_steps) -> StageSchedule:
    if len(sizes) != len(lengths):
        raise ScheduleError("one length per stage required")
    if any(a > b for a, b in zip(sizes, sizes[1:])):
        raise ScheduleError("stage sizes must be nondecreasing")
    if sizes[-1] != L:
        raise ScheduleError("final stage must train the full model")
    stages = []
    start = warmup_steps
    warmup_stages = 0
    if warmup_steps:
        stages.append(Stage(0, 1.0, frozenset(fixed_sets[-1]), float(L)))
        warmup_stages = 1
    for size, length, fixed in zip(sizes, lengths, fixed_sets):
        if length <= 0:
            raise ScheduleError("every stage needs at least one step")
        p, fx = _stage_params(size, fixed, L)
        stages.append(Stage(start, p, fx, float(size)))
        start += length
    if start != total_steps:
        raise ScheduleError("stage lengths must cover the run exactly")
    return StageSchedule(tuple(stages), total_steps, L, warmup_stages)


def _fixed_per_stage(fixed, k):
    if fixed is None:
        return [frozenset()] * k
    if fixed and isinstance(next(iter(fixed)), (frozenset, set, list, tuple)):
        sets = [frozenset(f) for f in fixed]
        if len(sets) != k:
            raise ScheduleError("need one fixed set per stage")
        return sets
    return [frozenset(fixed)] * k


def build_equal(sizes, L: int, total_steps: int, fixed=None,
                warmup_steps: int = 0) -> StageSchedule:
    """k stages of equal length T/k (remainder to the final stage)."""
    sizes = list(sizes)
    k = len(sizes)
    body = total_steps - warmup_steps
    base = body // k
    if base <= 0:
        raise ScheduleError("not enough steps for the requested stages")
    lengths = [base] * (k - 1) + [body - base * (k - 1)]
    return _build(sizes, lengths, L, total_steps, _fixed_per_stage(fixed, k), warmup_steps)


def build_proportional(sizes, L: int, total_steps: int, fixed=None,
                       warmup_steps: int = 0) -> StageSchedule:
    """Stage s gets length T*s/sum(1..k)."""
    sizes = list(sizes)
    k = len(sizes)
    body = total_steps - warmup_steps
    denom = k * (k + 1) // 2
    lengths = [body * (s + 1) // denom for s in range(k - 1)]
    lengths.append(body - sum(lengths))
    if any(l <= 0 for l in lengths):
        raise ScheduleError("not enough steps for the requested stages")
    return _build(sizes, lengths, L, total_steps, _fixed_per_stage(fixed, k), warmup_steps)


def schedule_avg_length(schedule: StageSchedule) -> float:
    """Time-weighted mean active-layer count over the run."""
    total = 0.0
    for stage, length in zip(schedule.stages, schedule.stage_lengths()):
        total += length * stage.size
    return total / schedule.total_steps


def solve_target_average(schedule: StageSchedule, target_avg: float,
                         round_to: int = 1) -> tuple[StageSchedule, int]:
    """Shift steps between the first k-1 stages and the final stage so the
    time-weighted mean subnetwork size hits target_avg.

    Removes x steps from each non-final stage and adds (k-1)x to the final
    one (x may be negative). x is rounded to `round_to` steps; the paper's
    published schedules quantize to kilosteps. Returns (schedule, x).
    """
    k = schedule.k
    if k < 2:
        if abs(schedule_avg_length(schedule) - target_avg) > 1e-12:
            raise ScheduleError("single-stage schedule cannot be retargeted")
        return schedule, 0
    sizes = [s.size for s in schedule.stages]
    lengths = schedule.stage_lengths()
    lo = min(sizes)
    hi = max(sizes)
    if not lo <= target_avg <= hi:
        raise ScheduleError(
            f"target average {target_avg} outside achievable range [{lo}, {hi}]")
    current = sum(l * s for l, s in zip(lengths, sizes))
    denom = (k - 1) * sizes[-1] - sum(sizes[:-1])
    if denom == 0:
        raise ScheduleError("degenerate schedule: shifting steps cannot change the average")
    x = (target_avg * schedule.total_steps - current) / denom
    x = int(round(x / round_to)) * round_to
    new_lengths = [l - x for l in lengths[:-1]] + [lengths[-1] + (k - 1) * x]
    if any(l <= 0 for l in new_lengths):
        raise ScheduleError("target average infeasible: a stage length would vanish")
    stages = []
    start = 0
    for stage, length in zip(schedule.stages, new_lengths):
        stages.append(Stage(start, stage.p, stage.fixed, stage.size))
        start += length
    return StageSchedule(tuple(stages), schedule.total_steps, schedule.L,
                         schedule.warmup_stages), x


def schedule_from_config(cfg: dict, L: int, total_steps: int) -> StageSchedule:
    """Build a schedule from its JSON form.

    {"stages": [{"size": 12, "fixed": [1, 24]}, ...], "mode": "proportional",
     "target_avg": 20, "warmup_steps": 0}; fixed-layer indices are 1-based.
    """
    stages = cfg.get("stages")
    if not stages:
        raise ScheduleError("schedule config needs a 'stages' list")
    sizes = [s["size"] for s in stages]
    fixed = [frozenset(int(i) - 1 for i in s.get("fixed", [])) for s in stages]
    mode = cfg.get("mode", "equal")
    warmup = int(cfg.get("warmup_steps", 0))
    if mode == "equal":
        sched = build_equal(sizes, L, total_steps, fixed, warmup)
    elif mode == "proportional":
        sched = build_proportional(sizes, L, total_steps, fixed, warmup)
    else:
        raise ScheduleError(f"unknown schedule mode {mode!r}")
    target = cfg.get("target_avg")
    if target is not None:
        sched, _ = solve_target_average(sched, float(target),
                                        int(cfg.get("round_to", 1)))
    return sched
