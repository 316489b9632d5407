"""Shared-base subnetwork parameterization.

A k-layer active subnetwork is expressed through a k x L coefficient matrix
C: shared layer r uses parameters sum_j C[r, j] theta_j, so every layer's
parameters participate in every backward pass (gradients scatter back as
grad_j = sum_r C[r, j] grad_sh_r, exactly zero for unselected layers). This
is the algebra that makes random layer selection work under data-parallel
training; here it is modelled single-process and checked for exact
equivalence against the gated forward/backward path.

Output-side gate scales (h_sqrt) can be folded into the rows: the scale
multiplies the block's output-linear tensor (w for linear blocks, c for the
MLP block), which reproduces the scaled gated computation exactly.
"""

from __future__ import annotations

import numpy as np

from .netcore import ResidualNet, h_sqrt
from .numkit import Array


OUTPUT_TENSOR = {"linear": "w", "linear_ln": "w", "relu_mlp": "c"}


def coeffs_for_gates(gates) -> Array:
    """One-hot k x L rows selecting the active layers in increasing order."""
    bits = np.asarray(gates, dtype=np.int64).ravel()
    active = np.flatnonzero(bits)
    if active.size == 0:
        raise ValueError("empty gate set has no shared subnetwork")
    c = np.zeros((active.size, bits.shape[0]))
    c[np.arange(active.size), active] = 1.0
    return c


def active_set_of(coeffs: Array) -> list[int]:
    """Recover the selected layer indices from one-hot rows."""
    out = []
    for row in np.asarray(coeffs):
        nz = np.flatnonzero(row)
        if nz.size != 1 or row[nz[0]] != 1.0:
            raise ValueError("coefficient row is not one-hot")
        out.append(int(nz[0]))
    if any(b <= a for a, b in zip(out, out[1:])):
        raise ValueError("rows must select strictly increasing layers")
    return out


def _effective_coeffs(coeffs: Array, row_scales, tensor_name: str,
                      block_kind: str) -> Array:
    c = np.asarray(coeffs, dtype=np.float64)
    if row_scales is None or tensor_name != OUTPUT_TENSOR[block_kind]:
        return c
    return c * np.asarray(row_scales, dtype=np.float64)[:, None]


def make_shared(net: ResidualNet, coeffs: Array,
                row_scales=None) -> ResidualNet:
    """Build the k-layer shared network with combined parameters.

    row_scales, when given, folds a per-row output multiplier into the
    output-linear tensor of each shared layer.
    """
    c = np.asarray(coeffs, dtype=np.float64)
    if c.ndim != 2 or c.shape[1] != net.L:
        raise ValueError(f"coefficients must be k x {net.L}, got {c.shape}")
    kinds = {b.kind for b in net.blocks}
    if len(kinds) != 1:
        raise ValueError("shared-base combination needs a uniform block kind")
    stacked = {name: np.stack([b.params()[name] for b in net.blocks])
               for name in net.blocks[0].params()}
    shared_blocks = []
    kind = net.blocks[0].kind
    for r in range(c.shape[0]):
        proto = net.blocks[0].copy()
        for name, arrs in stacked.items():
            eff = _effective_coeffs(c, row_scales, name, kind)[r]
            proto.params()[name][...] = np.tensordot(eff, arrs, axes=(0, 0))
        shared_blocks.append(proto)
    return ResidualNet(shared_blocks, net.head.copy(), net.composition)


def scatter_grads(coeffs: Array, shared_grads, net: ResidualNet,
                  row_scales=None) -> list[dict[str, Array]]:
    """Distribute shared-layer gradients back to all L layers.

    grad_j = sum_r C_eff[r, j] grad_sh_r per tensor; layers outside every
    row's support receive exact-zero arrays.
    """
    c = np.asarray(coeffs, dtype=np.float64)
    if len(shared_grads) != c.shape[0]:
        raise ValueError("one gradient dict per shared layer required")
    kind = net.blocks[0].kind
    out = []
    for j, block in enumerate(net.blocks):
        grads = {}
        for name, param in block.params().items():
            eff = _effective_coeffs(c, row_scales, name, kind)
            g = np.zeros_like(param)
            for r in range(c.shape[0]):
                if eff[r, j] != 0.0:
                    g += eff[r, j] * shared_grads[r][name]
            grads[name] = g
        out.append(grads)
    return out


def _probe_loss(output: Array):
    """Scalar loss sum(out^2) with its upstream gradient; head-agnostic."""
    out = np.asarray(output, dtype=np.float64)
    return float(np.sum(out * out)), 2.0 * out


def equivalence_check(net: ResidualNet, x: Array, gates,
                      fold_scales: bool = False) -> float:
    """Max relative gradient discrepancy between gated and shared-base paths.

    The gated path runs the full net with per-layer multipliers (h_sqrt
    scales when fold_scales, else plain 0/1 gates); the shared path runs the
    k-layer combined network and scatters gradients back. Returns the
    largest |a - b| / (|a| + 1e-30) over all parameters.
    """
    bits = np.asarray(gates, dtype=np.int64).ravel()
    scales = h_sqrt(bits) if fold_scales else bits.astype(np.float64)
    tape = net.forward(x, scales=scales)
    loss_a, up = _probe_loss(tape.output)
    bg_a, hg_a, _ = net.backward(tape, up)

    coeffs = coeffs_for_gates(bits)
    row_scales = scales[np.flatnonzero(bits)] if fold_scales else None
    shared = make_shared(net, coeffs, row_scales=row_scales)
    tape_s = shared.forward(x)
    loss_b, up_s = _probe_loss(tape_s.output)
    bg_sh, hg_b, _ = shared.backward(tape_s, up_s)
    bg_b = scatter_grads(coeffs, bg_sh, net, row_scales=row_scales)

    worst = abs(loss_a - loss_b) / (abs(loss_a) + 1e-30)
    for ga, gb in zip(bg_a, bg_b):
        for name in ga:
            num = np.abs(ga[name] - gb[name])
            den = np.abs(ga[name]) + 1e-30
            worst = max(worst, float(np.max(num / den)))
    for name in hg_a:
        num = np.abs(hg_a[name] - hg_b[name])
        worst = max(worst, float(np.max(num / (np.abs(hg_a[name]) + 1e-30))))
    return worst


def flops_overhead(batch: int, L: int) -> float:
    """Relative backprop cost of a random vs static k-layer subnetwork: 1 + 2L/(2B+1)."""
    if batch < 1:
        raise ValueError("batch must be at least 1")
    if L < 0:
        raise ValueError("negative depth")
    return 1.0 + 2.0 * L / (2.0 * batch + 1.0)


def combine_madds(k: int, L: int, d: int) -> int:
    """Multiply-adds of one dense make_shared pass on d x d linear layers."""
    return k * L * d * d


def scatter_madds(k: int, L: int, d: int) -> int:
    return k * L * d * d


def base_backprop_madds(k: int, batch: int, d: int) -> int:
    """Forward + backward + descent madds of a k-layer static linear subnet."""
    return 2 * k * batch * d * d + k * d * d


def overhead_from_counts(k: int, L: int, batch: int, d: int) -> float:
    base = base_backprop_madds(k, batch, d)
    extra = combine_madds(k, L, d) + scatter_madds(k, L, d)
    return (base + extra) / base


def grouped_coeffs(L: int, k: int, n_groups: int) -> Array:
    """Block-sparse support template: shared layer r combines only its group.

    Layers are split into n_groups consecutive groups of L/n_groups; shared
    layers are spread evenly over groups, so each row's support is exactly
    L/n_groups (one-hot when n_groups == L). Returns a k x L 0/1 mask whose
    nonzero pattern bounds the combination cost.
    """
    if L % n_groups:
        raise ValueError(f"L={L} not divisible into {n_groups} groups")
    if k < 1 or k > L:
        raise ValueError(f"need 1 <= k <= L, got k={k}")
    if n_groups > L:
        raise ValueError("more groups than layers")
    gsize = L // n_groups
    mask = np.zeros((k, L))
    for r in range(k):
        g = r * n_groups // k
        mask[r, g * gsize:(g + 1) * gsize] = 1.0
    return mask
