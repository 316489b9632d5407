"""Drop-one stability probes and the linear-network experiment suite.

Psi_l is the output perturbation from skipping layer l: ||F_{-l}(x) - F(x)||
on backbone outputs, computed with independent forward passes (one per
dropped layer). The loss-gap machinery compares the full-model loss with the
average loss over the L drop-one subnetworks, and checks it against the
relative-Lipschitz bound (mu/L) E[ sum_l Psi_l(x) / ||F(x)|| ].
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .netcore import IdentityHead, Linear, LinearLn, NormalizedLinear, ResidualNet
from .numkit import Array, RngStream, ols_slope


@dataclass
class StabilityProfile:
    psi: Array            # mean over probes of ||F_{-l}(x) - F(x)||, length L
    layer_norms: Array    # mean over probes of ||y^(l)||, length L+1 (l = 0..L)
    out_norm_mean: float
    out_norm_min: float
    out_norm_max: float
    n_probes: int


def _backbone(net: ResidualNet, x: Array, scales=None) -> Array:
    return net.forward(x, scales=scales).ys[-1]


def drop_one_scales(L: int, drop: int) -> Array:
    s = np.ones(L)
    s[drop] = 0.0
    return s


def psi_profile(net: ResidualNet, probes: Array) -> StabilityProfile:
    """Drop-one stability and norm profile, averaged over probe inputs."""
    probes = np.atleast_2d(np.asarray(probes, dtype=np.float64))
    tape = net.forward(probes)
    full = tape.ys[-1]
    out_norms = np.linalg.norm(full, axis=1)
    psi = np.zeros(net.L)
    for l in range(net.L):
        dropped = _backbone(net, probes, drop_one_scales(net.L, l))
        psi[l] = float(np.mean(np.linalg.norm(dropped - full, axis=1)))
    return StabilityProfile(
        psi=psi,
        layer_norms=net.layer_norms(tape),
        out_norm_mean=float(np.mean(out_norms)),
        out_norm_min=float(np.min(out_norms)),
        out_norm_max=float(np.max(out_norms)),
        n_probes=probes.shape[0],
    )


def norm_profile(net: ResidualNet, x: Array) -> Array:
    """||y^(l)|| for l = 0..L on a single input (or mean over a batch)."""
    return net.layer_norms(net.forward(x))


def loss_gap(net: ResidualNet, eval_x: Array, eval_y, loss_fn):
    """(L_full, L_dropone_avg, gap) with gap = L_full - L_dropone_avg.

    loss_fn(outputs, targets) -> per-example losses; the head is applied to
    both the full model and every drop-one subnetwork.
    """
    eval_x = np.atleast_2d(np.asarray(eval_x, dtype=np.float64))
    full_out = net.forward(eval_x).output
    l_full = float(np.mean(loss_fn(full_out, eval_y)))
    dropped = []
    for l in range(net.L):
        out = net.forward(eval_x, drop_one_scales(net.L, l)).output
        dropped.append(float(np.mean(loss_fn(out, eval_y))))
    l_drop = float(np.mean(dropped))
    return l_full, l_drop, l_full - l_drop


def bound_rhs(net: ResidualNet, eval_x: Array, mu: float):
    """(value, stderr): Monte-Carlo estimate of (mu/L) E[sum_l Psi_l/||F||]."""
    if mu <= 0:
        raise ValueError("mu must be positive")
    eval_x = np.atleast_2d(np.asarray(eval_x, dtype=np.float64))
    full = _backbone(net, eval_x)
    norms = np.linalg.norm(full, axis=1)
    if np.any(norms == 0):
        raise ValueError("degenerate input: zero backbone output norm")
    per_x = np.zeros(eval_x.shape[0])
    for l in range(net.L):
        dropped = _backbone(net, eval_x, drop_one_scales(net.L, l))
        per_x += np.linalg.norm(dropped - full, axis=1)
    vals = mu / net.L * per_x / norms
    n = eval_x.shape[0]
    stderr = float(np.std(vals, ddof=1) / math.sqrt(n)) if n > 1 else 0.0
    return float(np.mean(vals)), stderr


def normalized_stability_sum(net: ResidualNet, eval_x: Array):
    """E_x[(1/L) sum_l Psi_l(x)/||F(x)||] -- bound_rhs at mu = 1."""
    return bound_rhs(net, eval_x, 1.0)


def estimate_mu(head, loss_fn, outputs: Array, targets, n_perturb: int,
                radius_grid, rng: RngStream) -> float:
    """Empirical relative-Lipschitz constant of loss(head(.)).

    Samples perturbations eta with ||eta|| = r ||z|| over the radius grid and
    returns the largest (L(z+eta) - L(z)) * ||z|| / ||eta||.
    """
    outputs = np.atleast_2d(np.asarray(outputs, dtype=np.float64))
    base_out, _ = head.forward(outputs)
    base = np.asarray(loss_fn(base_out, targets), dtype=np.float64)
    norms = np.linalg.norm(outputs, axis=1)
    best = 0.0
    for r in radius_grid:
        for _ in range(n_perturb):
            eta = rng.generator.standard_normal(outputs.shape)
            eta *= (r * norms / np.linalg.norm(eta, axis=1))[:, None]
            pert_out, _ = head.forward(outputs + eta)
            pert = np.asarray(loss_fn(pert_out, targets), dtype=np.float64)
            ratios = (pert - base) / r
            best = max(best, float(np.max(ratios)))
    return best


def fit_scaling_exponent(Ls, gaps) -> float:
    """Slope of log|gap| against log L by least squares."""
    Ls = np.asarray(Ls, dtype=np.float64)
    gaps = np.asarray(gaps, dtype=np.float64)
    if Ls.size < 3:
        raise ValueError("need at least three points to fit an exponent")
    if np.any(gaps <= 0):
        raise ValueError("gap values must be positive for a log-log fit")
    return ols_slope(np.log(Ls), np.log(gaps))


# ---------------------------------------------------------------------------
# linear-network experiments
# ---------------------------------------------------------------------------


@dataclass
class LinearNetConfig:
    L: int
    d: int
    residual: bool = True
    layernorm: bool = True
    tau: float = 0.0
    shared_kind: str = "normalized_gaussian"   # or "gapped" (lambda_2 = 1 - delta)
    shared_norm: float | None = None   # ||A||_2; default 1/sqrt(d) keeps the shared
                                       # part subdominant over the tested depths,
                                       # the regime with tau-uniform gap scaling
    delta: float = 0.2          # spectral gap, used by the gapped shared matrix
    head_dim: int = 16

    def __post_init__(self):
        if not 0.0 <= self.tau <= 1.0:
            raise ValueError("tau must lie in [0, 1]")
        if self.shared_kind not in ("normalized_gaussian", "gapped"):
            raise ValueError(f"unknown shared matrix kind {self.shared_kind!r}")

    def resolved_shared_norm(self) -> float:
        if self.shared_norm is not None:
            return self.shared_norm
        return 1.0 if self.shared_kind == "gapped" else self.d ** -0.5


def shared_matrix_gapped(d: int, delta: float, rng: RngStream) -> Array:
    """Symmetric matrix with top eigenvalue 1 and second eigenvalue 1 - delta.

    The explicit spectral surgery gives the power-method-style alignment
    regime its assumed gap.
    """
    g = rng.generator.standard_normal((d, d))
    q, _ = np.linalg.qr(g)
    eig = np.empty(d)
    eig[0] = 1.0
    if d > 1:
        eig[1] = 1.0 - delta
    if d > 2:
        eig[2:] = np.sort(rng.uniform(0.0, 1.0 - delta, size=d - 2))[::-1]
    return (q * eig) @ q.T


def shared_matrix_normalized(d: int, rng: RngStream) -> Array:
    """Random Gaussian rescaled to spectral norm 1 (no imposed eigengap)."""
    g = rng.generator.standard_normal((d, d))
    return g / np.linalg.norm(g, 2)


def build_linear_net(cfg: LinearNetConfig, rng: RngStream,
                     head: str = "normalized") -> tuple[ResidualNet, Array]:
    """Network with W_l = sqrt(tau) A + sqrt(1-tau) G^(l), G ~ N(0, 1/d).

    Warns via the returned config when d is small relative to |S| L log(1/.)
    -- callers probing the random regime should keep d comfortably large.
    Returns (net, top eigenvector of A).
    """
    if cfg.shared_kind == "gapped":
        a = shared_matrix_gapped(cfg.d, cfg.delta, rng.child(101))
        top = np.linalg.eigh(a)[1][:, -1]
    else:
        a = shared_matrix_normalized(cfg.d, rng.child(101))
        top = np.linalg.svd(a)[0][:, 0]
    a = a * cfg.resolved_shared_norm()
    block_cls = LinearLn if cfg.layernorm else Linear
    blocks = []
    for l in range(cfg.L):
        g = rng.gauss(cfg.d, cfg.d, std=1.0 / np.sqrt(cfg.d))
        w = np.sqrt(cfg.tau) * a + np.sqrt(1.0 - cfg.tau) * g
        blocks.append(block_cls(w))
    if head == "normalized":
        h = NormalizedLinear.init(cfg.head_dim, cfg.d, rng.child(102))
    else:
        h = IdentityHead()
    composition = "residual" if cfg.residual else "plain"
    net = ResidualNet(blocks, h, composition)
    return net, top


def distance_loss(outputs: Array, targets: Array) -> Array:
    """Per-example ||output - target||; Lipschitz-1 in the head output."""
    return np.linalg.norm(np.atleast_2d(outputs) - np.atleast_2d(targets), axis=1)


@dataclass
class LinearGapSummary:
    loss_full: float
    loss_dropone: float
    gap: float
    bound: float
    bound_stderr: float
    mu_hat: float
    norm_sum: float           # E[(1/L) sum Psi/||F||], the Fig.-5 quantity
    norm_sum_stderr: float


def linear_net_experiment(cfg: LinearNetConfig, probe_count: int,
                          rng: RngStream) -> tuple[StabilityProfile, LinearGapSummary]:
    """Psi/norm profile plus loss-gap summary on unit-sphere probes."""
    net, _ = build_linear_net(cfg, rng)
    probes = rng.child(7).unit_sphere(probe_count, cfg.d)
    profile = psi_profile(net, probes)
    targets = rng.child(8).unit_sphere(probe_count, cfg.head_dim)
    l_full, l_drop, gap = loss_gap(net, probes, targets, distance_loss)
    outputs = _backbone(net, probes)
    rel = profile.psi / max(profile.out_norm_mean, 1e-300)
    radius_grid = sorted({float(np.clip(r, 1e-6, 10.0))
                          for r in (rel.min(), float(np.median(rel)), rel.max())})
    mu_hat = estimate_mu(net.head, distance_loss, outputs, targets,
                         n_perturb=20, radius_grid=radius_grid, rng=rng.child(9))
    bound, bound_se = bound_rhs(net, probes, mu_hat)
    nsum, nsum_se = normalized_stability_sum(net, probes)
    summary = LinearGapSummary(l_full, l_drop, gap, bound, bound_se, mu_hat,
                               nsum, nsum_se)
    return profile, summary


def alignment_angles(net: ResidualNet, x: Array, top_eigvec: Array) -> Array:
    """Angle between y^(l) and the top eigenvector for l = 0..L (radians)."""
    tape = net.forward(x)
    angles = []
    for y in tape.ys:
        v = y[0] if y.ndim == 2 else y
        c = abs(float(np.dot(v, top_eigvec))) / (np.linalg.norm(v) *
                                                 np.linalg.norm(top_eigvec))
        angles.append(math.acos(min(1.0, max(-1.0, c))))
    return np.array(angles)
