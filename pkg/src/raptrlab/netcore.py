"""Gated residual networks: blocks, heads, forward/backward, h_sqrt scaling.

All forward/backward code is batched: activations are (B, d) arrays with one
input per row. Backprop is written out by hand per block kind; gradients are
exact, which the finite-difference tests pin down.

Layer gating is expressed through per-layer output multipliers s_{1..L}:
with residual composition  y_l = y_{l-1} + s_l * f_l(y_{l-1}) ,
with plain composition     y_l = s_l * f_l(y_{l-1})  (identity bypass when
s_l = 0). A multiplier of zero therefore drops the layer and routes exact
zero gradients to its parameters.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .numkit import Array, RngStream


class NumericError(RuntimeError):
    """Non-finite activation; carries the offending layer index (1-based, 0 = input/head)."""

    def __init__(self, msg: str, layer: int):
        super().__init__(msg)
        self.layer = layer


def _check_finite(y: Array, layer: int):
    if not np.all(np.isfinite(y)):
        raise NumericError(f"non-finite activation at layer {layer}", layer)


def _row_norms(y: Array) -> Array:
    return np.linalg.norm(y, axis=1, keepdims=True)


# ---------------------------------------------------------------------------
# blocks
# ---------------------------------------------------------------------------


class ReluMlp:
    """Residual MLP block: y -> C relu(W u), u = sqrt(d) * y/||y||.

    The input rescale keeps the block output near sqrt(d) regardless of where
    it sits in the stack, which is what makes the ||y^(l)||^2 profile grow
    linearly with active depth. W is m x d, C is d x m.
    """

    kind = "relu_mlp"

    def __init__(self, w: Array, c: Array, normalize_input: bool = True):
        if w.ndim != 2 or c.ndim != 2 or c.shape != (w.shape[1], w.shape[0]):
            raise ValueError(f"inconsistent ReluMlp shapes: W {w.shape}, C {c.shape}")
        self.w = w.astype(np.float64)
        self.c = c.astype(np.float64)
        self.normalize_input = normalize_input

    @classmethod
    def init(cls, d: int, m: int, rng: RngStream, normalize_input: bool = True) -> "ReluMlp":
        w = rng.gauss(m, d, std=np.sqrt(2.0 / m))
        c = rng.gauss(d, m, std=np.sqrt(1.0 / d))
        return cls(w, c, normalize_input)

    @property
    def d(self) -> int:
        return self.w.shape[1]

    @property
    def m(self) -> int:
        return self.w.shape[0]

    def params(self) -> dict[str, Array]:
        return {"w": self.w, "c": self.c}

    def copy(self) -> "ReluMlp":
        return ReluMlp(self.w.copy(), self.c.copy(), self.normalize_input)

    def header(self) -> dict:
        return {"kind": self.kind, "d": self.d, "m": self.m,
                "normalize_input": self.normalize_input}

    def forward(self, y: Array, hidden_scale: Array | None = None):
        if self.normalize_input:
            n = _row_norms(y)
            u = y * (np.sqrt(self.d) / n)
        else:
            n = None
            u = y
        h = u @ self.w.T
        r = np.maximum(h, 0.0)
        if hidden_scale is not None:
            r = r * hidden_scale
        out = r @ self.c.T
        return out, (y, n, u, h, r, hidden_scale)

    def backward(self, cache, g: Array):
        y, n, u, h, r, hidden_scale = cache
        gc = g.T @ r
        gr = g @ self.c
        if hidden_scale is not None:
            gr = gr * hidden_scale
        gh = gr * (h > 0.0)
        gw = gh.T @ u
        gu = gh @ self.w
        if self.normalize_input:
            # d(sqrt(d) y/||y||)/dy applied to gu, rowwise
            s = np.sqrt(self.d)
            gy = s * (gu / n - y * (np.sum(gu * y, axis=1, keepdims=True) / n**3))
        else:
            gy = gu
        return gy, {"w": gw, "c": gc}


class Linear:
    """Plain linear block: y -> W y."""

    kind = "linear"

    def __init__(self, w: Array):
        if w.ndim != 2 or w.shape[0] != w.shape[1]:
            raise ValueError(f"Linear block needs a square matrix, got {w.shape}")
        self.w = w.astype(np.float64)

    @classmethod
    def init(cls, d: int, rng: RngStream, std: float | None = None) -> "Linear":
        return cls(rng.gauss(d, d, std=1.0 / np.sqrt(d) if std is None else std))

    @property
    def d(self) -> int:
        return self.w.shape[0]

    def params(self) -> dict[str, Array]:
        return {"w": self.w}

    def copy(self) -> "Linear":
        return Linear(self.w.copy())

    def header(self) -> dict:
        return {"kind": self.kind, "d": self.d}

    def forward(self, y: Array, hidden_scale=None):
        return y @ self.w.T, (y,)

    def backward(self, cache, g: Array):
        (y,) = cache
        return g @ self.w, {"w": g.T @ y}


class LinearLn:
    """Normalized linear block: y -> W y/||y||."""

    kind = "linear_ln"

    def __init__(self, w: Array):
        if w.ndim != 2 or w.shape[0] != w.shape[1]:
            raise ValueError(f"LinearLn block needs a square matrix, got {w.shape}")
        self.w = w.astype(np.float64)

    @classmethod
    def init(cls, d: int, rng: RngStream, std: float | None = None) -> "LinearLn":
        return cls(rng.gauss(d, d, std=1.0 / np.sqrt(d) if std is None else std))

    @property
    def d(self) -> int:
        return self.w.shape[0]

    def params(self) -> dict[str, Array]:
        return {"w": self.w}

    def copy(self) -> "LinearLn":
        return LinearLn(self.w.copy())

    def header(self) -> dict:
        return {"kind": self.kind, "d": self.d}

    def forward(self, y: Array, hidden_scale=None):
        n = _row_norms(y)
        u = y / n
        return u @ self.w.T, (y, n, u)

    def backward(self, cache, g: Array):
        y, n, u = cache
        gw = g.T @ u
        gu = g @ self.w
        gy = gu / n - y * (np.sum(gu * y, axis=1, keepdims=True) / n**3)
        return gy, {"w": gw}


BLOCK_KINDS = {"relu_mlp": ReluMlp, "linear": Linear, "linear_ln": LinearLn}


# ---------------------------------------------------------------------------
# heads
# ---------------------------------------------------------------------------


class ScalarReadout:
    """Trainable linear readout z -> <v, z>."""

    kind = "scalar_readout"

    def __init__(self, v: Array, trainable: bool = True):
        self.v = np.asarray(v, dtype=np.float64).reshape(-1)
        self.trainable = trainable

    @classmethod
    def init(cls, d: int, rng: RngStream) -> "ScalarReadout":
        return cls(rng.gauss(d, std=1.0 / np.sqrt(d)))

    def params(self) -> dict[str, Array]:
        return {"v": self.v} if self.trainable else {}

    def copy(self) -> "ScalarReadout":
        return ScalarReadout(self.v.copy(), self.trainable)

    def header(self) -> dict:
        return {"kind": self.kind, "d": self.v.shape[0], "trainable": self.trainable}

    def forward(self, z: Array):
        return z @ self.v, (z,)

    def backward(self, cache, g: Array):
        (z,) = cache
        gz = g[:, None] * self.v[None, :]
        grads = {"v": z.T @ g} if self.trainable else {}
        return gz, grads


class NormalizedLinear:
    """Scale-invariant head z -> V (z/||z||)."""

    kind = "normalized_linear"

    def __init__(self, v: Array, trainable: bool = False):
        if v.ndim != 2:
            raise ValueError("NormalizedLinear weight must be a matrix")
        self.v = v.astype(np.float64)
        self.trainable = trainable

    @classmethod
    def init(cls, out_dim: int, d: int, rng: RngStream) -> "NormalizedLinear":
        return cls(rng.gauss(out_dim, d, std=1.0 / np.sqrt(d)))

    def params(self) -> dict[str, Array]:
        return {"v": self.v} if self.trainable else {}

    def copy(self) -> "NormalizedLinear":
        return NormalizedLinear(self.v.copy(), self.trainable)

    def header(self) -> dict:
        return {"kind": self.kind, "out_dim": self.v.shape[0], "d": self.v.shape[1],
                "trainable": self.trainable}

    def forward(self, z: Array):
        n = _row_norms(z)
        u = z / n
        return u @ self.v.T, (z, n, u)

    def backward(self, cache, g: Array):
        z, n, u = cache
        gu = g @ self.v
        gz = gu / n - z * (np.sum(gu * z, axis=1, keepdims=True) / n**3)
        grads = {"v": g.T @ u} if self.trainable else {}
        return gz, grads


class IdentityHead:
    kind = "identity"

    def params(self) -> dict[str, Array]:
        return {}

    def copy(self) -> "IdentityHead":
        return IdentityHead()

    def header(self) -> dict:
        return {"kind": self.kind}

    def forward(self, z: Array):
        return z, None

    def backward(self, cache, g: Array):
        return g, {}


HEAD_KINDS = {"scalar_readout": ScalarReadout, "normalized_linear": NormalizedLinear,
              "identity": IdentityHead}


# ---------------------------------------------------------------------------
# network
# ---------------------------------------------------------------------------


@dataclass
class ForwardTape:
    x: Array
    ys: list          # y^(0..L), each (B, d)
    caches: list      # per-layer block cache or None when skipped
    scales: Array     # effective multipliers s_{1..L}
    head_cache: object
    output: Array


class ResidualNet:
    """Ordered block stack with residual or plain composition plus a head."""

    def __init__(self, blocks, head, composition: str = "residual"):
        if not blocks:
            raise ValueError("need at least one block")
        if composition not in ("residual", "plain"):
            raise ValueError(f"unknown composition {composition!r}")
        if composition == "plain":
            for b in blocks:
                if b.kind == "relu_mlp":
                    raise ValueError("plain composition is only legal for linear blocks")
        d = blocks[0].d
        for b in blocks:
            if b.d != d:
                raise ValueError("all blocks must share the ambient width")
        self.blocks = list(blocks)
        self.head = head
        self.composition = composition

    @property
    def L(self) -> int:
        return len(self.blocks)

    @property
    def d(self) -> int:
        return self.blocks[0].d

    def copy(self) -> "ResidualNet":
        return ResidualNet([b.copy() for b in self.blocks], self.head.copy(),
                           self.composition)

    def forward(self, x: Array, scales: Array | None = None,
                hidden_scales=None) -> ForwardTape:
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        if x.shape[1] != self.d:
            raise ValueError(f"input width {x.shape[1]} != network width {self.d}")
        if scales is None:
            s = np.ones(self.L)
        else:
            s = np.asarray(scales, dtype=np.float64)
            if s.shape != (self.L,):
                raise ValueError(f"need {self.L} scales, got shape {s.shape}")
            if np.any(s < 0):
                raise ValueError("scales must be non-negative")
        ys = [x]
        caches = []
        y = x
        for i, block in enumerate(self.blocks):
            if s[i] == 0.0:
                # dropped layer: identity bypass in both compositions
                caches.append(None)
                ys.append(y)
                continue
            hs = None if hidden_scales is None else hidden_scales[i]
            out, cache = block.forward(y, hidden_scale=hs)
            y = y + s[i] * out if self.composition == "residual" else s[i] * out
            _check_finite(y, i + 1)
            caches.append(cache)
            ys.append(y)
        output, head_cache = self.head.forward(y)
        _check_finite(np.atleast_2d(output), 0)
        return ForwardTape(x, ys, caches, s, head_cache, output)

    def backward(self, tape: ForwardTape, upstream: Array):
        """Gradients of a scalar loss wrt every trainable parameter.

        upstream is dLoss/d(head output). Returns (block_grads, head_grads,
        g_input); dropped layers get exact-zero gradient arrays.
        """
        if len(tape.ys) != self.L + 1:
            raise ValueError("tape does not match this network")
        g, head_grads = self.head.backward(tape.head_cache, np.asarray(upstream, dtype=np.float64))
        block_grads: list[dict[str, Array]] = [None] * self.L
        for i in range(self.L - 1, -1, -1):
            block = self.blocks[i]
            s = tape.scales[i]
            if s == 0.0 or tape.caches[i] is None:
                block_grads[i] = {k: np.zeros_like(v) for k, v in block.params().items()}
                continue
            gy, grads = block.backward(tape.caches[i], s * g)
            block_grads[i] = grads
            g = g + gy if self.composition == "residual" else gy
        return block_grads, head_grads, g

    def layer_norms(self, tape: ForwardTape) -> Array:
        """Mean over the batch of ||y^(l)|| for l = 0..L."""
        return np.array([float(np.mean(np.linalg.norm(y, axis=1))) for y in tape.ys])


def subnet_of(net: ResidualNet, gates) -> ResidualNet:
    """Materialize the sub-model that keeps only the gated-in blocks."""
    bits = np.asarray(gates, dtype=np.int64)
    if bits.shape != (net.L,):
        raise ValueError("gate length must equal network depth")
    kept = [net.blocks[i] for i in range(net.L) if bits[i]]
    if not kept:
        raise ValueError("cannot materialize an empty subnetwork")
    return ResidualNet([b.copy() for b in kept], net.head.copy(), net.composition)


# ---------------------------------------------------------------------------
# h_sqrt scaling
# ---------------------------------------------------------------------------


def h_sqrt(gates) -> Array:
    """Square-root gap scaling for a binary gate pattern.

    Active layer j gets sqrt(jbar - j) with jbar the next active index; the
    last active layer uses jbar = L+1, which makes sum(scale^2) = L exactly
    whenever layer 1 is active. Dropped layers get 0.
    """
    bits = np.asarray(gates, dtype=np.int64).ravel()
    active = np.flatnonzero(bits)
    if active.size == 0:
        raise ValueError("all-zero gate pattern has no layer to carry scale")
    scales = np.zeros(bits.shape[0])
    nxt = np.append(active[1:], bits.shape[0])
    scales[active] = np.sqrt(nxt - active)
    return scales


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------


def loss_squared(pred: float, target: float):
    """(pred-target)^2 and its derivative wrt pred (no 1/2 factor)."""
    diff = float(pred) - float(target)
    return diff * diff, 2.0 * diff


def batch_squared_loss(pred: Array, target: Array):
    """Mean squared loss over a batch plus the upstream gradient per element."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    diff = pred - target
    loss = float(np.mean(diff * diff))
    return loss, 2.0 * diff / diff.shape[0]


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

_MAGIC = b"RPTRNET1"


def _param_order(net: ResidualNet):
    for i, block in enumerate(net.blocks):
        for name in sorted(block.params()):
            yield ("block", i, name, block.params()[name])
    head_params = net.head.params()
    for name in sorted(head_params):
        yield ("head", -1, name, head_params[name])


def save_checkpoint(net: ResidualNet, path):
    header = {
        "composition": net.composition,
        "blocks": [b.header() for b in net.blocks],
        "head": net.head.header(),
        "params": [
            {"owner": owner, "index": idx, "name": name, "shape": list(arr.shape)}
            for owner, idx, name, arr in _param_order(net)
        ],
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(len(blob).to_bytes(8, "little"))
        fh.write(blob)
        for _, _, _, arr in _param_order(net):
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def _build_block(hdr: dict):
    kind = hdr["kind"]
    if kind == "relu_mlp":
        b = ReluMlp(np.zeros((hdr["m"], hdr["d"])), np.zeros((hdr["d"], hdr["m"])),
                    hdr.get("normalize_input", True))
    elif kind == "linear":
        b = Linear(np.zeros((hdr["d"], hdr["d"])))
    elif kind == "linear_ln":
        b = LinearLn(np.zeros((hdr["d"], hdr["d"])))
    else:
        raise ValueError(f"unknown block kind {kind!r}")
    return b


def _build_head(hdr: dict):
    kind = hdr["kind"]
    if kind == "scalar_readout":
        return ScalarReadout(np.zeros(hdr["d"]), hdr.get("trainable", True))
    if kind == "normalized_linear":
        return NormalizedLinear(np.zeros((hdr["out_dim"], hdr["d"])),
                                hdr.get("trainable", False))
    if kind == "identity":
        return IdentityHead()
    raise ValueError(f"unknown head kind {kind!r}")


def load_checkpoint(path) -> ResidualNet:
    with open(path, "rb") as fh:
        magic = fh.read(len(_MAGIC))
        if magic != _MAGIC:
            raise ValueError("not a network checkpoint")
        hlen = int.from_bytes(fh.read(8), "little")
        header = json.loads(fh.read(hlen).decode("utf-8"))
        blocks = [_build_block(h) for h in header["blocks"]]
        head = _build_head(header["head"])
        net = ResidualNet(blocks, head, header["composition"])
        targets = {("block", i, name): arr
                   for i, b in enumerate(blocks) for name, arr in b.params().items()}
        for name, arr in head.params().items():
            targets[("head", -1, name)] = arr
        for meta in header["params"]:
            shape = tuple(meta["shape"])
            count = int(np.prod(shape)) if shape else 1
            raw = fh.read(count * 8)
            vals = np.frombuffer(raw, dtype="<f8").reshape(shape)
            targets[(meta["owner"], meta["index"], meta["name"])][...] = vals
    return net
