"""LSTM-projection sequence networks with hand-derived reverse-mode gradients.

A network is `layers` LSTM layers (optionally with peephole connections and a
linear projection of the hidden state) followed by an affine output layer and
a softmax.  Parameters live in one flat vector; the layout is a fixed ordered
list of named blocks:

    per layer i (d = layer input size, h = hidden, r = projection or h):
        l{i}.wx    (4h, d)   input weights, gate order [i, f, g, o]
        l{i}.wr    (4h, r)   recurrent weights
        l{i}.bias  (4h,)
        l{i}.peep  (3h,)     [p_i, p_f, p_o], only when peepholes are on
        l{i}.proj  (p, h)    only when projection > 0
    out.w  (N, r_top)
    out.b  (N,)

A block listed in `svd_rank` with rank k is stored factored as
{name}.u (m, k) and {name}.v (k, n); the effective weight is u @ v.

Recurrence (c = cell, m = hidden, r = recurrent output):
    z             = wx @ x_t + wr @ r_{t-1} + bias
    i_t           = sigmoid(z_i + p_i * c_{t-1})
    f_t           = sigmoid(z_f + p_f * c_{t-1})
    g_t           = tanh(z_g)
    c_t           = f_t * c_{t-1} + i_t * g_t
    o_t           = sigmoid(z_o + p_o * c_t)
    m_t           = o_t * tanh(c_t)
    r_t           = proj @ m_t        (or m_t when projection = 0)
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np


class NetworkError(ValueError):
    pass


def softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    z = logits - np.max(logits, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=axis, keepdims=True)


def log_softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    z = logits - np.max(logits, axis=axis, keepdims=True)
    return z - np.log(np.sum(np.exp(z), axis=axis, keepdims=True))


@dataclass
class Posteriorgram:
    """T x N row-stochastic matrix of per-frame label posteriors."""

    rows: np.ndarray

    def __post_init__(self):
        self.rows = np.asarray(self.rows, dtype=np.float64)
        if self.rows.ndim != 2:
            raise NetworkError("posteriorgram must be 2-D")
        if np.any(self.rows < -1e-12) or np.any(self.rows > 1 + 1e-12):
            raise NetworkError("posteriors outside [0, 1]")
        if self.rows.shape[0] and np.max(np.abs(self.rows.sum(axis=1) - 1.0)) > 1e-6:
            raise NetworkError("posteriorgram rows must sum to 1")

    @property
    def num_frames(self) -> int:
        return self.rows.shape[0]

    @property
    def num_labels(self) -> int:
        return self.rows.shape[1]


@dataclass(frozen=True)
class ModelSpec:
    input_dim: int
    layers: int
    hidden: int
    projection: int = 0
    output_dim: int = 1
    peepholes: bool = True
    svd_rank: tuple[tuple[str, int], ...] | None = None

    def __post_init__(self):
        if self.layers < 1 or self.hidden < 1 or self.output_dim < 1:
            raise NetworkError("layers, hidden and output_dim must be >= 1")
        if self.input_dim < 1:
            raise NetworkError("input_dim must be >= 1")
        if not 0 <= self.projection <= self.hidden:
            raise NetworkError("projection must be in [0, hidden]")
        if self.svd_rank is not None and not isinstance(self.svd_rank, tuple):
            object.__setattr__(self, "svd_rank", tuple(sorted(dict(self.svd_rank).items())))

    @property
    def recurrent_size(self) -> int:
        return self.projection if self.projection > 0 else self.hidden

    def rank_of(self, name: str) -> int | None:
        if self.svd_rank is None:
            return None
        return dict(self.svd_rank).get(name)

    def to_dict(self) -> dict:
        return {
            "input_dim": self.input_dim,
            "layers": self.layers,
            "hidden": self.hidden,
            "projection": self.projection,
            "output_dim": self.output_dim,
            "peepholes": self.peepholes,
            "svd_rank": dict(self.svd_rank) if self.svd_rank else None,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        d = dict(d)
        if d.get("svd_rank"):
            d["svd_rank"] = tuple(sorted(d["svd_rank"].items()))
        else:
            d["svd_rank"] = None
        return cls(**d)


def _dense_blocks(spec: ModelSpec) -> list[tuple[str, tuple[int, ...]]]:
    """Named blocks and their unfactored shapes, in layout order."""
    h, p = spec.hidden, spec.projection
    r = spec.recurrent_size
    blocks: list[tuple[str, tuple[int, ...]]] = []
    d = spec.input_dim
    for i in range(spec.layers):
        blocks.append((f"l{i}.wx", (4 * h, d)))
        blocks.append((f"l{i}.wr", (4 * h, r)))
        blocks.append((f"l{i}.bias", (4 * h,)))
        if spec.peepholes:
            blocks.append((f"l{i}.peep", (3 * h,)))
        if p > 0:
            blocks.append((f"l{i}.proj", (p, h)))
        d = r
    blocks.append(("out.w", (spec.output_dim, r)))
    blocks.append(("out.b", (spec.output_dim,)))
    return blocks


def layout(spec: ModelSpec) -> list[tuple[str, tuple[int, ...]]]:
    """Stored blocks after applying SVD factoring, in layout order."""
    out = []
    for name, shape in _dense_blocks(spec):
        k = spec.rank_of(name)
        if k is None:
            out.append((name, shape))
        else:
            m, n = shape
            if k > min(m, n):
                raise NetworkError(f"rank {k} exceeds dimensions of block {name} {shape}")
            out.append((f"{name}.u", (m, k)))
            out.append((f"{name}.v", (k, n)))
    return out


def param_count(spec: ModelSpec) -> int:
    return sum(int(np.prod(shape)) for _, shape in layout(spec))


@dataclass
class Network:
    """Immutable-by-convention pairing of a spec and a flat parameter vector."""

    spec: ModelSpec
    parameters: np.ndarray
    _offsets: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self.parameters = np.asarray(self.parameters)
        expected = param_count(self.spec)
        if self.parameters.shape != (expected,):
            raise NetworkError(
                f"parameter vector has {self.parameters.shape}, spec needs ({expected},)"
            )
        if not np.all(np.isfinite(self.parameters)):
            raise NetworkError("non-finite parameters")
        off = 0
        for name, shape in layout(self.spec):
            n = int(np.prod(shape))
            self._offsets[name] = (off, shape)
            off += n

    def block(self, name: str) -> np.ndarray:
        off, shape = self._offsets[name]
        return self.parameters[off : off + int(np.prod(shape))].reshape(shape)

    def weight(self, name: str) -> np.ndarray:
        """Effective (dense) weight of a possibly factored block."""
        if name in self._offsets:
            return self.block(name)
        return self.block(f"{name}.u") @ self.block(f"{name}.v")

    def copy(self) -> "Network":
        return Network(self.spec, self.parameters.copy())


class GradientSink:
    """Flat gradient vector addressable by block name."""

    def __init__(self, net: Network):
        self.net = net
        self.grad = np.zeros_like(net.parameters, dtype=np.float64)

    def view(self, name: str) -> np.ndarray:
        off, shape = self.net._offsets[name]
        return self.grad[off : off + int(np.prod(shape))].reshape(shape)

    def add_weight_grad(self, name: str, dw: np.ndarray) -> None:
        """Accumulate a dense-weight gradient, projecting onto factors if needed."""
        if name in self.net._offsets:
            self.view(name)[...] += dw
        else:
            u = self.net.block(f"{name}.u")
            v = self.net.block(f"{name}.v")
            self.view(f"{name}.u")[...] += dw @ v.T
            self.view(f"{name}.v")[...] += u.T @ dw


def init_network(
    spec: ModelSpec, rng: np.random.Generator, dtype=np.float64
) -> Network:
    """Uniform(-0.05, 0.05) weights, zero biases, forget-gate bias +1."""
    params = np.zeros(param_count(spec), dtype=dtype)
    net = Network(spec, params)
    h = spec.hidden
    for name, shape in layout(spec):
        blk = net.block(name)
        if name.endswith(".bias"):
            blk[h : 2 * h] = 1.0
        elif name.endswith(".peep") or name == "out.b":
            pass
        else:
            blk[...] = rng.uniform(-0.05, 0.05, size=shape).astype(dtype)
    return net


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def forward_batch(net: Network, x: np.ndarray, want_cache: bool = True):
    """Run the network over a padded batch.

    x: (B, T, input_dim).  Returns (logits (B, T, N), cache).  Padded frames
    are computed like any other; callers mask them in the loss (padding must
    sit at the end of each sequence).
    """
    spec = net.spec
    x = np.asarray(x)
    if x.ndim != 3 or x.shape[2] != spec.input_dim:
        raise NetworkError(f"input shape {x.shape} incompatible with input_dim {spec.input_dim}")
    b, t, _ = x.shape
    h = spec.hidden
    r_size = spec.recurrent_size
    dtype = net.parameters.dtype

    cache = {"x": x, "layers": []} if want_cache else None
    seq = x.astype(dtype, copy=False)
    for li in range(spec.layers):
        wx = net.weight(f"l{li}.wx")
        wr = net.weight(f"l{li}.wr")
        bias = net.block(f"l{li}.bias")
        peep = net.block(f"l{li}.peep") if spec.peepholes else None
        proj = net.weight(f"l{li}.proj") if spec.projection > 0 else None

        xpart = seq @ wx.T + bias  # (B, T, 4h)
        gi = np.zeros((t, b, h), dtype=dtype)
        gf = np.zeros((t, b, h), dtype=dtype)
        gg = np.zeros((t, b, h), dtype=dtype)
        go = np.zeros((t, b, h), dtype=dtype)
        cc = np.zeros((t, b, h), dtype=dtype)
        mm = np.zeros((t, b, h), dtype=dtype)
        rr = np.zeros((t, b, r_size), dtype=dtype)

        c_prev = np.zeros((b, h), dtype=dtype)
        r_prev = np.zeros((b, r_size), dtype=dtype)
        for ti in range(t):
            z = xpart[:, ti] + r_prev @ wr.T
            zi, zf, zg, zo = z[:, :h], z[:, h : 2 * h], z[:, 2 * h : 3 * h], z[:, 3 * h :]
            if peep is not None:
                i_t = _sigmoid(zi + peep[:h] * c_prev)
                f_t = _sigmoid(zf + peep[h : 2 * h] * c_prev)
            else:
                i_t = _sigmoid(zi)
                f_t = _sigmoid(zf)
            g_t = np.tanh(zg)
            c_t = f_t * c_prev + i_t * g_t
            if peep is not None:
                o_t = _sigmoid(zo + peep[2 * h :] * c_t)
            else:
                o_t = _sigmoid(zo)
            m_t = o_t * np.tanh(c_t)
            r_t = m_t @ proj.T if proj is not None else m_t
            gi[ti], gf[ti], gg[ti], go[ti] = i_t, f_t, g_t, o_t
            cc[ti], mm[ti], rr[ti] = c_t, m_t, r_t
            c_prev, r_prev = c_t, r_t

        if want_cache:
            cache["layers"].append(
                {"in": seq, "i": gi, "f": gf, "g": gg, "o": go, "c": cc, "m": mm, "r": rr}
            )
        seq = np.transpose(rr, (1, 0, 2))  # (B, T, r)

    logits = seq @ net.weight("out.w").T + net.block("out.b")
    if want_cache:
        cache["top"] = seq
        cache["logits"] = logits
    return logits, cache


def backward_batch(net: Network, cache: dict, dlogits: np.ndarray) -> np.ndarray:
    """Gradient of a scalar loss w.r.t. all parameters.

    dlogits: (B, T, N) upstream gradient w.r.t. the output-layer logits; must
    be zero on padded frames.  Returns a flat vector in parameter layout.
    """
    spec = net.spec
    dlogits = np.asarray(dlogits, dtype=np.float64)
    if dlogits.shape != cache["logits"].shape:
        raise NetworkError("upstream gradient shape does not match cached forward")
    b, t, _ = dlogits.shape
    h = spec.hidden
    sink = GradientSink(net)

    top = cache["top"]
    sink.add_weight_grad("out.w", np.einsum("btn,btr->nr", dlogits, top))
    sink.view("out.b")[...] += dlogits.sum(axis=(0, 1))
    dseq = dlogits @ net.weight("out.w")  # (B, T, r_top)

    for li in reversed(range(spec.layers)):
        lc = cache["layers"][li]
        wx = net.weight(f"l{li}.wx")
        wr = net.weight(f"l{li}.wr")
        peep = net.block(f"l{li}.peep") if spec.peepholes else None
        proj = net.weight(f"l{li}.proj") if spec.projection > 0 else None

        gi, gf, gg, go = lc["i"], lc["f"], lc["g"], lc["o"]
        cc, mm, rr = lc["c"], lc["m"], lc["r"]
        tanh_c = np.tanh(cc)

        dz_all = np.zeros((t, b, 4 * h))
        dproj = np.zeros_like(proj) if proj is not None else None
        dpeep = np.zeros(3 * h) if peep is not None else None
        dr_rec = np.zeros((b, rr.shape[2]))
        dc_next = np.zeros((b, h))
        for ti in reversed(range(t)):
            c_prev = cc[ti - 1] if ti > 0 else np.zeros((b, h))
            dr = dseq[:, ti] + dr_rec
            if proj is not None:
                dproj += dr.T @ mm[ti]
                dm = dr @ proj
            else:
                dm = dr
            do = dm * tanh_c[ti]
            dzo = do * go[ti] * (1.0 - go[ti])
            dc = dc_next + dm * go[ti] * (1.0 - tanh_c[ti] ** 2)
            if peep is not None:
                dc = dc + dzo * peep[2 * h :]
                dpeep[2 * h :] += np.sum(dzo * cc[ti], axis=0)
            di = dc * gg[ti]
            df = dc * c_prev
            dg = dc * gi[ti]
            dzi = di * gi[ti] * (1.0 - gi[ti])
            dzf = df * gf[ti] * (1.0 - gf[ti])
            dzg = dg * (1.0 - gg[ti] ** 2)
            dc_next = dc * gf[ti]
            if peep is not None:
                dc_next = dc_next + dzi * peep[:h] + dzf * peep[h : 2 * h]
                dpeep[:h] += np.sum(dzi * c_prev, axis=0)
                dpeep[h : 2 * h] += np.sum(dzf * c_prev, axis=0)
            dz = np.concatenate([dzi, dzf, dzg, dzo], axis=1)
            dz_all[ti] = dz
            dr_rec = dz @ wr

        x_in = lc["in"]  # (B, T, d)
        sink.add_weight_grad(f"l{li}.wx", np.einsum("tbz,btd->zd", dz_all, x_in))
        r_prev_seq = np.zeros_like(rr)
        r_prev_seq[1:] = rr[:-1]
        sink.add_weight_grad(f"l{li}.wr", np.einsum("tbz,tbr->zr", dz_all, r_prev_seq))
        sink.view(f"l{li}.bias")[...] += dz_all.sum(axis=(0, 1))
        if peep is not None:
            sink.view(f"l{li}.peep")[...] += dpeep
        if proj is not None:
            sink.add_weight_grad(f"l{li}.proj", dproj)

        dseq = np.transpose(dz_all @ wx, (1, 0, 2))  # grad w.r.t. layer input

    return sink.grad


def forward_cached(net: Network, frames: np.ndarray):
    """Single-sequence forward; returns (logits (T, N), cache)."""
    frames = np.asarray(frames)
    logits, cache = forward_batch(net, frames[None, :, :])
    return logits[0], cache


def forward(net: Network, frames: np.ndarray) -> Posteriorgram:
    """Single-sequence forward returning row-stochastic posteriors."""
    logits, _ = forward_batch(net, np.asarray(frames)[None, :, :], want_cache=False)
    return Posteriorgram(softmax(logits[0].astype(np.float64)))


def backward(net: Network, cache: dict, dlogits: np.ndarray) -> np.ndarray:
    """Single-sequence backward; dlogits is (T, N)."""
    return backward_batch(net, cache, np.asarray(dlogits)[None, :, :])


# ---------------------------------------------------------------------------
# SVD compression

def svd_compress(net: Network, rank_map: dict[str, int]) -> Network:
    """Replace each selected m x n block by its top-k singular factors."""
    spec = net.spec
    existing = dict(spec.svd_rank) if spec.svd_rank else {}
    dense_shapes = dict(_dense_blocks(spec))
    for name, k in rank_map.items():
        if name not in dense_shapes:
            raise NetworkError(f"unknown block {name}")
        if name in existing:
            raise NetworkError(f"block {name} is already factored")
        m, n = dense_shapes[name]
        if k < 1 or k > min(m, n):
            raise NetworkError(f"rank {k} invalid for block {name} of shape {(m, n)}")
    new_spec = replace(
        spec, svd_rank=tuple(sorted({**existing, **rank_map}.items()))
    )
    out = np.zeros(param_count(new_spec), dtype=net.parameters.dtype)
    new_net = Network(new_spec, out)
    for name, shape in layout(spec):
        base = name[:-2] if name.endswith((".u", ".v")) else name
        if base in rank_map and not name.endswith((".u", ".v")):
            w = net.block(name).astype(np.float64)
            k = rank_map[name]
            u, s, vt = np.linalg.svd(w, full_matrices=False)
            new_net.block(f"{name}.u")[...] = (u[:, :k] * s[:k]).astype(out.dtype)
            new_net.block(f"{name}.v")[...] = vt[:k].astype(out.dtype)
        else:
            new_net.block(name)[...] = net.block(name)
    return new_net


def rank_for_energy(w: np.ndarray, energy: float = 0.6) -> int:
    """Smallest rank whose singular values keep at least `energy` of the
    total squared singular mass."""
    s = np.linalg.svd(np.asarray(w, dtype=np.float64), compute_uv=False)
    cum = np.cumsum(s**2) / np.sum(s**2)
    return int(np.searchsorted(cum, energy) + 1)


# ---------------------------------------------------------------------------
# Reference model specs for the wake-word task (5-symbol output alphabet).

def large_kws_spec(input_dim: int = 640, output_dim: int = 5) -> ModelSpec:
    """5 LSTM layers of 1024 cells projected to 512; ~24.16M parameters."""
    return ModelSpec(
        input_dim=input_dim, layers=5, hidden=1024, projection=512,
        output_dim=output_dim, peepholes=True,
    )


SMALL_KWS_SVD_RANK = 106  # budget-tuned so the factored model lands at ~0.89M


def small_kws_spec(input_dim: int = 640, output_dim: int = 5) -> ModelSpec:
    """3 LSTM layers of 256 cells projected to 128, input/recurrent weights
    factored at a uniform rank; ~0.89M parameters (~1/27 of the large spec)."""
    ranks = {}
    for i in range(3):
        ranks[f"l{i}.wx"] = SMALL_KWS_SVD_RANK
        ranks[f"l{i}.wr"] = SMALL_KWS_SVD_RANK
    return ModelSpec(
        input_dim=input_dim, layers=3, hidden=256, projection=128,
        output_dim=output_dim, peepholes=True, svd_rank=tuple(sorted(ranks.items())),
    )


# ---------------------------------------------------------------------------
# Checkpoints
#
# Layout (little-endian):
#   magic    4 bytes  b"FSCK"
#   version  u32      1
#   spec     u32 length + UTF-8 JSON of ModelSpec.to_dict()
#   dtype    u8       0 = float64, 1 = float32
#   count    u64      parameter count
#   payload  raw parameter bytes

_CKPT_MAGIC = b"FSCK"
_CKPT_VERSION = 1
_DTYPES = {0: np.dtype("<f8"), 1: np.dtype("<f4")}


def save_checkpoint(net: Network, path: str | Path) -> None:
    spec_json = json.dumps(net.spec.to_dict(), sort_keys=True).encode()
    code = 0 if net.parameters.dtype == np.float64 else 1
    with open(path, "wb") as fh:
        fh.write(_CKPT_MAGIC)
        fh.write(struct.pack("<I", _CKPT_VERSION))
        fh.write(struct.pack("<I", len(spec_json)))
        fh.write(spec_json)
        fh.write(struct.pack("<BQ", code, len(net.parameters)))
        fh.write(np.ascontiguousarray(net.parameters).astype(_DTYPES[code], copy=False).tobytes())


def load_checkpoint(path: str | Path) -> Network:
    with open(path, "rb") as fh:
        if fh.read(4) != _CKPT_MAGIC:
            raise NetworkError(f"{path}: not a checkpoint file")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != _CKPT_VERSION:
            raise NetworkError(f"{path}: unsupported checkpoint version {version}")
        (spec_len,) = struct.unpack("<I", fh.read(4))
        spec = ModelSpec.from_dict(json.loads(fh.read(spec_len).decode()))
        code, count = struct.unpack("<BQ", fh.read(9))
        params = np.frombuffer(fh.read(count * _DTYPES[code].itemsize), dtype=_DTYPES[code])
    if params.size != count:
        raise NetworkError(f"{path}: truncated parameter payload")
    return Network(spec, params.copy())
