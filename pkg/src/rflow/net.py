"""Residual MLP velocity model with explicit parameters and exact gradients.

The network keeps every weight in one flat float64 vector so the optimizer,
checkpointing, and finite-difference checks all see a single contiguous
array.  Forward is deterministic; backward is hand-written reverse mode and
matches central finite differences to full float64 accuracy.

Block structure (hidden width H, time embedding width E):

    h   <- x W_in' + b_in
    pre <- h W1' + b1 + emb(t) T' [+ cls_emb(c) C']
    h   <- h + gelu(pre) W2' + b2          (repeated num_layers times)
    out <- h W_out' + b_out

Time (and class) embeddings are projected per block and added to the input
of each activation; a residual connection wraps every block.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np
from scipy.special import ndtr

_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)

CHECKPOINT_MAGIC = b"RFMC"
CHECKPOINT_VERSION = 1


class NetError(ValueError):
    pass


@dataclass(frozen=True)
class NetConfig:
    input_dim: int
    hidden_width: int = 512
    num_layers: int = 6
    time_embed_dim: int = 512
    num_classes: int = 0
    seed: int = 0

    def __post_init__(self):
        for name in ("input_dim", "hidden_width", "num_layers", "time_embed_dim"):
            if getattr(self, name) < 1:
                raise NetError(f"{name} must be positive")
        if self.time_embed_dim % 2 != 0:
            raise NetError("time_embed_dim must be even")
        if self.num_classes < 0 or self.seed < 0:
            raise NetError("num_classes and seed must be nonnegative")


def time_embedding(t, dim):
    """Sinusoidal features: sin(t w_i) then cos(t w_i), w_i = 10000^(-2i/dim)."""
    if dim % 2 != 0:
        raise NetError("time embedding dimension must be even")
    half = dim // 2
    freqs = 10000.0 ** (-2.0 * np.arange(half) / dim)
    t = np.asarray(t, dtype=float)
    phase = t[..., None] * freqs
    return np.concatenate([np.sin(phase), np.cos(phase)], axis=-1)


def _layout(cfg: NetConfig):
    """Ordered (name, shape) pairs defining the flat parameter vector."""
    d, H, E = cfg.input_dim, cfg.hidden_width, cfg.time_embed_dim
    items = [("win", (H, d)), ("bin", (H,))]
    for k in range(cfg.num_layers):
        items.append((f"w1.{k}", (H, H)))
        items.append((f"b1.{k}", (H,)))
        items.append((f"tproj.{k}", (H, E)))
        if cfg.num_classes > 0:
            items.append((f"cproj.{k}", (H, E)))
        items.append((f"w2.{k}", (H, H)))
        items.append((f"b2.{k}", (H,)))
    items.append(("wout", (d, H)))
    items.append(("bout", (d,)))
    if cfg.num_classes > 0:
        items.append(("cls_table", (cfg.num_classes + 1, E)))
    return items


def param_count(cfg: NetConfig):
    return sum(int(np.prod(shape)) for _, shape in _layout(cfg))


def _gelu_grad(z, phi):
    # phi = ndtr(z) from the forward pass; d/dz [z * Phi(z)] = Phi(z) + z * pdf(z)
    return phi + z * np.exp(-0.5 * z * z) * _INV_SQRT_2PI


class VelocityNet:
    """v_theta(x, t[, c]) with parameters in ``self.params`` (flat float64)."""

    def __init__(self, config: NetConfig, params=None):
        self.config = config
        self.num_params = param_count(config)
        if params is None:
            params = init_params(config)
        params = np.asarray(params, dtype=np.float64)
        if params.shape != (self.num_params,):
            raise NetError(f"expected {self.num_params} parameters, got {params.shape}")
        self.params = params
        self._views = self._make_views(self.params)

    def _make_views(self, flat):
        views = {}
        offset = 0
        for name, shape in _layout(self.config):
            size = int(np.prod(shape))
            views[name] = flat[offset : offset + size].reshape(shape)
            offset += size
        return views

    def set_params(self, params):
        params = np.asarray(params, dtype=np.float64)
        if params.shape != (self.num_params,):
            raise NetError("parameter vector has the wrong length")
        self.params = params
        self._views = self._make_views(self.params)

    # -- conditioning ------------------------------------------------------

    @property
    def empty_token(self):
        return self.config.num_classes

    def _class_rows(self, c, n):
        """Resolve class indices to embedding rows; None selects the empty token."""
        cfg = self.config
        if cfg.num_classes == 0:
            if c is not None:
                raise NetError("network was built without class conditioning")
            return None, None
        if c is None:
            idx = np.full(n, self.empty_token, dtype=np.int64)
        else:
            idx = np.asarray(c, dtype=np.int64)
            if idx.ndim == 0:
                idx = np.full(n, int(idx), dtype=np.int64)
            if idx.shape != (n,):
                raise NetError("class index batch has the wrong length")
            if np.any(idx < 0) or np.any(idx > self.empty_token):
                raise NetError("class index out of range")
        return idx, self._views["cls_table"][idx]

    # -- forward / backward --------------------------------------------------

    def _forward_cached(self, x, t, c, keep=True):
        cfg = self.config
        x = np.asarray(x, dtype=float)
        single = x.ndim == 1
        X = x[None, :] if single else x
        if X.ndim != 2 or X.shape[1] != cfg.input_dim:
            raise NetError(f"expected inputs of dimension {cfg.input_dim}")
        n = X.shape[0]
        t_arr = np.asarray(t, dtype=float)
        emb = time_embedding(t_arr, cfg.time_embed_dim)  # (E,) or (n, E)
        if emb.ndim == 2 and emb.shape[0] != n:
            raise NetError("time batch has the wrong length")
        cidx, cemb = self._class_rows(c, n)
        v = self._views
        h = X @ v["win"].T
        h += v["bin"]
        h_ins, pres, phis, acts = [], [], [], []
        for k in range(cfg.num_layers):
            pre = h @ v[f"w1.{k}"].T
            pre += v[f"b1.{k}"]
            pre += emb @ v[f"tproj.{k}"].T
            if cemb is not None:
                pre += cemb @ v[f"cproj.{k}"].T
            phi = ndtr(pre)
            a = pre * phi
            if keep:
                h_ins.append(h.copy())
                pres.append(pre)
                phis.append(phi)
                acts.append(a)
            h += a @ v[f"w2.{k}"].T
            h += v[f"b2.{k}"]
        out = h @ v["wout"].T
        out += v["bout"]
        cache = (X, emb, cidx, cemb, h_ins, pres, phis, acts, h, single) if keep else None
        return out[0] if single else out, cache

    def forward(self, x, t, c=None):
        """Network output at (x, t); x may be a point or an (n, d) stack."""
        out, _ = self._forward_cached(x, t, c, keep=False)
        return out

    def backward(self, x, t, upstream, c=None, out=None):
        """Gradient of sum_i upstream_i . forward(x_i, t_i, c_i) w.r.t. params.

        Accumulates into ``out`` when given (same layout as ``params``),
        otherwise allocates a fresh buffer.
        """
        _, cache = self._forward_cached(x, t, c)
        return self._backward_from_cache(cache, upstream, out)

    def _backward_from_cache(self, cache, upstream, out=None):
        cfg = self.config
        X, emb, cidx, cemb, h_ins, pres, phis, acts, h_last, single = cache
        G = np.asarray(upstream, dtype=float)
        if single:
            G = G[None, :]
        if G.shape != (X.shape[0], cfg.input_dim):
            raise NetError("upstream has the wrong shape")
        if out is None:
            out = np.zeros(self.num_params)
        elif out.shape != (self.num_params,):
            raise NetError("gradient buffer has the wrong length")
        g = self._make_views(out)
        v = self._views

        g["wout"] += G.T @ h_last
        g["bout"] += G.sum(axis=0)
        dh = G @ v["wout"]
        for k in reversed(range(cfg.num_layers)):
            a, pre, phi, h_in = acts[k], pres[k], phis[k], h_ins[k]
            g[f"w2.{k}"] += dh.T @ a
            g[f"b2.{k}"] += dh.sum(axis=0)
            dpre = (dh @ v[f"w2.{k}"]) * _gelu_grad(pre, phi)
            g[f"w1.{k}"] += dpre.T @ h_in
            g[f"b1.{k}"] += dpre.sum(axis=0)
            if emb.ndim == 1:
                g[f"tproj.{k}"] += np.outer(dpre.sum(axis=0), emb)
            else:
                g[f"tproj.{k}"] += dpre.T @ emb
            if cemb is not None:
                g[f"cproj.{k}"] += dpre.T @ cemb
                np.add.at(g["cls_table"], cidx, dpre @ v[f"cproj.{k}"])
            dh = dh + dpre @ v[f"w1.{k}"]
        g["win"] += dh.T @ X
        g["bin"] += dh.sum(axis=0)
        return out


def init_params(cfg: NetConfig):
    """Seeded init: weights uniform in +-1/sqrt(fan_in), biases zero."""
    rng = np.random.default_rng(cfg.seed)
    chunks = []
    for name, shape in _layout(cfg):
        if name.startswith("b"):
            chunks.append(np.zeros(shape))
        else:
            fan_in = shape[-1]
            bound = 1.0 / np.sqrt(fan_in)
            chunks.append(rng.uniform(-bound, bound, size=shape))
    return np.concatenate([c.ravel() for c in chunks])


# ---------------------------------------------------------------------------
# Checkpoint format: little-endian binary.
#   magic "RFMC" | version u32 | input_dim, hidden_width, num_layers,
#   time_embed_dim, num_classes (u32 each) | seed u64 | param_count u64 |
#   param_count float64 values.

_HEADER = struct.Struct("<4sI5IQQ")


class CheckpointError(IOError):
    pass


def save_checkpoint(net: VelocityNet, path):
    cfg = net.config
    header = _HEADER.pack(
        CHECKPOINT_MAGIC,
        CHECKPOINT_VERSION,
        cfg.input_dim,
        cfg.hidden_width,
        cfg.num_layers,
        cfg.time_embed_dim,
        cfg.num_classes,
        cfg.seed,
        net.num_params,
    )
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(net.params.astype("<f8").tobytes())


def load_checkpoint(path):
    with open(path, "rb") as fh:
        raw = fh.read(_HEADER.size)
        if len(raw) != _HEADER.size:
            raise CheckpointError("truncated checkpoint header")
        magic, version, d, width, layers, embed, classes, seed, count = _HEADER.unpack(raw)
        if magic != CHECKPOINT_MAGIC:
            raise CheckpointError("not a checkpoint file (bad magic)")
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        cfg = NetConfig(
            input_dim=d,
            hidden_width=width,
            num_layers=layers,
            time_embed_dim=embed,
            num_classes=classes,
            seed=seed,
        )
        if count != param_count(cfg):
            raise CheckpointError("parameter count does not match the configuration")
        data = fh.read(8 * count)
        if len(data) != 8 * count:
            raise CheckpointError("truncated parameter block")
        params = np.frombuffer(data, dtype="<f8").astype(np.float64)
    return VelocityNet(cfg, params)
