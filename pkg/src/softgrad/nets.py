"""Functional networks over flat parameter dicts, an AdamW optimizer and a binary checkpoint format.

Every forward function takes a mapping ``name -> array`` that may hold
numpy arrays or TapeVars.  A parameter with one extra leading axis of size
N is treated as N independent copies, one per row of the input.
"""

from __future__ import annotations

import json
import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from softgrad import tape as T

log = logging.getLogger(__name__)

ACTIVATIONS = {"silu": T.silu, "elu": T.elu, "tanh": T.tanh}


def orthogonal(rng, n_in, n_out, gain=1.0):
    a = rng.standard_normal((max(n_in, n_out), min(n_in, n_out)))
    q, r = np.linalg.qr(a)
    q = q * np.sign(np.diag(r))
    w = q if n_in >= n_out else q.T
    return np.ascontiguousarray(gain * w[:n_in, :n_out])


def init_mlp(rng, sizes, prefix, final_scale=1.0, layer_norm=True) -> dict:
    params = {}
    n = len(sizes) - 1
    for i in range(n):
        last = i == n - 1
        gain = final_scale if last else math.sqrt(2.0)
        params[f"{prefix}w{i}"] = orthogonal(rng, sizes[i], sizes[i + 1], gain)
        params[f"{prefix}b{i}"] = np.zeros(sizes[i + 1])
        if layer_norm and not last:
            params[f"{prefix}ln{i}_g"] = np.ones(sizes[i + 1])
            params[f"{prefix}ln{i}_b"] = np.zeros(sizes[i + 1])
    return params


def _tiled(W):
    return np.ndim(T.value(W)) == 3


def linear(x, W, b):
    if not _tiled(W):
        return T.matmul(x, W) + b
    xv = np.ndim(T.value(x))
    if xv == 2:
        return T.matmul(T.expand_dims(x, 1), W)[:, 0, :] + b
    bshape = (np.shape(T.value(b))[0],) + (1,) * (xv - 2) + (np.shape(T.value(b))[-1],)
    return T.matmul(x, W) + T.reshape(b, bshape)


def _bcast_row(p, x):
    """Reshape a (tiled) per-feature vector to broadcast against ``x``."""
    if np.ndim(T.value(p)) == 1:
        return p
    shape = (np.shape(T.value(p))[0],) + (1,) * (np.ndim(T.value(x)) - 2) + (np.shape(T.value(p))[-1],)
    return T.reshape(p, shape)


def layer_norm(x, g, b, eps=1e-5):
    mu = T.mean(x, axis=-1, keepdims=True)
    xc = x - mu
    var = T.mean(xc * xc, axis=-1, keepdims=True)
    return xc / T.sqrt(var + eps) * _bcast_row(g, x) + _bcast_row(b, x)


def mlp_forward(params, prefix, x, activation="silu", layer_norm_on=True):
    """affine -> LayerNorm -> activation per hidden layer, linear output layer."""
    act = ACTIVATIONS[activation]
    n = 0
    while f"{prefix}w{n}" in params:
        n += 1
    if n == 0:
        raise KeyError(f"no layers under prefix {prefix!r}")
    d_in = np.shape(T.value(params[f"{prefix}w0"]))[-2]
    if np.shape(T.value(x))[-1] != d_in:
        raise ValueError(f"{prefix}: input dim {np.shape(T.value(x))[-1]} != {d_in}")
    h = x
    for i in range(n):
        h = linear(h, params[f"{prefix}w{i}"], params[f"{prefix}b{i}"])
        if i < n - 1:
            if layer_norm_on:
                h = layer_norm(h, params[f"{prefix}ln{i}_g"], params[f"{prefix}ln{i}_b"])
            h = act(h)
    return h


# ---------------------------------------------------------------------------
# modules

@dataclass
class PointEncoder:
    """Shared per-point MLP, max-pool over points, linear projection."""

    prefix: str
    hidden: tuple = (32, 32)
    embed: int = 32
    activation: str = "silu"

    def init(self, rng) -> dict:
        p = init_mlp(rng, (3,) + tuple(self.hidden), self.prefix + "pt/", final_scale=math.sqrt(2.0))
        p.update(init_mlp(rng, (self.hidden[-1], self.embed), self.prefix + "proj/"))
        return p

    def __call__(self, params, cloud):
        h = mlp_forward(params, self.prefix + "pt/", cloud, self.activation)
        pooled = T.amax(h, axis=-2)
        return mlp_forward(params, self.prefix + "proj/", pooled, self.activation)


def _features(params, encoder, obs):
    if encoder is None or obs.point_cloud is None:
        return obs.state_vec
    return T.concatenate([obs.state_vec, encoder(params, obs.point_cloud)], axis=-1)


_HALF_LOG_2PI = 0.5 * math.log(2 * math.pi)
ACTION_BOUND = 1.0 - 1e-12


def tanh_log_det(u):
    """log(1 - tanh(u)^2) in the overflow-free form 2 (log 2 - u - softplus(-2u))."""
    return 2.0 * (math.log(2.0) - u - T.softplus(-2.0 * u))


@dataclass
class SquashedGaussianPolicy:
    obs_dim: int
    act_dim: int
    hidden: tuple = (64, 64)
    activation: str = "silu"
    state_dependent_sigma: bool = True
    log_std_bounds: tuple = (-5.0, 2.0)
    init_log_std: float = 0.0
    use_cloud: bool = False
    encoder: PointEncoder | None = None

    def __post_init__(self):
        if self.use_cloud and self.encoder is None:
            self.encoder = PointEncoder("actor/enc/", activation=self.activation)

    @property
    def in_dim(self):
        return self.obs_dim + (self.encoder.embed if self.use_cloud else 0)

    def init(self, rng) -> dict:
        params = {}
        if self.use_cloud:
            params.update(self.encoder.init(rng))
        out = 2 * self.act_dim if self.state_dependent_sigma else self.act_dim
        params.update(init_mlp(rng, (self.in_dim,) + tuple(self.hidden) + (out,), "actor/mlp/",
                               final_scale=0.01))
        if self.state_dependent_sigma:
            params[f"actor/mlp/b{len(self.hidden)}"][self.act_dim:] = self.init_log_std
        else:
            params["actor/log_std"] = np.full(self.act_dim, float(self.init_log_std))
        return params

    def dist(self, params, obs):
        """Pre-squash mean and clamped log standard deviation."""
        out = mlp_forward(params, "actor/mlp/", _features(params, self.encoder, obs), self.activation)
        if self.state_dependent_sigma:
            mu, log_std = out[..., :self.act_dim], out[..., self.act_dim:]
        else:
            mu = out
            log_std = params["actor/log_std"]
            if np.ndim(T.value(log_std)) == 1:
                log_std = log_std + np.zeros(np.shape(T.value(mu)))
        lo, hi = self.log_std_bounds
        return mu, T.clamp(log_std, lo, hi)

    def sample(self, params, obs, noise):
        """Reparameterized a = tanh(mu + sigma * noise) and its log-density."""
        mu, log_std = self.dist(params, obs)
        u = mu + T.exp(log_std) * noise
        a = T.clamp(T.tanh(u), -ACTION_BOUND, ACTION_BOUND)
        noise = np.asarray(noise)
        gauss = -0.5 * noise * noise - log_std - _HALF_LOG_2PI
        logp = T.sum(gauss - tanh_log_det(u), axis=-1)
        return a, logp

    def log_prob(self, params, obs, action):
        """Density of a given squashed action (used by the score-function estimator)."""
        mu, log_std = self.dist(params, obs)
        a = np.clip(T.value(action), -ACTION_BOUND, ACTION_BOUND)
        u = np.arctanh(a)
        z = (u - mu) / T.exp(log_std)
        gauss = -0.5 * z * z - log_std - _HALF_LOG_2PI
        return T.sum(gauss - tanh_log_det(u), axis=-1)

    def mean_action(self, params, obs):
        mu, _ = self.dist(params, obs)
        return T.tanh(mu)


def entropy_estimate(log_prob):
    """Single-sample entropy estimate h = -log pi(a|s)."""
    return -log_prob


@dataclass
class Critic:
    obs_dim: int
    prefix: str = "critic0/"
    hidden: tuple = (64, 64)
    activation: str = "silu"
    use_cloud: bool = False
    encoder: PointEncoder | None = None

    def __post_init__(self):
        if self.use_cloud and self.encoder is None:
            self.encoder = PointEncoder(self.prefix + "enc/", activation=self.activation)

    def init(self, rng) -> dict:
        params = {}
        in_dim = self.obs_dim
        if self.use_cloud:
            params.update(self.encoder.init(rng))
            in_dim += self.encoder.embed
        params.update(init_mlp(rng, (in_dim,) + tuple(self.hidden) + (1,), self.prefix + "mlp/"))
        return params

    def __call__(self, params, obs):
        out = mlp_forward(params, self.prefix + "mlp/", _features(params, self.encoder, obs),
                          self.activation)
        return out[..., 0]


@dataclass
class CriticEnsemble:
    obs_dim: int
    num: int = 2
    hidden: tuple = (64, 64)
    activation: str = "silu"
    use_cloud: bool = False
    members: list = field(default_factory=list)

    def __post_init__(self):
        if self.num < 1:
            raise ValueError("need at least one critic")
        self.members = [Critic(self.obs_dim, f"critic{i}/", self.hidden, self.activation, self.use_cloud)
                        for i in range(self.num)]

    def init(self, rng) -> dict:
        params = {}
        for m in self.members:
            params.update(m.init(rng))
        return params

    def member_params(self, params, i):
        pre = self.members[i].prefix
        return {k: v for k, v in params.items() if k.startswith(pre)}

    def __call__(self, params, obs):
        return [m(params, obs) for m in self.members]


# ---------------------------------------------------------------------------
# optimizer

def global_norm(grads: dict) -> float:
    return math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))


@dataclass
class AdamW:
    lr: float
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.0
    grad_clip: float | None = None
    step_count: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    skipped: int = 0

    def step(self, params: dict, grads: dict, lr: float | None = None) -> bool:
        """Update ``params`` in place.  Returns False if the step was skipped."""
        if not all(np.all(np.isfinite(g)) for g in grads.values()):
            self.skipped += 1
            log.warning("non-finite gradient; optimizer step %d skipped", self.step_count + 1)
            return False
        lr = self.lr if lr is None else lr
        if self.grad_clip is not None:
            norm = global_norm(grads)
            if norm > self.grad_clip:
                grads = {k: g * (self.grad_clip / norm) for k, g in grads.items()}
        self.step_count += 1
        b1, b2 = self.betas
        c1 = 1.0 - b1 ** self.step_count
        c2 = 1.0 - b2 ** self.step_count
        for k, g in grads.items():
            m = self.m.get(k)
            if m is None:
                m = self.m[k] = np.zeros_like(params[k])
                self.v[k] = np.zeros_like(params[k])
            v = self.v[k]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            p = params[k]
            if self.weight_decay:
                p -= lr * self.weight_decay * p
            p -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
        return True

    def state_arrays(self, prefix: str) -> dict:
        out = {}
        for k in self.m:
            out[f"{prefix}m/{k}"] = self.m[k]
            out[f"{prefix}v/{k}"] = self.v[k]
        return out

    def state_meta(self) -> dict:
        return {"step_count": self.step_count, "skipped": self.skipped}

    def load(self, arrays: dict, prefix: str, meta: dict):
        self.step_count = int(meta["step_count"])
        self.skipped = int(meta.get("skipped", 0))
        self.m, self.v = {}, {}
        for k, a in arrays.items():
            if k.startswith(prefix + "m/"):
                self.m[k[len(prefix) + 2:]] = a.copy()
            elif k.startswith(prefix + "v/"):
                self.v[k[len(prefix) + 2:]] = a.copy()


# ---------------------------------------------------------------------------
# checkpoint files
#
#   magic  b"SGCK"   4 bytes
#   version          uint32
#   meta length      uint64, then UTF-8 JSON metadata
#   entry count      uint32
#   per entry: name length uint16, UTF-8 name, ndim uint8, ndim x uint64 dims
#   payload: every entry's values as little-endian float64, in table order

MAGIC = b"SGCK"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, arrays: dict, meta: dict | None = None):
    meta_b = json.dumps(meta or {}, sort_keys=True).encode()
    parts = [MAGIC, struct.pack("<I", VERSION), struct.pack("<Q", len(meta_b)), meta_b,
             struct.pack("<I", len(arrays))]
    for name, a in arrays.items():
        nb = name.encode()
        a = np.asarray(a)
        parts += [struct.pack("<H", len(nb)), nb, struct.pack("<B", a.ndim),
                  struct.pack(f"<{a.ndim}Q", *a.shape)]
    for a in arrays.values():
        parts.append(np.ascontiguousarray(a, dtype="<f8").tobytes())
    tmp = Path(str(path) + ".tmp")
    tmp.write_bytes(b"".join(parts))
    tmp.replace(path)


def load_checkpoint(path) -> tuple[dict, dict]:
    buf = Path(path).read_bytes()
    if buf[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    (version,) = struct.unpack_from("<I", buf, 4)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    (mlen,) = struct.unpack_from("<Q", buf, 8)
    off = 16
    meta = json.loads(buf[off:off + mlen].decode())
    off += mlen
    (count,) = struct.unpack_from("<I", buf, off)
    off += 4
    table = []
    for _ in range(count):
        (nl,) = struct.unpack_from("<H", buf, off)
        off += 2
        name = buf[off:off + nl].decode()
        off += nl
        (nd,) = struct.unpack_from("<B", buf, off)
        off += 1
        shape = struct.unpack_from(f"<{nd}Q", buf, off)
        off += 8 * nd
        table.append((name, shape))
    arrays = {}
    for name, shape in table:
        n = int(np.prod(shape, dtype=np.int64))
        arrays[name] = np.frombuffer(buf, dtype="<f8", count=n, offset=off).reshape(shape).copy()
        off += 8 * n
    if off != len(buf):
        raise CheckpointError(f"{path}: {len(buf) - off} trailing bytes")
    return arrays, meta


def check_compatible(expected: dict, loaded: dict, what="parameters"):
    """Raise with a shape diff unless both dicts hold the same names and shapes."""
    diffs = []
    for k in sorted(set(expected) | set(loaded)):
        a = np.shape(expected.get(k)) if k in expected else None
        b = np.shape(loaded.get(k)) if k in loaded else None
        if a != b:
            diffs.append(f"  {k}: model {a} vs checkpoint {b}")
    if diffs:
        raise CheckpointError(f"{what} mismatch:\n" + "\n".join(diffs))
