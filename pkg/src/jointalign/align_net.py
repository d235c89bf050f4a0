"""Multi-object alignment network and its optimizers.

Architecture: a learned latent array per object slot, encoded by a
cross-attention layer shared across objects, followed by two self-attention
layers over the concatenation of all slots' latents; that block repeats
three times. Decoding is per slot: final layer-norm, mean over the latent
axis, then a shared two-layer MLP to the 11 raw outputs
[t_d, t_phi, t_theta, q0..q3, s_x, s_y, s_z, c].

All sublayers are pre-norm residual; each attention is followed by a
residual feed-forward. The decode MLP's output layer starts at zero so an
untrained network predicts the exact identity update.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass

import numpy as np

from . import diff_engine as de
from .diff_engine import Tensor, TrainState, load_checkpoint, save_checkpoint
from .geometry import PoseDelta
from .sparse_input import Batch, C_INPUT

logger = logging.getLogger(__name__)

ANGLE_BOUND = math.pi / 4  # matches the +-45 degree azimuth training regime
N_OUT = 11


@dataclass
class NetConfig:
    """Network hyperparameters (full-scale defaults; see desk())."""

    n_mul: int = 5
    n_latent: int = 80
    c_latent: int = 256
    n_blocks: int = 3
    n_self_per_block: int = 2
    heads: int = 1
    ffn_mult: int = 2
    decode_hidden: int = 0          # 0 means c_latent
    nonlinearity: str = "relu"      # or "gelu"

    def __post_init__(self):
        if min(self.n_mul, self.n_latent, self.c_latent, self.n_blocks,
               self.n_self_per_block, self.heads, self.ffn_mult) <= 0:
            raise ValueError("all NetConfig sizes must be positive")
        if self.c_latent % self.heads:
            raise ValueError("c_latent must be divisible by heads")
        if self.nonlinearity not in ("relu", "gelu"):
            raise ValueError(f"unknown nonlinearity '{self.nonlinearity}'")

    @classmethod
    def desk(cls) -> "NetConfig":
        return cls(n_mul=3, n_latent=32, c_latent=64)

    @classmethod
    def tiny(cls) -> "NetConfig":
        return cls(n_mul=2, n_latent=4, c_latent=8)

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, obj: dict) -> "NetConfig":
        return cls(**obj)


def _act(cfg: NetConfig, x: Tensor) -> Tensor:
    return de.relu(x) if cfg.nonlinearity == "relu" else de.gelu(x)


def _trunc_normal(rng, shape, std=0.02):
    return np.clip(rng.standard_normal(shape), -2.0, 2.0) * std


def init_params(cfg: NetConfig, seed: int = 0, dtype=np.float32) -> dict:
    """Truncated-normal weights (std 0.02), zero biases, zeroed output head."""
    rng = np.random.default_rng(np.random.SeedSequence([0x11217, seed]))
    p = {}

    def w(name, shape, zero=False):
        data = np.zeros(shape) if zero else _trunc_normal(rng, shape)
        p[name] = Tensor(data.astype(dtype), requires_grad=True)

    def ln(prefix, width):
        p[f"{prefix}.g"] = Tensor(np.ones(width, dtype=dtype), requires_grad=True)
        p[f"{prefix}.b"] = Tensor(np.zeros(width, dtype=dtype), requires_grad=True)

    def attn(prefix):
        c = cfg.c_latent
        ln(f"{prefix}.ln_q", c)
        for nm in ("wq", "wk", "wv"):
            w(f"{prefix}.{nm}", (c, c))
            w(f"{prefix}.{nm[-1]}b", (c,), zero=True)
        w(f"{prefix}.wo", (c, c))
        w(f"{prefix}.ob", (c,), zero=True)

    def ffn(prefix):
        c, f = cfg.c_latent, cfg.ffn_mult * cfg.c_latent
        ln(f"{prefix}.ln", c)
        w(f"{prefix}.w1", (c, f))
        w(f"{prefix}.b1", (f,), zero=True)
        w(f"{prefix}.w2", (f, c))
        w(f"{prefix}.b2", (c,), zero=True)

    w("embed.w", (C_INPUT, cfg.c_latent))
    w("embed.b", (cfg.c_latent,), zero=True)
    ln("input_ln", cfg.c_latent)  # embedded inputs normalized once
    w("latent", (cfg.n_latent, cfg.c_latent))
    for i in range(cfg.n_blocks):
        attn(f"cross{i}")
        ffn(f"cross{i}.ffn")
        for j in range(cfg.n_self_per_block):
            attn(f"self{i}_{j}")
            ffn(f"self{i}_{j}.ffn")
    hidden = cfg.decode_hidden or cfg.c_latent
    ln("decode.ln", cfg.c_latent)
    w("decode.w1", (cfg.c_latent, hidden))
    w("decode.b1", (hidden,), zero=True)
    w("decode.w2", (hidden, N_OUT), zero=True)  # identity update at init
    w("decode.b2", (N_OUT,), zero=True)
    return p


def _split_heads(t: Tensor, heads: int) -> Tensor:
    if heads == 1:
        return t
    *lead, n, c = t.shape
    t = t.reshape((*lead, n, heads, c // heads))
    return de.swapaxes(t, -2, -3)


def _merge_heads(t: Tensor, heads: int) -> Tensor:
    if heads == 1:
        return t
    t = de.swapaxes(t, -2, -3)
    *lead, n, h, ch = t.shape
    return t.reshape((*lead, n, h * ch))


class AlignNet:
    """Parameter container plus the batched forward pass."""

    def __init__(self, cfg: NetConfig, seed: int = 0, dtype=np.float32):
        self.cfg = cfg
        self.params = init_params(cfg, seed=seed, dtype=dtype)

    # -- persistence ---------------------------------------------------------
    def save(self, path, train_state: TrainState | None = None):
        save_checkpoint(path, self.params, train_state)
        with open(str(path) + ".json", "w") as fh:
            json.dump(self.cfg.to_json(), fh, indent=2, sort_keys=True)

    @classmethod
    def load(cls, path, cfg: NetConfig | None = None) -> tuple["AlignNet", TrainState | None]:
        arrays, state = load_checkpoint(path)
        with open(str(path) + ".json") as fh:
            stored = NetConfig.from_json(json.load(fh))
        if cfg is not None and cfg != stored:
            raise ValueError(f"checkpoint config {stored} != requested {cfg}")
        net = cls.__new__(cls)
        net.cfg = stored
        net.params = {k: Tensor(v, requires_grad=True) for k, v in arrays.items()}
        expected = set(init_params(stored, 0))
        if set(net.params) != expected:
            raise ValueError("checkpoint parameter names do not match config")
        return net, state

    # -- forward -------------------------------------------------------------
    def _attend(self, prefix: str, queries: Tensor,
                kv_normed: Tensor | None = None) -> Tensor:
        """Pre-norm residual attention; kv_normed=None means self-attention."""
        p, h = self.params, self.cfg.heads
        q_in = de.layer_norm(queries, p[f"{prefix}.ln_q.g"], p[f"{prefix}.ln_q.b"])
        kv_in = q_in if kv_normed is None else kv_normed
        q = de.linear(q_in, p[f"{prefix}.wq"], p[f"{prefix}.qb"])
        k = de.linear(kv_in, p[f"{prefix}.wk"], p[f"{prefix}.kb"])
        v = de.linear(kv_in, p[f"{prefix}.wv"], p[f"{prefix}.vb"])
        out = _merge_heads(de.attention(_split_heads(q, h), _split_heads(k, h),
                                        _split_heads(v, h)), h)
        return queries + de.linear(out, p[f"{prefix}.wo"], p[f"{prefix}.ob"])

    def _ffn(self, prefix: str, x: Tensor) -> Tensor:
        p = self.params
        h = de.layer_norm(x, p[f"{prefix}.ln.g"], p[f"{prefix}.ln.b"])
        h = _act(self.cfg, de.linear(h, p[f"{prefix}.w1"], p[f"{prefix}.b1"]))
        return x + de.linear(h, p[f"{prefix}.w2"], p[f"{prefix}.b2"])

    def forward_raw(self, inputs: np.ndarray) -> Tensor:
        """Stacked forward: (B, n_mul, rows, 13) -> raw outputs (B, n_mul, 11)."""
        cfg, p = self.cfg, self.params
        if inputs.ndim != 4 or inputs.shape[1] != cfg.n_mul or \
                inputs.shape[3] != C_INPUT:
            raise de.ShapeError(
                f"expected (B, {cfg.n_mul}, rows, {C_INPUT}), got {inputs.shape}")
        B, M = inputs.shape[0], cfg.n_mul
        dtype = p["embed.w"].dtype
        x = de.linear(Tensor(inputs.astype(dtype)), p["embed.w"], p["embed.b"])
        x = de.layer_norm(x, p["input_ln.g"], p["input_ln.b"])

        lat = Tensor(np.zeros((B, M, 1, 1), dtype=dtype)) + \
            p["latent"].reshape((1, 1, cfg.n_latent, cfg.c_latent))
        for i in range(cfg.n_blocks):
            lat = self._attend(f"cross{i}", lat, kv_normed=x)
            lat = self._ffn(f"cross{i}.ffn", lat)
            joint = lat.reshape((B, M * cfg.n_latent, cfg.c_latent))
            for j in range(cfg.n_self_per_block):
                joint = self._attend(f"self{i}_{j}", joint)
                joint = self._ffn(f"self{i}_{j}.ffn", joint)
            lat = joint.reshape((B, M, cfg.n_latent, cfg.c_latent))

        dec = de.layer_norm(lat, p["decode.ln.g"], p["decode.ln.b"])
        pooled = dec.mean(axis=2)  # (B, M, C)
        hidden = _act(cfg, de.linear(pooled, p["decode.w1"], p["decode.b1"]))
        return de.linear(hidden, p["decode.w2"], p["decode.b2"])

    def forward(self, batch: Batch) -> list:
        """One Batch -> PoseDelta per active slot (inference, no grad)."""
        with de.no_grad():
            raw = self.forward_raw(batch.tensor()[None])
        return [raw_to_delta(raw.data[0, i])
                for i, b in enumerate(batch.blocks) if b is not None]


def raw_to_delta(raw: np.ndarray) -> PoseDelta:
    """Map 11 raw outputs to a valid PoseDelta (identity at zero)."""
    raw = np.asarray(raw, dtype=np.float64)
    if raw.shape != (N_OUT,) or not np.all(np.isfinite(raw)):
        raise ValueError(f"raw output must be 11 finite numbers, got {raw}")
    sig = lambda x: 1.0 / (1.0 + np.exp(-x))
    q = np.array([1.0 + raw[3], raw[4], raw[5], raw[6]])
    if np.linalg.norm(q) < 1e-6:
        q = np.array([1.0, 0.0, 0.0, 0.0])
    return PoseDelta(
        dd=2.0 * sig(raw[0]),
        dphi=ANGLE_BOUND * math.tanh(raw[1]),
        dtheta=ANGLE_BOUND * math.tanh(raw[2]),
        dq=q,
        ds=2.0 * sig(raw[7:10]),
        sigma=float(sig(raw[10])),
    )


# ---------------------------------------------------------------------------
# optimizers
# ---------------------------------------------------------------------------

class Lamb:
    """Layer-wise adaptive moments with per-parameter trust ratio.

    ``trust=False`` degrades to plain Adam. Non-finite gradients skip the
    step (reported through the return value and the log).
    """

    def __init__(self, params: dict, lr: float = 1e-3, betas=(0.9, 0.999),
                 eps: float = 1e-6, weight_decay: float = 0.0,
                 trust: bool = True):
        self.params = params
        self.lr, self.betas, self.eps = lr, betas, eps
        self.weight_decay, self.trust = weight_decay, trust
        self.step_count = 0
        self.m = {k: np.zeros_like(t.data) for k, t in params.items()}
        self.v = {k: np.zeros_like(t.data) for k, t in params.items()}

    def zero_grad(self):
        for t in self.params.values():
            t.grad = None

    def step(self) -> bool:
        """Apply one update; returns False (skipping) on non-finite grads."""
        grads = {k: t.grad for k, t in self.params.items() if t.grad is not None}
        if any(not np.all(np.isfinite(g)) for g in grads.values()):
            logger.warning("non-finite gradient at step %d; skipping", self.step_count)
            return False
        self.step_count += 1
        b1, b2 = self.betas
        bc1 = 1.0 - b1 ** self.step_count
        bc2 = 1.0 - b2 ** self.step_count
        for k, g in grads.items():
            p = self.params[k]
            self.m[k] = b1 * self.m[k] + (1 - b1) * g
            self.v[k] = b2 * self.v[k] + (1 - b2) * g * g
            update = (self.m[k] / bc1) / (np.sqrt(self.v[k] / bc2) + self.eps)
            if self.weight_decay:
                update = update + self.weight_decay * p.data
            ratio = 1.0
            if self.trust:
                w_norm = float(np.linalg.norm(p.data))
                u_norm = float(np.linalg.norm(update))
                if w_norm > 0 and u_norm > 0:
                    ratio = w_norm / u_norm
            p.data -= (self.lr * ratio * update).astype(p.dtype)
        return True

    def state(self) -> TrainState:
        slots = {}
        for k in self.params:
            slots[f"m.{k}"] = self.m[k]
            slots[f"v.{k}"] = self.v[k]
        return TrainState(step=self.step_count, slots=slots)

    def load_state(self, state: TrainState):
        self.step_count = state.step
        for k in self.params:
            self.m[k] = state.slots[f"m.{k}"].copy()
            self.v[k] = state.slots[f"v.{k}"].copy()


def make_optimizer(params: dict, lr: float, algorithm: str = "lamb") -> Lamb:
    if algorithm not in ("lamb", "adam"):
        raise ValueError(f"unknown optimizer '{algorithm}'")
    return Lamb(params, lr=lr, trust=algorithm == "lamb")
