"""Actor and critic networks in plain numpy with hand-written backprop.

Actor: tanh embedding -> 3 residual blocks
(linear, layer-norm, relu, linear, layer-norm, +skip, relu) -> tanh -> mean head,
plus a free log-std vector. Critic: tanh embedding -> 2 tanh residual blocks
-> scalar head. Everything is float64 and batched along axis 0.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .domain import ACTION_DIM, OBS_DIM, SystemProfile
from .errors import (
    CheckpointDimensionError,
    CheckpointError,
    CheckpointVersionError,
    CorruptCheckpointError,
)

HIDDEN_DIM = 256
POLICY_BLOCKS = 3
VALUE_BLOCKS = 2
LOG_STD_MIN, LOG_STD_MAX = -2.0, 1.0
LN_EPS = 1e-5
HEAD_SCALE = 1e-2
FORMAT_VERSION = 1
_HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)


class Params(dict):
    """Ordered name -> array mapping; the unit Adam and checkpoints work on."""

    def copy(self):
        return type(self)((k, v.copy()) for k, v in self.items())

    @property
    def hidden_dim(self) -> int:
        return self["embed.W"].shape[1]

    def all_finite(self) -> bool:
        return all(np.all(np.isfinite(v)) for v in self.values())


class PolicyParams(Params):
    pass


class ValueParams(Params):
    pass


def _orthogonal(rng, n_in, n_out, gain=1.0):
    a = rng.standard_normal((max(n_in, n_out), min(n_in, n_out)))
    q, r = np.linalg.qr(a)
    q *= np.sign(np.diag(r))
    if n_in < n_out:
        q = q.T
    return np.ascontiguousarray(gain * q[:n_in, :n_out])


def init_policy(rng: np.random.Generator, hidden=HIDDEN_DIM, obs_dim=OBS_DIM, action_dim=ACTION_DIM,
                blocks=POLICY_BLOCKS) -> PolicyParams:
    p = PolicyParams()
    p["embed.W"] = _orthogonal(rng, obs_dim, hidden)
    p["embed.b"] = np.zeros(hidden)
    for i in range(blocks):
        for j in (1, 2):
            p[f"block{i}.fc{j}.W"] = _orthogonal(rng, hidden, hidden)
            p[f"block{i}.fc{j}.b"] = np.zeros(hidden)
            p[f"block{i}.ln{j}.g"] = np.ones(hidden)
            p[f"block{i}.ln{j}.b"] = np.zeros(hidden)
    p["mean.W"] = _orthogonal(rng, hidden, action_dim, gain=HEAD_SCALE)
    p["mean.b"] = np.zeros(action_dim)
    p["log_std"] = np.zeros(action_dim)
    return p


def init_value(rng: np.random.Generator, hidden=HIDDEN_DIM, obs_dim=OBS_DIM, blocks=VALUE_BLOCKS) -> ValueParams:
    p = ValueParams()
    p["embed.W"] = _orthogonal(rng, obs_dim, hidden)
    p["embed.b"] = np.zeros(hidden)
    for i in range(blocks):
        for j in (1, 2):
            p[f"block{i}.fc{j}.W"] = _orthogonal(rng, hidden, hidden)
            p[f"block{i}.fc{j}.b"] = np.zeros(hidden)
    p["head.W"] = _orthogonal(rng, hidden, 1, gain=HEAD_SCALE)
    p["head.b"] = np.zeros(1)
    return p


def _n_blocks(p: Params) -> int:
    n = 0
    while f"block{n}.fc1.W" in p:
        n += 1
    return n


def _as_batch(obs):
    x = np.asarray(obs, dtype=float)
    single = x.ndim == 1
    x = np.atleast_2d(x)
    if not np.all(np.isfinite(x)):
        raise ValueError("observation contains non-finite values")
    return x, single


# ------------------------------------------------------------ layer norm


def _ln_forward(z, g, b):
    mu = z.mean(axis=1, keepdims=True)
    zc = z - mu
    inv = 1.0 / np.sqrt((zc * zc).mean(axis=1, keepdims=True) + LN_EPS)
    xhat = zc * inv
    return xhat * g + b, (xhat, inv, g)


def _ln_backward(dy, cache):
    xhat, inv, g = cache
    dg = (dy * xhat).sum(axis=0)
    db = dy.sum(axis=0)
    dxhat = dy * g
    n = xhat.shape[1]
    dz = inv / n * (n * dxhat - dxhat.sum(axis=1, keepdims=True)
                    - xhat * (dxhat * xhat).sum(axis=1, keepdims=True))
    return dz, dg, db


# ------------------------------------------------------------ policy


def clamped_log_std(p: PolicyParams) -> np.ndarray:
    return np.clip(p["log_std"], LOG_STD_MIN, LOG_STD_MAX)


def _policy_forward(p: PolicyParams, x):
    cache = {"x": x}
    h = np.tanh(x @ p["embed.W"] + p["embed.b"])
    cache["h0"] = h
    blocks = []
    for i in range(_n_blocks(p)):
        pre = f"block{i}."
        z1 = h @ p[pre + "fc1.W"] + p[pre + "fc1.b"]
        n1, c1 = _ln_forward(z1, p[pre + "ln1.g"], p[pre + "ln1.b"])
        u = np.maximum(n1, 0.0)
        z2 = u @ p[pre + "fc2.W"] + p[pre + "fc2.b"]
        n2, c2 = _ln_forward(z2, p[pre + "ln2.g"], p[pre + "ln2.b"])
        s = n2 + h
        blocks.append((h, n1, c1, u, c2, s))
        h = np.maximum(s, 0.0)
    y = np.tanh(h)
    cache["blocks"] = blocks
    cache["y"] = y
    mean = y @ p["mean.W"] + p["mean.b"]
    return mean, cache


def _policy_backward(p: PolicyParams, cache, dmean, dlog_std):
    g = {}
    y = cache["y"]
    g["mean.W"] = y.T @ dmean
    g["mean.b"] = dmean.sum(axis=0)
    dh = (dmean @ p["mean.W"].T) * (1.0 - y * y)
    for i in reversed(range(len(cache["blocks"]))):
        pre = f"block{i}."
        h_in, n1, c1, u, c2, s = cache["blocks"][i]
        ds = dh * (s > 0)
        dz2, g[pre + "ln2.g"], g[pre + "ln2.b"] = _ln_backward(ds, c2)
        g[pre + "fc2.W"] = u.T @ dz2
        g[pre + "fc2.b"] = dz2.sum(axis=0)
        dn1 = (dz2 @ p[pre + "fc2.W"].T) * (n1 > 0)
        dz1, g[pre + "ln1.g"], g[pre + "ln1.b"] = _ln_backward(dn1, c1)
        g[pre + "fc1.W"] = h_in.T @ dz1
        g[pre + "fc1.b"] = dz1.sum(axis=0)
        dh = dz1 @ p[pre + "fc1.W"].T + ds
    h0 = cache["h0"]
    da = dh * (1.0 - h0 * h0)
    g["embed.W"] = cache["x"].T @ da
    g["embed.b"] = da.sum(axis=0)
    raw = p["log_std"]
    # hard clamp: gradient only where the raw value lies inside the range
    g["log_std"] = dlog_std * ((raw >= LOG_STD_MIN) & (raw <= LOG_STD_MAX))
    return PolicyParams((k, g[k]) for k in p)


def policy_forward(p: PolicyParams, obs):
    """Mean and standard deviation of the action distribution.

    Accepts one observation (shape ``(8,)``) or a batch (``(B, 8)``).
    """
    x, single = _as_batch(obs)
    mean, _ = _policy_forward(p, x)
    std = np.exp(clamped_log_std(p))
    return (mean[0] if single else mean), std


# ------------------------------------------------------------ value


def _value_forward(p: ValueParams, x):
    h = np.tanh(x @ p["embed.W"] + p["embed.b"])
    cache = {"x": x, "h0": h, "blocks": []}
    for i in range(_n_blocks(p)):
        pre = f"block{i}."
        u = np.tanh(h @ p[pre + "fc1.W"] + p[pre + "fc1.b"])
        v = u @ p[pre + "fc2.W"] + p[pre + "fc2.b"]
        h_out = np.tanh(v + h)
        cache["blocks"].append((h, u, h_out))
        h = h_out
    cache["h"] = h
    return (h @ p["head.W"] + p["head.b"])[:, 0], cache


def _value_backward(p: ValueParams, cache, dv):
    g = {}
    h = cache["h"]
    dv = dv[:, None]
    g["head.W"] = h.T @ dv
    g["head.b"] = dv.sum(axis=0)
    dh = dv @ p["head.W"].T
    for i in reversed(range(len(cache["blocks"]))):
        pre = f"block{i}."
        h_in, u, h_out = cache["blocks"][i]
        ds = dh * (1.0 - h_out * h_out)
        g[pre + "fc2.W"] = u.T @ ds
        g[pre + "fc2.b"] = ds.sum(axis=0)
        du = (ds @ p[pre + "fc2.W"].T) * (1.0 - u * u)
        g[pre + "fc1.W"] = h_in.T @ du
        g[pre + "fc1.b"] = du.sum(axis=0)
        dh = du @ p[pre + "fc1.W"].T + ds
    h0 = cache["h0"]
    da = dh * (1.0 - h0 * h0)
    g["embed.W"] = cache["x"].T @ da
    g["embed.b"] = da.sum(axis=0)
    return ValueParams((k, g[k]) for k in p)


def value_forward(p: ValueParams, obs):
    x, single = _as_batch(obs)
    v, _ = _value_forward(p, x)
    return float(v[0]) if single else v


def value_input_gradient(p: ValueParams, obs) -> np.ndarray:
    """d value / d observation for a single observation."""
    x, _ = _as_batch(obs)
    _, cache = _value_forward(p, x)
    dh = p["head.W"].T.copy()
    for i in reversed(range(len(cache["blocks"]))):
        pre = f"block{i}."
        h_in, u, h_out = cache["blocks"][i]
        ds = dh * (1.0 - h_out * h_out)
        du = (ds @ p[pre + "fc2.W"].T) * (1.0 - u * u)
        dh = du @ p[pre + "fc1.W"].T + ds
    h0 = cache["h0"]
    return ((dh * (1.0 - h0 * h0)) @ p["embed.W"].T)[0]


# ------------------------------------------------------------ distribution


def gaussian_stats(mean, std, action):
    """Log-density of ``action`` under a diagonal Gaussian, and its entropy."""
    mean = np.asarray(mean, dtype=float)
    std = np.asarray(std, dtype=float)
    action = np.asarray(action, dtype=float)
    if np.any(~(std > 0)):
        raise ValueError(f"standard deviations must be > 0, got {std}")
    z = (action - mean) / std
    log_prob = np.sum(-_HALF_LOG_2PI - np.log(std) - 0.5 * z * z, axis=-1)
    entropy = np.sum(0.5 + _HALF_LOG_2PI + np.log(std)) * np.ones_like(log_prob)
    if np.ndim(log_prob) == 0:
        return float(log_prob), float(entropy)
    return log_prob, entropy


# ------------------------------------------------------------ PPO loss


class LossParts(NamedTuple):
    actor: float
    critic: float
    entropy: float
    total: float


def _batch_arrays(batch):
    obs = np.asarray(batch.observations, dtype=float)
    actions = np.asarray(batch.actions, dtype=float)
    returns = np.asarray(batch.returns, dtype=float)
    m = obs.shape[0]
    if obs.ndim != 2 or actions.shape != (m, ACTION_DIM) or returns.shape != (m,):
        raise ValueError(f"batch shape mismatch: obs {obs.shape}, actions {actions.shape}, returns {returns.shape}")
    return obs, actions, returns


def _old_log_probs(batch, policy_old, obs, actions):
    if policy_old is not None:
        mean_old, std_old = policy_forward(policy_old, obs)
        return gaussian_stats(mean_old, std_old, actions)[0]
    old = np.asarray(batch.log_probs, dtype=float)
    if old.shape != (obs.shape[0],):
        raise ValueError("stored log-probs do not match batch length")
    return old


def ppo_loss(policy, value, batch, hyper, policy_old=None, advantages=None) -> LossParts:
    """Forward-only evaluation of the combined actor-critic loss.

    ``advantages`` may be pinned to emulate the stop-gradient the update uses.
    """
    obs, actions, returns = _batch_arrays(batch)
    old = _old_log_probs(batch, policy_old, obs, actions)
    mean, _ = _policy_forward(policy, obs)
    log_std = clamped_log_std(policy)
    std = np.exp(log_std)
    v, _ = _value_forward(value, obs)
    adv = returns - v if advantages is None else np.asarray(advantages, dtype=float)
    logp, ent = gaussian_stats(mean, std, actions)
    ratio = np.exp(logp - old)
    surr = np.minimum(ratio * adv, np.clip(ratio, 1 - hyper.clip, 1 + hyper.clip) * adv)
    actor = -surr.mean()
    critic = 0.5 * np.mean((returns - v) ** 2)
    entropy = float(np.mean(ent))
    total = actor + critic - hyper.entropy_coef * entropy
    return LossParts(float(actor), float(critic), entropy, float(total))


def compute_gradients(policy, value, batch, hyper, policy_old=None):
    """Loss parts and gradients of the total loss for both networks.

    Advantages ``G_t - V(s_t)`` are treated as constants in the actor term.
    Old log-probs come from ``policy_old`` when given, else from the batch.
    """
    obs, actions, returns = _batch_arrays(batch)
    m = obs.shape[0]
    old = _old_log_probs(batch, policy_old, obs, actions)
    mean, pcache = _policy_forward(policy, obs)
    log_std = clamped_log_std(policy)
    std = np.exp(log_std)
    v, vcache = _value_forward(value, obs)
    adv = returns - v

    diff = actions - mean
    var = std * std
    logp = np.sum(-_HALF_LOG_2PI - log_std - 0.5 * diff * diff / var, axis=1)
    ratio = np.exp(logp - old)
    lo, hi = 1 - hyper.clip, 1 + hyper.clip
    surr1 = ratio * adv
    surr2 = np.clip(ratio, lo, hi) * adv
    surr = np.minimum(surr1, surr2)
    entropy = float(np.sum(0.5 + _HALF_LOG_2PI + log_std))
    actor = -surr.mean()
    critic = 0.5 * np.mean(adv * adv)
    total = actor + critic - hyper.entropy_coef * entropy

    # d actor / d logp: zero only where the clipped branch is active and flat
    live = (surr1 <= surr2) | ((ratio > lo) & (ratio < hi))
    dlogp = -(adv * ratio * live) / m
    dmean = dlogp[:, None] * diff / var
    dlog_std = (dlogp[:, None] * (diff * diff / var - 1.0)).sum(axis=0) - hyper.entropy_coef
    gp = _policy_backward(policy, pcache, dmean, dlog_std)
    gv = _value_backward(value, vcache, -adv / m)
    parts = LossParts(float(actor), float(critic), entropy, float(total))
    return parts, (gp, gv)


# ------------------------------------------------------------ Adam


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params: Params, **kw) -> "AdamState":
        return cls({k: np.zeros_like(a) for k, a in params.items()},
                   {k: np.zeros_like(a) for k, a in params.items()}, **kw)


def adam_step(params: Params, grads: Params, state: AdamState, lr: float) -> Params:
    """Bias-corrected Adam, applied in place; returns ``params``."""
    if set(state.m) != set(params):
        raise ValueError("Adam state does not match parameter names")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for k, p in params.items():
        g = grads[k]
        m = state.m[k]
        v = state.v[k]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params


# ------------------------------------------------------------ checkpoints


@dataclass
class Checkpoint:
    policy: PolicyParams
    value: ValueParams
    k: float
    n_max: int
    profile: SystemProfile | None = None
    meta: dict = field(default_factory=dict)


class CheckpointMissingError(CheckpointError, FileNotFoundError):
    pass


def _pack(params: Params) -> dict:
    return {k: {"shape": list(a.shape), "data": [float(x) for x in a.ravel()]} for k, a in params.items()}


def _unpack(cls, blob: dict) -> Params:
    out = cls()
    for k, entry in blob.items():
        arr = np.asarray(entry["data"], dtype=float)
        out[k] = arr.reshape(entry["shape"])
    return out


def save_checkpoint(path, policy: PolicyParams, value: ValueParams, *, k: float, n_max: int,
                    profile: SystemProfile | None = None, meta: dict | None = None):
    if not (policy.all_finite() and value.all_finite()):
        raise ValueError("refusing to save non-finite parameters")
    doc = {
        "format_version": FORMAT_VERSION,
        "obs_dim": int(policy["embed.W"].shape[0]),
        "hidden_dim": policy.hidden_dim,
        "action_dim": int(policy["mean.W"].shape[1]),
        "k": k,
        "n_max": n_max,
        "profile": profile.to_dict() if profile is not None else None,
        "meta": meta or {},
        "policy": _pack(policy),
        "value": _pack(value),
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    # json writes floats with repr(), which round-trips float64 exactly
    tmp.write_text(json.dumps(doc))
    tmp.replace(path)


def load_checkpoint(path, obs_dim=OBS_DIM, action_dim=ACTION_DIM) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise CheckpointMissingError(f"checkpoint not found: {path}")
    try:
        doc = json.loads(path.read_text())
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise CorruptCheckpointError(f"{path}: unreadable checkpoint ({exc})") from None
    if not isinstance(doc, dict) or "format_version" not in doc:
        raise CorruptCheckpointError(f"{path}: not a checkpoint document")
    if doc["format_version"] != FORMAT_VERSION:
        raise CheckpointVersionError(f"{path}: format_version {doc['format_version']}, expected {FORMAT_VERSION}")
    if doc.get("obs_dim") != obs_dim or doc.get("action_dim") != action_dim:
        raise CheckpointDimensionError(
            f"{path}: obs_dim/action_dim {doc.get('obs_dim')}/{doc.get('action_dim')}, expected {obs_dim}/{action_dim}")
    try:
        policy = _unpack(PolicyParams, doc["policy"])
        value = _unpack(ValueParams, doc["value"])
        hidden = int(doc["hidden_dim"])
        profile = SystemProfile.from_dict(doc["profile"]) if doc.get("profile") else None
        ck = Checkpoint(policy, value, float(doc["k"]), int(doc["n_max"]), profile, doc.get("meta", {}))
    except (KeyError, TypeError, ValueError) as exc:
        raise CorruptCheckpointError(f"{path}: malformed checkpoint ({exc})") from None
    if policy["embed.W"].shape != (obs_dim, hidden) or value["embed.W"].shape != (obs_dim, hidden):
        raise CheckpointDimensionError(f"{path}: embedding shape does not match obs_dim={obs_dim}, hidden={hidden}")
    if policy["mean.W"].shape != (hidden, action_dim):
        raise CheckpointDimensionError(f"{path}: mean head shape {policy['mean.W'].shape}")
    return ck
