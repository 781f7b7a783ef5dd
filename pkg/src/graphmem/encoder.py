"""Dual two-layer graph encoders with explicit analytic gradients.

No autodiff: every forward here returns a cache and has a matching backward
that consumes it.  The backward passes are validated against central finite
differences by ``grad_check``.  Parameters live in a flat dict of numpy
arrays; domain tokens use keys of the form ``token:<domain_id>``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
import scipy.sparse as sp

from .errors import NumericalError, ParameterError, ValidationError

ParamDict = dict[str, np.ndarray]

TOKEN_PREFIX = "token:"


@dataclass(frozen=True)
class EncoderDims:
    """Widths of every trainable block.

    text_in / struct_in are the raw per-view input widths.  Each encoder
    consumes in + 1 + token_dim columns: a constant bias column sits between
    the raw features and the broadcast domain token, so an all-zero input row
    (an isolated node's walk signature, say) still yields a live embedding.
    """

    text_in: int
    struct_in: int
    token_dim: int
    hidden_dim: int
    embed_dim: int
    proj_dim: int

    def __post_init__(self):
        for name in ("text_in", "struct_in", "hidden_dim", "embed_dim", "proj_dim"):
            if getattr(self, name) < 1:
                raise ParameterError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.token_dim < 0:
            raise ParameterError(f"token_dim must be >= 0, got {self.token_dim}")

    def to_dict(self) -> dict:
        return {
            "text_in": self.text_in,
            "struct_in": self.struct_in,
            "token_dim": self.token_dim,
            "hidden_dim": self.hidden_dim,
            "embed_dim": self.embed_dim,
            "proj_dim": self.proj_dim,
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "EncoderDims":
        return cls(**{k: int(v) for k, v in obj.items()})


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


def token_key(domain_id: str) -> str:
    return f"{TOKEN_PREFIX}{domain_id}"


def init_params(
    dims: EncoderDims, domain_ids: Sequence[str], rng: np.random.Generator
) -> ParamDict:
    """Glorot-uniform weights; domain tokens start at zero."""
    d = dims
    params: ParamDict = {
        "text_w1": glorot(rng, d.text_in + 1 + d.token_dim, d.hidden_dim),
        "text_w2": glorot(rng, d.hidden_dim, d.embed_dim),
        "struct_w1": glorot(rng, d.struct_in + 1 + d.token_dim, d.hidden_dim),
        "struct_w2": glorot(rng, d.hidden_dim, d.embed_dim),
        "proj_text": glorot(rng, d.embed_dim, d.proj_dim),
        "proj_struct": glorot(rng, d.embed_dim, d.proj_dim),
        "vib_mu_text": glorot(rng, d.embed_dim, d.embed_dim),
        "vib_logvar_text": glorot(rng, d.embed_dim, d.embed_dim),
        "vib_mu_struct": glorot(rng, d.embed_dim, d.embed_dim),
        "vib_logvar_struct": glorot(rng, d.embed_dim, d.embed_dim),
    }
    for dom in domain_ids:
        params[token_key(dom)] = np.zeros(d.token_dim)
    return params


def copy_params(params: ParamDict) -> ParamDict:
    return {k: v.copy() for k, v in params.items()}


def params_close(a: ParamDict, b: ParamDict) -> bool:
    """Byte-level equality of two parameter dicts."""
    if set(a) != set(b):
        return False
    return all(
        a[k].shape == b[k].shape and a[k].tobytes() == b[k].tobytes() for k in a
    )


def append_bias(x: np.ndarray) -> np.ndarray:
    """Append a constant 1 column so no input row can be all zero."""
    return np.hstack([x, np.ones((x.shape[0], 1))])


def attach_token(x: np.ndarray, token: np.ndarray) -> np.ndarray:
    """Append one shared token row to every feature row; width 0 is a no-op."""
    token = np.asarray(token, dtype=np.float64)
    if token.ndim != 1:
        raise ValidationError(f"token must be 1-d, got shape {token.shape}")
    if token.shape[0] == 0:
        return x
    tiled = np.broadcast_to(token, (x.shape[0], token.shape[0]))
    return np.hstack([x, tiled])


def gnn_forward(a_hat: sp.spmatrix, x: np.ndarray, w1: np.ndarray, w2: np.ndarray):
    """Two-layer propagation out = A_hat relu(A_hat x w1) w2.

    a_hat must be symmetric (the backward pass relies on it).  Returns the
    output and a cache for gnn_backward.
    """
    if x.shape[1] != w1.shape[0]:
        raise ValidationError(
            f"input width {x.shape[1]} does not match w1 rows {w1.shape[0]}"
        )
    ax = a_hat @ x
    pre = ax @ w1
    hidden = np.maximum(pre, 0.0)
    ah = a_hat @ hidden
    out = ah @ w2
    return out, (a_hat, ax, pre, ah, w1, w2)


def gnn_backward(cache, dout: np.ndarray):
    """Gradients of a cached gnn_forward: returns (dw1, dw2, dx)."""
    a_hat, ax, pre, ah, w1, w2 = cache
    dw2 = ah.T @ dout
    dhidden = (a_hat @ dout) @ w2.T
    dpre = dhidden * (pre > 0.0)
    dw1 = ax.T @ dpre
    dx = a_hat @ (dpre @ w1.T)
    return dw1, dw2, dx


def encode_view(
    a_hat: sp.spmatrix,
    x: np.ndarray,
    token: np.ndarray,
    w1: np.ndarray,
    w2: np.ndarray,
):
    """Encode one view: [features | bias | domain token] through the GNN.

    The cache remembers the raw feature width so backward can split dx into
    feature, bias (dropped: constant input), and token parts.
    """
    xin = attach_token(append_bias(x), token)
    out, cache = gnn_forward(a_hat, xin, w1, w2)
    return out, (cache, x.shape[1])


def encode_view_backward(view_cache, dout: np.ndarray):
    """Returns (dw1, dw2, dx_features, dtoken)."""
    cache, feat_width = view_cache
    dw1, dw2, dxin = gnn_backward(cache, dout)
    dx = dxin[:, :feat_width]
    dtoken = dxin[:, feat_width + 1:].sum(axis=0)
    return dw1, dw2, dx, dtoken


@dataclass
class AdamState:
    """Adam with bias correction and decoupled weight decay."""

    lr: float
    weight_decay: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: ParamDict = field(default_factory=dict)
    v: ParamDict = field(default_factory=dict)


def adam_step(params: ParamDict, grads: ParamDict, state: AdamState) -> None:
    """One in-place update.  Non-finite gradients refuse the whole step."""
    for key in grads:
        if key not in params:
            raise ValidationError(f"gradient for unknown parameter {key!r}")
        if not np.all(np.isfinite(grads[key])):
            raise NumericalError(f"non-finite gradient for {key!r}; step refused")
    state.step += 1
    bc1 = 1.0 - state.beta1 ** state.step
    bc2 = 1.0 - state.beta2 ** state.step
    for key in sorted(grads):
        g = grads[key]
        if key not in state.m:
            state.m[key] = np.zeros_like(g)
            state.v[key] = np.zeros_like(g)
        m, v = state.m[key], state.v[key]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        update = (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        if state.weight_decay:
            update = update + state.weight_decay * params[key]
        params[key] -= state.lr * update


LossFn = Callable[[ParamDict], tuple[float, ParamDict]]


def grad_check(
    loss_fn: LossFn,
    params: ParamDict,
    eps: float = 1e-5,
    sample: int = 200,
    rng: Optional[np.random.Generator] = None,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    Samples up to ``sample`` coordinates uniformly across all parameters
    (all of them when fewer exist).  Relative error is
    |num - ana| / max(|num|, |ana|, 1e-8).
    """
    if not (1e-6 <= eps <= 1e-3):
        raise ParameterError(f"eps must lie in [1e-6, 1e-3], got {eps}")
    rng = rng if rng is not None else np.random.default_rng(0)
    loss0, grads = loss_fn(params)
    if not np.isfinite(loss0):
        raise NumericalError("loss is non-finite at the evaluation point")
    coords = [
        (key, idx) for key in sorted(grads) for idx in range(grads[key].size)
    ]
    if len(coords) > sample:
        chosen = rng.choice(len(coords), size=sample, replace=False)
        coords = [coords[i] for i in chosen]
    worst = 0.0
    for key, idx in coords:
        flat = params[key].reshape(-1)
        orig = flat[idx]
        flat[idx] = orig + eps
        plus, _ = loss_fn(params)
        flat[idx] = orig - eps
        minus, _ = loss_fn(params)
        flat[idx] = orig
        numeric = (plus - minus) / (2.0 * eps)
        analytic = grads[key].reshape(-1)[idx]
        rel = abs(numeric - analytic) / max(abs(numeric), abs(analytic), 1e-8)
        worst = max(worst, rel)
    return worst


def params_to_jsonable(params: ParamDict) -> dict:
    """Nested-list form with full float precision (lossless via JSON)."""
    out = {}
    for key in sorted(params):
        arr = params[key]
        out[key] = {"shape": list(arr.shape), "data": [float(x) for x in arr.reshape(-1)]}
    return out


def params_from_jsonable(obj: dict) -> ParamDict:
    params: ParamDict = {}
    for key, entry in obj.items():
        arr = np.asarray(entry["data"], dtype=np.float64).reshape(entry["shape"])
        params[key] = arr
    return params
