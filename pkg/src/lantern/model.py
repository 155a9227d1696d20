"""LANTERN network: two tabular encoders, survey-query cross-attention, gated
residual fusion and a masked sigmoid head.

Parameters live in a flat ``dict[str, Tensor]`` keyed by dotted names, so a
variant can select a subset by prefix and checkpoints can store them as-is.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor

LanternParams = dict[str, Tensor]

PROB_CLAMP = 1e-7


@dataclass(frozen=True)
class LanternConfig:
    survey_dim: int
    external_dim: int
    n_keys: int
    d_embed: int = 32
    d_proj: int = 64
    n_tokens: int = 8
    d_token: int = 8
    n_heads: int = 2
    n_layers: int = 2
    d_ffn: int = 128
    dropout_rate: float = 0.1
    noise_sigma: float = 0.1
    ln_eps: float = 1e-5
    gate_bias_init: float = -2.0

    def __post_init__(self):
        for name in ("survey_dim", "external_dim", "n_keys", "d_embed", "d_proj", "n_tokens",
                     "d_token", "n_heads", "n_layers", "d_ffn"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.n_tokens * self.d_token != self.d_proj:
            raise ValueError(
                f"n_tokens * d_token must equal d_proj ({self.n_tokens}*{self.d_token} != {self.d_proj})"
            )
        if self.d_token % self.n_heads:
            raise ValueError(f"d_token={self.d_token} is not divisible by n_heads={self.n_heads}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError(f"dropout_rate must lie in [0, 1), got {self.dropout_rate}")
        if self.noise_sigma < 0 or self.ln_eps <= 0:
            raise ValueError("noise_sigma must be >= 0 and ln_eps > 0")

    @classmethod
    def production_scale(cls, survey_dim: int, external_dim: int, n_keys: int, **overrides) -> "LanternConfig":
        """512-d embeddings, 2048-d projection viewed as 64 tokens of 32, 8 heads, 3 layers."""
        base = dict(d_embed=512, d_proj=2048, n_tokens=64, d_token=32, n_heads=8, n_layers=3, d_ffn=4096)
        base.update(overrides)
        return cls(survey_dim, external_dim, n_keys, **base)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class Hooks:
    """Test switches for isolating parts of the network.

    ``force_gate`` replaces the learned gate with a constant.  ``regularizers``
    toggles the post-fusion dropout/layer-norm/noise stack.  The remaining
    switches strip the transformer layers down to bare attention.
    """

    force_gate: Optional[float] = None
    regularizers: bool = True
    residual_norm: bool = True
    identity_projections: bool = False
    scale_scores: bool = True


DEFAULT_HOOKS = Hooks()


# ---------------------------------------------------------------------------
# parameters


def param_shapes(cfg: LanternConfig) -> dict[str, tuple[int, ...]]:
    """Every parameter name mapped to its shape; the order is the canonical order."""
    D, P, dt, ff = cfg.d_embed, cfg.d_proj, cfg.d_token, cfg.d_ffn
    shapes: dict[str, tuple[int, ...]] = {}
    for branch, fan_in in (("survey", cfg.survey_dim), ("external", cfg.external_dim)):
        shapes[f"{branch}_enc.w1"] = (fan_in, D)
        shapes[f"{branch}_enc.b1"] = (D,)
        shapes[f"{branch}_enc.w2"] = (D, D)
        shapes[f"{branch}_enc.b2"] = (D,)
    for branch in ("survey", "external"):
        shapes[f"xattn.proj_{branch}.w"] = (D, P)
        shapes[f"xattn.proj_{branch}.b"] = (P,)
    for i in range(cfg.n_layers):
        pre = f"xattn.layer{i}"
        for proj in ("q", "k", "v", "o"):
            shapes[f"{pre}.w{proj}"] = (dt, dt)
            # no key bias: it shifts every score in a row equally and softmax ignores it
            if proj != "k":
                shapes[f"{pre}.b{proj}"] = (dt,)
        shapes[f"{pre}.ln1.gamma"] = (dt,)
        shapes[f"{pre}.ln1.beta"] = (dt,)
        shapes[f"{pre}.ffn.w1"] = (dt, ff)
        shapes[f"{pre}.ffn.b1"] = (ff,)
        shapes[f"{pre}.ffn.w2"] = (ff, dt)
        shapes[f"{pre}.ffn.b2"] = (dt,)
        shapes[f"{pre}.ln2.gamma"] = (dt,)
        shapes[f"{pre}.ln2.beta"] = (dt,)
    shapes["xattn.collapse.w"] = (P, D)
    shapes["xattn.collapse.b"] = (D,)
    shapes["gate.w"] = (2 * D, D)
    shapes["gate.b"] = (D,)
    shapes["fusion_norm.gamma"] = (D,)
    shapes["fusion_norm.beta"] = (D,)
    shapes["head.w"] = (D, cfg.n_keys)
    shapes["head.b"] = (cfg.n_keys,)
    return shapes


def count_params(shapes_or_params) -> int:
    total = 0
    for v in shapes_or_params.values():
        total += v.size if isinstance(v, Tensor) else math.prod(v)
    return total


def init_params(cfg: LanternConfig, seed: int = 0, dtype=np.float64) -> LanternParams:
    """Glorot-uniform weights, zero biases, unit/zero layer-norm affines.

    The gate bias starts at ``cfg.gate_bias_init``; a negative value opens the
    gate only as far as training finds the external branch useful.
    """
    rng = np.random.default_rng(seed)
    params: LanternParams = {}
    for name, shape in param_shapes(cfg).items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf == "gamma":
            data = np.ones(shape)
        elif name == "gate.b":
            data = np.full(shape, cfg.gate_bias_init)
        elif len(shape) == 1:
            data = np.zeros(shape)
        else:
            limit = math.sqrt(6.0 / (shape[0] + shape[1]))
            data = rng.uniform(-limit, limit, size=shape)
        params[name] = Tensor(data.astype(dtype), requires_grad=True, name=name)
    return params


# ---------------------------------------------------------------------------
# building blocks


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    return ad.add(ad.matmul(x, w), b)


def encode(branch: str, x: Tensor, params: LanternParams) -> Tensor:
    """Two-layer feed-forward encoder ``F -> D -> D`` with a ReLU between layers."""
    if branch not in ("survey", "external"):
        raise ValueError(f"unknown branch {branch!r}")
    pre = f"{branch}_enc"
    w1 = params[f"{pre}.w1"]
    if x.ndim != 2 or x.shape[1] != w1.shape[0]:
        raise ShapeError(f"{branch} encoder expects (N, {w1.shape[0]}) input, got {x.shape}")
    h = ad.relu(linear(x, w1, params[f"{pre}.b1"]))
    return linear(h, params[f"{pre}.w2"], params[f"{pre}.b2"])


def _split_heads(t: Tensor, n_heads: int) -> Tensor:
    n, T, dt = t.shape
    t = ad.reshape(t, (n, T, n_heads, dt // n_heads))
    t = ad.transpose(t, (0, 2, 1, 3))
    return ad.reshape(t, (n * n_heads, T, dt // n_heads))


def _merge_heads(t: Tensor, n: int, n_heads: int) -> Tensor:
    _, T, dh = t.shape
    t = ad.reshape(t, (n, n_heads, T, dh))
    t = ad.transpose(t, (0, 2, 1, 3))
    return ad.reshape(t, (n, T, n_heads * dh))


def attention(
    queries: Tensor,
    keys_values: Tensor,
    layer: dict[str, Tensor] | None,
    n_heads: int,
    hooks: Hooks = DEFAULT_HOOKS,
) -> tuple[Tensor, np.ndarray]:
    """Multi-head attention of ``queries`` (N, Tq, dt) over ``keys_values`` (N, Tk, dt).

    ``layer`` holds ``wq, bq, wk, wv, bv, wo, bo``; it is ignored under
    ``hooks.identity_projections``.  Returns the attended tokens and the
    attention weights with shape (N, heads, Tq, Tk).
    """
    if queries.ndim != 3 or keys_values.ndim != 3 or queries.shape[2] != keys_values.shape[2]:
        raise ShapeError(f"attention token shapes disagree: {queries.shape} vs {keys_values.shape}")
    n, _, dt = queries.shape
    if dt % n_heads:
        raise ShapeError(f"token width {dt} not divisible by {n_heads} heads")
    if hooks.identity_projections:
        q, k, v = queries, keys_values, keys_values
    else:
        q = linear(queries, layer["wq"], layer["bq"])
        k = ad.matmul(keys_values, layer["wk"])
        v = linear(keys_values, layer["wv"], layer["bv"])
    qh, kh, vh = (_split_heads(t, n_heads) for t in (q, k, v))
    scores = ad.matmul(qh, ad.transpose(kh, (0, 2, 1)))
    if hooks.scale_scores:
        scores = ad.scale(scores, 1.0 / math.sqrt(dt // n_heads))
    weights = ad.softmax(scores)
    out = _merge_heads(ad.matmul(weights, vh), n, n_heads)
    if not hooks.identity_projections:
        out = linear(out, layer["wo"], layer["bo"])
    return out, weights.data.reshape(n, n_heads, *weights.shape[1:])


def _layer_params(params: LanternParams, i: int) -> dict[str, Tensor]:
    pre = f"xattn.layer{i}."
    return {k[len(pre):]: v for k, v in params.items() if k.startswith(pre)}


def transformer_layer(
    survey_tokens: Tensor,
    external_tokens: Tensor,
    layer: dict[str, Tensor],
    cfg: LanternConfig,
    hooks: Hooks = DEFAULT_HOOKS,
) -> Tensor:
    """Post-norm layer: cross-attention, residual + norm, token-wise FFN, residual + norm."""
    attended, _ = attention(survey_tokens, external_tokens, layer, cfg.n_heads, hooks)
    if hooks.residual_norm:
        attended = ad.layer_norm(ad.add(survey_tokens, attended), layer["ln1.gamma"], layer["ln1.beta"], cfg.ln_eps)
    hidden = ad.relu(linear(attended, layer["ffn.w1"], layer["ffn.b1"]))
    out = linear(hidden, layer["ffn.w2"], layer["ffn.b2"])
    if hooks.residual_norm:
        out = ad.layer_norm(ad.add(attended, out), layer["ln2.gamma"], layer["ln2.beta"], cfg.ln_eps)
    return out


def cross_attention_block(
    h_s: Tensor,
    h_e: Tensor,
    params: LanternParams,
    cfg: LanternConfig,
    hooks: Hooks = DEFAULT_HOOKS,
) -> Tensor:
    """Survey embedding attends to the external embedding; returns ``h_t`` of shape (N, D)."""
    if h_s.shape != h_e.shape or h_s.ndim != 2 or h_s.shape[1] != cfg.d_embed:
        raise ShapeError(f"cross-attention expects two (N, {cfg.d_embed}) inputs, got {h_s.shape} and {h_e.shape}")
    n = h_s.shape[0]
    tok_shape = (n, cfg.n_tokens, cfg.d_token)
    s_tok = ad.reshape(linear(h_s, params["xattn.proj_survey.w"], params["xattn.proj_survey.b"]), tok_shape)
    e_tok = ad.reshape(linear(h_e, params["xattn.proj_external.w"], params["xattn.proj_external.b"]), tok_shape)
    for i in range(cfg.n_layers):
        s_tok = transformer_layer(s_tok, e_tok, _layer_params(params, i), cfg, hooks)
    flat = ad.reshape(s_tok, (n, cfg.d_proj))
    return linear(flat, params["xattn.collapse.w"], params["xattn.collapse.b"])


def regularize(h: Tensor, params: LanternParams, cfg: LanternConfig, training: bool, rng, hooks: Hooks = DEFAULT_HOOKS) -> Tensor:
    """Dropout, layer-norm, then Gaussian noise (noise and dropout only while training)."""
    if not hooks.regularizers:
        return h
    h = ad.dropout(h, cfg.dropout_rate, training, rng)
    h = ad.layer_norm(h, params["fusion_norm.gamma"], params["fusion_norm.beta"], cfg.ln_eps)
    return ad.gaussian_noise(h, cfg.noise_sigma, training, rng)


def gate_values(h_s: Tensor, h_t: Tensor, params: LanternParams, hooks: Hooks = DEFAULT_HOOKS) -> Tensor:
    if hooks.force_gate is not None:
        return Tensor(np.full(h_s.shape, hooks.force_gate, dtype=h_s.dtype))
    return ad.sigmoid(linear(ad.concat([h_s, h_t], axis=-1), params["gate.w"], params["gate.b"]))


def fuse(h_s: Tensor, h_t: Tensor, g: Tensor) -> Tensor:
    # (1-g)*h_s + g*h_t equals h_s + g*(h_t - h_s) but is exact at g=0 and g=1
    one = Tensor(np.ones((), dtype=g.dtype))
    return ad.add(ad.mul(ad.sub(one, g), h_s), ad.mul(g, h_t))


def gated_fusion(
    h_s: Tensor,
    h_t: Tensor,
    params: LanternParams,
    cfg: LanternConfig,
    training: bool = False,
    rng=None,
    hooks: Hooks = DEFAULT_HOOKS,
) -> tuple[Tensor, Tensor]:
    """Return the regularised fused embedding and the per-user, per-dimension gate."""
    if h_s.shape != h_t.shape:
        raise ShapeError(f"fusion operands differ in shape: {h_s.shape} vs {h_t.shape}")
    g = gate_values(h_s, h_t, params, hooks)
    fused = fuse(h_s, h_t, g)
    return regularize(fused, params, cfg, training, rng, hooks), g


def output_head(h: Tensor, params: LanternParams) -> Tensor:
    return ad.sigmoid(linear(h, params["head.w"], params["head.b"]))


def _as_tensor(x, dtype) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=dtype))


def forward(
    x_s,
    x_e,
    params: LanternParams,
    cfg: LanternConfig,
    training: bool = False,
    rng=None,
    hooks: Hooks = DEFAULT_HOOKS,
) -> tuple[Tensor, Tensor]:
    """Full fused forward pass; returns ``(y_hat, gate)``."""
    dtype = params["head.w"].dtype
    x_s, x_e = _as_tensor(x_s, dtype), _as_tensor(x_e, dtype)
    if x_s.shape[0] != x_e.shape[0]:
        raise ShapeError(f"survey and external batches differ: {x_s.shape} vs {x_e.shape}")
    h_s = encode("survey", x_s, params)
    h_e = encode("external", x_e, params)
    h_t = cross_attention_block(h_s, h_e, params, cfg, hooks)
    fused, g = gated_fusion(h_s, h_t, params, cfg, training, rng, hooks)
    return output_head(fused, params), g


def forward_shapes(x_s, x_e, params: LanternParams, cfg: LanternConfig) -> dict[str, tuple[int, ...]]:
    """Shapes of the main intermediates of an eval-mode pass, for inspection."""
    dtype = params["head.w"].dtype
    x_s, x_e = _as_tensor(x_s, dtype), _as_tensor(x_e, dtype)
    h_s = encode("survey", x_s, params)
    h_e = encode("external", x_e, params)
    proj = linear(h_s, params["xattn.proj_survey.w"], params["xattn.proj_survey.b"])
    tokens = ad.reshape(proj, (proj.shape[0], cfg.n_tokens, cfg.d_token))
    h_t = cross_attention_block(h_s, h_e, params, cfg)
    fused, g = gated_fusion(h_s, h_t, params, cfg)
    y = output_head(fused, params)
    return {
        "h_s": h_s.shape,
        "h_e": h_e.shape,
        "projected": proj.shape,
        "tokens": tokens.shape,
        "h_t": h_t.shape,
        "gate": g.shape,
        "y_hat": y.shape,
    }


# ---------------------------------------------------------------------------
# loss and gate inspection


def check_mask(mask) -> np.ndarray:
    m = np.asarray(mask)
    bad = ~np.isin(m, (-1, 0, 1))
    if bad.any():
        raise ValueError(f"mask values must be in {{-1, 0, 1}}; found {np.unique(m[bad]).tolist()}")
    return m


def masked_bce_loss(y_hat: Tensor, mask) -> Tensor:
    """Binary cross-entropy averaged over entries with ``mask != 0``.

    ``+1`` entries are positives and ``-1`` negatives; unasked keys contribute
    neither to the loss nor to its gradient.  An all-zero mask gives loss 0.
    """
    m = check_mask(mask)
    if m.shape != y_hat.shape:
        raise ShapeError(f"mask shape {m.shape} does not match predictions {y_hat.shape}")
    included = m != 0
    n = int(included.sum())
    dtype = y_hat.dtype
    if n == 0:
        return ad.custom_op(np.zeros((), dtype=dtype), (y_hat,), lambda g: (np.zeros_like(y_hat.data),), "masked_bce")
    target = m > 0
    p = np.clip(y_hat.data, PROB_CLAMP, 1.0 - PROB_CLAMP)
    per_entry = -np.where(target, np.log(p), np.log1p(-p))
    loss = np.where(included, per_entry, 0.0).sum() / n
    live = included & (y_hat.data == p)

    def backward_fn(g):
        d = np.where(target, -1.0 / p, 1.0 / (1.0 - p)) * (g / n)
        return (np.where(live, d, 0.0).astype(dtype),)

    return ad.custom_op(np.asarray(loss, dtype=dtype), (y_hat,), backward_fn, "masked_bce")


def extract_gate_values(x_s, x_e, params: LanternParams, cfg: LanternConfig, batch_size: int = 1024) -> np.ndarray:
    """Eval-mode gate activations for every user and embedding dimension, flattened."""
    out = []
    n = np.shape(x_s)[0]
    for start in range(0, n, batch_size):
        _, g = forward(np.asarray(x_s)[start:start + batch_size], np.asarray(x_e)[start:start + batch_size], params, cfg)
        out.append(g.data.reshape(-1))
    return np.concatenate(out) if out else np.zeros(0)
