"""Token encoder: embedding lookup, a single transformer block, mean-pooling.

A tokenized entity is a fixed-width set of token slots (anchors, in-direction
neighbors, out-direction neighbors, center) with a boolean mask; there is no
token order, so the block uses no positional encodings.  All backward passes
are written out by hand so the training loop can run without an autograd
framework; caches returned by the forward functions hold exactly the
activations the backward needs.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import erf

SEG_ANCHOR, SEG_IN, SEG_OUT, SEG_CENTER = 0, 1, 2, 3
NUM_SEGMENTS = 4

_SQRT2 = np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)

# weight names by combiner mode; "tok" rows are updated sparsely
TRANSFORMER_PARAMS = (
    "tok", "type", "wq", "wk", "wv", "wo",
    "w1", "b1", "w2", "b2", "ln1_g", "ln1_b", "ln2_g", "ln2_b", "out_proj",
)
MEANPOOL_PARAMS = ("tok", "type", "out_proj")


@dataclass(frozen=True)
class EncoderConfig:
    d_tok: int
    heads: int = 4
    ffn_mult: int = 2
    out_dim: int = 0          # width of the projected entity vector(s)
    combiner: str = "transformer"  # "transformer" | "mean"

    def __post_init__(self):
        if self.combiner == "transformer" and self.d_tok % self.heads:
            raise ValueError(
                f"d_tok={self.d_tok} not divisible by heads={self.heads}"
            )
        if self.out_dim <= 0:
            raise ValueError("out_dim must be positive")
        if self.combiner not in ("transformer", "mean"):
            raise ValueError(f"unknown combiner {self.combiner!r}")


def init_encoder_params(cfg: EncoderConfig, vocab_size: int,
                        rng: np.random.Generator, dtype=np.float32,
                        pad_row: int | None = None) -> dict[str, np.ndarray]:
    dt = cfg.d_tok
    emb_scale = 0.5 / np.sqrt(dt)

    def xavier(fan_in, fan_out):
        lim = np.sqrt(6.0 / (fan_in + fan_out))
        return rng.uniform(-lim, lim, (fan_in, fan_out))

    params = {
        "tok": rng.uniform(-emb_scale, emb_scale, (vocab_size, dt)),
        "type": rng.uniform(-emb_scale, emb_scale, (NUM_SEGMENTS, dt)),
        "out_proj": xavier(dt, cfg.out_dim),
    }
    if cfg.combiner == "transformer":
        f = cfg.ffn_mult * dt
        params.update(
            wq=xavier(dt, dt), wk=xavier(dt, dt), wv=xavier(dt, dt),
            wo=xavier(dt, dt),
            w1=xavier(dt, f), b1=np.zeros(f),
            w2=xavier(f, dt), b2=np.zeros(dt),
            ln1_g=np.ones(dt), ln1_b=np.zeros(dt),
            ln2_g=np.ones(dt), ln2_b=np.zeros(dt),
        )
    if pad_row is not None:
        params["tok"][pad_row] = 0.0
    return {k: np.asarray(v, dtype=dtype) for k, v in params.items()}


def _gelu(x):
    return 0.5 * x * (1.0 + erf(x / _SQRT2))


def _gelu_grad(x):
    return 0.5 * (1.0 + erf(x / _SQRT2)) + x * np.exp(-0.5 * x * x) * _INV_SQRT2PI


def _layernorm_fwd(x, gamma, beta, eps=1e-5):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    return xhat * gamma + beta, (xhat, inv)


def _layernorm_bwd(dout, cache, gamma):
    xhat, inv = cache
    dgamma = (dout * xhat).reshape(-1, dout.shape[-1]).sum(axis=0)
    dbeta = dout.reshape(-1, dout.shape[-1]).sum(axis=0)
    dxhat = dout * gamma
    dx = inv * (
        dxhat
        - dxhat.mean(axis=-1, keepdims=True)
        - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
    )
    return dx, dgamma, dbeta


def embed_tokens(params: dict, ids: np.ndarray, seg: np.ndarray,
                 mask: np.ndarray) -> np.ndarray:
    """Token rows = token embedding + segment-type embedding; pad rows are
    exactly zero.  ids: [B, T]; seg: [T]; mask: [B, T] bool."""
    tok = params["tok"]
    if ids.min(initial=0) < 0 or ids.max(initial=0) >= len(tok):
        raise ValueError(
            f"token id out of range [0, {len(tok)}) in {ids.min()}..{ids.max()}"
        )
    x = tok[ids] + params["type"][seg]
    return x * mask[..., None]


def transformer_block(params: dict, cfg: EncoderConfig, x: np.ndarray,
                      mask: np.ndarray):
    """Pre-norm block: x + MHA(LN(x)), then + FFN(LN(.)).

    Pad positions are excluded from attention with additive -inf logits; at
    least one real token per row is required.
    """
    b, t, dt = x.shape
    if not mask.any(axis=1).all():
        raise ValueError("transformer_block: row with all positions padded")
    heads, dh = cfg.heads, dt // cfg.heads

    x1, ln1c = _layernorm_fwd(x, params["ln1_g"], params["ln1_b"])
    qh = (x1 @ params["wq"]).reshape(b, t, heads, dh)
    kh = (x1 @ params["wk"]).reshape(b, t, heads, dh)
    vh = (x1 @ params["wv"]).reshape(b, t, heads, dh)
    logits = np.einsum("bthd,bshd->bhts", qh, kh) / np.sqrt(dh)
    logits = logits + np.where(mask, 0.0, -np.inf)[:, None, None, :]
    w = np.exp(logits - logits.max(axis=-1, keepdims=True))
    w /= w.sum(axis=-1, keepdims=True)
    ctx = np.einsum("bhts,bshd->bthd", w, vh).reshape(b, t, dt)
    attn = ctx @ params["wo"]
    y1 = x + attn

    x2, ln2c = _layernorm_fwd(y1, params["ln2_g"], params["ln2_b"])
    pre = x2 @ params["w1"] + params["b1"]
    hf = _gelu(pre)
    y = y1 + hf @ params["w2"] + params["b2"]

    cache = {
        "x1": x1, "ln1": ln1c, "qh": qh, "kh": kh, "vh": vh, "w": w,
        "ctx": ctx, "x2": x2, "ln2": ln2c, "pre": pre, "hf": hf,
        "shape": (b, t, dt),
    }
    return y, cache


def transformer_block_backward(params: dict, cfg: EncoderConfig, cache: dict,
                               dy: np.ndarray):
    """Exact reverse of :func:`transformer_block`: input grads + weight grads."""
    b, t, dt = cache["shape"]
    if dy.shape != (b, t, dt):
        raise ValueError(f"upstream shape {dy.shape} != cached {(b, t, dt)}")
    heads, dh = cfg.heads, dt // cfg.heads
    g: dict[str, np.ndarray] = {}

    # FFN branch
    dhf = dy @ params["w2"].T
    g["w2"] = cache["hf"].reshape(-1, cache["hf"].shape[-1]).T @ dy.reshape(-1, dt)
    g["b2"] = dy.reshape(-1, dt).sum(axis=0)
    dpre = dhf * _gelu_grad(cache["pre"])
    g["w1"] = cache["x2"].reshape(-1, dt).T @ dpre.reshape(-1, dpre.shape[-1])
    g["b1"] = dpre.reshape(-1, dpre.shape[-1]).sum(axis=0)
    dx2 = dpre @ params["w1"].T
    dln2, g["ln2_g"], g["ln2_b"] = _layernorm_bwd(dx2, cache["ln2"], params["ln2_g"])
    dy1 = dy + dln2

    # attention branch
    g["wo"] = cache["ctx"].reshape(-1, dt).T @ dy1.reshape(-1, dt)
    dctx = (dy1 @ params["wo"].T).reshape(b, t, heads, dh)
    w = cache["w"]
    dw = np.einsum("bthd,bshd->bhts", dctx, cache["vh"])
    dvh = np.einsum("bhts,bthd->bshd", w, dctx)
    dlogits = w * (dw - (w * dw).sum(axis=-1, keepdims=True))
    dqh = np.einsum("bhts,bshd->bthd", dlogits, cache["kh"]) / np.sqrt(dh)
    dkh = np.einsum("bhts,bthd->bshd", dlogits, cache["qh"]) / np.sqrt(dh)
    x1f = cache["x1"].reshape(-1, dt)
    dq = dqh.reshape(-1, dt)
    dk = dkh.reshape(-1, dt)
    dv = dvh.reshape(-1, dt)
    g["wq"] = x1f.T @ dq
    g["wk"] = x1f.T @ dk
    g["wv"] = x1f.T @ dv
    dx1 = dq @ params["wq"].T + dk @ params["wk"].T + dv @ params["wv"].T
    dln1, g["ln1_g"], g["ln1_b"] = _layernorm_bwd(
        dx1.reshape(b, t, dt), cache["ln1"], params["ln1_g"]
    )
    dx = dy1 + dln1
    return dx, g


def encode_entity(params: dict, cfg: EncoderConfig, ids: np.ndarray,
                  seg: np.ndarray, mask: np.ndarray):
    """Mean-pool the block outputs over real tokens and project.

    Returns the projected [B, out_dim] entity vectors plus the backward
    cache.  With ``combiner="mean"`` the transformer is skipped and the raw
    token rows are pooled directly.
    """
    n_real = mask.sum(axis=1)
    if (n_real == 0).any():
        raise ValueError("encode_entity: entity with no real tokens")
    x = embed_tokens(params, ids, seg, mask)
    if cfg.combiner == "transformer":
        y, block = transformer_block(params, cfg, x, mask)
    else:
        y, block = x, None
    pooled = (y * mask[..., None]).sum(axis=1) / n_real[:, None]
    out = pooled @ params["out_proj"]
    cache = {
        "ids": ids, "seg": seg, "mask": mask, "n_real": n_real,
        "pooled": pooled, "block": block,
    }
    return out, cache


def encode_entity_backward(params: dict, cfg: EncoderConfig, cache: dict,
                           d_out: np.ndarray):
    """Gradients of a scalar objective given d(objective)/d(out).

    Returns ``(tok_ids, tok_rows, dense)``: flat token ids with their
    per-row gradients (the sparse part) and a dict of dense gradients for
    every other weight the active combiner uses.
    """
    mask = cache["mask"]
    dense: dict[str, np.ndarray] = {"out_proj": cache["pooled"].T @ d_out}
    d_pool = d_out @ params["out_proj"].T
    dy = mask[..., None] * (d_pool / cache["n_real"][:, None])[:, None, :]
    if cfg.combiner == "transformer":
        dx, wg = transformer_block_backward(params, cfg, cache["block"], dy)
        dense.update(wg)
    else:
        dx = dy
    dx = dx * mask[..., None]

    dt = dx.shape[-1]
    flat = mask.reshape(-1)
    tok_ids = cache["ids"].reshape(-1)[flat]
    tok_rows = dx.reshape(-1, dt)[flat]
    d_type = np.zeros_like(params["type"])
    seg_flat = np.broadcast_to(cache["seg"], cache["ids"].shape).reshape(-1)[flat]
    np.add.at(d_type, seg_flat, tok_rows)
    dense["type"] = d_type
    return tok_ids, tok_rows, dense


def encode_entity_grads(params: dict, cfg: EncoderConfig, cache: dict,
                        d_out: np.ndarray) -> dict[str, np.ndarray]:
    """Dense-gradient convenience wrapper (token table densified)."""
    tok_ids, tok_rows, dense = encode_entity_backward(params, cfg, cache, d_out)
    d_tok = np.zeros_like(params["tok"])
    np.add.at(d_tok, tok_ids, tok_rows)
    dense["tok"] = d_tok
    return dense
