"""Negative sampling, margin loss, sparse Adam, and the training loop.

The loss for one positive is
    L = -log sigmoid(gamma - d_pos) - sum_i w_i * log sigmoid(d_neg_i - gamma)
where the w_i are either uniform 1/k or a detached softmax over the negative
distances (self-adversarial weighting).  Bilinear kinds plug in through the
sign-flip adapter in scoring, so "smaller d" always means "more plausible".

Embedding-row gradients stay sparse end to end: rows a step never touched
are skipped by the optimizer and their bias-correction counters do not
advance.
"""
from __future__ import annotations

import hashlib
import json
import logging
import struct
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import expit

from .data import TripleStore
from .model import KgeModel, TokenLayout, build_model
from .scoring import model_kind

log = logging.getLogger(__name__)

CKPT_MAGIC = b"KGCK"
CKPT_VERSION = 1

CORRUPTION_MODES = ("head", "tail", "both")


class CheckpointError(ValueError):
    """Unreadable or incompatible checkpoint file."""


@dataclass
class TrainConfig:
    model: str = "interht"
    dim: int = 200
    p: int = 1
    u: float = 0.0
    gamma: float = 10.0
    adv_alpha: float = 1.0
    lr: float = 5e-4
    batch_size: int = 512
    neg_size: int = 128
    steps_max: int = 500_000
    valid_every: int = 20_000
    log_every: int = 100
    corruption: str = "both"
    filter_train_negatives: bool = False
    seed: int = 0
    tokenized: bool = False
    d_tok: int = 0            # 0 = follow dim
    heads: int = 4
    ffn_mult: int = 2
    combiner: str = "transformer"
    use_center: bool = True

    def validate(self) -> None:
        kind = model_kind(self.model)
        if self.dim < 1:
            raise ValueError("dim must be positive")
        if kind.even_dim and self.dim % 2:
            raise ValueError(f"{self.model} needs an even dim, got {self.dim}")
        if self.p not in (1, 2):
            raise ValueError(f"norm order p must be 1 or 2, got {self.p}")
        if self.gamma <= 0:
            raise ValueError("gamma must be positive")
        if self.adv_alpha < 0:
            raise ValueError("adv_alpha must be non-negative")
        if self.u < 0:
            raise ValueError("u must be non-negative")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        for name in ("batch_size", "neg_size", "valid_every", "log_every"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.steps_max < 0:
            raise ValueError("steps_max must be >= 0")
        if self.corruption not in CORRUPTION_MODES:
            raise ValueError(
                f"corruption must be one of {CORRUPTION_MODES}, "
                f"got {self.corruption!r}"
            )

    def hash(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def build_model_from_config(cfg: TrainConfig, num_entities: int,
                            num_relations: int, tokens=None,
                            dtype=np.float32) -> KgeModel:
    if cfg.tokenized and tokens is None:
        raise ValueError("tokenized model requires a token cache")
    return build_model(
        cfg.model, num_entities, num_relations, cfg.dim,
        p=cfg.p, u=cfg.u, seed=cfg.seed, dtype=dtype,
        tokens=tokens if cfg.tokenized else None,
        d_tok=cfg.d_tok or cfg.dim, heads=cfg.heads, ffn_mult=cfg.ffn_mult,
        combiner=cfg.combiner, use_center=cfg.use_center,
    )


class GradBuffer:
    """Accumulates gradients: dense per-weight arrays plus row-sparse
    (ids, rows) pairs for embedding tables."""

    def __init__(self):
        self.dense: dict[str, np.ndarray] = {}
        self._row_ids: dict[str, list[np.ndarray]] = {}
        self._row_vals: dict[str, list[np.ndarray]] = {}

    def add_dense(self, name: str, g: np.ndarray) -> None:
        if name in self.dense:
            self.dense[name] = self.dense[name] + g
        else:
            self.dense[name] = g

    def add_rows(self, name: str, ids: np.ndarray, rows: np.ndarray) -> None:
        ids = np.asarray(ids).reshape(-1)
        rows = np.asarray(rows).reshape(len(ids), -1)
        self._row_ids.setdefault(name, []).append(ids)
        self._row_vals.setdefault(name, []).append(rows)

    def finalize(self, frozen_rows: dict[str, int] | None = None) -> dict:
        """Merge duplicates and drop all-zero and frozen rows.

        Returns {name: ("dense", array) | ("rows", ids, rows)}.
        """
        frozen_rows = frozen_rows or {}
        out: dict[str, tuple] = {
            name: ("dense", g) for name, g in self.dense.items()
        }
        for name, chunks in self._row_ids.items():
            ids = np.concatenate(chunks)
            rows = np.concatenate(self._row_vals[name])
            uniq, inv = np.unique(ids, return_inverse=True)
            summed = np.zeros((len(uniq), rows.shape[1]), dtype=rows.dtype)
            np.add.at(summed, inv, rows)
            keep = summed.any(axis=1)
            if name in frozen_rows:
                keep &= uniq != frozen_rows[name]
            out[name] = ("rows", uniq[keep], summed[keep])
        return out


_warned_single_entity = False


def sample_negatives(store: TripleStore, batch: np.ndarray, k: int,
                     mode: str, rng: np.random.Generator, step: int = 0,
                     filter_train: bool = False):
    """Corrupting entity draws for a batch; returns (ids [B, k], side).

    mode "both" alternates the corrupted side per call using ``step``.  A
    draw equal to the gold entity is redrawn once and then kept.  With
    ``filter_train`` every draw completing a training triple is redrawn
    until clean (bounded; leftovers are kept with a warning).
    """
    global _warned_single_entity
    if k < 1:
        raise ValueError("neg_size must be >= 1")
    if mode == "both":
        side = "tail" if step % 2 else "head"
    elif mode in ("head", "tail"):
        side = mode
    else:
        raise ValueError(f"unknown corruption mode {mode!r}")
    e = store.num_entities
    if e == 1 and not _warned_single_entity:
        log.warning("single-entity store: every negative equals the gold entity")
        _warned_single_entity = True
    b = len(batch)
    gold = batch[:, 2] if side == "tail" else batch[:, 0]
    neg = rng.integers(0, e, size=(b, k), dtype=np.int64)
    clash = neg == gold[:, None]
    if clash.any():
        neg[clash] = rng.integers(0, e, size=int(clash.sum()), dtype=np.int64)
    if filter_train:
        h = np.broadcast_to(batch[:, 0:1], (b, k))
        r = np.broadcast_to(batch[:, 1:2], (b, k))
        t = np.broadcast_to(batch[:, 2:3], (b, k))
        for _ in range(64):
            if side == "tail":
                bad = store.train_triple_mask(h.ravel(), r.ravel(), neg.ravel())
            else:
                bad = store.train_triple_mask(neg.ravel(), r.ravel(), t.ravel())
            bad = bad.reshape(b, k)
            if not bad.any():
                break
            neg[bad] = rng.integers(0, e, size=int(bad.sum()), dtype=np.int64)
        else:
            log.warning("negative filtering gave up; some train triples remain")
    return neg, side


def self_adversarial_weights(neg_d: np.ndarray, alpha: float) -> np.ndarray:
    """Per-negative weights along the last axis.

    alpha=0 gives uniform 1/k.  Otherwise softmax(alpha * (gamma - d)); the
    margin shifts every logit equally, so it cancels and is not a parameter
    here.  Treated as constants: no gradient flows through the weights.
    """
    k = neg_d.shape[-1]
    if alpha == 0.0:
        return np.full_like(neg_d, 1.0 / k, dtype=np.float64)
    z = -alpha * np.asarray(neg_d, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    ez = np.exp(z)
    return ez / ez.sum(axis=-1, keepdims=True)


def _softplus(x: np.ndarray) -> np.ndarray:
    # -log sigmoid(x) == softplus(-x), overflow-safe
    return np.logaddexp(0.0, -x)


def loss_and_grads(model: KgeModel, batch: np.ndarray, negatives: np.ndarray,
                   side: str, gamma: float, alpha: float):
    """Mean batch loss and its gradients as an unfinalized GradBuffer."""
    if side not in ("head", "tail"):
        raise ValueError(f"side must be head or tail, got {side!r}")
    b, k = negatives.shape
    h_ids, r_ids, t_ids = batch[:, 0], batch[:, 1], batch[:, 2]

    all_ids = np.concatenate([h_ids, t_ids, negatives.reshape(-1)])
    uniq, inv = np.unique(all_ids, return_inverse=True)
    base_u, aux_u, cache = model.encode_entities(uniq)
    iv_h, iv_t = inv[:b], inv[b:2 * b]
    iv_n = inv[2 * b:].reshape(b, k)

    kind = model.kind
    rel = model.relation_vecs(r_ids)
    pos = {"h": base_u[iv_h], "t": base_u[iv_t], **rel}
    if kind.uses_aux:
        pos["h_a"] = aux_u[iv_h]
        pos["t_a"] = aux_u[iv_t]
    neg = {part: v[:, None, :] for part, v in rel.items()}
    if side == "tail":
        neg["h"] = pos["h"][:, None, :]
        neg["t"] = base_u[iv_n]
        if kind.uses_aux:
            neg["h_a"] = pos["h_a"][:, None, :]
            neg["t_a"] = aux_u[iv_n]
    else:
        neg["h"] = base_u[iv_n]
        neg["t"] = pos["t"][:, None, :]
        if kind.uses_aux:
            neg["h_a"] = aux_u[iv_n]
            neg["t_a"] = pos["t_a"][:, None, :]

    d_pos, g_pos = model.score(pos)
    d_neg, g_neg = model.score(neg)

    w = self_adversarial_weights(d_neg, alpha)
    per_pos = _softplus(gamma - d_pos) + (w * _softplus(d_neg - gamma)).sum(axis=1)
    if not np.isfinite(per_pos).all():
        i = int(np.flatnonzero(~np.isfinite(per_pos))[0])
        raise FloatingPointError(
            f"non-finite loss at triple ({h_ids[i]}, {r_ids[i]}, {t_ids[i]}): "
            f"d_pos={d_pos[i]!r}"
        )
    loss = float(per_pos.mean())

    dd_pos = expit(d_pos - gamma) / b                     # [b]
    dd_neg = -(w * expit(gamma - d_neg)) / b              # [b, k]

    d_base_u = np.zeros_like(base_u)
    d_aux_u = np.zeros_like(aux_u) if kind.uses_aux else None

    def scatter(dest, iv, g):
        np.add.at(dest, iv, g)

    scatter(d_base_u, iv_h, g_pos["h"] * dd_pos[:, None])
    scatter(d_base_u, iv_t, g_pos["t"] * dd_pos[:, None])
    if kind.uses_aux:
        scatter(d_aux_u, iv_h, g_pos["h_a"] * dd_pos[:, None])
        scatter(d_aux_u, iv_t, g_pos["t_a"] * dd_pos[:, None])
    gn = dd_neg[..., None]
    if side == "tail":
        scatter(d_base_u, iv_h, (g_neg["h"] * gn).sum(axis=1))
        scatter(d_base_u, iv_n, g_neg["t"] * gn)
        if kind.uses_aux:
            scatter(d_aux_u, iv_h, (g_neg["h_a"] * gn).sum(axis=1))
            scatter(d_aux_u, iv_n, g_neg["t_a"] * gn)
    else:
        scatter(d_base_u, iv_n, g_neg["h"] * gn)
        scatter(d_base_u, iv_t, (g_neg["t"] * gn).sum(axis=1))
        if kind.uses_aux:
            scatter(d_aux_u, iv_n, g_neg["h_a"] * gn)
            scatter(d_aux_u, iv_t, (g_neg["t_a"] * gn).sum(axis=1))

    buf = GradBuffer()
    model.entity_backward(cache, d_base_u, d_aux_u, buf)
    d_parts = {}
    for part in kind.rel_parts:
        d_parts[part] = (g_pos[part] * dd_pos[:, None]
                         + (g_neg[part] * gn).sum(axis=1))
    model.relation_backward(r_ids, d_parts, buf)
    return loss, buf


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    counts: dict[str, np.ndarray]   # per-row step counters

    @classmethod
    def init(cls, params: dict[str, np.ndarray]) -> "AdamState":
        m = {k: np.zeros_like(p) for k, p in params.items()}
        v = {k: np.zeros_like(p) for k, p in params.items()}
        counts = {
            k: np.zeros(p.shape[0] if p.ndim > 1 else 1, dtype=np.int64)
            for k, p in params.items()
        }
        return cls(m, v, counts)


def adam_step(params: dict[str, np.ndarray], grads: dict, state: AdamState,
              lr: float, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> None:
    """One Adam update in place.

    grads is GradBuffer.finalize output.  Bias correction is per row: a row
    first touched at global step 900 behaves as if it were at its own step 1.
    Rows absent from the gradient (or all-zero) keep their state untouched.
    """
    for name, g in grads.items():
        p = params[name]
        if g[0] == "dense":
            garr = g[1]
            if p.ndim > 1:
                rows = np.flatnonzero(garr.any(axis=tuple(range(1, p.ndim))))
                if not len(rows):
                    continue
                gval = garr[rows]
            else:
                if not garr.any():
                    continue
                rows = slice(None)
                gval = garr
        else:
            _, rows, gval = g
            if not len(rows):
                continue
            gval = gval.reshape((len(rows),) + p.shape[1:])
        m, v = state.m[name], state.v[name]
        if p.ndim > 1:
            state.counts[name][rows] += 1
            tc = state.counts[name][rows][:, None].astype(np.float64)
        else:
            state.counts[name][0] += 1
            tc = float(state.counts[name][0])
        m[rows] = beta1 * m[rows] + (1.0 - beta1) * gval
        v[rows] = beta2 * v[rows] + (1.0 - beta2) * gval * gval
        mhat = m[rows] / (1.0 - beta1 ** tc)
        vhat = v[rows] / (1.0 - beta2 ** tc)
        params[name][rows] = p[rows] - lr * mhat / (np.sqrt(vhat) + eps)


@dataclass
class Checkpoint:
    meta: dict
    params: dict[str, np.ndarray]
    opt: dict[str, np.ndarray] = field(default_factory=dict)


_DTYPE_TAGS = {"<f4": "<f4", "<f8": "<f8", "<i8": "<i8"}


def _tag_of(arr: np.ndarray) -> str:
    tag = arr.dtype.newbyteorder("<").str
    if tag not in _DTYPE_TAGS:
        raise CheckpointError(f"unsupported table dtype {arr.dtype}")
    return tag


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> None:
    tables = [("p/" + k, ckpt.params[k]) for k in sorted(ckpt.params)]
    tables += [("o/" + k, ckpt.opt[k]) for k in sorted(ckpt.opt)]
    manifest = [[name, _tag_of(a), list(a.shape)] for name, a in tables]
    header = json.dumps({"meta": ckpt.meta, "tables": manifest},
                        sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(CKPT_MAGIC)
        f.write(struct.pack("<II", CKPT_VERSION, len(header)))
        f.write(header)
        for _, arr in tables:
            f.write(np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<")).tobytes())


def load_checkpoint(path: str | Path) -> Checkpoint:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != CKPT_MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint (magic {magic!r})")
        head = f.read(8)
        if len(head) != 8:
            raise CheckpointError(f"{path}: truncated header")
        version, hlen = struct.unpack("<II", head)
        if version != CKPT_VERSION:
            raise CheckpointError(f"{path}: unsupported version {version}")
        header = json.loads(f.read(hlen))
        params: dict[str, np.ndarray] = {}
        opt: dict[str, np.ndarray] = {}
        for name, tag, shape in header["tables"]:
            n = int(np.prod(shape)) if shape else 1
            raw = f.read(n * np.dtype(tag).itemsize)
            if len(raw) != n * np.dtype(tag).itemsize:
                raise CheckpointError(f"{path}: truncated table {name}")
            arr = np.frombuffer(raw, dtype=tag).reshape(shape).copy()
            if name.startswith("p/"):
                params[name[2:]] = arr
            elif name.startswith("o/"):
                opt[name[2:]] = arr
            else:
                raise CheckpointError(f"{path}: unknown table group {name!r}")
    return Checkpoint(meta=header["meta"], params=params, opt=opt)


def make_checkpoint(model: KgeModel, cfg: TrainConfig, step: int,
                    rng: np.random.Generator,
                    opt: AdamState | None = None) -> Checkpoint:
    meta = {
        "kind": model.kind.name,
        "dim": model.dim,
        "p": model.p,
        "u": model.u,
        "mode": model.mode,
        "num_entities": model.num_entities,
        "num_relations": model.num_relations,
        "step": step,
        "config_hash": cfg.hash(),
        "rng_state": rng.bit_generator.state,
    }
    if model.tokenized:
        meta["encoder"] = {
            "d_tok": model.enc_cfg.d_tok,
            "heads": model.enc_cfg.heads,
            "ffn_mult": model.enc_cfg.ffn_mult,
            "combiner": model.enc_cfg.combiner,
            "num_anchors": model.layout.num_anchors,
            "use_center": model.layout.use_center,
        }
    opt_tables: dict[str, np.ndarray] = {}
    if opt is not None:
        for k in sorted(opt.m):
            opt_tables["m." + k] = opt.m[k]
            opt_tables["v." + k] = opt.v[k]
            opt_tables["c." + k] = opt.counts[k]
    return Checkpoint(meta=meta, params=dict(model.params), opt=opt_tables)


def model_from_checkpoint(ckpt: Checkpoint, tokens=None,
                          expect_config_hash: str | None = None) -> KgeModel:
    """Rebuild a scoring-ready model from checkpoint tables.

    Tokenized checkpoints need the token cache that training used.  A
    config-hash mismatch only warns; a dimension mismatch is fatal.
    """
    meta = ckpt.meta
    if expect_config_hash and expect_config_hash != meta["config_hash"]:
        log.warning("config hash mismatch: checkpoint %s vs current %s",
                    meta["config_hash"], expect_config_hash)
    kind = model_kind(meta["kind"])
    model = KgeModel(
        kind=kind, dim=meta["dim"], p=meta["p"], u=meta["u"],
        num_entities=meta["num_entities"],
        num_relations=meta["num_relations"],
        params=dict(ckpt.params),
    )
    if meta["mode"] == "tokenized":
        if tokens is None:
            raise CheckpointError("tokenized checkpoint requires a token cache")
        encm = meta["encoder"]
        if tokens.num_anchors != encm["num_anchors"]:
            raise CheckpointError(
                f"token cache has {tokens.num_anchors} anchors, checkpoint "
                f"expects {encm['num_anchors']}"
            )
        from .encoder import EncoderConfig
        model.enc_cfg = EncoderConfig(
            d_tok=encm["d_tok"], heads=encm["heads"],
            ffn_mult=encm["ffn_mult"], out_dim=2 * meta["dim"],
            combiner=encm["combiner"],
        )
        model.layout = TokenLayout(encm["num_anchors"], meta["num_entities"],
                                   encm["use_center"])
        model.tok_ids, model.tok_seg, model.tok_mask = \
            model.layout.flatten(tokens)
        model.frozen_rows = {"tok": model.layout.pad_row}
        if model.params["tok"].shape[0] != model.layout.vocab_size:
            raise CheckpointError(
                f"token table has {model.params['tok'].shape[0]} rows, "
                f"layout expects {model.layout.vocab_size}"
            )
    return model


def train_loop(store: TripleStore, cfg: TrainConfig, tokens=None,
               model: KgeModel | None = None, sink=None,
               checkpoint_dir: str | Path | None = None,
               deterministic: bool = True, eval_threads: int = 1) -> Checkpoint:
    """Run training; returns (and optionally writes) the final checkpoint.

    ``sink`` receives one dict per log event.  With a validation split
    present, every ``valid_every`` steps runs filtered evaluation and the
    best-MRR checkpoint is kept alongside the final one.  Single-threaded
    runs with a fixed seed are bit-reproducible; wall-clock timings are
    logged only in non-deterministic mode so logs stay byte-identical.
    """
    from .evaluation import evaluate_split

    cfg.validate()
    if not store.has_adjacency and cfg.tokenized:
        raise ValueError("tokenized training requires adjacency (run ingest)")
    rng = np.random.default_rng(cfg.seed)
    if model is None:
        model = build_model_from_config(cfg, store.num_entities,
                                        store.num_relations, tokens=tokens)
    opt = AdamState.init(model.params)
    train = store.splits["train"]
    n = len(train)
    if n == 0:
        raise ValueError("empty train split")
    bsz = min(cfg.batch_size, n)
    if bsz < cfg.batch_size:
        log.warning("batch_size %d clipped to train size %d", cfg.batch_size, n)
    has_valid = store.num_triples("valid") > 0
    ckpt_dir = Path(checkpoint_dir) if checkpoint_dir else None
    if ckpt_dir:
        ckpt_dir.mkdir(parents=True, exist_ok=True)

    def emit(rec: dict) -> None:
        if sink is not None:
            if not deterministic:
                rec["elapsed_s"] = round(time.monotonic() - t0, 3)
            sink(rec)

    t0 = time.monotonic()
    best_mrr = -1.0
    order = rng.permutation(n)
    cursor = 0
    for step in range(1, cfg.steps_max + 1):
        if cursor + bsz > n:
            order = rng.permutation(n)
            cursor = 0
        batch = train[order[cursor:cursor + bsz]]
        cursor += bsz
        neg, side = sample_negatives(
            store, batch, cfg.neg_size, cfg.corruption, rng, step=step,
            filter_train=cfg.filter_train_negatives,
        )
        loss, buf = loss_and_grads(model, batch, neg, side, cfg.gamma,
                                   cfg.adv_alpha)
        adam_step(model.params, buf.finalize(model.frozen_rows), opt, cfg.lr)
        if step % cfg.log_every == 0 or step == cfg.steps_max:
            emit({"step": step, "loss": round(loss, 6), "lr": cfg.lr})
        if has_valid and step % cfg.valid_every == 0:
            report = evaluate_split(model, store, "valid",
                                    threads=eval_threads)
            rec = {"step": step, "split": "valid", **report.to_dict()}
            emit(rec)
            if report.mrr > best_mrr:
                best_mrr = report.mrr
                if ckpt_dir:
                    save_checkpoint(
                        make_checkpoint(model, cfg, step, rng, opt),
                        ckpt_dir / "best.ckpt",
                    )
    final = make_checkpoint(model, cfg, cfg.steps_max, rng, opt)
    if ckpt_dir:
        save_checkpoint(final, ckpt_dir / "final.ckpt")
    return final
