"""Locate-then-edit knowledge updating of the toy model's key-value memory.

An edit injects one (requirement -> service) fact: the key is the averaged
activation feeding the editable projection at the requirement's final token,
the value is optimized so that producing it at the key location makes the
model emit the target service, and the projection receives a closed-form
rank-one update that maps key to value exactly while disturbing other keys
as little as the key covariance allows.

Prompt pieces (random prefix, requirement, context prompt, target tokens)
are encoded as independent segments and concatenated, so the requirement's
final-token position is identical during key extraction, value optimization
and post-edit decoding.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .decoder import DecoderConfig, decode
from .errors import EditError
from .lexicon import Lexicon, ServiceEntry, Tokenizer
from .model import ToyLM
from .numerics import log_softmax, softmax


@dataclass(frozen=True)
class EditRequest:
    """One fact to inject plus the material used to ground and check it."""

    query: str
    target: ServiceEntry
    prefixes: tuple[str, ...]
    holdout: tuple[str, ...] = ()
    context_prompt: str = ""

    def __post_init__(self):
        if not self.prefixes:
            raise EditError("an edit request needs at least one sampled prefix")
        if not self.query.strip():
            raise EditError("edit query must be non-empty")


@dataclass(frozen=True)
class EditConfig:
    num_grad_steps: int = 40
    v_lr: float = 1e-2
    weight_decay: float = 1e-3
    clamp_factor: float = 4.0
    kl_factor: float = 0.06
    layer: Optional[int] = None  # default: model's editable layer

    def __post_init__(self):
        if self.num_grad_steps < 1 or self.v_lr <= 0:
            raise EditError("num_grad_steps and v_lr must be positive")
        if self.weight_decay < 0 or self.clamp_factor <= 0 or self.kl_factor < 0:
            raise EditError("weight_decay/clamp_factor/kl_factor out of range")


@dataclass(frozen=True)
class KeyCovariance:
    """C = sum_k k k^T (+ eps I) over sampled keys; must be positive definite."""

    matrix: np.ndarray
    sample_count: int
    eps: float

    def __post_init__(self):
        c = np.asarray(self.matrix, dtype=float)
        if c.ndim != 2 or c.shape[0] != c.shape[1]:
            raise EditError("covariance must be a square matrix")
        if not np.allclose(c, c.T, atol=1e-10):
            raise EditError("covariance must be symmetric")
        try:
            np.linalg.cholesky(c)
        except np.linalg.LinAlgError:
            raise EditError(
                "covariance is singular; pass a nonzero regularization eps"
            ) from None
        object.__setattr__(self, "matrix", c)

    def solve(self, rhs: np.ndarray) -> np.ndarray:
        return np.linalg.solve(self.matrix, rhs)


@dataclass(frozen=True)
class EditReport:
    efficacy: bool
    locality: float
    constraint_residual: float
    drift: float


def _resolve_layer(model: ToyLM, layer: Optional[int]) -> int:
    resolved = model.config.editable_layer if layer is None else layer
    if not 0 <= resolved < model.config.n_blocks:
        raise EditError(f"layer {resolved} out of range")
    return resolved


def compute_key(
    model: ToyLM,
    request: EditRequest,
    layer: int,
    tokenizer: Tokenizer,
) -> np.ndarray:
    """Average, over sampled prefixes, of the requirement's final-token key."""
    query_ids = tokenizer.encode(request.query)
    keys = [
        model.hidden_key(tokenizer.encode(prefix) + query_ids if prefix else query_ids, layer)
        for prefix in request.prefixes
    ]
    return np.mean(keys, axis=0)


def estimate_covariance(
    model: ToyLM,
    texts: Sequence[str],
    layer: int,
    tokenizer: Tokenizer,
    eps: Optional[float] = None,
) -> KeyCovariance:
    """Accumulate C = sum k k^T over last-token keys of `texts`, plus eps I.

    eps=None uses 1e-4 * trace(C)/h; eps=0 is accepted only when the raw
    accumulation is already positive definite.
    """
    if not texts:
        raise EditError("covariance estimation needs a non-empty corpus")
    h = model.config.hidden
    c = np.zeros((h, h))
    for text in texts:
        k = model.hidden_key(tokenizer.encode(text), layer)
        c += np.outer(k, k)
    if eps is None:
        eps = 1e-4 * float(np.trace(c)) / h
    return KeyCovariance(matrix=c + eps * np.eye(h), sample_count=len(texts), eps=eps)


# ----------------------------------------------------------------------
# value optimization
# ----------------------------------------------------------------------
def _l1_rows(
    request: EditRequest, tokenizer: Tokenizer
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Padded id matrix, label matrix (-1 = no loss) and subject positions.

    Each row is bos + prefix + query + context + target + sep; the label at
    position t is the token position t must predict. The trailing separator
    teaches the model to close the service after emitting it.
    """
    query_ids = tokenizer.encode(request.query)
    ctx_ids = tokenizer.encode(request.context_prompt) if request.context_prompt else []
    target_seq = list(request.target.tokens) + [tokenizer.sep_id]
    rows, labels, positions = [], [], []
    for prefix in request.prefixes:
        prefix_ids = tokenizer.encode(prefix) if prefix else []
        seq = [tokenizer.bos_id, *prefix_ids, *query_ids, *ctx_ids, *target_seq]
        lab = [-1] * len(seq)
        ctx_len = len(prefix_ids) + len(query_ids) + len(ctx_ids)
        for j, tok in enumerate(target_seq):
            lab[ctx_len + j] = tok
        rows.append(seq)
        labels.append(lab)
        positions.append(len(prefix_ids) + len(query_ids))  # last query token
    width = max(len(r) for r in rows)
    ids = np.array([r + [0] * (width - len(r)) for r in rows], dtype=int)
    labs = np.array([l + [-1] * (width - len(l)) for l in labels], dtype=int)
    return ids, labs, np.array(positions, dtype=int)


def _holdout_rows(
    request: EditRequest, tokenizer: Tokenizer
) -> tuple[np.ndarray, np.ndarray]:
    rows = [[tokenizer.bos_id, *tokenizer.encode(q)] for q in request.holdout]
    width = max(len(r) for r in rows)
    positions = np.array([len(r) - 1 for r in rows], dtype=int)
    ids = np.array([r + [0] * (width - len(r)) for r in rows], dtype=int)
    return ids, positions


def _value_loss_and_grad(
    model: ToyLM,
    layer: int,
    v: np.ndarray,
    l1_batch: tuple[np.ndarray, np.ndarray, np.ndarray],
    kl_batch: Optional[tuple[np.ndarray, np.ndarray, np.ndarray]],
    base_kl_logp: Optional[np.ndarray],
    config: EditConfig,
    want_grad: bool = True,
) -> tuple[float, Optional[np.ndarray]]:
    ids, labels, positions = l1_batch
    n = ids.shape[0]
    cache = model._forward_batch(ids, subst=(layer, positions, v))
    logp = log_softmax(cache["logits"], axis=-1)
    mask = labels >= 0
    safe = np.where(mask, labels, 0)
    picked = np.take_along_axis(logp, safe[..., None], axis=-1)[..., 0]
    l1 = float(-(picked * mask).sum() / n)
    dv = None
    if want_grad:
        probs = softmax(cache["logits"], axis=-1)
        onehot = np.zeros_like(probs)
        np.put_along_axis(onehot, safe[..., None], 1.0, axis=-1)
        dlogits = (probs - onehot) * mask[..., None] / n
        _, dv = model._backward_batch(cache, dlogits, subst=(layer, positions, v))

    l2 = 0.0
    if config.kl_factor > 0.0 and kl_batch is not None:
        kl_ids, kl_pos = kl_batch
        m = kl_ids.shape[0]
        kl_cache = model._forward_batch(kl_ids, subst=(layer, kl_pos, v))
        rows = np.arange(m)
        final_logits = kl_cache["logits"][rows, kl_pos]
        logq = log_softmax(final_logits, axis=-1)
        q = np.exp(logq)
        ratio = logq - base_kl_logp
        kls = (q * ratio).sum(axis=-1)
        l2 = float(kls.mean())
        if want_grad:
            dfinal = q * (ratio - kls[:, None]) / m
            dlog = np.zeros_like(kl_cache["logits"])
            dlog[rows, kl_pos] = dfinal
            _, dv_kl = model._backward_batch(kl_cache, dlog, subst=(layer, kl_pos, v))
            dv = dv + config.kl_factor * dv_kl

    loss = l1 + config.kl_factor * l2 + 0.5 * config.weight_decay * float(v @ v)
    if want_grad:
        dv = dv + config.weight_decay * v
    return loss, dv


def value_objective(
    model: ToyLM,
    request: EditRequest,
    config: EditConfig,
    tokenizer: Tokenizer,
    v: np.ndarray,
) -> float:
    """Total value-optimization objective at v (finite-difference oracle hook)."""
    layer = _resolve_layer(model, config.layer)
    l1_batch = _l1_rows(request, tokenizer)
    kl_batch, base = _prepare_kl(model, request, config, tokenizer, layer)
    loss, _ = _value_loss_and_grad(
        model, layer, v, l1_batch, kl_batch, base, config, want_grad=False
    )
    return loss


def _prepare_kl(model, request, config, tokenizer, layer):
    if config.kl_factor <= 0.0 or not request.holdout:
        return None, None
    kl_batch = _holdout_rows(request, tokenizer)
    kl_ids, kl_pos = kl_batch
    base_cache = model._forward_batch(kl_ids)
    rows = np.arange(kl_ids.shape[0])
    base = log_softmax(base_cache["logits"][rows, kl_pos], axis=-1)
    return kl_batch, base


def initial_value(model: ToyLM, request: EditRequest, layer: int, tokenizer: Tokenizer) -> np.ndarray:
    """Mean current output of the edited projection at the subject position."""
    ids, _, positions = _l1_rows(request, tokenizer)
    cache = model._forward_batch(ids)
    return cache["m"][layer][np.arange(ids.shape[0]), positions].mean(axis=0)


def optimize_value(
    model: ToyLM,
    request: EditRequest,
    config: EditConfig,
    tokenizer: Tokenizer,
) -> np.ndarray:
    """Adam on L1 + kl_factor * L2 + decay, with a norm clamp on v.

    L1 is the mean over prefixes of the autoregressive negative log
    likelihood of the target tokens when v is substituted for the edited
    projection's output at the requirement's final token; L2 is the KL
    divergence from the unedited next-token distribution on holdout prompts
    (substituting v at their final position, where an unrelated key lives).
    """
    layer = _resolve_layer(model, config.layer)
    l1_batch = _l1_rows(request, tokenizer)
    kl_batch, base = _prepare_kl(model, request, config, tokenizer, layer)
    v_init = initial_value(model, request, layer, tokenizer)
    # Adam moves each coordinate by about v_lr per step regardless of
    # gradient magnitude, so the search runs on delta with v = v_init +
    # scale * delta: v_lr then measures movement relative to the layer's
    # own output scale instead of in raw activation units.
    scale = max(float(np.linalg.norm(v_init)), 1e-8)
    bound = config.clamp_factor * scale
    delta = np.zeros_like(v_init)
    m = np.zeros_like(v_init)
    s = np.zeros_like(v_init)
    for t in range(1, config.num_grad_steps + 1):
        v = v_init + scale * delta
        loss, grad_v = _value_loss_and_grad(
            model, layer, v, l1_batch, kl_batch, base, config
        )
        if not np.isfinite(loss):
            raise EditError(f"value optimization diverged at step {t}: loss={loss!r}")
        grad = scale * grad_v
        m = 0.9 * m + 0.1 * grad
        s = 0.999 * s + 0.001 * grad * grad
        mh = m / (1 - 0.9**t)
        sh = s / (1 - 0.999**t)
        delta = delta - config.v_lr * mh / (np.sqrt(sh) + 1e-8)
        v = v_init + scale * delta
        norm = float(np.linalg.norm(v))
        if norm > bound:
            delta = (v * (bound / norm) - v_init) / scale
    return v_init + scale * delta


# ----------------------------------------------------------------------
# closed-form rank-one update
# ----------------------------------------------------------------------
def rank_one_update(
    w: np.ndarray,
    cov: KeyCovariance,
    key: np.ndarray,
    value: np.ndarray,
) -> np.ndarray:
    """w_hat = w + ((v - w k)/((C^-1 k)^T k)) (C^-1 k)^T, so w_hat k = v exactly.

    `w` maps keys (columns, size h) to outputs (rows, size d).
    """
    w = np.asarray(w, dtype=float)
    key = np.asarray(key, dtype=float)
    value = np.asarray(value, dtype=float)
    if w.shape != (value.shape[0], key.shape[0]):
        raise EditError(
            f"shape mismatch: w {w.shape}, key {key.shape}, value {value.shape}"
        )
    if not np.any(key):
        raise EditError("degenerate key: k* is the zero vector")
    cinv_k = cov.solve(key)
    denom = float(cinv_k @ key)
    if denom == 0.0:
        raise EditError("key is annihilated by the covariance inverse")
    lam = (value - w @ key) / denom
    return w + np.outer(lam, cinv_k)


def apply_edit(
    model: ToyLM,
    request: EditRequest,
    config: EditConfig,
    cov: KeyCovariance,
    lexicon: Lexicon,
    decoder_config: DecoderConfig = DecoderConfig(),
) -> tuple[ToyLM, EditReport]:
    """Full pipeline: key, value, rank-one write, then efficacy/locality checks.

    Returns a new model; the input model is left untouched.
    """
    tok = lexicon.tokenizer
    layer = _resolve_layer(model, config.layer)
    key = compute_key(model, request, layer, tok)
    value = optimize_value(model, request, config, tok)

    w_name = f"w_proj_{layer}"
    w_math = model.params[w_name].T  # stored [h,d]; math orientation [d,h]
    w_hat = rank_one_update(w_math, cov, key, value)
    edited = model.copy()
    edited.params[w_name] = w_hat.T

    residual = float(np.linalg.norm(w_hat @ key - value))

    prompt = tok.encode(request.query)
    if request.context_prompt:
        prompt = prompt + tok.encode(request.context_prompt)
    result = decode(
        edited.forward,
        lexicon.trie,
        decoder_config,
        prompt,
        sep_id=tok.sep_id,
        eos_id=tok.eos_id,
    )
    efficacy = bool(result.sids) and result.sids[0] == request.target.sid

    if request.holdout:
        same = 0
        probe_keys = []
        for q in request.holdout:
            ids = tok.encode(q)
            before = int(np.argmax(model.forward(ids)))
            after = int(np.argmax(edited.forward(ids)))
            same += int(before == after)
            probe_keys.append(model.hidden_key(ids, layer))
        locality = same / len(request.holdout)
        k_s = np.stack(probe_keys, axis=1)  # [h, n_probes]
        drift = float(np.linalg.norm((w_hat - w_math) @ k_s))
    else:
        locality = 1.0
        drift = 0.0

    return edited, EditReport(
        efficacy=efficacy,
        locality=locality,
        constraint_residual=residual,
        drift=drift,
    )
