"""Desk-scale deterministic autoregressive network with an editable memory.

Architecture: token embeddings, a causal mean-pooled context summary, then
n_blocks residual MLP blocks, pooling again after every block, and a linear
head. Each block's post-tanh activation is the "key" feeding its output
projection w_proj, so w_proj behaves as a linear key-value memory and the
pooling after the block lets a substituted value influence every later
position (which is what makes multi-token value optimization meaningful).

All math is float64 numpy; forward passes are deterministic for fixed
weights and serialization round-trips are bit-exact.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import TrainError
from .lexicon import Lexicon
from .numerics import log_softmax, softmax

MODEL_FILE_VERSION = 1


@dataclass
class ModelConfig:
    vocab_size: int
    dim: int = 32
    hidden: int = 48
    n_blocks: int = 2
    editable_layer: Optional[int] = None  # default: last block
    seed: int = 0
    bos_id: int = 2

    def __post_init__(self):
        if self.dim < 2 or self.hidden < 2:
            raise TrainError("dim and hidden must both be >= 2")
        if self.vocab_size < 1 or self.n_blocks < 1:
            raise TrainError("vocab_size and n_blocks must be >= 1")
        if self.editable_layer is None:
            self.editable_layer = self.n_blocks - 1
        if not 0 <= self.editable_layer < self.n_blocks:
            raise TrainError(f"editable_layer {self.editable_layer} out of range")


def _causal_mean(x: np.ndarray) -> np.ndarray:
    counts = np.arange(1, x.shape[1] + 1, dtype=float)[None, :, None]
    return np.cumsum(x, axis=1) / counts


def _causal_mean_grad(dg: np.ndarray) -> np.ndarray:
    counts = np.arange(1, dg.shape[1] + 1, dtype=float)[None, :, None]
    scaled = dg / counts
    return np.flip(np.cumsum(np.flip(scaled, axis=1), axis=1), axis=1)


class ToyLM:
    """Editable toy language model exposing the logit-provider surface."""

    def __init__(self, config: ModelConfig, params: dict[str, np.ndarray]):
        self.config = config
        self.params = params

    # parameter layout: emb [V,d]; per block w_in_l [d,h], b_in_l [h],
    # w_proj_l [h,d]; w_head [d,V]; b_head [V]
    @classmethod
    def init(cls, config: ModelConfig) -> "ToyLM":
        rng = np.random.default_rng(config.seed)
        V, d, h = config.vocab_size, config.dim, config.hidden
        params = {"emb": rng.uniform(-0.1, 0.1, size=(V, d))}
        for l in range(config.n_blocks):
            params[f"w_in_{l}"] = rng.uniform(-0.1, 0.1, size=(d, h))
            params[f"b_in_{l}"] = rng.uniform(-0.1, 0.1, size=(h,))
            params[f"w_proj_{l}"] = rng.uniform(-0.1, 0.1, size=(h, d))
        params["w_head"] = rng.uniform(-0.1, 0.1, size=(d, V))
        params["b_head"] = rng.uniform(-0.1, 0.1, size=(V,))
        return cls(config, params)

    def copy(self) -> "ToyLM":
        return ToyLM(self.config, {k: v.copy() for k, v in self.params.items()})

    # ------------------------------------------------------------------
    # forward / backward
    # ------------------------------------------------------------------
    def _forward_batch(
        self,
        ids: np.ndarray,
        subst: Optional[tuple[int, np.ndarray, np.ndarray]] = None,
    ) -> dict:
        """Run the network on an id matrix [B,T].

        `subst` = (layer, positions [B], v [d]) replaces the block-`layer`
        output (pre-residual) at each row's position with v.
        """
        if np.any(ids >= self.config.vocab_size) or np.any(ids < 0):
            raise TrainError("token id out of vocabulary range")
        p = self.params
        x = p["emb"][ids]
        g = [_causal_mean(x)]
        zs, acts, ms, hs = [], [], [], []
        for l in range(self.config.n_blocks):
            z = g[l] @ p[f"w_in_{l}"] + p[f"b_in_{l}"]
            a = np.tanh(z)
            m = a @ p[f"w_proj_{l}"]
            if subst is not None and subst[0] == l:
                _, positions, v = subst
                m = m.copy()
                m[np.arange(ids.shape[0]), positions] = v
            h = g[l] + m
            zs.append(z)
            acts.append(a)
            ms.append(m)
            hs.append(h)
            g.append(_causal_mean(h))
        # The head reads the last block's output directly plus the pooled
        # stream: a value written at one position hits that position's
        # logits at full weight and still reaches later positions via the
        # pooled term.
        r = hs[-1] + g[-1]
        logits = r @ p["w_head"] + p["b_head"]
        return {"ids": ids, "x": x, "g": g, "a": acts, "m": ms, "r": r, "logits": logits}

    def _backward_batch(
        self,
        cache: dict,
        dlogits: np.ndarray,
        subst: Optional[tuple[int, np.ndarray, np.ndarray]] = None,
    ) -> tuple[dict[str, np.ndarray], Optional[np.ndarray]]:
        """Gradients of a scalar loss given d(loss)/d(logits)."""
        p = self.params
        ids, g, acts = cache["ids"], cache["g"], cache["a"]
        grads = {
            "w_head": np.einsum("btd,btv->dv", cache["r"], dlogits),
            "b_head": dlogits.sum(axis=(0, 1)),
        }
        dv: Optional[np.ndarray] = None
        dr = dlogits @ p["w_head"].T
        dh = dr + _causal_mean_grad(dr)  # r = h_last + cummean(h_last)
        for l in reversed(range(self.config.n_blocks)):
            dm = dh.copy()
            if subst is not None and subst[0] == l:
                _, positions, _ = subst
                rows = np.arange(ids.shape[0])
                dv = dm[rows, positions].sum(axis=0)
                dm[rows, positions] = 0.0
            a = acts[l]
            da = dm @ p[f"w_proj_{l}"].T
            dz = da * (1.0 - a * a)
            grads[f"w_proj_{l}"] = np.einsum("bth,btd->hd", a, dm)
            grads[f"w_in_{l}"] = np.einsum("btd,bth->dh", g[l], dz)
            grads[f"b_in_{l}"] = dz.sum(axis=(0, 1))
            dg = dh + dz @ p[f"w_in_{l}"].T
            dh = _causal_mean_grad(dg)  # g_l = cummean(h_{l-1}) or cummean(x)
        demb = np.zeros_like(p["emb"])
        np.add.at(demb, ids, dh)
        grads["emb"] = demb
        return grads, dv

    def forward(self, prefix: Sequence[int]) -> np.ndarray:
        """Unnormalized next-token scores after `prefix` (bos-conditioned)."""
        ids = np.array([[self.config.bos_id, *prefix]], dtype=int)
        cache = self._forward_batch(ids)
        return cache["logits"][0, -1]

    def hidden_key(self, prefix: Sequence[int], layer: int) -> np.ndarray:
        """Post-tanh activation feeding w_proj at `layer`, final position."""
        if not 0 <= layer < self.config.n_blocks:
            raise TrainError(f"layer {layer} out of range")
        ids = np.array([[self.config.bos_id, *prefix]], dtype=int)
        cache = self._forward_batch(ids)
        return cache["a"][layer][0, -1]

    def activations(self, prefix: Sequence[int]) -> dict:
        """All intermediates for a single prefix (tests, editing internals)."""
        ids = np.array([[self.config.bos_id, *prefix]], dtype=int)
        cache = self._forward_batch(ids)
        return {
            "g": [gi[0] for gi in cache["g"]],
            "a": [ai[0] for ai in cache["a"]],
            "m": [mi[0] for mi in cache["m"]],
            "r": cache["r"][0],
            "logits": cache["logits"][0],
        }

    # ------------------------------------------------------------------
    # persistence
    # ------------------------------------------------------------------
    def to_dict(self) -> dict:
        cfg = self.config
        return {
            "version": MODEL_FILE_VERSION,
            "config": {
                "vocab_size": cfg.vocab_size,
                "dim": cfg.dim,
                "hidden": cfg.hidden,
                "n_blocks": cfg.n_blocks,
                "editable_layer": cfg.editable_layer,
                "seed": cfg.seed,
                "bos_id": cfg.bos_id,
            },
            "weights": {k: v.tolist() for k, v in sorted(self.params.items())},
        }

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), sort_keys=True), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "ToyLM":
        payload = json.loads(Path(path).read_text(encoding="utf-8"))
        if payload.get("version") != MODEL_FILE_VERSION:
            raise TrainError(f"unsupported model file version {payload.get('version')!r}")
        config = ModelConfig(**payload["config"])
        params = {k: np.asarray(v, dtype=float) for k, v in payload["weights"].items()}
        return cls(config, params)


# ----------------------------------------------------------------------
# training
# ----------------------------------------------------------------------
@dataclass(frozen=True)
class TrainCorpus:
    """(prompt, target) token pairs; targets are sep-joined names ending in eos."""

    pairs: tuple[tuple[tuple[int, ...], tuple[int, ...]], ...]
    vocab_size: int
    bos_id: int
    sep_id: int
    eos_id: int

    def __post_init__(self):
        for prompt, target in self.pairs:
            if not target or target[-1] != self.eos_id:
                raise TrainError("every training target must end with eos")

    @classmethod
    def from_examples(
        cls,
        examples: Sequence[tuple[str, Sequence[str]]],
        lexicon: Lexicon,
    ) -> "TrainCorpus":
        tok = lexicon.tokenizer
        pairs = []
        for text, names in examples:
            target: list[int] = []
            for i, name in enumerate(names):
                if i:
                    target.append(tok.sep_id)
                target.extend(lexicon.by_sid[lexicon.sid_of(name)].tokens)
            target.append(tok.eos_id)
            pairs.append((tuple(tok.encode(text)), tuple(target)))
        return cls(
            pairs=tuple(pairs),
            vocab_size=len(tok),
            bos_id=tok.bos_id,
            sep_id=tok.sep_id,
            eos_id=tok.eos_id,
        )


@dataclass
class TrainHyper:
    dim: int = 32
    hidden: int = 48
    n_blocks: int = 2
    editable_layer: Optional[int] = None
    lr: float = 0.3  # cap on the line-searched step size
    steps: int = 800
    seed: int = 0
    checkpoint_every: int = 20
    armijo_c: float = 1e-4
    max_backtracks: int = 40


def _pack_batch(corpus: TrainCorpus) -> tuple[np.ndarray, np.ndarray]:
    """Pad to [B,T] ids plus [B,T] labels (-1 where no loss is taken)."""
    rows, labels = [], []
    width = max(1 + len(p) + len(t) for p, t in corpus.pairs)
    for prompt, target in corpus.pairs:
        seq = [corpus.bos_id, *prompt, *target]
        lab = [-1] * len(seq)
        start = len(prompt)  # position of the last pre-target token
        for j, tok in enumerate(target):
            lab[start + j] = tok
        rows.append(seq + [0] * (width - len(seq)))
        labels.append(lab + [-1] * (width - len(lab)))
    return np.array(rows, dtype=int), np.array(labels, dtype=int)


def _loss_from_logits(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean CE over labeled positions and d(loss)/d(logits)."""
    mask = labels >= 0
    n = int(mask.sum())
    logp = log_softmax(logits, axis=-1)
    safe = np.where(mask, labels, 0)
    picked = np.take_along_axis(logp, safe[..., None], axis=-1)[..., 0]
    loss = float(-(picked * mask).sum() / n)
    dlogits = softmax(logits, axis=-1)
    onehot_rows = np.zeros_like(dlogits)
    np.put_along_axis(onehot_rows, safe[..., None], 1.0, axis=-1)
    dlogits = (dlogits - onehot_rows) * mask[..., None] / n
    return loss, dlogits


def corpus_loss(model: ToyLM, corpus: TrainCorpus) -> float:
    ids, labels = _pack_batch(corpus)
    cache = model._forward_batch(ids)
    loss, _ = _loss_from_logits(cache["logits"], labels)
    return loss


def loss_and_grads(model: ToyLM, corpus: TrainCorpus) -> tuple[float, dict[str, np.ndarray]]:
    ids, labels = _pack_batch(corpus)
    cache = model._forward_batch(ids)
    loss, dlogits = _loss_from_logits(cache["logits"], labels)
    grads, _ = model._backward_batch(cache, dlogits)
    return loss, grads


def train_toy(corpus: TrainCorpus, hyper: TrainHyper = TrainHyper()) -> ToyLM:
    """Full-batch training: momentum-preconditioned descent with a line search.

    Each step follows the bias-corrected Adam direction, falling back to the
    RMS-scaled gradient when momentum points uphill, and backtracks until
    the Armijo condition holds (step size warm-started from the previous
    step, capped at hyper.lr). Descent is therefore monotone by
    construction; a checkpoint increase or non-finite loss aborts with
    diagnostics.
    """
    if not corpus.pairs:
        raise TrainError("training corpus is empty")
    config = ModelConfig(
        vocab_size=corpus.vocab_size,
        dim=hyper.dim,
        hidden=hyper.hidden,
        n_blocks=hyper.n_blocks,
        editable_layer=hyper.editable_layer,
        seed=hyper.seed,
        bos_id=corpus.bos_id,
    )
    model = ToyLM.init(config)
    ids, labels = _pack_batch(corpus)

    def evaluate(params: dict[str, np.ndarray]) -> float:
        probe = ToyLM(config, params)
        loss, _ = _loss_from_logits(probe._forward_batch(ids)["logits"], labels)
        return loss

    mom = {k: np.zeros_like(v) for k, v in model.params.items()}
    rms = {k: np.zeros_like(v) for k, v in model.params.items()}
    history: list[tuple[int, float]] = []
    alpha_prev = hyper.lr
    for it in range(1, hyper.steps + 1):
        cache = model._forward_batch(ids)
        loss, dlogits = _loss_from_logits(cache["logits"], labels)
        if not np.isfinite(loss):
            raise TrainError(f"training diverged at step {it}: loss={loss!r}")
        if (it - 1) % hyper.checkpoint_every == 0:
            if history and loss > history[-1][1] + 1e-12:
                raise TrainError(
                    f"loss increased between checkpoints: {history[-1]} -> ({it}, {loss}); "
                    f"history={history}"
                )
            history.append((it, loss))
        grads, _ = model._backward_batch(cache, dlogits)

        direction = {}
        gdot = 0.0
        for k, gk in grads.items():
            mom[k] = 0.9 * mom[k] + 0.1 * gk
            rms[k] = 0.999 * rms[k] + 0.001 * gk * gk
            scale = np.sqrt(rms[k] / (1 - 0.999**it)) + 1e-8
            direction[k] = (mom[k] / (1 - 0.9**it)) / scale
            gdot += float((gk * direction[k]).sum())
        if gdot <= 0.0:  # momentum points uphill: take the preconditioned gradient
            gdot = 0.0
            for k, gk in grads.items():
                scale = np.sqrt(rms[k] / (1 - 0.999**it)) + 1e-8
                direction[k] = gk / scale
                gdot += float((gk * direction[k]).sum())
        if gdot <= 0.0:
            break  # flat: converged to numerical precision

        alpha = min(hyper.lr, 4.0 * alpha_prev)
        accepted = False
        for _ in range(hyper.max_backtracks):
            trial = {k: model.params[k] - alpha * direction[k] for k in model.params}
            if evaluate(trial) <= loss - hyper.armijo_c * alpha * gdot:
                model.params = trial
                accepted = True
                break
            alpha *= 0.5
        if not accepted:
            break  # no descent step exists at machine precision
        alpha_prev = alpha
    return model
