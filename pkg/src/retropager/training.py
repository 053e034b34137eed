"""Two-stage training.

Stage 1 teaches retrieval: a contrastive loss over page scores, averaged
across layers, with everything frozen except the bookmark projections and the
bookmark embedding row.  Its forward pass isolates each page (pages attend
only themselves), so every bookmark summary is a function of its own page and
the score margin is not washed out by cross-page mixing.

Stage 2 adapts the whole model to sparse KV: the usual next-token loss, but
computed under the retrieval attention mask so the model sees exactly what
the streaming engine will give it.  Page selection is discrete and treated as
a constant of the forward pass; gradients flow through the attended values,
not through the selection itself.

Backward passes always produce true gradients for every tensor.  Freezing is
applied afterwards by zeroing masked entries, which keeps the raw gradients
finite-difference checkable while making frozen tensors bit-stable under the
optimizer.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .config import ModelConfig, TrainConfig
from .errors import InvalidConfig, LabelError, NumericalError
from .model import ModelParams, backward, forward, isolation_plan, lk
from .paging import paginate
from .retriever import RetrieverSettings, select_pages

BOOKMARK_PROJECTIONS = ("wq_b", "wk_b", "wv_b")


# ---- freezing ----------------------------------------------------------------

def stage1_freeze(params: ModelParams, cfg: ModelConfig) -> None:
    """Freeze everything except bookmark projections and the bookmark
    embedding row."""
    trainable = {lk(l, n) for l in range(cfg.n_layers) for n in BOOKMARK_PROJECTIONS}
    params.frozen = {name for name in params.tensors
                     if name not in trainable and name != "embed"}
    params.embed_trainable_rows = np.array([cfg.bookmark_id], dtype=np.int64)
    params.stage = "stage1"


def clear_freeze(params: ModelParams, stage: str = "stage2") -> None:
    params.frozen = set()
    params.embed_trainable_rows = None
    params.stage = stage


def mask_grads(params: ModelParams, grads: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    """Zero gradient entries the freeze policy excludes (in place)."""
    for name in params.frozen:
        grads[name][...] = 0.0
    if "embed" not in params.frozen and params.embed_trainable_rows is not None:
        keep = grads["embed"][params.embed_trainable_rows].copy()
        grads["embed"][...] = 0.0
        grads["embed"][params.embed_trainable_rows] = keep
    return grads


# ---- optimizer -----------------------------------------------------------------

class AdamW:
    """Adam with decoupled weight decay on 2-D projection weights.

    Gains (1-D) and the embedding table never decay.  Frozen tensors are
    skipped entirely, so their bytes cannot drift.
    """

    def __init__(self, params: ModelParams, lr: float, weight_decay: float = 0.01,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.weight_decay = weight_decay
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self._m: dict[str, np.ndarray] = {}
        self._v: dict[str, np.ndarray] = {}

    def step(self, grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for name, p in self.params.tensors.items():
            if name in self.params.frozen:
                continue
            g = grads[name]
            m = self._m.setdefault(name, np.zeros_like(p))
            v = self._v.setdefault(name, np.zeros_like(p))
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            if self.weight_decay and p.ndim == 2 and name != "embed":
                p -= self.lr * self.weight_decay * p
            p -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)


# ---- losses --------------------------------------------------------------------

def _log_softmax(x: np.ndarray) -> np.ndarray:
    m = x.max(axis=-1, keepdims=True)
    return x - m - np.log(np.exp(x - m).sum(axis=-1, keepdims=True))


def stage1_loss(params: ModelParams, cfg: ModelConfig, tokens, positive_page: int,
                query_page: int | None = None, layer_weights=None,
                want_grads: bool = True, plan=None):
    """Contrastive page loss: -log softmax(scores)[positive], meaned over
    layers.  Scores are the query page's bookmark q against every earlier
    page's bookmark k, both pre-rotation.

    The forward pass defaults to per-page isolated attention so each bookmark
    summarizes only its own page; pass plan="full" (or any selection plan) to
    override.  Returns (loss, grads | None)."""
    aug = paginate(np.asarray(tokens, dtype=np.int64), cfg.w, cfg.bookmark_id)
    q_page = aug.n_pages - 1 if query_page is None else query_page
    if q_page <= 0 or q_page >= aug.n_pages:
        raise LabelError(f"query page {q_page} has no candidates "
                         f"(sequence has {aug.n_pages} pages)")
    if not 0 <= positive_page < q_page:
        raise LabelError(f"positive page {positive_page} is not before query page {q_page}")
    L = cfg.n_layers
    if layer_weights is None:
        weights = np.full(L, 1.0 / L)
    else:
        weights = np.asarray(layer_weights, dtype=np.float64)
        if weights.shape != (L,):
            raise LabelError(f"layer_weights must have length {L}")
    if plan is None:
        plan = isolation_plan(cfg, aug.n_pages)

    res = forward(params, cfg, aug, plan=plan, want_cache=want_grads)
    loss = 0.0
    d_bq = [None] * L
    d_bk = [None] * L
    for l in range(L):
        bq = res.bookmark_q[l][q_page]
        bk = res.bookmark_k[l][:q_page]
        scores = np.einsum("hd,phd->p", bq, bk)
        m = scores.max()
        e = np.exp(scores - m)
        z = e.sum()
        loss += weights[l] * float(np.log(z) + m - scores[positive_page])
        if want_grads:
            dsc = (e / z).astype(bq.dtype)
            dsc[positive_page] -= 1.0
            dsc *= weights[l]
            dq_l = np.zeros_like(res.bookmark_q[l])
            dq_l[q_page] = np.einsum("p,phd->hd", dsc, bk)
            dk_l = np.zeros_like(res.bookmark_k[l])
            dk_l[:q_page] = dsc[:, None, None] * bq[None]
            d_bq[l] = dq_l
            d_bk[l] = dk_l
    if not np.isfinite(loss):
        raise NumericalError(f"non-finite contrastive loss {loss}")
    if not want_grads:
        return loss, None
    grads = backward(params, cfg, res.cache, None,
                     d_bookmark_q=d_bq, d_bookmark_k=d_bk)
    return loss, grads


def stage2_loss(params: ModelParams, cfg: ModelConfig, tokens, plan,
                want_grads: bool = True):
    """Next-token loss at normal positions under the given attention plan
    ("full", retrieval settings, or an explicit frozen selection dict)."""
    raw = np.asarray(tokens, dtype=np.int64)
    aug = paginate(raw, cfg.w, cfg.bookmark_id)
    res = forward(params, cfg, aug, plan=plan, want_cache=want_grads)
    n = raw.size - 1
    if n < 1:
        raise LabelError("need at least two tokens for a next-token loss")
    logp = _log_softmax(res.logits[:n])
    targets = raw[1:]
    loss = float(-logp[np.arange(n), targets].mean())
    if not np.isfinite(loss):
        raise NumericalError(f"non-finite LM loss {loss}")
    if not want_grads:
        return loss, None
    dlogits = np.zeros_like(res.logits)
    soft = np.exp(logp)
    soft[np.arange(n), targets] -= 1.0
    dlogits[:n] = soft / n
    grads = backward(params, cfg, res.cache, dlogits)
    return loss, grads


def frozen_plan(params: ModelParams, cfg: ModelConfig, tokens,
                settings: RetrieverSettings) -> dict:
    """Materialize the retrieval selections the current weights would make,
    as an explicit per-layer plan that no longer depends on the weights."""
    aug = paginate(np.asarray(tokens, dtype=np.int64), cfg.w, cfg.bookmark_id)
    res = forward(params, cfg, aug, plan=settings)
    return {l: sels for l, sels in enumerate(res.selections)}


def scripted_plan(cfg: ModelConfig, settings: RetrieverSettings, n_pages: int,
                  query_page: int, positive_page: int,
                  rng: np.random.Generator | None = None) -> dict:
    """Selection plan written down from a known positive page instead of
    computed from weights, mirroring what the engine serves once the
    retriever has converged.

    Layer 0 keeps the first-k pick: its bookmark keys are projections of one
    shared embedding row, so no score order exists there and the engine
    falls back to index order.  Later layers keep sinks and locals, rank the
    positive first from the query page onward, and fill leftover slots in
    random order so nothing downstream can key on filler identity."""
    rng = np.random.default_rng(0) if rng is None else rng
    plan: dict[int, list] = {l: [] for l in range(cfg.n_layers)}
    for i in range(n_pages):
        flat = np.zeros(i)
        plan[0].append(select_pages(flat, settings.k_pages, settings.sink_count,
                                    settings.local_count, i).selected)
        scores = rng.random(i) * 1e-3 if i else flat
        if i >= query_page and positive_page < i:
            scores[positive_page] = 1.0
        sel = select_pages(scores, settings.k_pages, settings.sink_count,
                           settings.local_count, i).selected
        for l in range(1, cfg.n_layers):
            plan[l].append(sel)
    return plan


def scripted_plans(cfg: ModelConfig, settings: RetrieverSettings, samples,
                   seed: int = 0) -> list[dict]:
    """One scripted_plan per labeled sample, for per-sample stage-2 plans."""
    rng = np.random.default_rng(seed)
    out = []
    for s in samples:
        n_pages = -(-len(s.tokens) // cfg.w)
        out.append(scripted_plan(cfg, settings, n_pages, s.query_page,
                                 s.positive_page, rng))
    return out


# ---- training loops -------------------------------------------------------------

@dataclass
class TrainLog:
    steps: list[dict] = field(default_factory=list)

    def append(self, row: dict, fh=None) -> None:
        self.steps.append(row)
        if fh is not None:
            fh.write(json.dumps(row) + "\n")
            fh.flush()

    @property
    def losses(self) -> list[float]:
        return [r["loss"] for r in self.steps]


def train_stage1(params: ModelParams, cfg: ModelConfig, tcfg: TrainConfig,
                 samples, *, plan=None, eval_fn=None, eval_every: int = 0,
                 metrics_path: str | None = None) -> TrainLog:
    """samples: sequence of objects with .tokens, .positive_page and
    optional .query_page.  plan=None trains on page-isolated summaries;
    passing RetrieverSettings trains on the engine's streaming view instead
    (useful as a fine-tune once the isolated metric is in place).
    eval_fn(params) -> dict merged into the metrics row every eval_every
    steps."""
    stage1_freeze(params, cfg)
    opt = AdamW(params, tcfg.learning_rate, tcfg.weight_decay,
                tcfg.beta1, tcfg.beta2, tcfg.adam_eps)
    rng = np.random.default_rng(tcfg.seed)
    log = TrainLog()
    fh = open(metrics_path, "w") if metrics_path else None
    try:
        for step in range(1, tcfg.max_steps + 1):
            acc = None
            loss_sum = 0.0
            for _ in range(tcfg.grad_accum_steps):
                s = samples[int(rng.integers(len(samples)))]
                loss, grads = stage1_loss(
                    params, cfg, s.tokens, s.positive_page,
                    getattr(s, "query_page", None), tcfg.layer_loss_weights,
                    plan=plan)
                loss_sum += loss
                if acc is None:
                    acc = grads
                else:
                    for name in acc:
                        acc[name] += grads[name]
            inv = 1.0 / tcfg.grad_accum_steps
            for name in acc:
                acc[name] *= inv
            mask_grads(params, acc)
            opt.step(acc)
            row = {"step": step, "stage": 1,
                   "loss": loss_sum / tcfg.grad_accum_steps,
                   "lr": tcfg.learning_rate}
            if eval_fn is not None and eval_every and step % eval_every == 0:
                row.update(eval_fn(params))
            log.append(row, fh)
    finally:
        if fh is not None:
            fh.close()
    return log


def train_stage2(params: ModelParams, cfg: ModelConfig, tcfg: TrainConfig,
                 corpora, settings, *,
                 metrics_path: str | None = None) -> TrainLog:
    """corpora: sequence of raw token arrays.  settings picks the attention
    plan: RetrieverSettings recomputes live selections from the current
    weights on every draw, "full" trains dense, and a list (one plan per
    corpus entry, see scripted_plans) trains on fixed per-sample views."""
    per_sample = isinstance(settings, (list, tuple))
    if per_sample and len(settings) != len(corpora):
        raise InvalidConfig(f"{len(settings)} plans for {len(corpora)} corpora")
    clear_freeze(params, "stage2")
    opt = AdamW(params, tcfg.learning_rate, tcfg.weight_decay,
                tcfg.beta1, tcfg.beta2, tcfg.adam_eps)
    rng = np.random.default_rng(tcfg.seed)
    log = TrainLog()
    fh = open(metrics_path, "w") if metrics_path else None
    try:
        for step in range(1, tcfg.max_steps + 1):
            acc = None
            loss_sum = 0.0
            for _ in range(tcfg.grad_accum_steps):
                draw = int(rng.integers(len(corpora)))
                tokens = corpora[draw]
                plan = settings[draw] if per_sample else settings
                if tcfg.max_sample_tokens and not per_sample:
                    # truncation would desync a fixed plan's page count
                    tokens = tokens[:tcfg.max_sample_tokens]
                loss, grads = stage2_loss(params, cfg, tokens, plan)
                loss_sum += loss
                if acc is None:
                    acc = grads
                else:
                    for name in acc:
                        acc[name] += grads[name]
            inv = 1.0 / tcfg.grad_accum_steps
            for name in acc:
                acc[name] *= inv
            mask_grads(params, acc)
            opt.step(acc)
            log.append({"step": step, "stage": 2,
                        "loss": loss_sum / tcfg.grad_accum_steps,
                        "lr": tcfg.learning_rate}, fh)
    finally:
        if fh is not None:
            fh.close()
    return log
