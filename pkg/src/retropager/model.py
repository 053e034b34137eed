"""Decoder-only toy transformer with paired token/bookmark projections.

Architecture: pre-norm RMS blocks, rotary positions applied by absolute index
in the augmented stream, no projection biases, SiLU feed-forward.  Every
attention projection exists twice: W*_n applied at normal-token positions and
W*_b applied at bookmark positions.  The bookmark path is initialized as an
exact copy of the token path, so an untrained model treats bookmarks as
ordinary tokens.  Bookmark positions are never unembedded; logits exist only
at normal positions.

Forward/backward are written by hand over a cached activation tape so both
training losses can be differentiated exactly.  Retrieval scores are plain
dot products of pre-rotation bookmark q/k (summed over heads); gradients for
the contrastive stage are injected at those pre-rotation rows.
"""

from __future__ import annotations

import dataclasses
import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .config import ModelConfig
from .errors import (InvalidConfig, InvalidInput, InvalidSelection,
                     NumericalError, ShapeError)
from .kernels import masked_attention, masked_attention_backward
from .paging import AugmentedSequence, PageKV
from .retriever import RetrieverSettings, RetrievalSelection, score_pages, select_pages

_LAYER_TENSORS = ("attn_gain", "wq_n", "wk_n", "wv_n", "wq_b", "wk_b", "wv_b",
                  "wo", "ffn_gain", "w1", "w2")


def lk(layer: int, name: str) -> str:
    return f"layers.{layer}.{name}"


@dataclass
class ModelParams:
    tensors: dict[str, np.ndarray]
    frozen: set[str] = field(default_factory=set)
    embed_trainable_rows: np.ndarray | None = None  # row restriction for "embed"
    stage: str = "init"

    @property
    def dtype(self):
        return self.tensors["embed"].dtype

    def clone(self) -> "ModelParams":
        return ModelParams({k: v.copy() for k, v in self.tensors.items()},
                           set(self.frozen),
                           None if self.embed_trainable_rows is None
                           else self.embed_trainable_rows.copy(),
                           self.stage)

    def astype(self, dtype) -> "ModelParams":
        out = self.clone()
        out.tensors = {k: v.astype(dtype) for k, v in out.tensors.items()}
        return out

    def zeros_like_grads(self) -> dict[str, np.ndarray]:
        return {k: np.zeros_like(v) for k, v in self.tensors.items()}


def init_params(cfg: ModelConfig, dtype=np.float32) -> ModelParams:
    """Seeded initialization; bookmark projections start as copies of the
    token projections and the bookmark embedding as the mean token embedding."""
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    d, dff, v = cfg.d_model, cfg.d_ff, cfg.vocab_size
    std = cfg.init_std
    resid_std = std / np.sqrt(2.0 * cfg.n_layers)
    t: dict[str, np.ndarray] = {}
    emb = rng.normal(0.0, std, (v, d))
    emb[cfg.bookmark_id] = emb[:cfg.bookmark_id].mean(axis=0)
    t["embed"] = emb
    for l in range(cfg.n_layers):
        t[lk(l, "attn_gain")] = np.ones(d)
        for name in ("wq", "wk", "wv"):
            wn = rng.normal(0.0, std, (d, d))
            t[lk(l, name + "_n")] = wn
            t[lk(l, name + "_b")] = wn.copy()
        t[lk(l, "wo")] = rng.normal(0.0, resid_std, (d, d))
        t[lk(l, "ffn_gain")] = np.ones(d)
        t[lk(l, "w1")] = rng.normal(0.0, std, (d, dff))
        t[lk(l, "w2")] = rng.normal(0.0, resid_std, (dff, d))
    t["final_gain"] = np.ones(d)
    t["unembed"] = rng.normal(0.0, std, (d, v))
    return ModelParams({k: a.astype(dtype) for k, a in t.items()})


# ---- primitive ops ----------------------------------------------------------

def rope_angles(cfg: ModelConfig, positions: np.ndarray, dtype):
    """cos/sin tables [len(positions), head_dim/2] for absolute positions."""
    half = cfg.head_dim // 2
    inv_freq = cfg.rope_base ** (-np.arange(half, dtype=np.float64) * 2.0 / cfg.head_dim)
    ang = np.asarray(positions, dtype=np.float64)[:, None] * inv_freq[None, :]
    return np.cos(ang).astype(dtype), np.sin(ang).astype(dtype)


def apply_rope(x: np.ndarray, cos: np.ndarray, sin: np.ndarray) -> np.ndarray:
    """Rotate pairs of dims; x is [T, H, hd], cos/sin [T, hd/2]."""
    x1 = x[..., 0::2]
    x2 = x[..., 1::2]
    c = cos[:, None, :]
    s = sin[:, None, :]
    out = np.empty_like(x)
    out[..., 0::2] = x1 * c - x2 * s
    out[..., 1::2] = x1 * s + x2 * c
    return out


def rope_backward(dy: np.ndarray, cos: np.ndarray, sin: np.ndarray) -> np.ndarray:
    d1 = dy[..., 0::2]
    d2 = dy[..., 1::2]
    c = cos[:, None, :]
    s = sin[:, None, :]
    out = np.empty_like(dy)
    out[..., 0::2] = d1 * c + d2 * s
    out[..., 1::2] = -d1 * s + d2 * c
    return out


def rotate_rows(cfg: ModelConfig, x: np.ndarray, positions) -> np.ndarray:
    """apply_rope for ad-hoc rows; positions may be negative (delta rotation)."""
    cos, sin = rope_angles(cfg, np.asarray(positions), x.dtype)
    return apply_rope(x, cos, sin)


def rmsnorm(x: np.ndarray, gain: np.ndarray, eps: float):
    inv = 1.0 / np.sqrt((x * x).mean(axis=-1, keepdims=True) + eps)
    return x * inv * gain, inv


def rmsnorm_backward(dy: np.ndarray, x: np.ndarray, inv: np.ndarray, gain: np.ndarray):
    d = x.shape[-1]
    xg = dy * gain
    dot = (xg * x).sum(axis=-1, keepdims=True)
    dx = inv * xg - (inv ** 3 / d) * x * dot
    dgain = (dy * x * inv).sum(axis=0)
    return dx, dgain


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def project_qkv(xn: np.ndarray, kinds: np.ndarray, params: ModelParams,
                cfg: ModelConfig, layer: int):
    """Dual-path projection: token rows through W*_n, bookmark rows through W*_b.

    Returns pre-rotation q, k, v as [T, H, hd].  Raises NumericalError on
    NaN input.
    """
    if np.isnan(xn).any():
        raise NumericalError(f"NaN in layer {layer} attention input")
    T = xn.shape[0]
    H, hd = cfg.n_heads, cfg.head_dim
    idx_n = np.flatnonzero(kinds == 0)
    idx_b = np.flatnonzero(kinds == 1)
    outs = []
    for name in ("wq", "wk", "wv"):
        wn = params.tensors[lk(layer, name + "_n")]
        wb = params.tensors[lk(layer, name + "_b")]
        out = np.empty((T, cfg.d_model), dtype=xn.dtype)
        if idx_n.size:
            out[idx_n] = xn[idx_n] @ wn
        if idx_b.size:
            out[idx_b] = xn[idx_b] @ wb
        outs.append(out.reshape(T, H, hd))
    return tuple(outs)


def _project_qkv_backward(dq, dk, dv, xn, kinds, params, cfg, layer, grads):
    T = xn.shape[0]
    idx_n = np.flatnonzero(kinds == 0)
    idx_b = np.flatnonzero(kinds == 1)
    dxn = np.zeros_like(xn)
    for name, dout in (("wq", dq), ("wk", dk), ("wv", dv)):
        flat = dout.reshape(T, cfg.d_model)
        wn = params.tensors[lk(layer, name + "_n")]
        wb = params.tensors[lk(layer, name + "_b")]
        if idx_n.size:
            grads[lk(layer, name + "_n")] += xn[idx_n].T @ flat[idx_n]
            dxn[idx_n] += flat[idx_n] @ wn.T
        if idx_b.size:
            grads[lk(layer, name + "_b")] += xn[idx_b].T @ flat[idx_b]
            dxn[idx_b] += flat[idx_b] @ wb.T
    return dxn


def full_causal_mask(T: int) -> np.ndarray:
    return np.tril(np.ones((T, T), dtype=bool))


def localize_bookmark_rows(mask: np.ndarray, aug: AugmentedSequence) -> np.ndarray:
    """Restrict every bookmark row of an attention mask to its own page.

    Bookmark rows serve as page indices: their summaries must be functions of
    the page they index, not of whatever other pages happened to be visible
    when the page was encoded.  Letting a bookmark attend outside its page
    leaks neighbouring content into the summary, and that contamination
    measurably destroys the scoring margin between the right page and its
    distractors.  Normal rows are untouched.  Applied by every forward path
    (dense, retrieval, oracle), so the invariant holds model-wide.
    """
    for s, e in aug.page_spans:
        mask[e - 1, :s] = False
        mask[e - 1, e:] = False
    return mask


def isolation_plan(cfg: ModelConfig, n_pages: int) -> dict:
    """Selection plan where every page attends only to itself.

    Bookmark summaries computed under this plan are pure functions of their
    own page even at second order (the page's normal rows see nothing outside
    the page either), which is the cleanest view for retriever training.
    """
    return {l: [[] for _ in range(n_pages)] for l in range(cfg.n_layers)}


def selection_mask(aug: AugmentedSequence, selections) -> np.ndarray:
    """Attention mask for one layer: normal page rows see selected pages in
    full plus their own in-page causal prefix; bookmark rows stay page-local."""
    T = aug.tokens.size
    mask = np.zeros((T, T), dtype=bool)
    for i, (s, e) in enumerate(aug.page_spans):
        sel = selections[i]
        if sel is not None:
            for j in sel.selected if isinstance(sel, RetrievalSelection) else sel:
                js, je = aug.page_spans[j]
                mask[s:e, js:je] = True
        mask[s:e, s:e] = np.tril(np.ones((e - s, e - s), dtype=bool))
    return localize_bookmark_rows(mask, aug)


# ---- forward / backward ------------------------------------------------------

@dataclass
class ForwardCache:
    aug: AugmentedSequence
    cos: np.ndarray
    sin: np.ndarray
    normal_idx: np.ndarray
    h_in: list = field(default_factory=list)
    inv1: list = field(default_factory=list)
    xn: list = field(default_factory=list)
    q_rot: list = field(default_factory=list)     # [H, T, hd]
    k_rot: list = field(default_factory=list)
    v: list = field(default_factory=list)
    probs: list = field(default_factory=list)
    mask: list = field(default_factory=list)
    ctx: list = field(default_factory=list)
    h_mid: list = field(default_factory=list)
    inv2: list = field(default_factory=list)
    xn2: list = field(default_factory=list)
    h1: list = field(default_factory=list)
    sig: list = field(default_factory=list)
    h_last: np.ndarray | None = None
    inv_f: np.ndarray | None = None
    xf: np.ndarray | None = None


@dataclass
class ForwardResult:
    logits: np.ndarray                 # [n_normal, vocab]
    normal_positions: np.ndarray
    bookmark_q: list                   # per layer [n_pages, H, hd], pre-rotation
    bookmark_k: list
    selections: list | None            # per layer, per page: RetrievalSelection | None
    cache: ForwardCache | None


def _plan_selections(plan, layer: int, n_pages: int, bq, bk):
    """Resolve the page-selection list for one layer under the given plan."""
    if plan == "full":
        return None
    if isinstance(plan, RetrieverSettings):
        sels: list = [None]
        for i in range(1, n_pages):
            scores = score_pages(bq[i], bk[:i])
            sel = select_pages(scores, plan.k_pages, plan.sink_count, plan.local_count)
            sel.layer = layer
            sels.append(sel)
        return sels
    if isinstance(plan, dict):
        if layer not in plan:
            raise InvalidSelection(f"selection plan missing layer {layer}")
        sels = plan[layer]
        if len(sels) != n_pages:
            raise InvalidSelection(f"plan for layer {layer} covers {len(sels)} pages, "
                                   f"expected {n_pages}")
        return sels
    raise InvalidSelection(f"unsupported selection plan {plan!r}")


def forward(params: ModelParams, cfg: ModelConfig, aug: AugmentedSequence,
            plan="full", *, want_cache: bool = False) -> ForwardResult:
    tokens, kinds = aug.tokens, aug.kinds
    T = tokens.size
    if T > cfg.max_positions:
        raise InvalidConfig(f"sequence of {T} positions exceeds max_positions={cfg.max_positions}")
    if int(tokens.max(initial=0)) >= cfg.vocab_size or int(tokens.min(initial=0)) < 0:
        raise InvalidInput(f"token ids outside [0, {cfg.vocab_size})")
    H, hd = cfg.n_heads, cfg.head_dim
    scale = 1.0 / np.sqrt(hd)
    t = params.tensors
    dtype = params.dtype
    positions = np.arange(T)
    cos, sin = rope_angles(cfg, positions, dtype)
    normal_idx = aug.normal_positions
    bmk_idx = aug.bookmark_positions
    n_pages = aug.n_pages

    cache = ForwardCache(aug, cos, sin, normal_idx) if want_cache else None
    causal = (localize_bookmark_rows(full_causal_mask(T), aug)
              if plan == "full" else None)
    bookmark_q, bookmark_k, selections_out = [], [], ([] if plan != "full" else None)

    h = t["embed"][tokens]
    for l in range(cfg.n_layers):
        xn, inv1 = rmsnorm(h, t[lk(l, "attn_gain")], cfg.norm_eps)
        q, k, v = project_qkv(xn, kinds, params, cfg, l)
        bq = q[bmk_idx].copy()
        bk = k[bmk_idx].copy()
        bookmark_q.append(bq)
        bookmark_k.append(bk)

        sels = _plan_selections(plan, l, n_pages, bq, bk)
        if sels is None:
            mask = causal
        else:
            mask = selection_mask(aug, sels)
            selections_out.append(sels)

        q_rot = np.ascontiguousarray(apply_rope(q, cos, sin).transpose(1, 0, 2))
        k_rot = np.ascontiguousarray(apply_rope(k, cos, sin).transpose(1, 0, 2))
        v_hm = np.ascontiguousarray(v.transpose(1, 0, 2))
        ctx, probs = masked_attention(q_rot, k_rot, v_hm, mask, scale,
                                      want_probs=want_cache)
        attn = ctx.transpose(1, 0, 2).reshape(T, cfg.d_model) @ t[lk(l, "wo")]
        h_mid = h + attn
        xn2, inv2 = rmsnorm(h_mid, t[lk(l, "ffn_gain")], cfg.norm_eps)
        h1 = xn2 @ t[lk(l, "w1")]
        sig = _sigmoid(h1)
        f = (h1 * sig) @ t[lk(l, "w2")]
        h_next = h_mid + f

        if want_cache:
            cache.h_in.append(h)
            cache.inv1.append(inv1)
            cache.xn.append(xn)
            cache.q_rot.append(q_rot)
            cache.k_rot.append(k_rot)
            cache.v.append(v_hm)
            cache.probs.append(probs)
            cache.mask.append(mask)
            cache.ctx.append(ctx)
            cache.h_mid.append(h_mid)
            cache.inv2.append(inv2)
            cache.xn2.append(xn2)
            cache.h1.append(h1)
            cache.sig.append(sig)
        h = h_next

    xf, inv_f = rmsnorm(h, t["final_gain"], cfg.norm_eps)
    logits = xf[normal_idx] @ t["unembed"]
    if want_cache:
        cache.h_last = h
        cache.inv_f = inv_f
        cache.xf = xf
    return ForwardResult(logits, normal_idx, bookmark_q, bookmark_k,
                         selections_out, cache)


def backward(params: ModelParams, cfg: ModelConfig, cache: ForwardCache,
             dlogits: np.ndarray | None,
             d_bookmark_q: list | None = None,
             d_bookmark_k: list | None = None) -> dict[str, np.ndarray]:
    """Reverse pass over a cached forward.

    dlogits is [n_normal, vocab] (or None); d_bookmark_q/k inject extra
    gradient at each layer's pre-rotation bookmark q/k rows ([n_pages, H, hd]
    per layer), which is how the contrastive stage couples in.
    """
    t = params.tensors
    aug = cache.aug
    T = aug.tokens.size
    scale = 1.0 / np.sqrt(cfg.head_dim)
    grads = params.zeros_like_grads()
    bmk_idx = aug.bookmark_positions

    dh = np.zeros_like(cache.h_last)
    if dlogits is not None:
        grads["unembed"] += cache.xf[cache.normal_idx].T @ dlogits
        dxf = np.zeros_like(cache.xf)
        dxf[cache.normal_idx] = dlogits @ t["unembed"].T
        dh_f, dg = rmsnorm_backward(dxf, cache.h_last, cache.inv_f, t["final_gain"])
        grads["final_gain"] += dg
        dh += dh_f

    for l in reversed(range(cfg.n_layers)):
        # feed-forward block
        d_f = dh
        a = cache.h1[l] * cache.sig[l]
        grads[lk(l, "w2")] += a.T @ d_f
        da = d_f @ t[lk(l, "w2")].T
        dh1 = da * (cache.sig[l] * (1.0 + cache.h1[l] * (1.0 - cache.sig[l])))
        grads[lk(l, "w1")] += cache.xn2[l].T @ dh1
        dxn2 = dh1 @ t[lk(l, "w1")].T
        dx, dg = rmsnorm_backward(dxn2, cache.h_mid[l], cache.inv2[l], t[lk(l, "ffn_gain")])
        grads[lk(l, "ffn_gain")] += dg
        dh_mid = dh + dx

        # attention block
        d_attn = dh_mid
        ctx_merged = cache.ctx[l].transpose(1, 0, 2).reshape(T, cfg.d_model)
        grads[lk(l, "wo")] += ctx_merged.T @ d_attn
        dctx = (d_attn @ t[lk(l, "wo")].T).reshape(T, cfg.n_heads, cfg.head_dim)
        dctx = np.ascontiguousarray(dctx.transpose(1, 0, 2))
        dq_rot, dk_rot, dv = masked_attention_backward(
            cache.q_rot[l], cache.k_rot[l], cache.v[l], cache.probs[l],
            cache.mask[l], dctx, scale)
        dq = rope_backward(dq_rot.transpose(1, 0, 2), cache.cos, cache.sin)
        dk = rope_backward(dk_rot.transpose(1, 0, 2), cache.cos, cache.sin)
        dv = dv.transpose(1, 0, 2).copy()
        if d_bookmark_q is not None and d_bookmark_q[l] is not None:
            dq[bmk_idx] += d_bookmark_q[l]
        if d_bookmark_k is not None and d_bookmark_k[l] is not None:
            dk[bmk_idx] += d_bookmark_k[l]
        dxn = _project_qkv_backward(dq, dk, dv, cache.xn[l], aug.kinds,
                                    params, cfg, l, grads)
        dx, dg = rmsnorm_backward(dxn, cache.h_in[l], cache.inv1[l], t[lk(l, "attn_gain")])
        grads[lk(l, "attn_gain")] += dg
        dh = dh_mid + dx

    np.add.at(grads["embed"], aug.tokens, dh)
    return grads


# ---- selected-page attention (streaming engine primitive) -------------------

def attend_selected(window_q_rot: np.ndarray, window_k_rot: np.ndarray,
                    window_v: np.ndarray, fetched: list[PageKV],
                    wo: np.ndarray, cfg: ModelConfig, *,
                    window_positions: np.ndarray,
                    remap_positions: bool = False,
                    bookmark_row: int | None = None):
    """Attention of the current window over fetched page KVs plus itself.

    window arrays are [win, H, hd] (q/k already rotated); fetched blocks are
    complete pages in ascending page order.  Each window row attends to every
    fetched row and causally within the window; the row named by bookmark_row
    is kept page-local (window-only, no fetched columns).  Returns
    (out [win, d_model], n_cat) where n_cat is the number of fetched KV rows.
    """
    win = window_q_rot.shape[0]
    k_parts, v_parts = [], []
    for kv in fetched:
        bmk_key = rotate_rows(cfg, kv.bookmark_key[None], [kv.bookmark_position])[0]
        k_parts.append(np.concatenate([kv.normal_keys, bmk_key[None]], axis=0))
        v_parts.append(np.concatenate([kv.normal_values, kv.bookmark_value[None]], axis=0))
    n_cat = sum(p.shape[0] for p in k_parts)
    if n_cat == 0 and win == 0:
        raise InvalidSelection("empty attention set")

    if remap_positions and fetched:
        # compact fetched rows to positions 0..n_cat-1, window follows
        old_pos = np.concatenate([
            np.concatenate([kv.first_position + np.arange(kv.n_tokens),
                            [kv.bookmark_position]])
            for kv in fetched]).astype(np.int64)
        new_pos = np.arange(n_cat, dtype=np.int64)
        k_cat = rotate_rows(cfg, np.concatenate(k_parts, axis=0), new_pos - old_pos)
        q_use = rotate_rows(cfg, window_q_rot,
                            n_cat + np.arange(win) - window_positions)
        k_win = rotate_rows(cfg, window_k_rot,
                            n_cat + np.arange(win) - window_positions)
    else:
        k_cat = np.concatenate(k_parts, axis=0) if k_parts else \
            np.zeros((0,) + window_k_rot.shape[1:], dtype=window_k_rot.dtype)
        q_use, k_win = window_q_rot, window_k_rot

    k_all = np.concatenate([k_cat, k_win], axis=0)
    v_all = np.concatenate(v_parts + [window_v], axis=0) if v_parts else window_v
    mask = np.zeros((win, n_cat + win), dtype=bool)
    mask[:, :n_cat] = True
    mask[:, n_cat:] = np.tril(np.ones((win, win), dtype=bool))
    if bookmark_row is not None:
        mask[bookmark_row, :n_cat] = False

    ctx, _ = masked_attention(
        np.ascontiguousarray(q_use.transpose(1, 0, 2)),
        np.ascontiguousarray(k_all.transpose(1, 0, 2)),
        np.ascontiguousarray(v_all.transpose(1, 0, 2)),
        mask, 1.0 / np.sqrt(cfg.head_dim))
    out = ctx.transpose(1, 0, 2).reshape(win, cfg.d_model) @ wo
    return out, n_cat


# ---- gradient checking -------------------------------------------------------

def grad_check(loss_fn, params: ModelParams, epsilon: float = 1e-5) -> float:
    """Max relative error between analytic gradients and central differences.

    loss_fn(params, want_grads=...) -> (loss, grads | None).  Runs at float64;
    relative error uses denominator max(|analytic|, |fd|, 1e-6) so true-zero
    gradients compare cleanly.
    """
    base = params.astype(np.float64)
    _, grads = loss_fn(base, want_grads=True)
    worst = 0.0
    for name, tensor in base.tensors.items():
        flat = tensor.reshape(-1)
        gflat = grads[name].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + epsilon
            lp = loss_fn(base, want_grads=False)[0]
            flat[i] = orig - epsilon
            lm = loss_fn(base, want_grads=False)[0]
            flat[i] = orig
            fd = (lp - lm) / (2.0 * epsilon)
            rel = abs(gflat[i] - fd) / max(abs(gflat[i]), abs(fd), 1e-6)
            worst = max(worst, rel)
    return worst


# ---- checkpoints -------------------------------------------------------------

_CKPT_MAGIC = "retropager-ckpt-v1"


def save_checkpoint(path: str, params: ModelParams, cfg: ModelConfig,
                    *, seed: int = 0, extra: dict | None = None) -> None:
    """JSON header (config, freeze flags, stage, seed, tensor manifest)
    followed by named float32 little-endian tensor blobs."""
    names = sorted(params.tensors)
    manifest, offset = [], 0
    blobs = []
    for name in names:
        arr = params.tensors[name].astype("<f4", copy=False)
        blob = arr.tobytes()
        manifest.append({"name": name, "shape": list(arr.shape), "offset": offset})
        blobs.append(blob)
        offset += len(blob)
    header = {
        "format": _CKPT_MAGIC,
        "config": dataclasses.asdict(cfg),
        "stage": params.stage,
        "frozen": sorted(params.frozen),
        "embed_trainable_rows": (None if params.embed_trainable_rows is None
                                 else [int(r) for r in params.embed_trainable_rows]),
        "seed": int(seed),
        "manifest": manifest,
    }
    raw = json.dumps(header).encode()
    with open(path, "wb") as fh:
        fh.write(struct.pack("<I", len(raw)))
        fh.write(raw)
        for blob in blobs:
            fh.write(blob)


def load_checkpoint(path: str):
    """Returns (params, cfg, header dict)."""
    with open(path, "rb") as fh:
        (hlen,) = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(hlen).decode())
        if header.get("format") != _CKPT_MAGIC:
            raise InvalidConfig(f"{path} is not a checkpoint file")
        body = fh.read()
    cfg = ModelConfig(**header["config"])
    tensors = {}
    for entry in header["manifest"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(body, dtype="<f4", count=count, offset=entry["offset"])
        tensors[entry["name"]] = arr.reshape(shape).astype(np.float32)
    rows = header.get("embed_trainable_rows")
    params = ModelParams(tensors, set(header.get("frozen", [])),
                         None if rows is None else np.asarray(rows, dtype=np.int64),
                         header.get("stage", "init"))
    return params, cfg, header
