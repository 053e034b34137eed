"""Streaming inference engine over the paged KV store.

Prefill consumes the prompt page by page.  For each page and each layer the
page's bookmark query (pre-rotation) scores every earlier page's bookmark
key, a budgeted selection is fetched from the store, the page window attends
to the fetched rows plus itself causally, and the page's own KV block is
stored (possibly demoting older pages to the cold tier).  Decode freezes one
selection per layer, computed once from the final page's bookmark query, and
generates greedily with a token-by-token local window appended after the
prompt.

Three modes share the loop: "retrieval" (scored selection), "sliding_window"
(most recent pages plus sinks, no scoring), and "full_attention" (dense, no
store, resident KV grows with the prompt).  A RunTrace records selections,
attended-KV counts against the budget, score invocations, and memory
snapshots for every step.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np

from .config import EngineConfig, ModelConfig
from .errors import InvalidConfig, InvalidInput, InvalidState
from .model import (ModelParams, _sigmoid, apply_rope, attend_selected, lk,
                    project_qkv, rmsnorm, rope_angles, rotate_rows)
from .paging import PageKV, PagedKVStore, paginate
from .retriever import RetrievalSelection, score_pages, select_pages


@dataclass
class TraceRow:
    phase: str            # "prefill" | "decode"
    step: int             # page index during prefill, token index during decode
    layer: int
    query_page: int
    selected: list[int]
    attended_kv: int      # KV rows visible to the newest query row
    budget_limit: int


@dataclass
class RunTrace:
    rows: list[TraceRow] = field(default_factory=list)
    memory: list[dict] = field(default_factory=list)
    decode_scores: list = field(default_factory=list)   # (layer, page, score)
    score_invocations_prefill: int = 0
    score_invocations_decode: int = 0

    def budget_violations(self) -> list[TraceRow]:
        return [r for r in self.rows if r.attended_kv > r.budget_limit]

    def to_json(self, path: str) -> None:
        payload = {
            "score_invocations_prefill": self.score_invocations_prefill,
            "score_invocations_decode": self.score_invocations_decode,
            "rows": [vars(r) for r in self.rows],
            "memory": self.memory,
            "decode_scores": [[l, p, s] for l, p, s in self.decode_scores],
        }
        with open(path, "w") as fh:
            json.dump(payload, fh, indent=1)

    def audit_csv(self, path: str) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["phase", "step", "layer", "attended_kv",
                             "budget_limit", "selected_pages"])
            for r in self.rows:
                writer.writerow([r.phase, r.step, r.layer, r.attended_kv,
                                 r.budget_limit, "|".join(map(str, r.selected))])


@dataclass
class GenerateResult:
    prompt_logits: np.ndarray        # [n_normal, vocab]
    generated: list[int]
    trace: RunTrace


class Engine:
    """One prompt per instance: prefill() once, then decode()."""

    def __init__(self, params: ModelParams, cfg: ModelConfig,
                 engine_cfg: EngineConfig):
        cfg.validate()
        engine_cfg.validate()
        self.params = params
        self.cfg = cfg
        self.ecfg = engine_cfg
        self.mode = engine_cfg.mode
        self.trace = RunTrace()
        self.store: PagedKVStore | None = None
        if self.mode != "full_attention":
            self.store = PagedKVStore(
                cfg.n_layers, cfg.n_heads, cfg.head_dim, cfg.w,
                engine_cfg.hot_budget_tokens, sink_pages=engine_cfg.sink_count,
                spill_dir=engine_cfg.spill_dir)
        self._aug = None
        self._prompt_logits = None
        self._last_bq = [None] * cfg.n_layers   # final page's pre-rotation bookmark q
        # dense-mode resident KV, roped, one list of row-blocks per layer
        self._dense_k = [[] for _ in range(cfg.n_layers)]
        self._dense_v = [[] for _ in range(cfg.n_layers)]
        # decode state
        self._decode_ready = False
        self._dec_cat_k = None
        self._dec_cat_v = None
        self._dec_pos0 = None   # per-layer remapped position of the first generated token
        self._dec_selections = None
        self._gen_k = None
        self._gen_v = None
        self._generated: list[int] = []

    # -- selection rules -------------------------------------------------

    def _window_selection(self, n_candidates: int, query_page: int) -> RetrievalSelection:
        """Sliding window: sinks plus the most recent pages, score-free."""
        span = self.ecfg.window_pages
        sinks = list(range(min(self.ecfg.sink_count, n_candidates)))
        lo = max(n_candidates - (span - len(sinks)), len(sinks))
        recent = list(range(lo, n_candidates))
        return RetrievalSelection(query_page=query_page,
                                  selected=sorted(set(sinks) | set(recent)),
                                  scores=np.zeros(n_candidates),
                                  sinks=sinks, locals_=recent)

    def _budget_limit(self, window_rows: int) -> int:
        if self.mode == "retrieval":
            pages = self.ecfg.k_pages + self.ecfg.local_count
        elif self.mode == "sliding_window":
            pages = self.ecfg.window_pages
        else:
            return 1 << 62
        return pages * (self.cfg.w + 1) + window_rows

    # -- prefill -----------------------------------------------------------

    def prefill(self, tokens) -> np.ndarray:
        """Stream the prompt; returns logits at every normal position."""
        if self._aug is not None:
            raise InvalidState("engine already holds a prompt; use a fresh Engine")
        cfg, ecfg, t = self.cfg, self.ecfg, self.params.tensors
        aug = paginate(np.asarray(tokens, dtype=np.int64), cfg.w, cfg.bookmark_id)
        if int(aug.tokens.max()) >= cfg.vocab_size or int(aug.tokens.min()) < 0:
            raise InvalidInput(f"token ids outside [0, {cfg.vocab_size})")
        if aug.tokens.size + ecfg.max_new_tokens > cfg.max_positions:
            raise InvalidConfig(
                f"prompt of {aug.tokens.size} rows + {ecfg.max_new_tokens} new tokens "
                f"exceeds max_positions={cfg.max_positions}")
        self._aug = aug
        dtype = self.params.dtype
        logits_parts = []

        for i in range(aug.n_pages):
            # span covers the page's tokens plus its trailing bookmark row
            s, e = aug.page_spans[i]
            bpos = int(aug.bookmark_positions[i])
            rows = aug.tokens[s:e]
            kinds = aug.kinds[s:e]
            positions = np.arange(s, e)
            cos, sin = rope_angles(cfg, positions, dtype)
            win = rows.size
            h = t["embed"][rows]

            for l in range(cfg.n_layers):
                xn, _ = rmsnorm(h, t[lk(l, "attn_gain")], cfg.norm_eps)
                q, k, v = project_qkv(xn, kinds, self.params, cfg, l)
                bq_pre = q[-1].copy()
                bk_pre = k[-1].copy()
                self._last_bq[l] = bq_pre
                q_rot = apply_rope(q, cos, sin)
                k_rot = apply_rope(k, cos, sin)

                if self.mode == "full_attention":
                    out, n_cat = self._attend_dense(l, q_rot, k_rot, v)
                else:
                    sel, fetched = self._select_and_fetch(l, i, bq_pre)
                    out, n_cat = attend_selected(
                        q_rot, k_rot, v, fetched, t[lk(l, "wo")], cfg,
                        window_positions=positions,
                        remap_positions=ecfg.remap_positions,
                        bookmark_row=win - 1)
                    self.store.store_page(PageKV(
                        layer=l, page_index=i,
                        normal_keys=k_rot[:-1].copy(), normal_values=v[:-1].copy(),
                        bookmark_key=bk_pre, bookmark_value=v[-1].copy(),
                        first_position=s, bookmark_position=bpos))
                    self.trace.rows.append(TraceRow(
                        "prefill", i, l, i,
                        [] if sel is None else sel.selected,
                        n_cat + win, self._budget_limit(win)))

                h = h + out
                xn2, _ = rmsnorm(h, t[lk(l, "ffn_gain")], cfg.norm_eps)
                h1 = xn2 @ t[lk(l, "w1")]
                h = h + (h1 * _sigmoid(h1)) @ t[lk(l, "w2")]

            xf, _ = rmsnorm(h, t["final_gain"], cfg.norm_eps)
            logits_parts.append(xf[:-1] @ t["unembed"])
            self.trace.memory.append({"page": i, **self.memory_report()})

        self._prompt_logits = np.concatenate(logits_parts, axis=0)
        return self._prompt_logits

    def _select_and_fetch(self, layer: int, page: int, bq_pre: np.ndarray):
        if page == 0:
            return None, []
        if self.mode == "retrieval":
            keys = self.store.bookmark_keys(layer, page)
            scores = score_pages(bq_pre.astype(np.float64), keys.astype(np.float64))
            sel = select_pages(scores, self.ecfg.k_pages, self.ecfg.sink_count,
                               self.ecfg.local_count, query_page=page)
            sel.layer = layer
            self.trace.score_invocations_prefill += 1
        else:
            sel = self._window_selection(page, page)
            sel.layer = layer
        return sel, self.store.fetch_pages(layer, sel.selected)

    def _attend_dense(self, layer: int, q_rot, k_rot, v):
        """Dense mode: attend to every stored row, then append this window.
        The window's trailing bookmark row stays page-local."""
        from .kernels import masked_attention
        cfg = self.cfg
        prev_k = self._dense_k[layer]
        prev_v = self._dense_v[layer]
        n_prev = sum(b.shape[0] for b in prev_k)
        win = q_rot.shape[0]
        k_all = np.concatenate(prev_k + [k_rot], axis=0)
        v_all = np.concatenate(prev_v + [v], axis=0)
        mask = np.zeros((win, n_prev + win), dtype=bool)
        mask[:, :n_prev] = True
        mask[:, n_prev:] = np.tril(np.ones((win, win), dtype=bool))
        mask[win - 1, :n_prev] = False
        ctx, _ = masked_attention(
            np.ascontiguousarray(q_rot.transpose(1, 0, 2)),
            np.ascontiguousarray(k_all.transpose(1, 0, 2)),
            np.ascontiguousarray(v_all.transpose(1, 0, 2)),
            mask, 1.0 / np.sqrt(cfg.head_dim))
        out = ctx.transpose(1, 0, 2).reshape(win, cfg.d_model) @ self.params.tensors[lk(layer, "wo")]
        prev_k.append(k_rot.copy())
        prev_v.append(v.copy())
        return out, n_prev

    # -- decode ------------------------------------------------------------

    def _freeze_decode_selection(self) -> None:
        cfg, ecfg = self.cfg, self.ecfg
        n_pages = self._aug.n_pages
        self._dec_cat_k = []
        self._dec_cat_v = []
        self._dec_pos0 = []
        self._dec_selections = []
        for l in range(cfg.n_layers):
            if self.mode == "full_attention":
                self._dec_selections.append(None)
                self._dec_cat_k.append(np.concatenate(self._dense_k[l], axis=0))
                self._dec_cat_v.append(np.concatenate(self._dense_v[l], axis=0))
                self._dec_pos0.append(None)
                continue
            if self.mode == "retrieval":
                keys = self.store.bookmark_keys(l, n_pages)
                scores = score_pages(self._last_bq[l].astype(np.float64),
                                     keys.astype(np.float64))
                sel = select_pages(scores, ecfg.k_pages, ecfg.sink_count,
                                   ecfg.local_count, query_page=n_pages)
                sel.layer = l
                self.trace.score_invocations_decode += 1
                self.trace.decode_scores.extend(
                    (l, p, float(scores[p])) for p in range(n_pages))
            else:
                sel = self._window_selection(n_pages, n_pages)
                sel.layer = l
            fetched = self.store.fetch_pages(l, sel.selected)
            k_parts, v_parts = [], []
            for kv in fetched:
                bmk = apply_rope(kv.bookmark_key[None],
                                 *rope_angles(cfg, [kv.bookmark_position],
                                              kv.bookmark_key.dtype))
                k_parts.append(np.concatenate([kv.normal_keys, bmk], axis=0))
                v_parts.append(np.concatenate([kv.normal_values,
                                               kv.bookmark_value[None]], axis=0))
            self._dec_selections.append(sel)
            cat_k = np.concatenate(k_parts, axis=0)
            if ecfg.remap_positions:
                # same compaction the prefill windows used: fetched rows move
                # to 0..n_cat-1 and generated tokens continue right after
                old_pos = np.concatenate([
                    np.concatenate([kv.first_position + np.arange(kv.n_tokens),
                                    [kv.bookmark_position]])
                    for kv in fetched]).astype(np.int64)
                cat_k = rotate_rows(cfg, cat_k,
                                    np.arange(old_pos.size) - old_pos)
                self._dec_pos0.append(int(old_pos.size))
            else:
                self._dec_pos0.append(None)
            self._dec_cat_k.append(cat_k)
            self._dec_cat_v.append(np.concatenate(v_parts, axis=0))
        self._gen_k = [[] for _ in range(cfg.n_layers)]
        self._gen_v = [[] for _ in range(cfg.n_layers)]
        self._decode_ready = True

    def decode(self, max_new_tokens: int | None = None,
               eos_id: int | None = None) -> list[int]:
        """Greedy generation; the bookmark id is never emitted."""
        if self._aug is None:
            raise InvalidState("decode before prefill")
        cfg, t = self.cfg, self.params.tensors
        if max_new_tokens is None:
            max_new_tokens = self.ecfg.max_new_tokens
        if eos_id is None:
            eos_id = self.ecfg.eos_id
        if not self._decode_ready:
            self._freeze_decode_selection()

        base = self._aug.tokens.size
        last_normal = int(self._aug.normal_positions[-1])
        # seed from the prompt's final normal position
        prev_logits = self._prompt_logits[
            np.searchsorted(self._aug.normal_positions, last_normal)]
        out: list[int] = []
        for j in range(max_new_tokens):
            step_logits = prev_logits.copy()
            step_logits[cfg.bookmark_id] = -np.inf
            tok = int(np.argmax(step_logits))
            out.append(tok)
            self._generated.append(tok)
            if eos_id is not None and tok == eos_id:
                break
            if j == max_new_tokens - 1:
                break
            prev_logits = self._decode_step(tok, base + len(self._generated) - 1)
        return out

    def _decode_step(self, token: int, position: int) -> np.ndarray:
        """Run one generated token through the stack; returns its logits."""
        from .kernels import masked_attention
        cfg, t = self.cfg, self.params.tensors
        dtype = self.params.dtype
        kinds = np.zeros(1, dtype=np.int8)
        cos, sin = rope_angles(cfg, [position], dtype)
        h = t["embed"][np.array([token])]
        n_gen_prev = len(self._gen_k[0])
        for l in range(cfg.n_layers):
            if self._dec_pos0[l] is not None:
                # remapped geometry: continue from this layer's fetched rows
                cos_l, sin_l = rope_angles(cfg, [self._dec_pos0[l] + n_gen_prev], dtype)
            else:
                cos_l, sin_l = cos, sin
            xn, _ = rmsnorm(h, t[lk(l, "attn_gain")], cfg.norm_eps)
            q, k, v = project_qkv(xn, kinds, self.params, cfg, l)
            q_rot = apply_rope(q, cos_l, sin_l)
            k_rot = apply_rope(k, cos_l, sin_l)
            k_all = np.concatenate([self._dec_cat_k[l]] + self._gen_k[l] + [k_rot], axis=0)
            v_all = np.concatenate([self._dec_cat_v[l]] + self._gen_v[l] + [v], axis=0)
            mask = np.ones((1, k_all.shape[0]), dtype=bool)
            ctx, _ = masked_attention(
                np.ascontiguousarray(q_rot.transpose(1, 0, 2)),
                np.ascontiguousarray(k_all.transpose(1, 0, 2)),
                np.ascontiguousarray(v_all.transpose(1, 0, 2)),
                mask, 1.0 / np.sqrt(cfg.head_dim))
            h = h + ctx.transpose(1, 0, 2).reshape(1, cfg.d_model) @ t[lk(l, "wo")]
            xn2, _ = rmsnorm(h, t[lk(l, "ffn_gain")], cfg.norm_eps)
            h1 = xn2 @ t[lk(l, "w1")]
            h = h + (h1 * _sigmoid(h1)) @ t[lk(l, "w2")]
            self._gen_k[l].append(k_rot)
            self._gen_v[l].append(v)
            sel = self._dec_selections[l]
            self.trace.rows.append(TraceRow(
                "decode", n_gen_prev, l, self._aug.n_pages,
                [] if sel is None else sel.selected,
                int(k_all.shape[0]), self._budget_limit(n_gen_prev + 1)))
        xf, _ = rmsnorm(h, t["final_gain"], cfg.norm_eps)
        return (xf @ t["unembed"])[0]

    # -- reporting ---------------------------------------------------------

    def memory_report(self) -> dict:
        if self.store is not None:
            return self.store.memory_report()
        rows = sum(b.shape[0] for b in self._dense_k[0]) if self._dense_k[0] else 0
        resident = rows * self.cfg.n_layers
        return {"resident_kv_tokens": resident,
                "peak_hot_tokens": resident,
                "hot_tokens": resident}


def generate(params: ModelParams, cfg: ModelConfig, engine_cfg: EngineConfig,
             tokens, max_new_tokens: int | None = None) -> GenerateResult:
    """Convenience one-shot prefill + decode on a fresh engine."""
    eng = Engine(params, cfg, engine_cfg)
    prompt_logits = eng.prefill(tokens)
    generated = eng.decode(max_new_tokens)
    return GenerateResult(prompt_logits, generated, eng.trace)


# ---- independent dense reference --------------------------------------------

def full_attention_oracle(params: ModelParams, cfg: ModelConfig, tokens) -> np.ndarray:
    """Float64 dense causal forward written independently of the model module.

    Rotary positions use the complex-multiplication form, attention is a
    per-row softmax loop, and projections route token/bookmark rows through
    their own weights.  Bookmark rows attend only within their own page.
    Returns logits at normal positions.
    """
    aug = paginate(np.asarray(tokens, dtype=np.int64), cfg.w, cfg.bookmark_id)
    t = {k: v.astype(np.float64) for k, v in params.tensors.items()}
    T = aug.tokens.size
    H, hd = cfg.n_heads, cfg.head_dim
    half = hd // 2
    positions = np.arange(T, dtype=np.float64)
    freqs = cfg.rope_base ** (-np.arange(half, dtype=np.float64) * 2.0 / hd)
    phase = np.exp(1j * positions[:, None] * freqs[None, :])   # [T, half]
    is_bmk = aug.kinds == 1
    page_start = np.zeros(T, dtype=np.int64)
    for s, e in aug.page_spans:
        page_start[s:e] = s

    def norm(x, gain):
        return x / np.sqrt((x ** 2).mean(axis=-1, keepdims=True) + cfg.norm_eps) * gain

    def rot(x):  # x [T, H, hd] -> rotated via complex product
        z = x[..., 0::2] + 1j * x[..., 1::2]
        z = z * phase[:, None, :]
        out = np.empty_like(x)
        out[..., 0::2] = z.real
        out[..., 1::2] = z.imag
        return out

    h = t["embed"][aug.tokens]
    for l in range(cfg.n_layers):
        xn = norm(h, t[lk(l, "attn_gain")])
        q = np.where(is_bmk[:, None], xn @ t[lk(l, "wq_b")], xn @ t[lk(l, "wq_n")])
        k = np.where(is_bmk[:, None], xn @ t[lk(l, "wk_b")], xn @ t[lk(l, "wk_n")])
        v = np.where(is_bmk[:, None], xn @ t[lk(l, "wv_b")], xn @ t[lk(l, "wv_n")])
        q = rot(q.reshape(T, H, hd))
        k = rot(k.reshape(T, H, hd))
        v = v.reshape(T, H, hd)
        ctx = np.empty_like(q)
        for row in range(T):
            lo = page_start[row] if is_bmk[row] else 0
            s = np.einsum("hd,thd->ht", q[row], k[lo:row + 1]) / np.sqrt(hd)
            s -= s.max(axis=1, keepdims=True)
            p = np.exp(s)
            p /= p.sum(axis=1, keepdims=True)
            ctx[row] = np.einsum("ht,thd->hd", p, v[lo:row + 1])
        h = h + ctx.reshape(T, cfg.d_model) @ t[lk(l, "wo")]
        xn2 = norm(h, t[lk(l, "ffn_gain")])
        a = xn2 @ t[lk(l, "w1")]
        h = h + (a / (1.0 + np.exp(-np.clip(a, -60, 60)))) @ t[lk(l, "w2")]

    logits = norm(h, t["final_gain"]) @ t["unembed"]
    return logits[aug.normal_positions]
