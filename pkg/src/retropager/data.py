"""Synthetic token tasks and retrieval evaluation.

The vocabulary is carved into bands: a handful of marker tokens directly
below the bookmark id, a key band and a value band below those, and a general
band at the bottom sampled with a Zipf-like tilt.  Key/value tasks plant
[key_mark, key..., value_mark, value...] phrases inside pages; the question
page ends with [query_mark, key..., value_mark], so the correct continuation
is literally the tail of the planted fact, and the close sits at the end of
its page so generation starts exactly at the next page boundary, matching the
decode geometry.

gen_corpus builds a seeded bigram Markov chain over the general band, which
gives the language-model stage something genuinely learnable.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .config import ModelConfig
from .errors import InvalidConfig, InvalidInput
from .model import forward, isolation_plan
from .paging import paginate
from .retriever import scored_order


@dataclass
class VocabLayout:
    """Token-id bands for the synthetic tasks."""
    vocab_size: int
    key_band: int = 16
    value_band: int = 16

    def __post_init__(self):
        if self.vocab_size < 7 + self.key_band + self.value_band + 8:
            raise InvalidConfig(f"vocab_size={self.vocab_size} too small for the band layout")

    @property
    def bookmark_id(self) -> int:
        return self.vocab_size - 1

    @property
    def query_mark(self) -> int:
        return self.vocab_size - 2

    @property
    def answer_mark(self) -> int:
        """Reserved generation trigger; the built-in generators close questions
        with value_mark instead so the answer is a verbatim fact continuation."""
        return self.vocab_size - 3

    @property
    def key_mark(self) -> int:
        return self.vocab_size - 4

    @property
    def value_mark(self) -> int:
        return self.vocab_size - 5

    @property
    def sep(self) -> int:
        return self.vocab_size - 6

    @property
    def end_mark(self) -> int:
        return self.vocab_size - 7

    @property
    def key_ids(self) -> np.ndarray:
        hi = self.vocab_size - 7
        return np.arange(hi - self.key_band, hi)

    @property
    def value_ids(self) -> np.ndarray:
        hi = self.vocab_size - 7 - self.key_band
        return np.arange(hi - self.value_band, hi)

    @property
    def n_general(self) -> int:
        return self.vocab_size - 7 - self.key_band - self.value_band

    def general_probs(self) -> np.ndarray:
        ranks = np.arange(self.n_general, dtype=np.float64)
        p = (ranks + 2.0) ** -1.1
        return p / p.sum()

    def sample_general(self, rng: np.random.Generator, n: int) -> np.ndarray:
        return rng.choice(self.n_general, size=n, p=self.general_probs())


@dataclass
class RetrievalSample:
    tokens: np.ndarray
    positive_page: int
    query_page: int | None = None
    answer: np.ndarray | None = None
    positive_span: tuple[int, int] | None = None
    meta: dict = field(default_factory=dict)


@dataclass
class NeedleSample:
    tokens: np.ndarray
    answer: np.ndarray
    needle_page: int
    depth: float
    meta: dict = field(default_factory=dict)


def positive_page_for_span(start: int, end: int, w: int) -> int:
    """Page containing the largest share of [start, end); ties go earlier."""
    if end <= start:
        raise InvalidInput(f"empty span [{start}, {end})")
    first = start // w
    last = (end - 1) // w
    best, best_overlap = first, -1
    for page in range(first, last + 1):
        lo = max(start, page * w)
        hi = min(end, (page + 1) * w)
        if hi - lo > best_overlap:
            best, best_overlap = page, hi - lo
    return best


def _plant(page: np.ndarray, phrase: np.ndarray, rng: np.random.Generator,
           at_end: bool = False) -> int:
    """Write phrase into page at a random (or final) offset; returns offset."""
    w = page.size
    if phrase.size > w:
        raise InvalidInput(f"phrase of {phrase.size} tokens does not fit a page of {w}")
    off = w - phrase.size if at_end else int(rng.integers(0, w - phrase.size + 1))
    page[off:off + phrase.size] = phrase
    return off


def _plant_repeated(page: np.ndarray, phrase: np.ndarray,
                    rng: np.random.Generator, plants: int) -> list[int]:
    """Plant `plants` non-overlapping copies, one per equal stride of the page;
    returns the offsets.  Repetition keeps the page summary anchored on the
    phrase rather than the filler."""
    w = page.size
    stride = w // plants
    if stride < phrase.size:
        raise InvalidConfig(
            f"cannot plant {plants} copies of a {phrase.size}-token phrase "
            f"in a page of {w}")
    offs = []
    for r in range(plants):
        off = r * stride + int(rng.integers(0, stride - phrase.size + 1))
        page[off:off + phrase.size] = phrase
        offs.append(off)
    return offs


def gen_pairwise(layout: VocabLayout, w: int, n_pages: int, n_samples: int,
                 seed: int = 0, phrase_len: int = 3,
                 plants: int = 2) -> list[RetrievalSample]:
    """Phrase-matching retrieval pairs: the query page repeats a phrase that
    was planted in exactly one earlier page.  Every candidate page carries its
    own phrase, and phrases within an episode use disjoint key ids, so only
    content identity separates the right page from its distractors."""
    if n_pages < 2:
        raise InvalidConfig("need at least one candidate page plus the query page")
    n_cand = n_pages - 1
    if n_cand * phrase_len > layout.key_band:
        raise InvalidConfig(
            f"{n_cand} pages x {phrase_len}-token phrases need a key band of "
            f"{n_cand * phrase_len}, layout has {layout.key_band}")
    rng = np.random.default_rng(seed)
    samples = []
    for _ in range(n_samples):
        pages = [layout.sample_general(rng, w) for _ in range(n_pages)]
        perm = rng.permutation(layout.key_ids)
        keys = [perm[i * phrase_len:(i + 1) * phrase_len] for i in range(n_cand)]
        target = int(rng.integers(n_cand))
        span = None
        for i in range(n_cand):
            phrase = np.concatenate([[layout.key_mark], keys[i]])
            offs = _plant_repeated(pages[i], phrase, rng, plants)
            if i == target:
                span = (i * w + offs[0], i * w + offs[0] + phrase.size)
        query = np.concatenate([[layout.query_mark], keys[target]])
        pages[-1] = np.tile(query, w // query.size + 1)[:w]
        tokens = np.concatenate(pages).astype(np.int64)
        samples.append(RetrievalSample(
            tokens=tokens,
            positive_page=positive_page_for_span(span[0], span[1], w),
            query_page=n_pages - 1,
            positive_span=span,
            meta={"task": "pairwise"}))
    return samples


def _question_page(layout: VocabLayout, w: int, key: np.ndarray) -> np.ndarray:
    """Question page: [query_mark key...] tiled across the page, closed by one
    [query_mark key... value_mark].  Tiling keeps the bookmark summary
    dominated by the query phrase instead of filler.  The close reuses
    value_mark so the answer is a verbatim continuation of the planted
    [key... value_mark value...] text; it sits at the end of the page so
    generation starts at a page boundary."""
    q_repeat = np.concatenate([[layout.query_mark], key])
    q_close = np.concatenate([[layout.query_mark], key, [layout.value_mark]])
    if q_close.size > w:
        raise InvalidConfig(f"page width {w} too small for a {key.size}-token key")
    page = np.tile(q_repeat, w // q_repeat.size + 1)[:w]
    page[w - q_close.size:] = q_close
    return page


def gen_synthetic_qa(layout: VocabLayout, w: int, n_candidates: int,
                     n_samples: int, seed: int = 0, key_len: int = 3,
                     answer_len: int = 2, with_answer_page: bool = True,
                     plants: int = 2) -> list[RetrievalSample]:
    """Key/value lookup episodes.

    Pages 0..n_candidates-1 each hold a [key_mark key... value_mark value...]
    fact (planted `plants` times); the question page repeats the query phrase
    and ends with [query_mark key... value_mark]; when with_answer_page is
    set, one more page starts with the value followed by a separator, which is
    what teaches generation to read it back out.
    """
    need = 1 + key_len + 1 + answer_len
    if need > w or 2 + key_len > w:
        raise InvalidConfig(f"page width {w} too small for key_len={key_len}, "
                            f"answer_len={answer_len}")
    if n_candidates * key_len > layout.key_band:
        raise InvalidConfig(
            f"{n_candidates} facts x {key_len}-token keys need a key band of "
            f"{n_candidates * key_len}, layout has {layout.key_band}")
    rng = np.random.default_rng(seed)
    samples = []
    for _ in range(n_samples):
        pages = [layout.sample_general(rng, w) for _ in range(n_candidates)]
        # disjoint keys so exactly one page answers the question
        perm = rng.permutation(layout.key_ids)
        key_pool = [perm[i * key_len:(i + 1) * key_len] for i in range(n_candidates)]
        values = [rng.choice(layout.value_ids, size=answer_len)
                  for _ in range(n_candidates)]
        target = int(rng.integers(n_candidates))
        for i in range(n_candidates):
            fact = np.concatenate([[layout.key_mark], key_pool[i],
                                   [layout.value_mark], values[i]])
            _plant_repeated(pages[i], fact, rng, plants)
        question = _question_page(layout, w, key_pool[target])
        pages.append(question)
        if with_answer_page:
            answer_page = layout.sample_general(rng, w)
            lead = np.concatenate([values[target], [layout.sep]])
            answer_page[:lead.size] = lead
            pages.append(answer_page)
        tokens = np.concatenate(pages).astype(np.int64)
        samples.append(RetrievalSample(
            tokens=tokens,
            positive_page=target,
            query_page=n_candidates,
            answer=values[target].astype(np.int64),
            meta={"task": "qa"}))
    return samples


def gen_needle_qa(layout: VocabLayout, w: int, n_candidates: int,
                  n_samples: int, seed: int = 0, key_len: int = 3,
                  answer_len: int = 2, positive_pages=None,
                  distractor_facts: bool = False,
                  plants: int = 2) -> list[RetrievalSample]:
    """Labeled episodes shaped like the needle prompt: one planted fact among
    filler pages, a question page, then an echo page tiling [answer, sep].

    The tiled echo turns the single answer readout into w supervised
    transitions per episode.  positive_pages restricts which pages may hold
    the fact; keeping it clear of the slots a fixed index-order selection
    serves anyway is what forces the readout to go through retrieved pages.
    distractor_facts plants decoy facts (disjoint keys) on the other pages.
    """
    if positive_pages is None:
        positive_pages = list(range(n_candidates))
    positive_pages = [int(p) for p in positive_pages]
    if not positive_pages or not all(0 <= p < n_candidates for p in positive_pages):
        raise InvalidConfig(f"positive_pages must be within [0, {n_candidates})")
    keys_needed = (n_candidates + 1 if distractor_facts else 1) * key_len
    if keys_needed > layout.key_band:
        raise InvalidConfig(f"{keys_needed} key ids needed, layout has "
                            f"{layout.key_band}")
    rng = np.random.default_rng(seed)
    samples = []
    for _ in range(n_samples):
        pages = [layout.sample_general(rng, w) for _ in range(n_candidates)]
        pos = int(rng.choice(positive_pages))
        perm = rng.permutation(layout.key_ids)
        key = perm[:key_len]
        value = rng.choice(layout.value_ids, size=answer_len)
        fact = np.concatenate([[layout.key_mark], key, [layout.value_mark], value])
        _plant_repeated(pages[pos], fact, rng, plants)
        if distractor_facts:
            for j in range(n_candidates):
                if j == pos:
                    continue
                decoy = np.concatenate([
                    [layout.key_mark], perm[(j + 1) * key_len:(j + 2) * key_len],
                    [layout.value_mark], rng.choice(layout.value_ids,
                                                    size=answer_len)])
                _plant_repeated(pages[j], decoy, rng, plants)
        pages.append(_question_page(layout, w, key))
        echo = np.tile(np.concatenate([value, [layout.sep]]), w)[:w]
        pages.append(echo.astype(np.int64))
        samples.append(RetrievalSample(
            tokens=np.concatenate(pages).astype(np.int64),
            positive_page=pos,
            query_page=n_candidates,
            answer=value.astype(np.int64),
            meta={"task": "needle_qa"}))
    return samples


def gen_needle(layout: VocabLayout, w: int, n_candidates: int, depth: float,
               seed: int = 0, key_len: int = 3, answer_len: int = 2,
               plants: int = 1) -> NeedleSample:
    """One haystack prompt: the fact sits at the page depth*(n_candidates-1),
    every other page is pure filler, and the prompt closes with
    [query_mark key... value_mark].  The default single plant keeps the needle
    key's haystack occurrence count at exactly one."""
    if not 0.0 <= depth <= 1.0:
        raise InvalidInput(f"depth must be in [0, 1], got {depth}")
    rng = np.random.default_rng(seed)
    needle_page = int(round(depth * (n_candidates - 1)))
    pages = [layout.sample_general(rng, w) for _ in range(n_candidates)]
    key = rng.choice(layout.key_ids, size=key_len)
    value = rng.choice(layout.value_ids, size=answer_len)
    fact = np.concatenate([[layout.key_mark], key, [layout.value_mark], value])
    _plant_repeated(pages[needle_page], fact, rng, plants)
    pages.append(_question_page(layout, w, key))
    return NeedleSample(
        tokens=np.concatenate(pages).astype(np.int64),
        answer=value.astype(np.int64),
        needle_page=needle_page,
        depth=depth,
        meta={"key": [int(x) for x in key]})


def gen_corpus(layout: VocabLayout, n_tokens: int, seed: int = 0,
               branching: int = 4) -> np.ndarray:
    """Bigram Markov chain over the general band: each token has `branching`
    fixed successors with geometric-ish probabilities."""
    if n_tokens < 1:
        raise InvalidInput("corpus must have at least one token")
    rng = np.random.default_rng(seed)
    n = layout.n_general
    succ = np.empty((n, branching), dtype=np.int64)
    for s in range(n):
        succ[s] = rng.choice(n, size=branching, replace=False)
    probs = 0.5 ** np.arange(1, branching + 1)
    probs[-1] += probs[-1]  # renormalize the tail so the row sums to 1
    out = np.empty(n_tokens, dtype=np.int64)
    state = int(rng.integers(n))
    for i in range(n_tokens):
        out[i] = state
        state = int(succ[state, rng.choice(branching, p=probs)])
    return out


# ---- sample files --------------------------------------------------------------

def save_samples(path: str, samples) -> None:
    with open(path, "w") as fh:
        for s in samples:
            row = {"tokens": [int(x) for x in s.tokens],
                   "positive_page": int(s.positive_page),
                   "query_page": None if s.query_page is None else int(s.query_page),
                   "answer": None if s.answer is None else [int(x) for x in s.answer],
                   "positive_span": None if s.positive_span is None
                   else [int(s.positive_span[0]), int(s.positive_span[1])],
                   "meta": s.meta}
            fh.write(json.dumps(row) + "\n")


def load_samples(path: str) -> list[RetrievalSample]:
    samples = []
    with open(path) as fh:
        for line in fh:
            if not line.strip():
                continue
            row = json.loads(line)
            samples.append(RetrievalSample(
                tokens=np.asarray(row["tokens"], dtype=np.int64),
                positive_page=row["positive_page"],
                query_page=row.get("query_page"),
                answer=(None if row.get("answer") is None
                        else np.asarray(row["answer"], dtype=np.int64)),
                positive_span=(None if row.get("positive_span") is None
                               else tuple(row["positive_span"])),
                meta=row.get("meta", {})))
    return samples


# ---- evaluation ----------------------------------------------------------------

def eval_recall(params, cfg: ModelConfig, samples, top_n: int = 1) -> dict:
    """Fraction of samples whose positive page ranks in the score top-n.

    Summaries come from the page-isolated forward pass, the same view the
    retriever is trained on.  Ranking is purely by bookmark score with ties to
    the lower page index; recall is reported per layer plus the best layer,
    since early layers see content-free bookmark keys and sit at chance.
    """
    if not samples:
        raise InvalidInput("eval_recall needs at least one sample")
    L = cfg.n_layers
    hits = np.zeros(L)
    for s in samples:
        aug = paginate(np.asarray(s.tokens, dtype=np.int64), cfg.w, cfg.bookmark_id)
        qp = aug.n_pages - 1 if s.query_page is None else s.query_page
        res = forward(params, cfg, aug, plan=isolation_plan(cfg, aug.n_pages))
        for l in range(L):
            scores = np.einsum("hd,phd->p",
                               res.bookmark_q[l][qp].astype(np.float64),
                               res.bookmark_k[l][:qp].astype(np.float64))
            if s.positive_page in scored_order(scores)[:top_n]:
                hits[l] += 1
    per_layer = (hits / len(samples)).tolist()
    best_layer = int(np.argmax(per_layer))
    return {"per_layer": per_layer,
            "mean": float(np.mean(per_layer)),
            "best": per_layer[best_layer],
            "best_layer": best_layer}


def eval_needle(params, cfg: ModelConfig, engine_cfg, samples: list[NeedleSample]) -> dict:
    """Exact-match accuracy of greedy generation against each needle's value,
    grouped by depth."""
    from .engine import Engine
    if not samples:
        raise InvalidInput("eval_needle needs at least one sample")
    by_depth: dict[float, list[int]] = {}
    for s in samples:
        eng = Engine(params, cfg, engine_cfg)
        eng.prefill(s.tokens)
        out = eng.decode(max_new_tokens=len(s.answer))
        ok = int(len(out) == len(s.answer) and all(int(a) == int(b)
                                                   for a, b in zip(out, s.answer)))
        by_depth.setdefault(s.depth, []).append(ok)
    depth_acc = {d: float(np.mean(v)) for d, v in sorted(by_depth.items())}
    total = [x for v in by_depth.values() for x in v]
    return {"accuracy": float(np.mean(total)), "by_depth": depth_acc}
