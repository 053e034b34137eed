"""Page scoring and budgeted selection.

A page's retrieval score against the current query is the dot product of the
pre-rotation bookmark query with that page's pre-rotation bookmark key,
summed over heads, with no scaling.  Selection always keeps the sink pages
and the most recent pages, then fills the remaining budget with the
best-scoring candidates.  Ties and ordering are deterministic: candidates
sort by (-score, page index).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidConfig, InvalidSelection


@dataclass
class RetrieverSettings:
    k_pages: int
    sink_count: int = 1
    local_count: int = 1


@dataclass
class RetrievalSelection:
    query_page: int
    selected: list[int]
    scores: np.ndarray          # over candidate pages 0..query_page-1
    layer: int = -1
    sinks: list[int] = field(default_factory=list)
    locals_: list[int] = field(default_factory=list)
    retrieved: list[int] = field(default_factory=list)


def score_pages(bookmark_q: np.ndarray, bookmark_keys: np.ndarray) -> np.ndarray:
    """bookmark_q [H, hd] against bookmark_keys [P, H, hd] -> [P] scores."""
    if bookmark_keys.ndim != 3 or bookmark_q.ndim != 2:
        raise InvalidSelection("score_pages expects [H,hd] query and [P,H,hd] keys")
    return np.einsum("hd,phd->p", bookmark_q, bookmark_keys,
                     dtype=np.float64).astype(np.float64)


def scored_order(scores: np.ndarray) -> np.ndarray:
    """Candidate indices best-first with stable ties toward lower index."""
    idx = np.arange(len(scores))
    return idx[np.lexsort((idx, -np.asarray(scores, dtype=np.float64)))]


def select_pages(scores: np.ndarray, k: int, sink_count: int = 1,
                 local_count: int = 0, query_page: int | None = None) -> RetrievalSelection:
    """Pick pages for one query page.

    scores covers candidate pages [0, P); the query page is P unless given.
    Keeps min(sink_count, P) sinks and min(local_count, remaining) most
    recent pages, then the top-scoring others until k + local_count total.
    """
    p = len(scores)
    if query_page is None:
        query_page = p
    if k < sink_count:
        raise InvalidConfig(f"k={k} smaller than sink_count={sink_count}")
    sinks = list(range(min(sink_count, p)))
    local_lo = max(p - local_count, len(sinks))
    locals_ = list(range(local_lo, p))
    keep = set(sinks) | set(locals_)
    budget = k - len(sinks)
    retrieved = []
    if budget > 0:
        for j in scored_order(scores):
            j = int(j)
            if j in keep:
                continue
            retrieved.append(j)
            keep.add(j)
            if len(retrieved) >= budget:
                break
    selected = sorted(keep)
    return RetrievalSelection(query_page=query_page, selected=selected,
                              scores=np.asarray(scores, dtype=np.float64),
                              sinks=sinks, locals_=locals_, retrieved=retrieved)


def export_score_trace(path: str, traces) -> None:
    """traces: iterable of (layer, page, score) rows -> CSV."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["layer", "page", "score"])
        for layer, page, score in traces:
            writer.writerow([layer, page, f"{score:.6f}"])
