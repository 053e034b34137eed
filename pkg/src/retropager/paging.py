"""Token paging and the two-tier paged KV store.

The input stream is cut into fixed-size pages of ``w`` tokens (the last page
may be shorter) and a reserved bookmark token is appended to every page.  Per
layer, finished pages live in a hot tier bounded by ``hot_budget_tokens`` KV
rows (aggregated across layers); overflow is demoted FIFO in encoding order to
an unbounded cold tier that holds serialized bytes, optionally backed by one
spill file per (layer, page).  Bookmark retrieval keys are kept in a separate
per-layer index that is never evicted.

Cold-tier layout (and spill-file layout) for one block:

    16-byte header: layer u32, page u32, rows u32, cols u32 (little-endian)
    rows*cols float32 little-endian, row-major: keys
    rows*cols float32 little-endian, row-major: values

where rows = n_tokens + 1 (the bookmark row is last) and cols = n_heads *
head_dim.  Normal-token key rows are stored post-rotation as they enter
attention; the bookmark key row is the retrieval-key vector (rotation is
applied at attend time from the stored bookmark position).
"""

from __future__ import annotations

import os
import struct
import threading
from dataclasses import dataclass, field

import numpy as np

from .errors import (CorruptPages, EmptyInput, InvalidConfig, MissingPage,
                     ShapeError)

_HEADER = struct.Struct("<IIII")


@dataclass
class Page:
    index: int
    tokens: np.ndarray            # raw token ids, length <= w
    bookmark_token: int
    global_offset: int            # offset of tokens[0] in the raw stream


@dataclass
class AugmentedSequence:
    tokens: np.ndarray            # page tokens with one bookmark after each page
    kinds: np.ndarray             # uint8, 0 = normal token, 1 = bookmark
    pages: list[Page]
    page_spans: list[tuple[int, int]]   # [start, end) of each page in `tokens`
    bookmark_positions: np.ndarray      # stream position of each page's bookmark

    @property
    def n_pages(self) -> int:
        return len(self.pages)

    @property
    def normal_positions(self) -> np.ndarray:
        return np.flatnonzero(self.kinds == 0)

    def page_of(self, position: int) -> int:
        for i, (s, e) in enumerate(self.page_spans):
            if s <= position < e:
                return i
        raise IndexError(position)


def partition(tokens, w: int, bookmark_token: int) -> list[Page]:
    """Cut a raw token stream into pages of w tokens; the last may be shorter.

    Raises EmptyInput for an empty stream and InvalidConfig for w < 1.
    """
    if w < 1:
        raise InvalidConfig(f"page size w must be >= 1, got {w}")
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.ndim != 1:
        raise ShapeError(f"token stream must be 1-D, got shape {tokens.shape}")
    if tokens.size == 0:
        raise EmptyInput("cannot partition an empty token stream")
    pages = []
    for i, start in enumerate(range(0, tokens.size, w)):
        chunk = tokens[start:start + w]
        pages.append(Page(index=i, tokens=chunk.copy(), bookmark_token=bookmark_token,
                          global_offset=start))
    return pages


def augment(pages: list[Page]) -> AugmentedSequence:
    """Append one bookmark token to every page and build the training stream."""
    if not pages:
        raise EmptyInput("no pages to augment")
    indices = [p.index for p in pages]
    if indices != list(range(len(pages))):
        raise CorruptPages(f"page indices must be 0..{len(pages) - 1} in order, got {indices}")
    parts, kinds, spans, bmk_pos = [], [], [], []
    cursor = 0
    for p in pages:
        n = int(p.tokens.size)
        parts.append(p.tokens)
        parts.append(np.array([p.bookmark_token], dtype=np.int64))
        kinds.append(np.zeros(n, dtype=np.uint8))
        kinds.append(np.ones(1, dtype=np.uint8))
        spans.append((cursor, cursor + n + 1))
        bmk_pos.append(cursor + n)
        cursor += n + 1
    return AugmentedSequence(
        tokens=np.concatenate(parts),
        kinds=np.concatenate(kinds),
        pages=pages,
        page_spans=spans,
        bookmark_positions=np.asarray(bmk_pos, dtype=np.int64),
    )


def deaugment(aug: AugmentedSequence) -> np.ndarray:
    """Strip bookmark positions, recovering the original raw stream."""
    return aug.tokens[aug.kinds == 0].copy()


def paginate(tokens, w: int, bookmark_token: int) -> AugmentedSequence:
    return augment(partition(tokens, w, bookmark_token))


@dataclass
class PageKV:
    """Finished KV block of one page at one layer.

    normal_keys/values hold one row per page token ([n, H, hd]); the
    bookmark_key is the retrieval-key vector indexed by the retriever and
    bookmark_value its attention value.  first_position/bookmark_position are
    absolute stream positions, kept so fetched blocks can be re-rotated.
    """
    layer: int
    page_index: int
    normal_keys: np.ndarray
    normal_values: np.ndarray
    bookmark_key: np.ndarray      # [H, hd]
    bookmark_value: np.ndarray    # [H, hd]
    first_position: int
    bookmark_position: int

    @property
    def n_tokens(self) -> int:
        return int(self.normal_keys.shape[0])

    @property
    def n_rows(self) -> int:
        return self.n_tokens + 1

    def nbytes(self) -> int:
        return _HEADER.size + 2 * self.n_rows * self.normal_keys.shape[1] * self.normal_keys.shape[2] * 4


def page_kv_to_bytes(kv: PageKV) -> bytes:
    h, hd = kv.bookmark_key.shape
    rows = kv.n_rows
    cols = h * hd
    header = _HEADER.pack(kv.layer, kv.page_index, rows, cols)
    keys = np.concatenate([kv.normal_keys.reshape(kv.n_tokens, cols),
                           kv.bookmark_key.reshape(1, cols)], axis=0)
    vals = np.concatenate([kv.normal_values.reshape(kv.n_tokens, cols),
                           kv.bookmark_value.reshape(1, cols)], axis=0)
    return header + keys.astype("<f4", copy=False).tobytes() + vals.astype("<f4", copy=False).tobytes()


def page_kv_from_bytes(blob: bytes, n_heads: int, head_dim: int,
                       first_position: int, bookmark_position: int) -> PageKV:
    layer, page, rows, cols = _HEADER.unpack_from(blob, 0)
    if cols != n_heads * head_dim:
        raise ShapeError(f"serialized cols {cols} != n_heads*head_dim {n_heads * head_dim}")
    body = np.frombuffer(blob, dtype="<f4", offset=_HEADER.size)
    if body.size != 2 * rows * cols:
        raise ShapeError("serialized block has wrong length")
    keys = body[:rows * cols].reshape(rows, cols)
    vals = body[rows * cols:].reshape(rows, cols)
    n = rows - 1
    return PageKV(
        layer=int(layer), page_index=int(page),
        normal_keys=keys[:n].reshape(n, n_heads, head_dim).copy(),
        normal_values=vals[:n].reshape(n, n_heads, head_dim).copy(),
        bookmark_key=keys[n].reshape(n_heads, head_dim).copy(),
        bookmark_value=vals[n].reshape(n_heads, head_dim).copy(),
        first_position=first_position,
        bookmark_position=bookmark_position,
    )


@dataclass
class _ColdEntry:
    blob: bytes | None            # None when the payload lives in a spill file
    nbytes: int
    rows: int
    first_position: int
    bookmark_position: int


class PagedKVStore:
    """Two-tier per-layer KV block store with FIFO demotion.

    Reads may run concurrently; mutations are serialized per layer.  The
    aggregate hot-tier row count never exceeds hot_budget_tokens at any point
    between operations; sink pages (page_index < sink_pages) are never demoted.
    """

    def __init__(self, n_layers: int, n_heads: int, head_dim: int, w: int,
                 hot_budget_tokens: int, sink_pages: int = 1,
                 spill_dir: str | None = None):
        if n_layers < 1 or n_heads < 1 or head_dim < 1 or w < 1:
            raise InvalidConfig("store dimensions must be positive")
        if hot_budget_tokens < w + 1:
            raise InvalidConfig(
                f"hot_budget_tokens={hot_budget_tokens} cannot hold one page of {w + 1} rows")
        if sink_pages < 0:
            raise InvalidConfig("sink_pages must be >= 0")
        self.n_layers = n_layers
        self.n_heads = n_heads
        self.head_dim = head_dim
        self.w = w
        self.hot_budget_tokens = hot_budget_tokens
        self.sink_pages = sink_pages
        self.spill_dir = spill_dir
        if spill_dir is not None:
            os.makedirs(spill_dir, exist_ok=True)
        self._hot: dict[tuple[int, int], PageKV] = {}
        self._hot_order: list[tuple[int, int]] = []   # encoding order, oldest first
        self._cold: dict[tuple[int, int], _ColdEntry] = {}
        self._bookmark_index: list[dict[int, np.ndarray]] = [dict() for _ in range(n_layers)]
        self._layer_locks = [threading.Lock() for _ in range(n_layers)]
        self._stats_lock = threading.Lock()
        self.hot_tokens = 0
        self.cold_tokens = 0
        self.peak_hot_tokens = 0
        self.evictions = 0
        self.reloads = 0
        self.bytes_moved = 0

    # -- helpers -----------------------------------------------------------

    def _check_layer(self, layer: int) -> None:
        if not 0 <= layer < self.n_layers:
            raise InvalidConfig(f"layer {layer} out of range 0..{self.n_layers - 1}")

    def _spill_path(self, layer: int, page: int) -> str:
        return os.path.join(self.spill_dir, f"kv_L{layer}_P{page}.bin")

    def _demote_oldest(self, exempt: tuple[int, int] | None = None) -> bool:
        """Move the oldest non-sink hot block to the cold tier.  Lock held."""
        for pos, key in enumerate(self._hot_order):
            if key[1] < self.sink_pages or key == exempt:
                continue
            kv = self._hot.pop(key)
            del self._hot_order[pos]
            blob = page_kv_to_bytes(kv)
            if self.spill_dir is not None:
                with open(self._spill_path(*key), "wb") as fh:
                    fh.write(blob)
                entry = _ColdEntry(None, len(blob), kv.n_rows,
                                   kv.first_position, kv.bookmark_position)
            else:
                entry = _ColdEntry(blob, len(blob), kv.n_rows,
                                   kv.first_position, kv.bookmark_position)
            self._cold[key] = entry
            with self._stats_lock:
                self.hot_tokens -= kv.n_rows
                self.cold_tokens += kv.n_rows
                self.evictions += 1
                self.bytes_moved += entry.nbytes
            return True
        return False

    def _rebalance(self, exempt: tuple[int, int] | None = None) -> None:
        while self.hot_tokens > self.hot_budget_tokens:
            if not self._demote_oldest(exempt):
                raise InvalidConfig(
                    "hot budget cannot be met: only sink pages remain resident")

    def _observe(self) -> None:
        with self._stats_lock:
            self.peak_hot_tokens = max(self.peak_hot_tokens, self.hot_tokens)

    # -- public API --------------------------------------------------------

    def store_page(self, kv: PageKV) -> None:
        self._check_layer(kv.layer)
        expect = (self.n_heads, self.head_dim)
        if kv.bookmark_key.shape != expect or kv.bookmark_value.shape != expect:
            raise ShapeError(f"bookmark rows must have shape {expect}")
        if (kv.normal_keys.ndim != 3 or kv.normal_keys.shape[1:] != expect
                or kv.normal_values.shape != kv.normal_keys.shape):
            raise ShapeError("normal_keys/normal_values must be [n, H, hd] with matching shapes")
        if kv.n_tokens > self.w:
            raise ShapeError(f"page holds {kv.n_tokens} tokens, store page size is {self.w}")
        for arr in (kv.normal_keys, kv.normal_values, kv.bookmark_key, kv.bookmark_value):
            if arr.dtype != np.float32:
                raise ShapeError("stored KV blocks must be float32")
        key = (kv.layer, kv.page_index)
        with self._layer_locks[kv.layer]:
            if key in self._hot or key in self._cold:
                raise CorruptPages(f"page {kv.page_index} already stored at layer {kv.layer}")
            self._hot[key] = kv
            self._hot_order.append(key)
            self._bookmark_index[kv.layer][kv.page_index] = kv.bookmark_key.copy()
            with self._stats_lock:
                self.hot_tokens += kv.n_rows
            self._rebalance()
        self._observe()

    def fetch_pages(self, layer: int, page_indices) -> list[PageKV]:
        """Return blocks in the requested order, promoting cold pages first."""
        self._check_layer(layer)
        out = []
        with self._layer_locks[layer]:
            for page in page_indices:
                key = (layer, int(page))
                if key in self._hot:
                    out.append(self._hot[key])
                    continue
                entry = self._cold.pop(key, None)
                if entry is None:
                    raise MissingPage(f"page {page} at layer {layer} is not stored")
                if entry.blob is None:
                    with open(self._spill_path(*key), "rb") as fh:
                        blob = fh.read()
                    os.remove(self._spill_path(*key))
                else:
                    blob = entry.blob
                kv = page_kv_from_bytes(blob, self.n_heads, self.head_dim,
                                        entry.first_position, entry.bookmark_position)
                self._hot[key] = kv
                self._hot_order.append(key)
                with self._stats_lock:
                    self.cold_tokens -= entry.rows
                    self.hot_tokens += entry.rows
                    self.reloads += 1
                    self.bytes_moved += entry.nbytes
                out.append(kv)
            self._rebalance()
        self._observe()
        return out

    def bookmark_keys(self, layer: int, upto: int) -> np.ndarray:
        """Stacked retrieval keys of pages 0..upto-1 at one layer, [upto, H, hd]."""
        self._check_layer(layer)
        index = self._bookmark_index[layer]
        try:
            rows = [index[p] for p in range(upto)]
        except KeyError as exc:
            raise MissingPage(f"bookmark key for page {exc.args[0]} at layer {layer}") from exc
        if not rows:
            return np.zeros((0, self.n_heads, self.head_dim), dtype=np.float32)
        return np.stack(rows, axis=0)

    def n_indexed_pages(self, layer: int) -> int:
        self._check_layer(layer)
        return len(self._bookmark_index[layer])

    def has_page(self, layer: int, page: int) -> bool:
        key = (layer, page)
        return key in self._hot or key in self._cold

    def memory_report(self) -> dict:
        with self._stats_lock:
            return {
                "hot_tokens": self.hot_tokens,
                "cold_tokens": self.cold_tokens,
                "peak_hot_tokens": self.peak_hot_tokens,
                "hot_budget_tokens": self.hot_budget_tokens,
                "evictions": self.evictions,
                "reloads": self.reloads,
                "bytes_moved": self.bytes_moved,
                "hot_pages": len(self._hot),
                "cold_pages": len(self._cold),
            }
