"""Page partitioning, bookmark augmentation, and the tiered KV store."""

from __future__ import annotations

import os

import numpy as np
import pytest

from retropager import (CorruptPages, EmptyInput, InvalidConfig, MissingPage,
                        PagedKVStore, PageKV, ShapeError, augment, deaugment,
                        partition)
from retropager.paging import page_kv_to_bytes, page_kv_from_bytes, paginate

BMK = 99


# ---------------------------------------------------------------------------
# partition / augment / deaugment
# ---------------------------------------------------------------------------

class TestPartition:
    def test_counts_with_short_tail(self):
        # 10 tokens, w=4 -> pages of [4, 4, 2]
        pages = partition(np.arange(10), 4)
        assert [p.tokens.size for p in pages] == [4, 4, 2]
        assert [p.index for p in pages] == [0, 1, 2]

    def test_single_full_page(self):
        pages = partition(np.arange(128), 128)
        assert len(pages) == 1
        assert pages[0].tokens.size == 128

    def test_exact_multiple(self):
        pages = partition(np.arange(12), 4)
        assert [p.tokens.size for p in pages] == [4, 4, 4]

    def test_content_preserved_in_order(self):
        toks = np.arange(10)
        pages = partition(toks, 4)
        np.testing.assert_array_equal(np.concatenate([p.tokens for p in pages]), toks)

    def test_empty_input(self):
        with pytest.raises(EmptyInput):
            partition(np.array([], dtype=np.int64), 4)

    def test_bad_width(self):
        with pytest.raises(InvalidConfig):
            partition(np.arange(4), 0)

    def test_non_1d(self):
        with pytest.raises(ShapeError):
            partition(np.arange(8).reshape(2, 4), 4)


class TestAugment:
    def test_bookmark_positions(self):
        # pages [4,4,2] -> stream of 13 with bookmarks at 4, 9, 12
        aug = augment(partition(np.arange(10), 4), BMK)
        assert aug.tokens.size == 13
        np.testing.assert_array_equal(aug.bookmark_positions, [4, 9, 12])
        assert all(aug.tokens[p] == BMK for p in aug.bookmark_positions)

    def test_single_token_page(self):
        aug = augment(partition(np.array([7]), 4), BMK)
        np.testing.assert_array_equal(aug.tokens, [7, BMK])

    def test_kinds_mark_exactly_the_bookmarks(self):
        aug = augment(partition(np.arange(10), 4), BMK)
        np.testing.assert_array_equal(np.flatnonzero(aug.kinds == 1),
                                      aug.bookmark_positions)

    def test_out_of_order_pages_rejected(self):
        pages = partition(np.arange(10), 4)
        with pytest.raises(CorruptPages):
            augment([pages[1], pages[0], pages[2]], BMK)

    def test_repeated_index_rejected(self):
        pages = partition(np.arange(10), 4)
        with pytest.raises(CorruptPages):
            augment([pages[0], pages[0]], BMK)

    def test_deaugment_roundtrip(self):
        toks = np.arange(10)
        aug = augment(partition(toks, 4), BMK)
        np.testing.assert_array_equal(deaugment(aug), toks)

    def test_paginate_composes(self):
        toks = np.arange(10)
        a = paginate(toks, 4, BMK)
        b = augment(partition(toks, 4), BMK)
        np.testing.assert_array_equal(a.tokens, b.tokens)
        assert a.n_pages == b.n_pages == 3


# ---------------------------------------------------------------------------
# PageKV serialization
# ---------------------------------------------------------------------------

def _block(layer=0, page=0, rows=5, cols=6, seed=0) -> PageKV:
    rng = np.random.default_rng(seed)
    return PageKV(layer=layer, page=page,
                  keys=rng.standard_normal((rows, cols)).astype(np.float32),
                  values=rng.standard_normal((rows, cols)).astype(np.float32))


class TestPageKVBytes:
    def test_roundtrip_identity(self):
        blk = _block(layer=2, page=7)
        out = page_kv_from_bytes(page_kv_to_bytes(blk))
        assert out.layer == 2 and out.page == 7
        np.testing.assert_array_equal(out.keys, blk.keys)
        np.testing.assert_array_equal(out.values, blk.values)

    def test_length_matches_nbytes(self):
        blk = _block(rows=9, cols=4)
        assert len(page_kv_to_bytes(blk)) == blk.nbytes

    def test_truncated_payload_rejected(self):
        raw = page_kv_to_bytes(_block())
        with pytest.raises(ShapeError):
            page_kv_from_bytes(raw[:-4])

    def test_key_value_shape_mismatch_rejected(self):
        blk = _block()
        blk.values = blk.values[:-1]
        with pytest.raises(ShapeError):
            page_kv_to_bytes(blk)


# ---------------------------------------------------------------------------
# PagedKVStore: tiers, eviction, promotion
# ---------------------------------------------------------------------------

W, COLS = 4, 6  # page rows = W tokens + 1 bookmark


def _store(hot_pages=2, sink_pages=1, n_layers=1, spill_dir=None) -> PagedKVStore:
    return PagedKVStore(w=W, n_layers=n_layers,
                        hot_budget_tokens=hot_pages * (W + 1),
                        sink_pages=sink_pages, spill_dir=spill_dir)


def _page_block(layer, page, seed=None) -> PageKV:
    return _block(layer=layer, page=page, rows=W + 1, cols=COLS,
                  seed=seed if seed is not None else page)


class TestStoreTiers:
    def test_oldest_non_sink_demoted(self):
        st = _store(hot_pages=2, sink_pages=1)
        for p in range(3):
            st.store_page(_page_block(0, p))
        rep = st.memory_report()
        # page 0 is sink; page 1 is the oldest evictable
        assert st.stats.evictions == 1
        assert rep["hot_tokens"] == 2 * (W + 1)
        assert rep["cold_tokens"] == (W + 1)
        got = st.fetch_pages(0, [0, 2])  # both still hot: no reloads
        assert st.stats.reloads == 0
        assert [b.page for b in got] == [0, 2]

    def test_budget_at_or_above_total_means_no_evictions(self):
        st = _store(hot_pages=8)
        for p in range(4):
            st.store_page(_page_block(0, p))
        assert st.stats.evictions == 0
        assert st.memory_report()["cold_tokens"] == 0

    def test_fetch_promotes_and_roundtrips(self):
        st = _store(hot_pages=2)
        for p in range(4):
            st.store_page(_page_block(0, p))
        blk = st.fetch_pages(0, [1])[0]
        np.testing.assert_array_equal(blk.keys, _page_block(0, 1).keys)
        assert st.stats.reloads == 1

    def test_fetch_preserves_requested_order(self):
        st = _store(hot_pages=8)
        for p in range(8):
            st.store_page(_page_block(0, p))
        got = st.fetch_pages(0, [0, 3, 7])
        assert [b.page for b in got] == [0, 3, 7]

    def test_fetch_unknown_page(self):
        st = _store()
        st.store_page(_page_block(0, 0))
        with pytest.raises(MissingPage):
            st.fetch_pages(0, [99])

    def test_duplicate_store_rejected(self):
        st = _store()
        st.store_page(_page_block(0, 0))
        with pytest.raises(CorruptPages):
            st.store_page(_page_block(0, 0))

    def test_float64_rejected(self):
        st = _store()
        blk = _page_block(0, 0)
        blk.keys = blk.keys.astype(np.float64)
        with pytest.raises(ShapeError):
            st.store_page(blk)

    def test_oversized_page_rejected(self):
        st = _store()
        with pytest.raises(ShapeError):
            st.store_page(_block(rows=W + 2, cols=COLS))

    def test_budget_smaller_than_one_page_rejected(self):
        with pytest.raises(InvalidConfig):
            PagedKVStore(w=W, n_layers=1, hot_budget_tokens=W)

    def test_all_sinks_resident_cannot_rebalance(self):
        st = _store(hot_pages=2, sink_pages=2)
        st.store_page(_page_block(0, 0))
        st.store_page(_page_block(0, 1))
        with pytest.raises(InvalidConfig):
            st.store_page(_page_block(0, 2))


class TestStoreStats:
    def test_fresh_store_counters_zero(self):
        st = _store()
        assert st.stats.evictions == 0
        assert st.stats.reloads == 0
        assert st.stats.bytes_moved == 0
        assert st.stats.peak_hot_tokens == 0

    def test_peak_hot_never_exceeds_budget(self):
        st = _store(hot_pages=3)
        for p in range(16):
            st.store_page(_page_block(0, p))
            if p % 3 == 0:
                st.fetch_pages(0, [max(0, p - 2)])
        assert st.stats.peak_hot_tokens <= 3 * (W + 1)

    def test_longer_sequence_same_budget_same_peak(self):
        peaks = []
        for n in (8, 32):
            st = _store(hot_pages=3)
            for p in range(n):
                st.store_page(_page_block(0, p))
            peaks.append(st.stats.peak_hot_tokens)
        assert peaks[0] == peaks[1]

    def test_bytes_moved_counts_both_directions(self):
        st = _store(hot_pages=2)
        for p in range(3):
            st.store_page(_page_block(0, p))
        moved_out = st.stats.bytes_moved
        assert moved_out > 0
        st.fetch_pages(0, [1])
        assert st.stats.bytes_moved == 2 * moved_out


class TestStoreSpill:
    def test_spill_file_written_then_removed_on_promote(self, tmp_path):
        st = _store(hot_pages=2, spill_dir=str(tmp_path))
        for p in range(3):
            st.store_page(_page_block(0, p))
        spilled = list(tmp_path.iterdir())
        assert len(spilled) == 1
        blk = st.fetch_pages(0, [1])[0]
        np.testing.assert_array_equal(blk.keys, _page_block(0, 1).keys)
        assert list(tmp_path.iterdir()) == []

    def test_layers_are_independent(self):
        st = PagedKVStore(w=W, n_layers=2, hot_budget_tokens=4 * (W + 1))
        st.store_page(_page_block(0, 0, seed=10))
        st.store_page(_page_block(1, 0, seed=20))
        a = st.fetch_pages(0, [0])[0]
        b = st.fetch_pages(1, [0])[0]
        assert not np.array_equal(a.keys, b.keys)


class TestBookmarkKeys:
    def test_shape_and_content(self):
        H, hd = 2, 3
        st = PagedKVStore(w=W, n_layers=1, hot_budget_tokens=64 * (W + 1))
        rows = []
        for p in range(3):
            blk = _page_block(0, p)
            rows.append(blk.keys[-1].reshape(H, hd).copy())
            st.store_page(blk, bookmark_key=blk.keys[-1].reshape(H, hd))
        bk = st.bookmark_keys(0, 3)
        assert bk.shape == (3, H, hd)
        np.testing.assert_array_equal(bk, np.stack(rows))

    def test_empty_prefix(self):
        st = _store()
        assert st.bookmark_keys(0, 0).size == 0

    def test_gap_detected(self):
        H, hd = 2, 3
        st = PagedKVStore(w=W, n_layers=1, hot_budget_tokens=64 * (W + 1))
        blk = _page_block(0, 0)
        st.store_page(blk, bookmark_key=blk.keys[-1].reshape(H, hd))
        with pytest.raises(MissingPage):
            st.bookmark_keys(0, 2)
