"""Tests for the two-stage retention logic and mask refinement."""

from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from scdkit.errors import ConfigError
from scdkit.masks import ChangeMask, MaskInstance
from scdkit.matching import (
    MatchConfig,
    ProvenanceEntry,
    geometric_match,
    match_and_refine,
    refine,
    refine_multiclass,
    semantic_match,
)

from oracles import brute_union


def rect(shape, r0, r1, c0, c1):
    bm = np.zeros(shape, dtype=bool)
    bm[r0:r1, c0:c1] = True
    return bm


def inst(bitmap, source="tracker", **kw):
    return MaskInstance(bitmap=bitmap, source=source, **kw)


class TestMatchConfig:
    def test_defaults(self):
        cfg = MatchConfig()
        assert cfg.alpha_t == 0.20
        assert cfg.alpha_g == 0.10
        assert cfg.strict_inequality

    @pytest.mark.parametrize("field", ["alpha_t", "alpha_g"])
    @pytest.mark.parametrize("bad", [-0.1, 1.5])
    def test_rejects_out_of_range(self, field, bad):
        with pytest.raises(ConfigError):
            MatchConfig(**{field: bad})


class TestRetention:
    def test_exact_threshold_is_dropped(self):
        # Candidate overlaps the initial mask on exactly 20% of its area.
        shape = (10, 10)
        initial = rect(shape, 0, 1, 0, 2)        # 2 px
        candidate = inst(rect(shape, 0, 1, 0, 10))  # 10 px, 2 inside
        cfg = MatchConfig(alpha_t=0.20)
        assert geometric_match([candidate], initial, cfg) == []

    def test_exact_threshold_kept_when_not_strict(self):
        shape = (10, 10)
        initial = rect(shape, 0, 1, 0, 2)
        candidate = inst(rect(shape, 0, 1, 0, 10))
        cfg = MatchConfig(alpha_t=0.20, strict_inequality=False)
        assert geometric_match([candidate], initial, cfg) == [candidate]

    def test_just_above_threshold_is_kept(self):
        shape = (10, 10)
        initial = rect(shape, 0, 1, 0, 3)        # 3 of 10 px -> 0.3
        candidate = inst(rect(shape, 0, 1, 0, 10))
        cfg = MatchConfig(alpha_t=0.20)
        assert geometric_match([candidate], initial, cfg) == [candidate]

    def test_stages_use_their_own_thresholds(self):
        shape = (10, 10)
        initial = rect(shape, 0, 1, 0, 1)        # alpha vs 8-px strip = 0.125
        strip = rect(shape, 0, 1, 0, 8)
        cfg = MatchConfig(alpha_t=0.20, alpha_g=0.10)
        assert geometric_match([inst(strip)], initial, cfg) == []
        assert semantic_match([inst(strip, source="segmenter")], initial, cfg) != []

    def test_empty_candidate_skipped_with_warning(self):
        shape = (6, 6)
        initial = rect(shape, 0, 3, 0, 3)
        empty = inst(np.zeros(shape, dtype=bool))
        with pytest.warns(UserWarning, match="empty"):
            kept = geometric_match([empty], initial, MatchConfig())
        assert kept == []

    @given(
        initial=hnp.arrays(bool, (12, 12)),
        cand=hnp.arrays(bool, (12, 12)),
        lo=st.floats(0.0, 1.0),
        hi=st.floats(0.0, 1.0),
    )
    @settings(max_examples=60, deadline=None)
    def test_retention_monotone_in_threshold(self, initial, cand, lo, hi):
        if not cand.any():
            return
        lo, hi = min(lo, hi), max(lo, hi)
        candidate = inst(cand)
        kept_lo = geometric_match([candidate], initial, MatchConfig(alpha_t=lo))
        kept_hi = geometric_match([candidate], initial, MatchConfig(alpha_t=hi))
        # Anything surviving the stricter threshold survives the looser one.
        assert set(map(id, kept_hi)) <= set(map(id, kept_lo))


class TestRefine:
    def test_final_is_union_of_retained(self):
        shape = (8, 8)
        initial = rect(shape, 0, 8, 0, 8)
        a = inst(rect(shape, 0, 2, 0, 2))
        b = inst(rect(shape, 4, 6, 4, 6), source="segmenter")
        result = refine(initial, [a], [b])
        expected = brute_union([a.bitmap, b.bitmap], shape)
        assert np.array_equal(result.mask, expected)
        assert not result.no_evidence

    def test_unvouched_initial_pixels_are_dropped(self):
        shape = (8, 8)
        initial = rect(shape, 0, 8, 0, 8)
        a = inst(rect(shape, 0, 1, 0, 1))
        result = refine(initial, [a], [])
        assert result.mask.sum() == 1
        assert not result.mask[7, 7]

    def test_keep_initial_unions_it_back(self):
        shape = (8, 8)
        initial = rect(shape, 6, 8, 6, 8)
        a = inst(rect(shape, 0, 1, 0, 1))
        result = refine(initial, [a], [], keep_initial=True)
        assert result.mask.sum() == 5
        assert result.mask[7, 7]

    def test_nothing_retained_gives_empty_mask_and_flag(self):
        shape = (8, 8)
        result = refine(rect(shape, 0, 4, 0, 4), [], [])
        assert not result.mask.any()
        assert result.no_evidence

    def test_result_mask_is_read_only(self):
        shape = (4, 4)
        result = refine(rect(shape, 0, 2, 0, 2), [inst(rect(shape, 0, 2, 0, 2))], [])
        with pytest.raises(ValueError):
            result.mask[0, 0] = False

    def test_inclusion_exclusion_area(self):
        shape = (16, 16)
        initial = rect(shape, 0, 16, 0, 16)
        g = inst(rect(shape, 0, 8, 0, 8))
        s = inst(rect(shape, 4, 12, 4, 12), source="segmenter")
        result = refine(initial, [g], [s])
        inter = int(np.count_nonzero(g.bitmap & s.bitmap))
        assert int(result.mask.sum()) == g.area + s.area - inter


class TestMatchAndRefine:
    def test_provenance_covers_every_candidate(self):
        shape = (10, 10)
        initial = rect(shape, 0, 5, 0, 10)  # top half
        kept = inst(rect(shape, 0, 5, 0, 4))      # fully inside -> 1.0
        dropped = inst(rect(shape, 5, 10, 0, 10))  # disjoint -> 0.0
        sem = inst(rect(shape, 4, 6, 0, 10), source="segmenter", phrase="bench")
        result = match_and_refine(initial, [kept, dropped], [sem], MatchConfig())
        assert len(result.provenance) == 3
        by_retained = {e.retained for e in result.provenance}
        assert by_retained == {True, False}
        phrases = [e.phrase for e in result.provenance]
        assert "bench" in phrases

    def test_provenance_alpha_matches_overlap(self):
        shape = (10, 10)
        initial = rect(shape, 0, 5, 0, 10)
        half_in = inst(rect(shape, 4, 6, 0, 10))  # 10 of 20 px inside
        result = match_and_refine(initial, [half_in], [], MatchConfig())
        assert result.provenance[0].alpha == pytest.approx(0.5)
        assert result.provenance[0].retained

    def test_provenance_json_shape(self):
        entry = ProvenanceEntry(
            instance_id="geo-000", source="tracker", alpha=0.5, retained=True
        )
        js = entry.to_json()
        assert js == {
            "instance_id": "geo-000",
            "source": "tracker",
            "alpha": 0.5,
            "retained": True,
        }
        with_phrase = ProvenanceEntry(
            instance_id="sem-000",
            source="segmenter",
            alpha=0.25,
            retained=True,
            phrase="green trees",
        )
        assert with_phrase.to_json()["phrase"] == "green trees"

    def test_explicit_instance_ids_survive(self):
        shape = (6, 6)
        initial = rect(shape, 0, 6, 0, 6)
        named = inst(rect(shape, 0, 2, 0, 2), instance_id="track-7")
        result = match_and_refine(initial, [named], [], MatchConfig())
        assert result.provenance[0].instance_id == "track-7"


class TestRefineMulticlass:
    def test_priority_object_over_appearance_over_view(self):
        shape = (6, 6)
        base = ChangeMask(np.zeros(shape, dtype=np.uint8))
        overlap = rect(shape, 0, 2, 0, 2)
        out = refine_multiclass(
            base,
            {
                1: [inst(overlap)],
                2: [inst(overlap, source="segmenter")],
                3: [inst(overlap)],
            },
        )
        assert np.all(np.asarray(out.labels)[0:2, 0:2] == 1)

    def test_disjoint_classes_all_painted(self):
        shape = (6, 6)
        base = ChangeMask(np.zeros(shape, dtype=np.uint8))
        out = refine_multiclass(
            base,
            {
                1: [inst(rect(shape, 0, 2, 0, 2))],
                2: [inst(rect(shape, 2, 4, 2, 4), source="segmenter")],
                3: [inst(rect(shape, 4, 6, 4, 6))],
            },
        )
        labels = np.asarray(out.labels)
        assert labels[0, 0] == 1 and labels[2, 2] == 2 and labels[4, 4] == 3
        assert labels[0, 5] == 0

    def test_class3_passthrough_keeps_initial_view_pixels(self):
        shape = (6, 6)
        labels = np.zeros(shape, dtype=np.uint8)
        labels[5, :] = 3
        base = ChangeMask(labels)
        out = refine_multiclass(
            base,
            {1: [inst(rect(shape, 5, 6, 0, 1))]},
            class3_passthrough=True,
        )
        got = np.asarray(out.labels)
        assert got[5, 0] == 1              # retained instance wins
        assert np.all(got[5, 1:] == 3)     # passthrough elsewhere on the row

    def test_rejects_unknown_class_key(self):
        base = ChangeMask(np.zeros((4, 4), dtype=np.uint8))
        with pytest.raises(ConfigError):
            refine_multiclass(base, {0: []})
