import numpy as np
import pytest

from icgen.seqbuild import (
    PatchMask,
    QUADRANT_MAP,
    build_ar_sequence,
    ar_terms,
    compose_grid,
    element_pixel_region,
    extract_quadrants,
    quadrant_patch_mask,
    sample_patch_mask,
    term_layout,
)


def const(v, h=32, w=32):
    return np.full((h, w), v, dtype=np.float64)


class TestComposeGrid:
    def test_quadrant_placement(self):
        grid = compose_grid(const(0.1), const(0.2), const(0.3), const(0.4))
        assert grid.pixels.shape == (64, 64)
        means = {q: grid.quadrant(q).mean() for q in ("UL", "UR", "LL", "LR")}
        assert means == pytest.approx({"UL": 0.1, "UR": 0.2, "LL": 0.3, "LR": 0.4})
        assert grid.quadrant_map == QUADRANT_MAP

    def test_round_trip_is_exact(self):
        rng = np.random.default_rng(0)
        for dtype in (np.float32, np.float64, np.int64, np.uint16):
            parts = [(rng.random((16, 16)) * 100).astype(dtype) for _ in range(4)]
            grid = compose_grid(*parts)
            for orig, back in zip(parts, extract_quadrants(grid)):
                np.testing.assert_array_equal(orig, back)
                assert back.dtype == orig.dtype

    def test_448_grid_from_224_inputs(self):
        grid = compose_grid(*[const(0, 224, 224)] * 4)
        assert grid.pixels.shape == (448, 448)

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError, match="share H x W"):
            compose_grid(const(0), const(0), const(0, 16, 32), const(0))


class TestPatchMask:
    def test_exact_count_75(self):
        mask = sample_patch_mask(196, 0.75, np.random.default_rng(0))
        assert mask.masked.size == 147

    def test_exact_count_50(self):
        mask = sample_patch_mask(196, 0.5, np.random.default_rng(0))
        assert mask.masked.size == 98

    def test_seeded_determinism(self):
        a = sample_patch_mask(64, 0.6, np.random.default_rng(9))
        b = sample_patch_mask(64, 0.6, np.random.default_rng(9))
        np.testing.assert_array_equal(a.masked, b.masked)

    def test_indices_valid_and_distinct(self):
        rng = np.random.default_rng(1)
        for _ in range(50):
            total = int(rng.integers(4, 300))
            ratio = float(rng.uniform(0.05, 0.95))
            mask = sample_patch_mask(total, ratio, rng)
            assert mask.masked.size == int(round(ratio * total))
            assert len(set(mask.masked.tolist())) == mask.masked.size
            assert mask.as_bool().sum() == mask.masked.size

    def test_bad_ratio_rejected(self):
        rng = np.random.default_rng(0)
        for ratio in (0.0, 1.0, -0.5):
            with pytest.raises(ValueError):
                sample_patch_mask(64, ratio, rng)

    def test_out_of_range_indices_rejected(self):
        with pytest.raises(ValueError):
            PatchMask(masked=[0, 99], ratio=0.5, total=4)


class TestVisualSequence:
    def seq(self, n=1, with_label=True, h=32, patch=16):
        pairs = [(const(0.1, h, h), const(0.2, h, h)) for _ in range(n)]
        t_lbl = const(0.4, h, h) if with_label else None
        return build_ar_sequence(pairs, const(0.3, h, h), t_lbl, patch_size=patch)

    def test_four_element_inference_layout(self):
        seq = self.seq(with_label=False)
        assert seq.n_elements == 4
        assert seq.roles == ["image", "label", "image", "label"]
        assert seq.elements[3] is None
        assert seq.placeholder[seq.element_patches(3)].all()
        assert not seq.placeholder[~np.isin(np.arange(len(seq.placeholder)),
                                            seq.element_patches(3))].any()

    def test_supervision_on_even_position_elements_only(self):
        seq = self.seq()
        marked = {int(e) for e in np.unique(seq.element_of_patch[seq.supervision_mask])}
        assert marked == {1, 3}  # elements 2 and 4, 1-based

    def test_first_element_attends_nothing_later(self):
        seq = self.seq()
        for tok in seq.element_patches(0):
            later = np.isin(seq.element_of_patch, [1, 2, 3])
            assert not seq.attention_mask[tok][later].any()

    def test_causality_structure_all_pairs(self):
        seq = self.seq(n=2)
        elem = seq.element_of_patch
        allowed = seq.attention_mask
        assert (allowed == (elem[None, :] <= elem[:, None])).all()

    def test_roles_alternate_and_end_with_task_pair(self):
        seq = self.seq(n=3)
        assert seq.roles[::2] == ["image"] * 4
        assert seq.roles[1::2] == ["label"] * 4

    def test_zero_pairs_rejected(self):
        with pytest.raises(ValueError):
            build_ar_sequence([], const(0.3), const(0.4))

    def test_indivisible_patch_rejected(self):
        with pytest.raises(ValueError):
            self.seq(h=40, patch=16)

    def test_assemble_matches_compose_grid(self):
        seq = self.seq()
        grid = compose_grid(*[seq.elements[i] for i in range(4)])
        np.testing.assert_array_equal(seq.assemble(), grid.pixels)

    def test_ar_terms_target_labels_in_order(self):
        seq = self.seq(n=2)
        assert ar_terms(seq) == [(1, 2), (3, 4), (5, 6)]

    def test_term_layout_excludes_later_elements_and_masks_target(self):
        seq = self.seq()
        canvas, attn, ph = term_layout(seq, 1)
        assert canvas.shape == (32, 64)
        np.testing.assert_array_equal(canvas[:, :32], seq.elements[0])
        assert (canvas[:, 32:] == 0).all()  # placeholder content zeroed
        assert attn.shape == (ph.size, ph.size)
        hp = 32 // 16
        assert ph.sum() == hp * hp

    def test_element_pixel_region(self):
        seq = self.seq()
        rs, cs = element_pixel_region(seq, 3)
        assert (rs.start, rs.stop, cs.start, cs.stop) == (32, 64, 32, 64)


class TestQuadrantMaskHelper:
    def test_lower_right_selects_task_label_patches(self):
        mask = quadrant_patch_mask((32, 32), 16, "LR")
        assert mask.sum() == 4
        lattice = mask.reshape(4, 4)
        assert lattice[2:, 2:].all() and not lattice[:2].any() and not lattice[2:, :2].any()
