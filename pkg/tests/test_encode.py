import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from matchmap.encode import (
    EncodeConfig,
    SizeTargets,
    encode_detection,
    encode_keypoints,
    encode_segmentation,
    gaussian_radius,
    sigma_from_radius,
    splat_gaussian,
)
from matchmap.grid import (
    BinaryMask,
    Box,
    Heatmap,
    Instance,
    Keypoint,
    Visibility,
    mask_to_box,
    rasterize_box,
)
from oracles import radius_by_bisection, splat_max

CFG = EncodeConfig(grid=32)


def box_instance(x0, y0, x1, y1, category=0):
    return Instance(category=category, box=Box(x0, y0, x1, y1))


class TestGaussianRadius:
    def test_tiny_object_clamps_to_floor(self):
        assert gaussian_radius(1e-6, 1e-6, 0.7) == 0.5

    @pytest.mark.parametrize(
        "h,w", [(10, 10), (20, 20), (5, 17), (3.3, 7.7), (30, 4), (12, 12)]
    )
    def test_matches_bisection_oracle(self, h, w):
        got = gaussian_radius(h, w, 0.7)
        want = max(radius_by_bisection(h, w, 0.7), 0.5)
        assert got == pytest.approx(want, abs=1e-9)

    def test_monotone_in_size(self):
        assert gaussian_radius(20, 20, 0.7) > gaussian_radius(10, 10, 0.7)

    @given(st.floats(1.0, 30.0), st.floats(1.0, 30.0), st.floats(0.2, 0.9))
    @settings(max_examples=60, deadline=None)
    def test_oracle_agreement_property(self, h, w, t):
        got = gaussian_radius(h, w, t)
        want = max(radius_by_bisection(h, w, t), 0.5)
        assert got == pytest.approx(want, rel=1e-7, abs=1e-7)

    def test_invalid_inputs(self):
        with pytest.raises(ValueError):
            gaussian_radius(0.0, 5.0, 0.7)
        with pytest.raises(ValueError):
            gaussian_radius(5.0, 5.0, 1.0)


class TestSplatGaussian:
    def test_peak_at_integral_center(self):
        h = splat_gaussian(Heatmap.zeros(32, 32), (16, 16), 2.0)
        assert h.data[16, 16] == 1.0

    def test_axial_value_at_sigma(self):
        sigma = 2.0
        h = splat_gaussian(Heatmap.zeros(32, 32), (16, 16), sigma)
        assert h.data[16, 18] == pytest.approx(math.exp(-0.5), abs=1e-12)
        assert h.data[18, 16] == pytest.approx(math.exp(-0.5), abs=1e-12)

    def test_two_splats_compose_by_max(self):
        splats = [((10.3, 12.7), 1.5), ((13.0, 12.0), 2.5)]
        h = Heatmap.zeros(20, 20)
        for center, sigma in splats:
            h = splat_gaussian(h, center, sigma)
        want = splat_max(20, 20, splats)
        assert np.allclose(h.data, want, atol=1e-15)

    def test_center_outside_grid_raises(self):
        with pytest.raises(ValueError):
            splat_gaussian(Heatmap.zeros(8, 8), (9.0, 2.0), 1.0)

    def test_nonpositive_sigma_raises(self):
        with pytest.raises(ValueError):
            splat_gaussian(Heatmap.zeros(8, 8), (2.0, 2.0), 0.0)


class TestEncodeDetection:
    def test_empty_instances(self):
        heatmaps, size = encode_detection([], 448, 448, CFG)
        assert heatmaps == {}
        assert size.num_positive() == 0

    def test_explicit_categories_give_zero_maps(self):
        heatmaps, _ = encode_detection([], 448, 448, CFG, categories=[0, 1])
        assert set(heatmaps) == {0, 1}
        assert heatmaps[0].data.max() == 0.0

    def test_full_image_box(self):
        heatmaps, size = encode_detection(
            [box_instance(0, 0, 448, 448)], 448, 448, CFG
        )
        assert size.pos_mask[16, 16]
        assert size.num_positive() == 1
        assert size.h_map[16, 16] == 32.0
        assert size.w_map[16, 16] == 32.0
        assert heatmaps[0].data[16, 16] == 1.0

    def test_identical_instances_idempotent(self):
        one = encode_detection([box_instance(30, 40, 100, 120)], 448, 448, CFG)
        two = encode_detection([box_instance(30, 40, 100, 120)] * 2, 448, 448, CFG)
        assert one[0][0] == two[0][0]
        assert one[1] == two[1]

    def test_order_invariance(self):
        insts = [
            box_instance(10, 10, 80, 90, category=0),
            box_instance(200, 210, 300, 330, category=0),
            box_instance(120, 40, 190, 140, category=1),
        ]
        a = encode_detection(insts, 448, 448, CFG)
        b = encode_detection(insts[::-1], 448, 448, CFG)
        assert a[0] == b[0]
        assert a[1] == b[1]

    def test_scale_equivariance(self):
        insts = [box_instance(30, 40, 120, 160), box_instance(250, 260, 380, 400)]
        scaled = [
            Instance(category=i.category, box=Box(
                i.box.x0 * 2, i.box.y0 * 2, i.box.x1 * 2, i.box.y1 * 2))
            for i in insts
        ]
        a = encode_detection(insts, 448, 448, CFG)
        b = encode_detection(scaled, 896, 896, CFG)
        assert a[0] == b[0]
        assert a[1] == b[1]

    def test_rounded_center_cell_is_exactly_one(self):
        # non-integral center: kernel alone cannot reach 1, the pin must
        heatmaps, size = encode_detection(
            [box_instance(10, 10, 90, 100)], 448, 448, CFG
        )
        cy, cx = np.argwhere(size.pos_mask)[0]
        assert heatmaps[0].data[cy, cx] == 1.0

    def test_kernel_values_match_bruteforce(self):
        insts = [
            box_instance(10, 10, 150, 130, category=0),
            box_instance(250, 260, 420, 430, category=0),
        ]
        heatmaps, size = encode_detection(insts, 448, 448, CFG)
        splats = []
        centers = []
        for inst in insts:
            gh = inst.box.height * 32 / 448
            gw = inst.box.width * 32 / 448
            sigma = sigma_from_radius(gaussian_radius(gh, gw, 0.7))
            cx, cy = inst.box.center
            centers.append((round(cx * 32 / 448), round(cy * 32 / 448)))
            splats.append(((cx * 32 / 448, cy * 32 / 448), sigma))
        want = splat_max(32, 32, splats)
        for gx, gy in centers:
            want[gy, gx] = 1.0
        assert np.allclose(heatmaps[0].data, want, atol=1e-15)

    def test_per_category_separation(self):
        insts = [
            box_instance(10, 10, 100, 100, category=0),
            box_instance(300, 300, 400, 400, category=2),
        ]
        heatmaps, _ = encode_detection(insts, 448, 448, CFG)
        assert set(heatmaps) == {0, 2}

    def test_positive_ring_and_global_max(self):
        heatmaps, size = encode_detection(
            [box_instance(100, 100, 250, 240)], 448, 448, CFG
        )
        data = heatmaps[0].data
        assert data.max() == 1.0
        cy, cx = np.argwhere(size.pos_mask)[0]
        # cells near the center are strictly positive
        assert data[cy - 1 : cy + 2, cx - 1 : cx + 2].min() > 0.0


class TestEncodeSegmentation:
    def test_matches_detection_on_boxlike_mask(self):
        bits = rasterize_box(Box(60, 80, 200, 220), 448, 448).bits
        inst = Instance(category=0, box=Box(60, 80, 200, 220), mask=BinaryMask(bits))
        seg = encode_segmentation([inst], 448, 448, CFG)
        det = encode_detection([inst], 448, 448, CFG)
        assert seg[0][0] == det[0][0]
        assert seg[1] == det[1]

    def test_one_pixel_mask_center(self):
        bits = np.zeros((448, 448), dtype=bool)
        bits[5, 5] = True
        inst = Instance(category=0, box=Box(5, 5, 6, 6), mask=BinaryMask(bits))
        heatmaps, size = encode_segmentation([inst], 448, 448, CFG)
        # mask box is [5,5,6,6]; its center (5.5, 5.5) lands in cell (0, 0)
        gx = 5.5 * 32 / 448
        assert size.pos_mask[round(gx), round(gx)]

    def test_uses_mask_enclosure_not_box(self):
        bits = np.zeros((448, 448), dtype=bool)
        bits[100:200, 150:250] = True
        inst = Instance(category=0, box=Box(0, 0, 448, 448), mask=BinaryMask(bits))
        via_seg = encode_segmentation([inst], 448, 448, CFG)
        via_det = encode_detection(
            [Instance(category=0, box=mask_to_box(BinaryMask(bits)))], 448, 448, CFG
        )
        assert via_seg[0][0] == via_det[0][0]
        assert via_seg[1] == via_det[1]

    def test_two_disjoint_masks_two_peaks(self):
        bits_a = np.zeros((448, 448), dtype=bool)
        bits_a[50:120, 60:130] = True
        bits_b = np.zeros((448, 448), dtype=bool)
        bits_b[300:400, 310:420] = True
        insts = [
            Instance(category=1, box=mask_to_box(BinaryMask(b)), mask=BinaryMask(b))
            for b in (bits_a, bits_b)
        ]
        heatmaps, size = encode_segmentation(insts, 448, 448, CFG)
        assert size.num_positive() == 2
        assert (heatmaps[1].data == 1.0).sum() == 2

    def test_missing_mask_raises(self):
        with pytest.raises(ValueError):
            encode_segmentation([box_instance(0, 0, 10, 10)], 448, 448, CFG)

    def test_empty_mask_raises(self):
        inst = Instance(
            category=0,
            box=Box(0, 0, 10, 10),
            mask=BinaryMask(np.zeros((448, 448), dtype=bool)),
        )
        with pytest.raises(ValueError):
            encode_segmentation([inst], 448, 448, CFG)


class TestEncodeKeypoints:
    def kp_instance(self, kps):
        return Instance(category=0, box=Box(0, 0, 448, 448), keypoints=kps)

    def test_all_absent_gives_zero_map(self):
        inst = self.kp_instance((Keypoint(0, 0, Visibility.ABSENT),))
        heat = encode_keypoints([inst], 0, 448, 448, CFG)
        assert heat.data.max() == 0.0

    def test_center_keypoint_values(self):
        inst = self.kp_instance((Keypoint(224.0, 224.0),))
        heat = encode_keypoints([inst], 0, 448, 448, CFG)
        assert heat.data[16, 16] == 1.0
        # two cells along an axis with sigma 2: exp(-4 / (2 * 4))
        assert heat.data[16, 18] == pytest.approx(math.exp(-0.5), abs=1e-12)

    def test_occluded_encoded_like_visible(self):
        vis = self.kp_instance((Keypoint(100.0, 130.0, Visibility.VISIBLE),))
        occ = self.kp_instance((Keypoint(100.0, 130.0, Visibility.OCCLUDED),))
        a = encode_keypoints([vis], 0, 448, 448, CFG)
        b = encode_keypoints([occ], 0, 448, 448, CFG)
        assert a == b

    def test_selects_requested_category(self):
        inst = self.kp_instance(
            (Keypoint(100.0, 100.0), Keypoint(350.0, 350.0))
        )
        head = encode_keypoints([inst], 0, 448, 448, CFG)
        tail = encode_keypoints([inst], 1, 448, 448, CFG)
        assert np.argmax(head.data) != np.argmax(tail.data)

    def test_bad_category_raises(self):
        inst = self.kp_instance((Keypoint(1.0, 1.0),))
        with pytest.raises(ValueError):
            encode_keypoints([inst], 3, 448, 448, CFG)


class TestSizeTargets:
    def test_rejects_values_off_mask(self):
        h = np.zeros((4, 4))
        h[1, 1] = 3.0
        with pytest.raises(ValueError):
            SizeTargets(h, np.zeros((4, 4)), np.zeros((4, 4), dtype=bool))

    def test_rejects_negative(self):
        pos = np.zeros((4, 4), dtype=bool)
        pos[1, 1] = True
        h = np.zeros((4, 4))
        h[1, 1] = -2.0
        with pytest.raises(ValueError):
            SizeTargets(h, np.zeros((4, 4)), pos)
