import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from endosight import inference as inf
from endosight.imaging import NormalizedBox, PixelBox, fit_transform
from endosight.inference import Detection, RawCellPrediction, SceneSpec, SyntheticPolyp

from oracles import raster_box_iou


def nbox(x0, y0, x1, y1):
    return NormalizedBox((x0 + x1) / 2, (y0 + y1) / 2, x1 - x0, y1 - y0)


class TestDecode:
    def test_product_rule(self):
        (d,) = inf.decode_predictions([RawCellPrediction(0.9, 0.5, 0.5, 0.1, 0.1, 0.8)])
        assert d.confidence == pytest.approx(0.72)

    def test_below_threshold(self):
        assert inf.decode_predictions([RawCellPrediction(0.4, 0.5, 0.5, 0.1, 0.1, 1.0)]) == []

    def test_empty(self):
        assert inf.decode_predictions([]) == []

    @given(st.lists(st.tuples(st.floats(0, 1), st.floats(0, 1)), max_size=20))
    def test_sorted_and_thresholded(self, probs):
        cells = [RawCellPrediction(a, 0.5, 0.5, 0.1, 0.1, b) for a, b in probs]
        out = inf.decode_predictions(cells, 0.3)
        confs = [d.confidence for d in out]
        assert confs == sorted(confs, reverse=True)
        assert all(c >= 0.3 for c in confs)


class TestIou:
    def test_trivial(self):
        b = nbox(0.1, 0.1, 0.4, 0.5)
        assert inf.box_iou(b, b) == 1.0
        assert inf.box_iou(b, nbox(0.5, 0.5, 0.9, 0.9)) == 0.0

    def test_corner_boxes(self):
        assert inf.pixel_iou(PixelBox(0, 0, 2, 2), PixelBox(1, 1, 3, 3)) == pytest.approx(1 / 7)
        assert inf.box_iou(nbox(0, 0, 2 / 3, 2 / 3), nbox(1 / 3, 1 / 3, 1, 1)) == pytest.approx(1 / 7)
        assert raster_box_iou((0, 0, 2 / 3, 2 / 3), (1 / 3, 1 / 3, 1, 1), 300) == pytest.approx(1 / 7)

    def test_raster_oracle(self, rng):
        grid = 1000
        for _ in range(200):
            # snap to the grid so the raster count is exact
            a = np.sort(rng.integers(0, grid + 1, (2, 2)), axis=0) / grid
            b = np.sort(rng.integers(0, grid + 1, (2, 2)), axis=0) / grid
            if (a[1] - a[0]).min() == 0 or (b[1] - b[0]).min() == 0:
                continue
            ba, bb = nbox(a[0, 0], a[0, 1], a[1, 0], a[1, 1]), nbox(b[0, 0], b[0, 1], b[1, 0], b[1, 1])
            want = raster_box_iou((a[0, 0], a[0, 1], a[1, 0], a[1, 1]), (b[0, 0], b[0, 1], b[1, 0], b[1, 1]), grid)
            assert inf.box_iou(ba, bb) == pytest.approx(want, abs=1e-3)
            assert inf.box_iou(ba, bb) == inf.box_iou(bb, ba)


class TestNms:
    def test_identical(self):
        b = nbox(0.1, 0.1, 0.3, 0.3)
        out = inf.nms([Detection(b, 0.8), Detection(b, 0.9)])
        assert [d.confidence for d in out] == [0.9]

    def test_disjoint(self):
        out = inf.nms([Detection(nbox(0, 0, 0.1, 0.1), 0.8), Detection(nbox(0.5, 0.5, 0.6, 0.6), 0.9)])
        assert len(out) == 2

    def test_iou_half_suppressed(self):
        a = Detection(nbox(0, 0, 0.4, 0.3), 0.9)
        b = Detection(nbox(0, 0, 0.4, 0.2), 0.7)  # IoU 2/3 > 0.45
        c = Detection(nbox(0, 0, 0.4, 0.15), 0.6)  # IoU with a = 0.5
        assert inf.box_iou(a.box, c.box) == pytest.approx(0.5)
        assert inf.nms([c, a]) == [a]
        assert inf.nms([b, a]) == [a]

    def test_tie_break(self):
        left = Detection(nbox(0.0, 0.0, 0.2, 0.2), 0.9)
        right = Detection(nbox(0.05, 0.0, 0.25, 0.2), 0.9)
        assert inf.nms([right, left]) == [left]

    @given(st.integers(0, 2**32 - 1))
    def test_properties(self, seed):
        rng = np.random.default_rng(seed)
        dets = []
        for _ in range(rng.integers(0, 12)):
            x0, y0 = rng.uniform(0, 0.7, 2)
            dets.append(Detection(nbox(x0, y0, x0 + rng.uniform(0.05, 0.3), y0 + rng.uniform(0.05, 0.3)),
                                  float(rng.uniform())))
        out = inf.nms(dets)
        assert all(d in dets for d in out) and len(out) <= len(dets)
        for i, a in enumerate(out):
            for b in out[i + 1:]:
                assert inf.box_iou(a.box, b.box) <= 0.45


class TestStubs:
    def test_empty_scene(self):
        assert inf.stub_detector(SceneSpec(), 0) == []

    def test_static(self):
        s = SceneSpec((SyntheticPolyp((0.5, 0.5), (0.1, 0.1), 0.8),))
        assert inf.stub_detector(s, 0) == inf.stub_detector(s, 100)
        (c,) = inf.stub_detector(s, 0)
        assert c.p_obj == pytest.approx(0.9) and c.p_class == 0.95

    def test_drift(self):
        s = SceneSpec((SyntheticPolyp((0.3, 0.5), (0.05, 0.05), 1.0, (0.01, 0.0)),))
        assert inf.stub_detector(s, 10)[0].xc == pytest.approx(0.4)

    def test_segmenter_far_roi(self):
        s = SceneSpec((SyntheticPolyp((0.2, 0.2), (0.05, 0.05)),))
        assert not inf.stub_segmenter(s, PixelBox(300, 300, 400, 400), 0).any()

    def test_segmenter_center(self):
        s = SceneSpec((SyntheticPolyp((0.5, 0.5), (0.1, 0.1)),), 400, 400)
        # odd-sized content puts a pixel center exactly on the polyp center
        p = inf.stub_segmenter(s, PixelBox(150.5, 150.5, 249.5, 249.5), 0, side=99)
        assert p[49, 49] == pytest.approx(1.0)
        assert p.max() <= 1.0

    def test_segmenter_roi_outside(self):
        with pytest.raises(inf.BackendError):
            inf.stub_segmenter(SceneSpec(), PixelBox(-5, 0, 10, 10), 0)

    @pytest.mark.parametrize("intensity", [1.0, 0.8])
    def test_thresholded_area(self, intensity):
        rx, ry = 0.2, 0.15
        s = SceneSpec((SyntheticPolyp((0.5, 0.5), (rx, ry), intensity),))
        p = inf.stub_segmenter(s, PixelBox(0, 0, 416, 416), 0)
        area = np.count_nonzero(p >= 0.5)
        want = math.pi * rx * ry * 320 ** 2 * (1 - 1 / (2 * intensity)) ** 2
        assert area == pytest.approx(want, rel=0.02)

    def test_deterministic(self):
        s = SceneSpec((SyntheticPolyp((0.4, 0.5), (0.1, 0.2), 0.9, (0.001, 0)),))
        a = inf.stub_segmenter(s, PixelBox(10, 10, 300, 200), 7)
        b = inf.stub_segmenter(s, PixelBox(10, 10, 300, 200), 7)
        assert a.tobytes() == b.tobytes()

    def test_stub_detector_maps_to_model_space(self):
        s = SceneSpec((SyntheticPolyp((0.5, 0.5), (0.1, 0.1)),), 832, 416)
        t = fit_transform(832, 416, 416)
        (c,) = inf.StubDetector(s).detect(None, inf.FrameContext(0, t))
        # half-height content centered vertically
        assert (c.xc, c.yc, c.w, c.h) == pytest.approx((0.5, 0.5, 0.2, 0.1))

    def test_render(self):
        s = SceneSpec((SyntheticPolyp((0.5, 0.5), (0.1, 0.1)),), 64, 48)
        img = inf.render_scene(s, 0)
        assert img.shape == (48, 64, 3) and img.dtype == np.uint8
        assert tuple(img[0, 0]) == tuple(inf.MUCOSA_RGB.astype(int))


class TestSceneJson:
    def test_round_trip(self):
        s = SceneSpec((SyntheticPolyp((0.3, 0.5), (0.1, 0.2), 0.7, (0.01, 0)),), 320, 240)
        assert SceneSpec.from_json(s.to_json()) == s

    def test_list_form(self):
        s = SceneSpec.from_json([{"center": [0.5, 0.5], "radii": [0.1, 0.1]}])
        assert len(s.polyps) == 1 and s.width == 416

    def test_invalid(self):
        with pytest.raises(ValueError):
            SyntheticPolyp((1.5, 0.5), (0.1, 0.1))


class TestRegistry:
    def test_unknown(self):
        with pytest.raises(inf.BackendError, match="unknown detector"):
            inf.make_detector("yolo-nonexistent")

    def test_register(self):
        class Fixed:
            descriptor = inf.BackendDescriptor("fixed", inf.DETECTOR, 416)

            def __init__(self, **kw):
                pass

            def detect(self, image, ctx):
                return []
        inf.register_detector("fixed-test", Fixed)
        assert inf.make_detector("fixed-test").detect(None, None) == []
