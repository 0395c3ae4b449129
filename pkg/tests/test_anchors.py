"""Anchor grid generation and layout order."""

import numpy as np
import pytest

from pcbdet.anchors import (
    DEFAULT_RATIOS,
    DEFAULT_SCALES,
    AnchorConfigError,
    generate_anchors,
    grid_dims_for,
)


class TestGridDims:
    def test_ceiling_division(self):
        assert grid_dims_for((32, 32), (1, 2, 4)) == ((32, 32), (16, 16), (8, 8))
        assert grid_dims_for((10, 7), (3,)) == ((4, 3),)

    def test_non_square(self):
        assert grid_dims_for((20, 32), (4,)) == ((5, 8),)


class TestGenerateAnchors:
    def test_count(self):
        anchors = generate_anchors(((32, 32), (16, 16), (8, 8)), DEFAULT_SCALES)
        assert len(anchors) == 3 * (32 * 32 + 16 * 16 + 8 * 8)
        assert anchors.boxes.shape == (4032, 4)

    def test_matches_direct_loop(self):
        grids = ((3, 4), (2, 2))
        scales = (0.1, 0.3)
        ratios = (0.5, 1.0, 2.0)
        anchors = generate_anchors(grids, scales, ratios)
        expected = []
        for (m, n), scale in zip(grids, scales):
            for i in range(m):
                for j in range(n):
                    for r in ratios:
                        expected.append(
                            [(j + 0.5) / n, (i + 0.5) / m, scale * np.sqrt(r), scale / np.sqrt(r)]
                        )
        assert np.allclose(anchors.boxes, np.array(expected), atol=1e-12)

    def test_aspect_ratio_exact(self):
        anchors = generate_anchors(((4, 4),), (0.2,), (0.5, 1.0, 2.0))
        ratios = anchors.boxes[:, 2] / anchors.boxes[:, 3]
        assert np.allclose(ratios.reshape(-1, 3), [0.5, 1.0, 2.0], atol=1e-12)

    def test_area_preserved_across_ratios(self):
        # w*h = scale^2 regardless of ratio
        anchors = generate_anchors(((2, 2),), (0.16,), DEFAULT_RATIOS)
        areas = anchors.boxes[:, 2] * anchors.boxes[:, 3]
        assert np.allclose(areas, 0.16 ** 2, atol=1e-12)

    def test_group_of_labels(self):
        anchors = generate_anchors(((2, 2), (1, 1)), (0.1, 0.2), (1.0,))
        assert anchors.group_of.tolist() == [0, 0, 0, 0, 1]

    def test_centers_cover_unit_square_uniformly(self):
        anchors = generate_anchors(((4, 4),), (0.1,), (1.0,))
        assert anchors.boxes[:, 0].min() == pytest.approx(0.125)
        assert anchors.boxes[:, 0].max() == pytest.approx(0.875)

    def test_box_accessor(self):
        anchors = generate_anchors(((2, 3),), (0.1,), (1.0, 2.0))
        b = anchors.box(3)
        assert (b.cx, b.cy) == (pytest.approx(1.5 / 3), pytest.approx(0.5 / 2))

    @pytest.mark.parametrize(
        "grids,scales,ratios",
        [
            (((0, 4),), (0.1,), (1.0,)),
            (((4, 4),), (0.1, 0.2), (1.0,)),
            (((4, 4),), (-0.1,), (1.0,)),
            (((4, 4), (2, 2)), (0.2, 0.1), (1.0,)),  # scales must increase
            (((4, 4),), (0.1,), ()),
        ],
    )
    def test_validation(self, grids, scales, ratios):
        with pytest.raises(AnchorConfigError):
            generate_anchors(grids, scales, ratios)

    def test_corners_consistent(self):
        anchors = generate_anchors(((3, 3),), (0.2,), DEFAULT_RATIOS)
        corners = anchors.corners()
        assert np.allclose(corners[:, 2] - corners[:, 0], anchors.boxes[:, 2], atol=1e-12)
