import json
import math

import numpy as np
import pytest

from compass_control import geometry as geo
from compass_control.errors import (
    ConfigError,
    DomainError,
    PlacementError,
    ProjectionError,
)

TWO_PI = 2.0 * math.pi


class TestWrapAngle:
    def test_identity(self):
        assert geo.wrap_angle(0.0) == 0.0

    def test_negative(self):
        assert geo.wrap_angle(-math.pi / 2) == pytest.approx(3 * math.pi / 2, abs=1e-12)

    def test_multiple_turns(self):
        assert geo.wrap_angle(5 * math.pi) == pytest.approx(math.pi, abs=1e-12)

    def test_idempotent(self):
        rng = np.random.Generator(np.random.PCG64(0))
        for x in rng.uniform(-50.0, 50.0, size=500):
            w = geo.wrap_angle(float(x))
            assert 0.0 <= w < TWO_PI
            assert geo.wrap_angle(w) == w

    def test_non_finite_rejected(self):
        for bad in (math.nan, math.inf, -math.inf):
            with pytest.raises(DomainError):
                geo.wrap_angle(bad)


def grid_circular_oracle(a, b):
    # brute force over explicit unwrappings, independent of fmod paths
    return min(abs(a - b + 2 * math.pi * k) for k in (-2, -1, 0, 1, 2))


def grid_flip_oracle(a, b):
    return min(abs(a - b + math.pi * k) for k in (-3, -2, -1, 0, 1, 2, 3))


class TestCircularDistance:
    def test_identity(self):
        assert geo.circular_distance(0.0, 0.0) == 0.0

    def test_wraparound(self):
        assert geo.circular_distance(0.1, TWO_PI - 0.1) == pytest.approx(0.2, abs=1e-12)

    def test_antipodal_maximum(self):
        assert geo.circular_distance(0.0, math.pi) == pytest.approx(math.pi, abs=1e-12)

    def test_matches_unwrapping_oracle_on_grid(self):
        grid = np.arange(0, 360, 7) * math.pi / 180.0
        for a in grid:
            for b in grid:
                assert geo.circular_distance(a, b) == pytest.approx(
                    grid_circular_oracle(a, b), abs=1e-9
                )

    def test_shift_invariance(self):
        rng = np.random.Generator(np.random.PCG64(1))
        for _ in range(300):
            a, b = rng.uniform(0, TWO_PI, size=2)
            k, m = rng.integers(-3, 4, size=2)
            assert geo.circular_distance(a + TWO_PI * k, b + TWO_PI * m) == pytest.approx(
                geo.circular_distance(a, b), abs=1e-9
            )

    def test_symmetry_and_triangle(self):
        rng = np.random.Generator(np.random.PCG64(2))
        for _ in range(300):
            a, b, c = rng.uniform(0, TWO_PI, size=3)
            assert geo.circular_distance(a, b) == geo.circular_distance(b, a)
            assert geo.circular_distance(a, c) <= (
                geo.circular_distance(a, b) + geo.circular_distance(b, c) + 1e-12
            )


class TestFlipAdjustedDistance:
    def test_flip_equivalence(self):
        assert geo.flip_adjusted_distance(0.0, math.pi) == pytest.approx(0.0, abs=1e-12)

    def test_maximum(self):
        assert geo.flip_adjusted_distance(0.0, math.pi / 2) == pytest.approx(
            math.pi / 2, abs=1e-12
        )

    def test_identity(self):
        assert geo.flip_adjusted_distance(0.3, 0.3) == 0.0

    def test_pi_shift_invariance(self):
        # fl(b + pi) rounds before the function sees it, so bitwise equality
        # is unattainable for arbitrary floats; 1e-12 bounds the rounding.
        rng = np.random.Generator(np.random.PCG64(3))
        for _ in range(500):
            a, b = rng.uniform(0, TWO_PI, size=2)
            assert geo.flip_adjusted_distance(a, b) == pytest.approx(
                geo.flip_adjusted_distance(a, b + math.pi), abs=1e-12
            )

    def test_never_exceeds_circular(self):
        rng = np.random.Generator(np.random.PCG64(4))
        for _ in range(500):
            a, b = rng.uniform(0, TWO_PI, size=2)
            assert geo.flip_adjusted_distance(a, b) <= geo.circular_distance(a, b) + 1e-15


class TestOrientation:
    def test_normalizes(self):
        assert geo.Orientation.yaw(-math.pi / 2).theta == pytest.approx(3 * math.pi / 2)

    def test_lengths(self):
        geo.Orientation((0.1, 0.2, 0.3))
        with pytest.raises(DomainError):
            geo.Orientation((0.1, 0.2))

    def test_json_roundtrip(self):
        o = geo.Orientation.yaw(1.25)
        assert geo.Orientation.from_json(o.to_json()) == o
        o3 = geo.Orientation((0.1, 0.2, 0.3))
        assert geo.Orientation.from_json(o3.to_json()) == o3


class TestBox2D:
    def test_validation(self):
        with pytest.raises(DomainError):
            geo.Box2D(10, 10, 10, 20)
        with pytest.raises(DomainError):
            geo.Box2D(-1, 0, 5, 5)
        with pytest.raises(DomainError):
            geo.Box2D(0, 0, math.inf, 5)

    def test_json_is_flat_array(self):
        b = geo.Box2D(1, 2, 3, 4)
        assert json.loads(json.dumps(b.to_json())) == [1, 2, 3, 4]
        assert geo.Box2D.from_json(b.to_json()) == b


class TestIoU:
    def test_identical(self):
        b = geo.Box2D(5, 5, 25, 30)
        assert geo.iou(b, b) == 1.0

    def test_disjoint(self):
        assert geo.iou(geo.Box2D(0, 0, 10, 10), geo.Box2D(20, 20, 30, 30)) == 0.0

    def test_touching_edges_count_as_disjoint(self):
        assert geo.iou(geo.Box2D(0, 0, 10, 10), geo.Box2D(10, 0, 20, 10)) == 0.0

    def test_overlap_area_arithmetic(self):
        # inter = 1x1, union = 4 + 4 - 1 = 7
        a = geo.Box2D(0, 0, 2, 2)
        b = geo.Box2D(1, 1, 3, 3)
        assert geo.iou(a, b) == pytest.approx(1.0 / 7.0, abs=1e-15)


def random_box_inside(rng, image_w, image_h, min_side=1.0):
    w = rng.uniform(min_side, image_w * 0.9)
    h = rng.uniform(min_side, image_h * 0.9)
    x0 = rng.uniform(0, image_w - w)
    y0 = rng.uniform(0, image_h - h)
    return geo.Box2D(float(x0), float(y0), float(x0 + w), float(y0 + h))


class TestLooseBox:
    def test_worked_example(self):
        lb = geo.loose_box(geo.Box2D(100, 100, 160, 200), 1.2, 512, 512)
        assert lb.side == pytest.approx(120.0)
        assert lb.box == geo.Box2D(70, 90, 190, 210)

    def test_identity_padding_on_square(self):
        b = geo.Box2D(50, 60, 90, 100)
        lb = geo.loose_box(b, 1.0, 512, 512)
        assert lb.box == b

    def test_preclip_side_and_center(self):
        rng = np.random.Generator(np.random.PCG64(5))
        for _ in range(200):
            b = random_box_inside(rng, 512, 512)
            lb = geo.loose_box(b, 1.2, 512, 512)
            assert lb.side == 1.2 * max(b.height, b.width)
            # unclipped edges must sit exactly half a side from the center
            cx, cy = b.center
            if lb.box.x0 > 0.0:
                assert lb.box.x0 == pytest.approx(cx - lb.side / 2, abs=1e-9)
            if lb.box.y1 < 512.0:
                assert lb.box.y1 == pytest.approx(cy + lb.side / 2, abs=1e-9)

    def test_containment_after_clipping(self):
        # brute-force containment oracle over random boxes incl. edge-huggers
        rng = np.random.Generator(np.random.PCG64(6))
        for _ in range(1000):
            image_w = float(rng.integers(64, 1024))
            image_h = float(rng.integers(64, 1024))
            b = random_box_inside(rng, image_w, image_h)
            lam = float(rng.uniform(1.0, 3.0))
            lb = geo.loose_box(b, lam, image_w, image_h)
            assert lb.box.contains_box(b)
            assert geo.Box2D(0, 0, image_w, image_h).contains_box(lb.box)

    def test_rejects_bad_inputs(self):
        b = geo.Box2D(10, 10, 20, 20)
        with pytest.raises(ConfigError):
            geo.loose_box(b, 0.9, 512, 512)
        with pytest.raises(DomainError):
            geo.loose_box(geo.Box2D(500, 500, 600, 600), 1.2, 512, 512)


def pixel_oracle_mask(lb, grid_w, grid_h, image_w, image_h):
    """Label each cell by testing its center against a per-pixel inside map."""
    values = np.full((grid_h, grid_w), -np.inf, dtype=np.float32)
    for j in range(grid_h):
        for i in range(grid_w):
            cx = (i + 0.5) * image_w / grid_w
            cy = (j + 0.5) * image_h / grid_h
            if lb.box.x0 <= cx <= lb.box.x1 and lb.box.y0 <= cy <= lb.box.y1:
                values[j, i] = 0.0
    return values


class TestRasterizeMask:
    def test_full_image_box_is_all_open(self):
        lb = geo.loose_box(geo.Box2D(0, 0, 512, 512), 1.0, 512, 512)
        for g in (8, 16, 64):
            m = geo.rasterize_mask(lb, g, g, 512, 512)
            assert (m.values == 0.0).all()

    def test_left_half_box_on_2x2(self):
        lb = geo.loose_box(geo.Box2D(0, 0, 256, 512), 1.0, 512, 512)
        # loose squaring widens the box; use the tight source directly
        m = geo.rasterize_mask(
            geo.LooseBox(box=geo.Box2D(0, 0, 256, 512), side=512, padding=1.0,
                         source=lb.source),
            2, 2, 512, 512,
        )
        assert m.values[0, 0] == 0.0 and m.values[1, 0] == 0.0
        assert np.isneginf(m.values[0, 1]) and np.isneginf(m.values[1, 1])

    def test_matches_pixel_oracle_on_random_boxes(self):
        rng = np.random.Generator(np.random.PCG64(7))
        for _ in range(50):
            b = random_box_inside(rng, 512, 512, min_side=16.0)
            lb = geo.loose_box(b, float(rng.uniform(1.0, 2.0)), 512, 512)
            m = geo.rasterize_mask(lb, 64, 64, 512, 512)
            oracle = pixel_oracle_mask(lb, 64, 64, 512, 512)
            if (oracle == 0.0).any():
                np.testing.assert_array_equal(m.values, oracle)
            else:
                assert (m.values == 0.0).sum() == 1

    def test_tiny_box_opens_exactly_one_cell(self):
        b = geo.Box2D(300.2, 300.2, 301.0, 301.0)
        lb = geo.loose_box(b, 1.0, 512, 512)
        m = geo.rasterize_mask(lb, 8, 8, 512, 512)
        assert (m.values == 0.0).sum() == 1
        # the open cell is the one whose center is nearest the box center
        j, i = np.argwhere(m.values == 0.0)[0]
        assert (i, j) == (4, 4)

    def test_cell_center_consistency_across_resolutions(self):
        rng = np.random.Generator(np.random.PCG64(8))
        for _ in range(20):
            b = random_box_inside(rng, 512, 512, min_side=32.0)
            lb = geo.loose_box(b, 1.3, 512, 512)
            for g in (8, 16, 32, 64):
                m = geo.rasterize_mask(lb, g, g, 512, 512)
                for j, i in np.argwhere(m.values == 0.0):
                    cx = (i + 0.5) * 512 / g
                    cy = (j + 0.5) * 512 / g
                    assert lb.box.contains_point(cx, cy)

    def test_mask_invariants_enforced(self):
        with pytest.raises(DomainError):
            geo.SpatialMask(2, 2, np.full((2, 2), -np.inf, dtype=np.float32))
        with pytest.raises(DomainError):
            geo.SpatialMask(2, 2, np.array([[0.0, 1.0], [0.0, 0.0]], dtype=np.float32))


class TestSpawnBoxes:
    def test_deterministic(self):
        a = geo.spawn_boxes(1, 512, 512, seed=7)
        b = geo.spawn_boxes(1, 512, 512, seed=7)
        assert a == b
        assert json.dumps([x.to_json() for x in a]) == json.dumps(
            [x.to_json() for x in b]
        )

    def test_pairwise_disjoint_over_seeds(self):
        for seed in range(100):
            boxes = geo.spawn_boxes(5, 512, 512, seed=seed, size_range=(0.1, 0.3))
            for i in range(len(boxes)):
                for j in range(i + 1, len(boxes)):
                    assert geo.iou(boxes[i], boxes[j]) == 0.0

    def test_in_bounds(self):
        for seed in range(20):
            for b in geo.spawn_boxes(4, 640, 480, seed=seed, size_range=(0.1, 0.3)):
                assert geo.Box2D(0, 0, 640, 480).contains_box(b)

    def test_pigeonhole_failure(self):
        with pytest.raises(PlacementError):
            geo.spawn_boxes(6, 512, 512, seed=0, size_range=(0.6, 0.9))

    def test_respects_existing_boxes(self):
        fixed = [geo.Box2D(0, 0, 256, 512)]
        boxes = geo.spawn_boxes(
            2, 512, 512, seed=3, size_range=(0.1, 0.3), existing=fixed
        )
        for b in boxes:
            assert geo.iou(b, fixed[0]) == 0.0

    def test_bad_inputs(self):
        with pytest.raises(DomainError):
            geo.spawn_boxes(7, 512, 512, seed=0)
        with pytest.raises(ConfigError):
            geo.spawn_boxes(2, 512, 512, seed=0, size_range=(0.0, 0.5))


def straight_camera(focal=256.0, size=512.0):
    # camera at origin looking along +y with no tilt
    return geo.CameraModel(
        focal_px=focal, cx=size / 2, cy=size / 2, position=(0.0, 0.0, 0.0), tilt=0.0
    )


class TestProjection:
    def test_cube_on_axis_centered_at_principal_point(self):
        cam = straight_camera()
        box = geo.project_bounds(((-0.5, 4.5, -0.5), (0.5, 5.5, 0.5)), cam)
        cx, cy = box.center
        assert cx == pytest.approx(256.0, abs=1e-9)
        assert cy == pytest.approx(256.0, abs=1e-9)

    def test_depth_doubling_halves_size(self):
        cam = straight_camera()
        # flat square patch so all corners share one depth
        near = geo.project_bounds(((-1.0, 4.0, -1.0), (1.0, 4.0, 1.0)), cam)
        far = geo.project_bounds(((-1.0, 8.0, -1.0), (1.0, 8.0, 1.0)), cam)
        assert far.width == pytest.approx(near.width / 2, abs=1e-9)
        assert far.height == pytest.approx(near.height / 2, abs=1e-9)

    def test_matches_corner_projection_oracle(self):
        rng = np.random.Generator(np.random.PCG64(9))
        cam = geo.CameraModel(
            focal_px=300.0, cx=256.0, cy=256.0,
            position=(0.0, -6.0, 3.0), tilt=math.radians(15.0),
        )
        for _ in range(100):
            lo = rng.uniform([-2, 1, 0], [2, 6, 1])
            hi = lo + rng.uniform(0.2, 1.5, size=3)
            aabb = (tuple(map(float, lo)), tuple(map(float, hi)))
            # independent oracle: explicit rotation matrix applied per corner
            t = math.radians(15.0)
            us, vs = [], []
            for x in (aabb[0][0], aabb[1][0]):
                for y in (aabb[0][1], aabb[1][1]):
                    for z in (aabb[0][2], aabb[1][2]):
                        dx, dy, dz = x - 0.0, y + 6.0, z - 3.0
                        zc = dy * math.cos(t) - dz * math.sin(t)
                        yc = -(dy * math.sin(t) + dz * math.cos(t))
                        us.append(300.0 * dx / zc + 256.0)
                        vs.append(300.0 * yc / zc + 256.0)
            expect = (min(us), min(vs), max(us), max(vs))
            got = geo.project_bounds(aabb, cam)
            assert got.x0 == pytest.approx(expect[0], abs=1e-9)
            assert got.y0 == pytest.approx(expect[1], abs=1e-9)
            assert got.x1 == pytest.approx(expect[2], abs=1e-9)
            assert got.y1 == pytest.approx(expect[3], abs=1e-9)

    def test_behind_camera_rejected(self):
        cam = straight_camera()
        with pytest.raises(ProjectionError):
            geo.project_bounds(((-1.0, -4.0, -1.0), (1.0, -3.0, 1.0)), cam)
