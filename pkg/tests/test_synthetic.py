import numpy as np
import pytest

from manualpa.geometry import EquivalenceGroups, Pose, aabb, chamfer_distance
from manualpa.synthetic import (
    Camera,
    Furniture,
    default_camera,
    diff_image,
    generate_furniture,
    ground_truth_order,
    make_sample,
    render_manual,
    render_step,
)


def cube(n=4, size=0.1):
    g = np.linspace(-size / 2, size / 2, n)
    return np.stack(np.meshgrid(g, g, g, indexing="ij"), axis=-1).reshape(-1, 3)


def handmade(centers, groups=None):
    c = cube()
    parts = np.stack([c] * len(centers))
    poses = [Pose([1, 0, 0, 0], ctr) for ctr in centers]
    groups = groups or EquivalenceGroups((tuple(range(len(centers))),))
    return Furniture(parts, poses, "chair", groups, 0, [c] * len(centers))


FRONT = Camera(np.array([0.0, -1.0, 0.0]), np.array([0.0, 0.0, 1.0]), 0.5)


def test_generation_is_bit_identical():
    a, b = generate_furniture("chair", 7), generate_furniture("chair", 7)
    assert a.parts.tobytes() == b.parts.tobytes()
    assert [p.q.tobytes() + p.t.tobytes() for p in a.gt_poses] == [p.q.tobytes() + p.t.tobytes() for p in b.gt_poses]
    assert a.groups == b.groups


@pytest.mark.parametrize("category", ["chair", "table"])
def test_part_counts_and_unit_diagonal(category):
    for seed in range(100):
        f = generate_furniture(category, seed)
        assert 2 <= f.n_parts <= 20
        assert aabb(f.assembled()).diagonal == pytest.approx(1.0, abs=1e-9)
        assert len(f.gt_poses) == f.n_parts == f.groups.n_parts


@pytest.mark.parametrize("category", ["chair", "table"])
def test_most_pieces_have_an_equivalence_group(category):
    has_group = [max(len(g) for g in generate_furniture(category, s).groups.groups) >= 2 for s in range(100)]
    assert np.mean(has_group) > 0.5


def test_unknown_category():
    with pytest.raises(ValueError):
        generate_furniture("sofa", 0)


def test_gt_poses_reassemble_the_shape():
    f = generate_furniture("table", 3)
    assert chamfer_distance(f.assembled(), np.concatenate(f.posed_parts())) == 0.0


def test_parts_are_canonical():
    f = generate_furniture("chair", 11)
    for p in f.parts:
        np.testing.assert_allclose(p.mean(axis=0), 0, atol=1e-12)
        var = p.var(axis=0)
        assert var[0] >= var[1] >= var[2]


# order -----------------------------------------------------------------------


def test_single_part_order():
    assert ground_truth_order(handmade([[0, 0, 0]]), FRONT).tolist() == [0]


def test_stacked_boxes_lower_first():
    f = handmade([[0, 0, 0.3], [0, 0, 0.0]], EquivalenceGroups(((0,), (1,))))
    assert ground_truth_order(f, FRONT).tolist() == [1, 0]


def test_group_members_farthest_first():
    # FRONT looks along +y, so larger y is farther away
    f = handmade([[0.2, 0.1, 0], [0.0, 0.3, 0], [-0.2, -0.2, 0]])
    assert ground_truth_order(f, FRONT).tolist() == [1, 0, 2]


def test_ties_broken_by_index():
    f = handmade([[0.2, 0.0, 0], [-0.2, 0.0, 0]])
    assert ground_truth_order(f, FRONT).tolist() == [0, 1]


def test_table_legs_before_top_and_far_legs_first():
    cam = default_camera()
    for seed in range(40):
        f = generate_furniture("table", seed)
        order = ground_truth_order(f, cam)
        posed = f.posed_parts()
        min_z = posed[:, :, 2].min(axis=1)
        top = int(np.argmax(posed[:, :, 2].max(axis=1)))
        legs = [g for g in f.groups.groups if len(g) >= 3 and np.allclose(min_z[list(g)], min_z.min())]
        if not legs:
            continue
        step = {p: j for j, p in enumerate(order)}
        assert all(step[i] < step[top] for i in legs[0])
        depth = np.round(cam.depth(posed.mean(axis=1)), 9)
        leg_steps = sorted(legs[0], key=lambda i: step[i])
        assert all(depth[a] >= depth[b] for a, b in zip(leg_steps, leg_steps[1:]))


def test_order_is_permutation():
    for seed in range(20):
        s = make_sample("chair", seed)
        assert sorted(s.gt_order.tolist()) == list(range(s.n_parts))


# rendering -------------------------------------------------------------------


def test_last_step_is_full_shape():
    s = make_sample("chair", 5)
    f, cam = s.furniture, s.camera
    full = render_step(f, cam, np.arange(f.n_parts), f.n_parts)
    np.testing.assert_array_equal(render_step(f, cam, s.gt_order, f.n_parts), full)
    np.testing.assert_array_equal(s.steps[-1], full)


def test_step_bounds():
    f = generate_furniture("chair", 0)
    with pytest.raises(ValueError):
        render_step(f, default_camera(), np.arange(f.n_parts), 0)


def test_hidden_duplicate_leaves_raster_unchanged():
    f = handmade([[0, 0, 0], [0, 0, 0], [0.3, 0, 0]])
    one = render_step(f, FRONT, [0, 1, 2], 1)
    assert np.array_equal(one, render_step(f, FRONT, [0, 1, 2], 2))
    assert not np.array_equal(one, render_step(f, FRONT, [0, 2, 1], 2))


def test_inked_pixels_never_disappear():
    for seed in range(10):
        s = make_sample("table", seed)
        counts = [(st > 0).sum() for st in s.steps]
        assert counts == sorted(counts)


def test_rasters_in_unit_range_and_8bit():
    s = make_sample("chair", 2)
    for arr in (s.steps, s.diffs):
        assert arr.min() >= 0 and arr.max() <= 1
        np.testing.assert_allclose(arr * 255, np.round(arr * 255), atol=1e-9)


def test_render_is_deterministic():
    f = generate_furniture("chair", 9)
    cam = default_camera()
    o = ground_truth_order(f, cam)
    assert render_manual(f, cam, o).tobytes() == render_manual(f, cam, o).tobytes()


# difference images -------------------------------------------------------------


def test_identical_steps_give_zero_diffs():
    img = np.random.default_rng(0).uniform(size=(8, 8))
    d = diff_image([img, img, img])
    np.testing.assert_array_equal(d[0], img)
    assert not d[1:].any()


def test_single_step_diff_is_the_step():
    img = np.random.default_rng(1).uniform(size=(4, 4))
    np.testing.assert_array_equal(diff_image([img])[0], img)


def test_diff_matches_pixel_oracle():
    rng = np.random.default_rng(2)
    steps = rng.uniform(size=(5, 6, 6))
    d = diff_image(steps)
    for j in range(1, 5):
        for r in range(6):
            for c in range(6):
                assert d[j, r, c] == abs(steps[j - 1, r, c] - steps[j, r, c])


def test_diff_size_mismatch():
    with pytest.raises(ValueError):
        diff_image([np.zeros((4, 4)), np.zeros((4, 5))])


def test_camera_axes_orthogonal():
    cam = default_camera()
    assert abs(cam.view_dir @ cam.up) < 1e-9
    with pytest.raises(ValueError):
        Camera(np.array([0, 0, 1.0]), np.array([0, 0.1, 1.0]))
