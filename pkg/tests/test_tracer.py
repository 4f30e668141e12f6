import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from raycal.constants import SPEED_OF_LIGHT
from raycal.geometry import MeshBuilder, Scene, mirror
from raycal.tracer import (TraceConfig, exhaustive_candidates, load_path_cache, refine_all, refine_specular,
                           save_path_cache, sbr_candidates, trace_all, trace_diffuse, trace_los)


def empty_scene():
    return Scene(np.zeros((0, 3)), np.zeros((0, 3), int), np.zeros(0, int), [])


def floor(size=50.0):
    mb = MeshBuilder()
    mb.material("Floor", "embedding")
    mb.quad((-size, -size, 0), (size, -size, 0), (size, size, 0), (-size, size, 0), "Floor")
    return mb.build()


def parallel_walls(gap=4.0, length=40.0):
    mb = MeshBuilder()
    mb.material("Wall", "embedding")
    for y in (0.0, gap):
        mb.quad((-length, y, -5), (length, y, -5), (length, y, 5), (-length, y, 5), "Wall")
    return mb.build()


def room(seed):
    rng = np.random.default_rng(seed)
    mb = MeshBuilder()
    mb.material("M", "embedding")
    L = rng.uniform([4, 3, 2.5], [10, 8, 4])
    mb.box((0, 0, 0), tuple(L), "M")
    for _ in range(int(rng.integers(2, 8))):
        c = rng.uniform(0.2 * L, 0.8 * L)
        u, v = rng.normal(size=3), rng.normal(size=3)
        u *= rng.uniform(0.5, 1.5) / np.linalg.norm(u)
        v -= u * (u @ v) / (u @ u)
        v *= rng.uniform(0.5, 1.5) / np.linalg.norm(v)
        mb.quad(c - u - v, c + u - v, c + u + v, c - u + v, "M")
    return mb.build(), rng.uniform(0.1 * L, 0.9 * L), rng.uniform(0.1 * L, 0.9 * L)


def test_los_empty_scene():
    p = trace_los(empty_scene(), [0, 0, 0], [3, 4, 0])
    assert p.order == 0 and p.length == pytest.approx(5.0)


def test_los_blocked_by_wall():
    mb = MeshBuilder()
    mb.material("W", "embedding")
    mb.quad((1, -5, -5), (1, 5, -5), (1, 5, 5), (1, -5, 5), "W")
    assert trace_los(mb.build(), [0, 0, 0], [2, 0, 0]) is None


def test_los_over_floor():
    p = trace_los(floor(), [0, 0, 1], [0, 10, 1])
    assert p.length == pytest.approx(10.0)
    assert p.delay == pytest.approx(10.0 / 299_792_458.0, rel=1e-15)
    assert SPEED_OF_LIGHT == 299_792_458.0


def test_sbr_lone_floor():
    scene = floor()
    cands = sbr_candidates(scene, [0, 0, 1], 1, 2000, 0)
    assert {(0,), (1,)} <= cands


def test_sbr_parallel_walls_alternate():
    cands = sbr_candidates(parallel_walls(), [0, 2, 0], 2, 5000, 0)
    twos = {c for c in cands if len(c) == 2}
    assert twos and all((c[0] < 2) != (c[1] < 2) for c in twos)


def test_sbr_zero_rays_warns():
    with pytest.warns(RuntimeWarning):
        assert sbr_candidates(floor(), [0, 0, 1], 1, 0, 0) == set()


def test_refine_single_bounce():
    p = refine_specular(floor(), [0, 0, 1], [2, 0, 1], (0,)) or refine_specular(floor(), [0, 0, 1], [2, 0, 1], (1,))
    assert p is not None
    np.testing.assert_allclose(p.interactions[0].point, [1, 0, 0], atol=1e-12)
    np.testing.assert_allclose(p.segment_lengths, [np.sqrt(2), np.sqrt(2)], rtol=1e-12)


def test_refine_outside_triangle_is_rejected():
    mb = MeshBuilder()
    mb.material("F", "embedding")
    mb.quad((5, 5, 0), (6, 5, 0), (6, 6, 0), (5, 6, 0), "F")
    scene = mb.build()
    assert refine_specular(scene, [0, 0, 1], [2, 0, 1], (0,)) is None
    assert refine_specular(scene, [0, 0, 1], [2, 0, 1], (1,)) is None


def test_unfolding_two_parallel_mirrors():
    scene = parallel_walls()
    tx, rx = np.array([0.0, 1.0, 0.0]), np.array([6.0, 3.0, 0.5])
    paths = [p for p in refine_all(scene, tx, rx, exhaustive_candidates(scene, 2)) if p.order == 2]
    assert paths
    for p in paths:
        img = tx
        for tri in p.sequence:
            img = mirror(img, scene, tri)
        assert abs(p.length - np.linalg.norm(rx - img)) <= 1e-9


def test_specular_law_and_coplanarity():
    scene, tx, rx = room(3)
    for p in trace_all(scene, tx, rx, TraceConfig(max_order=3, ray_count=20000)).paths:
        for it in p.interactions:
            n = it.normal
            assert it.k_out @ n == pytest.approx(-(it.k_in @ n), abs=1e-9)
            assert abs(np.dot(np.cross(it.k_in, it.k_out), n)) <= 1e-9
            assert it.cos_incidence > 0


def test_segment_lengths_and_delay():
    scene, tx, rx = room(5)
    for p in trace_all(scene, tx, rx, TraceConfig(max_order=2, ray_count=5000, diffuse_samples=20)).paths:
        pts = p.points
        np.testing.assert_allclose(p.segment_lengths, np.linalg.norm(np.diff(pts, axis=0), axis=1), atol=1e-9)
        assert p.delay == pytest.approx(p.length / SPEED_OF_LIGHT)
        kinds = p.kinds
        assert "diffuse" not in kinds[:-1]


def test_diffuse_unit_square():
    mb = MeshBuilder()
    mb.material("F", "embedding")
    mb.quad((-0.5, -0.5, 0), (0.5, -0.5, 0), (0.5, 0.5, 0), (-0.5, 0.5, 0), "F")
    scene = mb.build()
    paths = trace_diffuse(scene, [0, 0, 3], [4, 0, 3], 1, 0)
    assert len(paths) == 1
    p = paths[0]
    assert p.interactions[0].dA == pytest.approx(1.0)
    s = p.interactions[0].point
    assert p.segment_lengths[0] == pytest.approx(np.linalg.norm(s - [0, 0, 3]))
    assert trace_diffuse(scene, [0, 0, 3], [4, 0, 3], 0, 0) == []


def test_diffuse_behind_occluder_excluded():
    mb = MeshBuilder()
    mb.material("F", "embedding")
    mb.quad((-1, -1, 0), (1, -1, 0), (1, 1, 0), (-1, 1, 0), "F")
    mb.quad((-3, -3, 1), (3, -3, 1), (3, 3, 1), (-3, 3, 1), "F")  # lid between floor and tx
    scene = mb.build()
    paths = trace_diffuse(scene, [0, 0, 3], [0.5, 0, 3], 50, 0)
    assert all(p.interactions[0].triangle_id >= 2 for p in paths)


def test_trace_all_empty_and_two_ray():
    ps = trace_all(empty_scene(), [0, 0, 0], [1, 1, 1])
    assert len(ps) == 1 and ps.paths[0].order == 0
    ps = trace_all(floor(), [0, 0, 2], [10, 0, 1.5], TraceConfig(max_order=1, ray_count=4000))
    assert sorted(p.order for p in ps) == [0, 1]
    refl = [p for p in ps if p.order == 1][0]
    assert refl.length == pytest.approx(np.hypot(10, 3.5), rel=1e-12)


def test_trace_all_deterministic():
    scene, tx, rx = room(1)
    cfg = TraceConfig(max_order=2, ray_count=3000, diffuse_samples=30, seed=4)
    a, b = trace_all(scene, tx, rx, cfg), trace_all(scene, tx, rx, cfg)
    assert [p.key() for p in a] == [p.key() for p in b]


def test_no_duplicate_chains():
    scene, tx, rx = room(2)
    ps = trace_all(scene, tx, rx, TraceConfig(max_order=3, ray_count=20000))
    seqs = [p.sequence for p in ps if not p.is_diffuse]
    assert len(seqs) == len(set(seqs))


def test_coplanar_edge_reflection_counted_once():
    mb = MeshBuilder()
    mb.material("F", "embedding")
    mb.quad((0, 0, 0), (2, 0, 0), (2, 2, 0), (0, 2, 0), "F")
    # symmetric tx/rx put the bounce exactly on the shared diagonal
    ps = trace_all(mb.build(), [0.5, 0.5, 1], [1.5, 1.5, 1], TraceConfig(max_order=1, exhaustive=True))
    assert sum(p.order == 1 for p in ps) == 1


@settings(max_examples=5, deadline=None)
@given(seed=st.integers(0, 1000))
def test_monotone_in_order(seed):
    scene, tx, rx = room(seed)
    prev = set()
    for k in (1, 2, 3):
        cur = trace_all(scene, tx, rx, TraceConfig(max_order=k, exhaustive=True)).specular_sequences()
        assert prev <= cur
        prev = cur


def test_sbr_matches_exhaustive_on_rooms():
    for seed in range(4):
        scene, tx, rx = room(seed)
        ex = {p.sequence for p in refine_all(scene, tx, rx, exhaustive_candidates(scene, 3))}
        sbr = {p.sequence for p in refine_all(scene, tx, rx, sbr_candidates(scene, tx, 3, 100_000, seed))}
        assert ex == sbr


def test_path_cache_round_trip(tmp_path):
    scene, tx, rx = room(0)
    ps = trace_all(scene, tx, rx, TraceConfig(max_order=2, ray_count=3000, diffuse_samples=10))
    save_path_cache([ps], tmp_path / "paths.json")
    back = load_path_cache(tmp_path / "paths.json")[0]
    assert back.config == ps.config
    assert [p.key() for p in back] == [p.key() for p in ps]
    for a, b in zip(back, ps):
        np.testing.assert_array_equal(a.segment_lengths, b.segment_lengths)


def test_trace_config_strict():
    with pytest.raises(ValueError):
        TraceConfig.from_dict({"max_order": 2, "rays": 10})


def test_inside_geometry_permitted():
    mb = MeshBuilder()
    mb.material("M", "embedding")
    mb.box((0, 0, 0), (1, 1, 1), "M")
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        ps = trace_all(mb.build(), [0.5, 0.5, 0.5], [5, 5, 5], TraceConfig(max_order=1, ray_count=500))
    assert all(p.order >= 0 for p in ps)
