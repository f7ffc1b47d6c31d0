import numpy as np
import pytest

from flexilen.data import (
    Normalizer,
    ObservationBundle,
    TrajectoryScene,
    derive_observations,
    generate_synthetic,
    load_dataset,
    load_trajnet,
    save_dataset,
    split_scenes,
)

LENGTHS = {"S": 2, "M": 6, "L": 8}


def _scenes(seed=0, n=20, **kw):
    defaults = dict(
        n_scenes=n, agents_range=(2, 4), obs_len=8, horizon=12, dt=0.4, seed=seed
    )
    defaults.update(kw)
    return generate_synthetic(**defaults)


# --------------------------------------------------------------- generation


def test_noiseless_constant_velocity_is_exactly_linear():
    scenes = _scenes(noise_sigma=0.0, motion_mix=(1.0, 0.0, 0.0))
    for scene in scenes:
        pos = scene.positions
        steps = np.diff(pos, axis=1)
        np.testing.assert_allclose(steps, np.broadcast_to(steps[:, :1, :], steps.shape), atol=1e-9)
        # one-step constant-velocity extrapolation is exact
        extrapolated = pos[:, -2, :] + steps[:, 0, :]
        np.testing.assert_allclose(extrapolated, pos[:, -1, :], atol=1e-9)


def test_generation_seeded_determinism():
    a = _scenes(seed=7)
    b = _scenes(seed=7)
    assert len(a) == len(b)
    for sa, sb in zip(a, b):
        assert sa.scene_id == sb.scene_id
        assert sa.positions.tobytes() == sb.positions.tobytes()
    c = _scenes(seed=8)
    assert any(sa.positions.tobytes() != sc.positions.tobytes() for sa, sc in zip(a, c))


def test_pure_turn_motion_lies_on_circle():
    scenes = _scenes(n=10, noise_sigma=0.0, motion_mix=(0.0, 1.0, 0.0))
    for scene in scenes:
        for agent in scene.positions:
            # fit the circle from the first three points, then check all
            chords = np.diff(agent, axis=0)
            lengths = np.linalg.norm(chords, axis=1)
            np.testing.assert_allclose(lengths, lengths[0], rtol=1e-9)
            center = _circumcenter(agent[0], agent[1], agent[2])
            radii = np.linalg.norm(agent - center, axis=1)
            np.testing.assert_allclose(radii, radii[0], rtol=1e-7)


def _circumcenter(a, b, c):
    ax, ay = a
    bx, by = b
    cx, cy = c
    d = 2 * (ax * (by - cy) + bx * (cy - ay) + cx * (ay - by))
    ux = ((ax**2 + ay**2) * (by - cy) + (bx**2 + by**2) * (cy - ay) + (cx**2 + cy**2) * (ay - by)) / d
    uy = ((ax**2 + ay**2) * (cx - bx) + (bx**2 + by**2) * (ax - cx) + (cx**2 + cy**2) * (bx - ax)) / d
    return np.array([ux, uy])


def test_repulsion_pushes_agents_apart():
    base = dict(n_scenes=1, agents_range=(2, 2), obs_len=8, horizon=12, dt=0.4, seed=3,
                noise_sigma=0.0, motion_mix=(1.0, 0.0, 0.0))
    plain = generate_synthetic(**base)[0].positions
    pushed = generate_synthetic(**base, repulsion=0.5)[0].positions
    assert not np.allclose(plain, pushed)


# ------------------------------------------------------------------- bundles


def test_truncation_suffix_identity():
    scene = _scenes(n=1)[0]
    bundle = derive_observations(scene.positions, LENGTHS, horizon=12)
    x_l, x_s = bundle.observations["L"], bundle.observations["S"]
    np.testing.assert_array_equal(x_s, x_l[:, 6:8, :])
    assert bundle.future.shape == (scene.n_agents, 12, 2)


def test_truncation_honors_short_length_set():
    scene = _scenes(n=1, obs_len=4)[0]
    bundle = derive_observations(scene.positions, {"S": 2, "M": 3, "L": 4}, horizon=12)
    assert bundle.observations["S"].shape[-2] == 2
    assert bundle.observations["M"].shape[-2] == 3
    assert bundle.observations["L"].shape[-2] == 4


def test_sliding_futures_differ_by_window_offsets():
    scene = _scenes(n=1, noise_sigma=0.0, motion_mix=(1.0, 0.0, 0.0))[0]
    bundle = derive_observations(scene.positions, LENGTHS, horizon=12, mode="sliding")
    start = scene.n_steps - 12 - 8
    for branch, h in LENGTHS.items():
        np.testing.assert_array_equal(
            bundle.observations[branch], scene.positions[:, start : start + h, :]
        )
        np.testing.assert_array_equal(
            bundle.futures[branch], scene.positions[:, start + h : start + h + 12, :]
        )
    assert not np.array_equal(bundle.futures["S"], bundle.futures["L"])


def test_bundle_rejects_scene_too_short():
    scene = _scenes(n=1, obs_len=4)[0]
    with pytest.raises(ValueError):
        derive_observations(scene.positions, LENGTHS, horizon=12)


def test_bundle_invariant_enforced():
    r = np.random.default_rng(0)
    x_l = r.normal(size=(2, 8, 2))
    bad = {"L": x_l, "M": x_l[:, :6], "S": x_l[:, -2:]}  # M is a prefix, not a suffix
    fut = r.normal(size=(2, 12, 2))
    with pytest.raises(ValueError):
        ObservationBundle(bad, {b: fut for b in bad}, "truncation")


# ------------------------------------------------------------------- loading


def test_load_trajnet_full_presence(tmp_path):
    lines = []
    for frame in range(20):
        for agent in (1, 2):
            lines.append(f"{frame * 10} {agent} {agent + frame * 0.1:.3f} {agent - frame * 0.1:.3f}")
    path = tmp_path / "scene.txt"
    path.write_text("\n".join(lines), encoding="utf-8")
    scenes = load_trajnet(path, obs_len=8, horizon=12)
    assert len(scenes) == 1
    assert scenes[0].n_agents == 2
    assert scenes[0].n_steps == 20


def test_load_trajnet_partial_presence_excluded(tmp_path):
    lines = []
    for frame in range(20):
        lines.append(f"{frame} 1 {frame * 0.5} 0.0")
        if frame < 10:
            lines.append(f"{frame} 2 0.0 {frame * 0.5}")
    path = tmp_path / "partial.txt"
    path.write_text("\n".join(lines), encoding="utf-8")
    scenes = load_trajnet(path, obs_len=8, horizon=12)
    assert len(scenes) == 1
    assert scenes[0].n_agents == 1


def test_load_trajnet_malformed_row_names_line(tmp_path):
    path = tmp_path / "bad.txt"
    path.write_text("0 1 0.0 0.0\n1 1 oops 0.0\n", encoding="utf-8")
    with pytest.raises(ValueError, match="bad.txt:2"):
        load_trajnet(path, obs_len=1, horizon=1)


def test_load_trajnet_empty_file(tmp_path):
    path = tmp_path / "empty.txt"
    path.write_text("", encoding="utf-8")
    with pytest.raises(ValueError, match="empty"):
        load_trajnet(path, obs_len=1, horizon=1)


# ------------------------------------------------------------- normalization


def test_normalize_round_trip_identity():
    scenes = _scenes(n=5)
    norm = Normalizer(horizon=12).fit(scenes)
    for scene in scenes:
        transformed, shift = norm.transform(scene)
        restored = norm.inverse(transformed.positions, shift)
        np.testing.assert_allclose(restored, scene.positions, atol=1e-12)


def test_normalize_train_stats_reused():
    train = _scenes(n=5, seed=1)
    test = _scenes(n=5, seed=2)
    norm = Normalizer(horizon=12).fit(train)
    scale = norm.stats.scale
    norm.transform(test[0])
    assert norm.stats.scale == scale


def test_zero_centered_scene_untranslated():
    scene = _scenes(n=1)[0]
    shift0 = scene.positions[:, -13, :].mean(axis=0)
    centered = TrajectoryScene(scene.positions - shift0, scene.dt, scene.scene_id)
    norm = Normalizer(horizon=12).fit([centered])
    transformed, shift = norm.transform(centered)
    np.testing.assert_allclose(shift, np.zeros(2), atol=1e-12)
    np.testing.assert_allclose(
        transformed.positions, centered.positions / norm.stats.scale, atol=1e-12
    )


# -------------------------------------------------------------------- splits


def test_split_disjoint_and_deterministic():
    scenes = _scenes(n=200)
    split_a = split_scenes(scenes)
    split_b = split_scenes(scenes)
    ids = lambda part: [s.scene_id for s in part]
    assert ids(split_a.train) == ids(split_b.train)
    all_ids = set(ids(split_a.train)) | set(ids(split_a.val)) | set(ids(split_a.test))
    assert len(all_ids) == 200
    assert not (set(ids(split_a.train)) & set(ids(split_a.test)))
    assert len(split_a.train) > len(split_a.val) > 0
    assert len(split_a.test) > 0


# ----------------------------------------------------------------- export/io


def test_dataset_save_load_round_trip(tmp_path):
    scenes = _scenes(n=4)
    save_dataset(tmp_path, scenes, {"seed": 0, "dt": 0.4, "motion_mix": [0.6, 0.25, 0.15]})
    loaded, manifest = load_dataset(tmp_path)
    assert manifest["seed"] == 0
    assert len(loaded) == 4
    for a, b in zip(scenes, loaded):
        assert a.scene_id == b.scene_id
        assert a.positions.tobytes() == b.positions.tobytes()


def test_dataset_export_byte_identical(tmp_path):
    for sub in ("a", "b"):
        save_dataset(tmp_path / sub, _scenes(n=3, seed=5), {"seed": 5})
    assert (tmp_path / "a/dataset.bin").read_bytes() == (tmp_path / "b/dataset.bin").read_bytes()
    assert (tmp_path / "a/dataset.json").read_text() == (tmp_path / "b/dataset.json").read_text()
