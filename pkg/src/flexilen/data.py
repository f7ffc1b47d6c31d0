"""Scene generation, file ingestion, observation bundles, and normalization.

Synthetic scenes mix constant-velocity, constant-turn-rate, and stop-and-go
agents with optional process noise and pairwise soft repulsion. Real data is
ingested from the plain-text "frame agent x y" convention. Multi-length
observation bundles are derived by truncation (shared future, suffix-aligned
windows) or by sliding windows (each length gets its own future).
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import DataConfig


@dataclass
class TrajectoryScene:
    """One multi-agent episode: positions (N, steps, 2) in meters."""

    positions: np.ndarray
    dt: float
    scene_id: str

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64)
        if self.positions.ndim != 3 or self.positions.shape[-1] != 2:
            raise ValueError(f"positions must be (N, steps, 2), got {self.positions.shape}")
        if self.positions.shape[0] < 1:
            raise ValueError("scene needs at least one agent")
        if not np.all(np.isfinite(self.positions)):
            raise ValueError(f"scene {self.scene_id}: non-finite positions")

    @property
    def n_agents(self) -> int:
        return self.positions.shape[0]

    @property
    def n_steps(self) -> int:
        return self.positions.shape[1]


@dataclass
class ObservationBundle:
    """Aligned multi-length observations of one scene plus the future(s).

    In truncation mode the three windows are suffixes of each other and share
    one future; in sliding mode each window carries its own future.
    """

    observations: dict[str, np.ndarray]  # branch id -> (..., H_branch, 2)
    futures: dict[str, np.ndarray]       # branch id -> (..., T, 2)
    mode: str

    def __post_init__(self):
        if self.mode == "truncation":
            x_l, x_m, x_s = (self.observations[b] for b in ("L", "M", "S"))
            if not np.array_equal(x_m, x_l[..., -x_m.shape[-2]:, :]):
                raise ValueError("truncation bundle: X^M must be the suffix of X^L")
            if not np.array_equal(x_s, x_m[..., -x_s.shape[-2]:, :]):
                raise ValueError("truncation bundle: X^S must be the suffix of X^M")
            futs = list(self.futures.values())
            if any(f is not futs[0] and not np.array_equal(f, futs[0]) for f in futs):
                raise ValueError("truncation bundle: all branches must share one future")

    @property
    def future(self) -> np.ndarray:
        return self.futures["L"]


# ----------------------------------------------------------------- synthesis

_MOTION_KINDS = ("cv", "turn", "stopgo")


def _simulate_agents(
    rng: np.random.Generator,
    n_agents: int,
    n_steps: int,
    dt: float,
    motion_mix: tuple[float, float, float],
    noise_sigma: float,
    repulsion: float,
) -> np.ndarray:
    mix = np.asarray(motion_mix, dtype=np.float64)
    mix = mix / mix.sum()
    kinds = rng.choice(3, size=n_agents, p=mix)
    pos = rng.uniform(-10.0, 10.0, size=(n_agents, 2))
    heading = rng.uniform(0.0, 2 * np.pi, size=n_agents)
    speed = rng.uniform(0.4, 1.6, size=n_agents)
    omega = np.where(kinds == 1, rng.uniform(0.2, 1.0, size=n_agents) * rng.choice([-1.0, 1.0], size=n_agents), 0.0)

    # stop-and-go phase schedule: speed multiplier per step
    gate = np.ones((n_agents, n_steps))
    for agent in range(n_agents):
        if kinds[agent] != 2:
            continue
        t = int(rng.integers(2, 6))
        stopped = True
        while t < n_steps:
            span = int(rng.integers(2, 6)) if stopped else int(rng.integers(3, 8))
            if stopped:
                gate[agent, t : t + span] = 0.0
            stopped = not stopped
            t += span

    noise = rng.normal(0.0, noise_sigma, size=(n_steps - 1, n_agents, 2)) if noise_sigma > 0 else None

    out = np.empty((n_agents, n_steps, 2))
    out[:, 0] = pos
    for step in range(1, n_steps):
        v = speed * gate[:, step]
        dtheta = omega * dt
        # exact arc increment (reduces to a straight step when omega == 0)
        radius = np.where(omega != 0.0, v / np.where(omega != 0.0, omega, 1.0), 0.0)
        seg = np.empty((n_agents, 2))
        straight = omega == 0.0
        seg[straight, 0] = (v * dt * np.cos(heading))[straight]
        seg[straight, 1] = (v * dt * np.sin(heading))[straight]
        curved = ~straight
        seg[curved, 0] = (radius * (np.sin(heading + dtheta) - np.sin(heading)))[curved]
        seg[curved, 1] = (radius * (-np.cos(heading + dtheta) + np.cos(heading)))[curved]
        if repulsion > 0 and n_agents > 1:
            delta = pos[:, None, :] - pos[None, :, :]
            dist_sq = np.sum(delta * delta, axis=-1) + 1e-6
            np.fill_diagonal(dist_sq, np.inf)
            seg = seg + repulsion * np.sum(delta / dist_sq[..., None], axis=1) * dt
        pos = pos + seg
        if noise is not None:
            pos = pos + noise[step - 1]
        heading = heading + dtheta
        out[:, step] = pos
    return out


def generate_synthetic(
    n_scenes: int,
    agents_range: tuple[int, int],
    obs_len: int,
    horizon: int,
    dt: float,
    motion_mix: tuple[float, float, float] = (0.6, 0.25, 0.15),
    noise_sigma: float = 0.02,
    repulsion: float = 0.0,
    seed: int = 0,
) -> list[TrajectoryScene]:
    """Seeded scene synthesis; identical configs produce identical datasets."""
    if n_scenes < 1 or obs_len < 1 or horizon < 1:
        raise ValueError("counts must be positive")
    lo, hi = agents_range
    rng = np.random.default_rng([seed, 3])
    n_steps = obs_len + horizon
    scenes = []
    for index in range(n_scenes):
        n_agents = int(rng.integers(lo, hi + 1))
        positions = _simulate_agents(rng, n_agents, n_steps, dt, motion_mix, noise_sigma, repulsion)
        scenes.append(TrajectoryScene(positions, dt, f"syn-{index:06d}"))
    return scenes


def generate_from_config(cfg: DataConfig, seed: int) -> list[TrajectoryScene]:
    return generate_synthetic(
        cfg.n_scenes,
        (cfg.agents_min, cfg.agents_max),
        cfg.obs_len,
        cfg.horizon,
        cfg.dt,
        cfg.motion_mix,
        cfg.noise_sigma,
        cfg.repulsion,
        seed,
    )


# ------------------------------------------------------------------- bundles


def derive_observations(
    scene_positions: np.ndarray,
    lengths: dict[str, int],
    horizon: int,
    mode: str = "truncation",
) -> ObservationBundle:
    """Split one scene into the three-length observation views.

    truncation: every branch sees the last H steps before the shared future.
    sliding: windows start together and end at staggered offsets, each with
    its own future of the same horizon.
    """
    positions = np.asarray(scene_positions, dtype=np.float64)
    h_l = lengths["L"]
    if positions.shape[-2] < h_l + horizon:
        raise ValueError(
            f"scene too short: {positions.shape[-2]} steps < H^L + T = {h_l + horizon}"
        )
    if mode == "truncation":
        obs_end = positions.shape[-2] - horizon
        future = positions[..., obs_end:, :]
        observations = {
            branch: positions[..., obs_end - h : obs_end, :] for branch, h in lengths.items()
        }
        return ObservationBundle(observations, {b: future for b in lengths}, mode)
    if mode == "sliding":
        start = positions.shape[-2] - horizon - h_l
        observations, futures = {}, {}
        for branch, h in lengths.items():
            end = start + h
            observations[branch] = positions[..., start:end, :]
            futures[branch] = positions[..., end : end + horizon, :]
        return ObservationBundle(observations, futures, mode)
    raise ValueError(f"unknown derivation mode {mode!r}")


# ------------------------------------------------------------------ loading


def load_trajnet(path: str | Path, obs_len: int, horizon: int, dt: float = 0.4) -> list[TrajectoryScene]:
    """Read whitespace rows of ``frame agent x y`` into fixed-length scenes.

    Consecutive frames are chunked into non-overlapping windows of
    obs_len + horizon; agents present in every frame of a window form one
    scene, others are skipped.
    """
    path = Path(path)
    rows: dict[float, dict[float, tuple[float, float]]] = {}
    text = path.read_text(encoding="utf-8")
    count = 0
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped:
            continue
        parts = stripped.split()
        if len(parts) < 4:
            raise ValueError(f"{path}:{lineno}: expected 'frame agent x y', got {stripped!r}")
        try:
            frame, agent, x, y = (float(p) for p in parts[:4])
        except ValueError as exc:
            raise ValueError(f"{path}:{lineno}: non-numeric field ({exc})") from exc
        rows.setdefault(frame, {})[agent] = (x, y)
        count += 1
    if count == 0:
        raise ValueError(f"{path}: empty file")

    frames = sorted(rows)
    window = obs_len + horizon
    scenes = []
    for chunk_index in range(len(frames) // window):
        chunk = frames[chunk_index * window : (chunk_index + 1) * window]
        present = set(rows[chunk[0]])
        for frame in chunk[1:]:
            present &= set(rows[frame])
        if not present:
            continue
        agents = sorted(present)
        positions = np.array([[rows[frame][agent] for frame in chunk] for agent in agents])
        scenes.append(TrajectoryScene(positions, dt, f"{path.stem}-{chunk_index:04d}"))
    return scenes


# ------------------------------------------------------------- normalization


@dataclass
class NormStats:
    scale: float


@dataclass
class Normalizer:
    """Per-scene translation to the centroid's last observed position plus a
    global scale fit on the training split only."""

    horizon: int
    stats: NormStats | None = None

    def _shift(self, scene: TrajectoryScene) -> np.ndarray:
        return scene.positions[:, -self.horizon - 1, :].mean(axis=0)

    def fit(self, scenes: list[TrajectoryScene]) -> "Normalizer":
        gathered = []
        for scene in scenes:
            gathered.append(scene.positions - self._shift(scene))
        flat = np.concatenate([g.reshape(-1) for g in gathered])
        scale = float(np.std(flat))
        self.stats = NormStats(scale=scale if scale > 0 else 1.0)
        return self

    def transform(self, scene: TrajectoryScene) -> tuple[TrajectoryScene, np.ndarray]:
        if self.stats is None:
            raise ValueError("normalizer must be fit before transform")
        shift = self._shift(scene)
        positions = (scene.positions - shift) / self.stats.scale
        return TrajectoryScene(positions, scene.dt, scene.scene_id), shift

    def inverse(self, positions: np.ndarray, shift: np.ndarray) -> np.ndarray:
        if self.stats is None:
            raise ValueError("normalizer must be fit before inverse")
        return positions * self.stats.scale + shift


# -------------------------------------------------------------------- splits


@dataclass
class DatasetSplit:
    train: list[TrajectoryScene] = field(default_factory=list)
    val: list[TrajectoryScene] = field(default_factory=list)
    test: list[TrajectoryScene] = field(default_factory=list)


def _id_bucket(scene_id: str) -> float:
    digest = hashlib.md5(scene_id.encode("utf-8")).hexdigest()
    return int(digest[:8], 16) / 0xFFFFFFFF


def split_scenes(
    scenes: list[TrajectoryScene], train_frac: float = 0.7, val_frac: float = 0.15
) -> DatasetSplit:
    """Deterministic, leakage-free split by scene-id hash."""
    split = DatasetSplit()
    for scene in scenes:
        bucket = _id_bucket(scene.scene_id)
        if bucket < train_frac:
            split.train.append(scene)
        elif bucket < train_frac + val_frac:
            split.val.append(scene)
        else:
            split.test.append(scene)
    return split


# ---------------------------------------------------------------- export/io


DATASET_FORMAT_VERSION = 1


def save_dataset(out_dir: str | Path, scenes: list[TrajectoryScene], meta: dict) -> None:
    """JSON manifest plus a flat little-endian float64 coordinate payload."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = {
        "format_version": DATASET_FORMAT_VERSION,
        **meta,
        "scenes": [],
    }
    offset = 0
    chunks = []
    for scene in scenes:
        size = scene.positions.size
        manifest["scenes"].append(
            {
                "id": scene.scene_id,
                "agents": scene.n_agents,
                "steps": scene.n_steps,
                "dt": scene.dt,
                "offset": offset,
            }
        )
        chunks.append(scene.positions.astype("<f8").tobytes())
        offset += size
    tmp_json = out_dir / "dataset.json.tmp"
    tmp_bin = out_dir / "dataset.bin.tmp"
    tmp_json.write_text(json.dumps(manifest, indent=2, sort_keys=True), encoding="utf-8")
    tmp_bin.write_bytes(b"".join(chunks))
    tmp_json.replace(out_dir / "dataset.json")
    tmp_bin.replace(out_dir / "dataset.bin")


def load_dataset(in_dir: str | Path) -> tuple[list[TrajectoryScene], dict]:
    in_dir = Path(in_dir)
    manifest = json.loads((in_dir / "dataset.json").read_text(encoding="utf-8"))
    if manifest.get("format_version") != DATASET_FORMAT_VERSION:
        raise ValueError(f"unsupported dataset format version {manifest.get('format_version')}")
    payload = np.frombuffer((in_dir / "dataset.bin").read_bytes(), dtype="<f8")
    scenes = []
    for entry in manifest["scenes"]:
        size = entry["agents"] * entry["steps"] * 2
        block = payload[entry["offset"] : entry["offset"] + size]
        positions = block.reshape(entry["agents"], entry["steps"], 2).astype(np.float64)
        scenes.append(TrajectoryScene(positions, entry["dt"], entry["id"]))
    return scenes, manifest
