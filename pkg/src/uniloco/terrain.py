"""Procedural benchmark terrains with level-based curriculum sampling.

Six single terrains (flat, uneven, stair, gap, bridge, parkour), four
composite "unseen" terrains (gap_bridge, slope_bridge, wave_gap,
wave_bridge) and four multi-stage concatenations (stage1..stage4).
Heightfields are rectangular grids of heights in meters; gaps and
off-bridge void are carried both as a walkable mask and as a -1 m
sentinel depth in the egocentric scan.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field as dc_field

import numpy as np

__all__ = [
    "ParamRange",
    "TerrainSpec",
    "HeightField",
    "EpisodeOutcome",
    "KINDS",
    "SINGLE_KINDS",
    "UNSEEN_KINDS",
    "sample_curriculum_param",
    "generate_heightfield",
    "add_base_roughness",
    "egocentric_scan",
    "episode_metrics",
    "SCAN_X",
    "SCAN_Y",
    "SCAN_SIZE",
    "VOID_SENTINEL",
]

SINGLE_KINDS = ("flat", "uneven", "stair", "gap", "bridge", "parkour")
UNSEEN_KINDS = ("gap_bridge", "slope_bridge", "wave_gap", "wave_bridge")
STAGE_KINDS = ("stage1", "stage2", "stage3", "stage4")
KINDS = SINGLE_KINDS + UNSEEN_KINDS + STAGE_KINDS

STAGE_SEGMENTS = {
    "stage1": ("parkour", "stair"),
    "stage2": ("parkour", "stair", "bridge"),
    "stage3": ("parkour", "stair", "bridge", "uneven"),
    "stage4": ("parkour", "stair", "bridge", "uneven", "gap"),
}

# Egocentric scan layout: 36 longitudinal x 11 lateral samples over
# [-0.4, +3.1] m x [-0.5, +0.5] m in the yaw-rotated robot frame,
# row-major (longitudinal outer). 396 values total.
SCAN_X = np.linspace(-0.4, 3.1, 36)
SCAN_Y = np.linspace(-0.5, 0.5, 11)
SCAN_SIZE = SCAN_X.size * SCAN_Y.size
VOID_SENTINEL = -1.0

VOID_DEPTH = -1.0  # stored height of non-walkable cells
GAP_CROSS_RANGE = (0.2, 0.3)  # crossing distance, no curriculum
ROUGHNESS_AMP = 0.05


@dataclass(frozen=True)
class ParamRange:
    """Curriculum endpoints. p0 > p1 means larger values are easier."""

    p0: float
    p1: float

    def __post_init__(self):
        if not (np.isfinite(self.p0) and np.isfinite(self.p1)):
            raise ValueError("parameter range endpoints must be finite")


_SINGLE_PARAMS = {
    "flat": {},
    "uneven": {
        "height_range": ParamRange(0.10, 0.20),
        "size_range": ParamRange(0.40, 0.70),
        "subsection_nums": ParamRange(150, 200),
    },
    "stair": {
        "height_range": ParamRange(0.15, 0.30),
        "size_range": ParamRange(0.40, 0.20),
        "subsection_nums": ParamRange(5, 10),
    },
    "gap": {
        "size_range": ParamRange(0.6, 0.4),
        "subsection_nums": ParamRange(5, 10),
    },
    "bridge": {
        "size_range": ParamRange(0.40, 0.20),
    },
    "parkour": {
        "height_range": ParamRange(-0.20, 0.20),
        "size_range": ParamRange(1.00, 0.80),
        "subsection_nums": ParamRange(3, 8),
        "tilt_angle": ParamRange(10, 30),
    },
}

_COMPOSITE_PARAMS = {
    "gap_bridge": {**_SINGLE_PARAMS["gap"], "bridge_size_range": ParamRange(0.40, 0.20)},
    "slope_bridge": {**_SINGLE_PARAMS["bridge"], "amplitude": ParamRange(1.5, 2.5)},
    "wave_gap": {
        **_SINGLE_PARAMS["gap"],
        "wave_nums": ParamRange(5, 10),
        "wave_amplitude": ParamRange(1.5, 2.0),
    },
    "wave_bridge": {
        **_SINGLE_PARAMS["bridge"],
        "wave_nums": ParamRange(5, 10),
        "wave_amplitude": ParamRange(1.5, 2.0),
    },
}


def default_params(kind: str) -> dict:
    if kind in _SINGLE_PARAMS:
        return dict(_SINGLE_PARAMS[kind])
    if kind in _COMPOSITE_PARAMS:
        return dict(_COMPOSITE_PARAMS[kind])
    if kind in STAGE_SEGMENTS:
        merged = {}
        for seg in STAGE_SEGMENTS[kind]:
            for name, rng_ in _SINGLE_PARAMS[seg].items():
                merged[f"{seg}.{name}"] = rng_
        return merged
    raise ValueError(f"unknown terrain kind {kind!r}")


@dataclass
class TerrainSpec:
    kind: str
    length_m: float = 18.0
    width_m: float = 4.0
    cell_m: float = 0.05
    params: dict = dc_field(default_factory=dict)
    platform_range: ParamRange = ParamRange(1.0, 0.0)
    max_terrain_level: int = 9

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown terrain kind {self.kind!r}")
        if self.length_m <= 0 or self.cell_m <= 0:
            raise ValueError("length_m and cell_m must be positive")
        if self.max_terrain_level < 1:
            raise ValueError("max_terrain_level must be >= 1")
        if not self.params:
            self.params = default_params(self.kind)
        expected = set(default_params(self.kind))
        if set(self.params) != expected:
            raise ValueError(
                f"terrain {self.kind!r} expects parameters {sorted(expected)}, got {sorted(self.params)}"
            )

    @classmethod
    def for_kind(cls, kind: str, **kwargs) -> "TerrainSpec":
        if kind in STAGE_SEGMENTS:
            kwargs.setdefault("length_m", 9.0 * len(STAGE_SEGMENTS[kind]))
        return cls(kind=kind, **kwargs)


@dataclass
class HeightField:
    """Immutable terrain grid. rows = longitudinal (x), cols = lateral (y)."""

    heights: np.ndarray
    cell_m: float
    origin: tuple = (0.0, 0.0)
    walkable: np.ndarray = None
    goal_x_m: float = None

    def __post_init__(self):
        self.heights = np.asarray(self.heights, dtype=np.float64)
        if not np.isfinite(self.heights).all():
            raise ValueError("heights must be finite everywhere")
        if self.walkable is None:
            self.walkable = np.ones(self.heights.shape, dtype=bool)
        self.walkable = np.asarray(self.walkable, dtype=bool)
        if self.walkable.shape != self.heights.shape:
            raise ValueError("walkable mask must match heights shape")
        if self.goal_x_m is None:
            self.goal_x_m = self.length_m - 0.25
        if self.goal_x_m > self.length_m:
            raise ValueError("goal_x_m beyond terrain end")

    @property
    def length_m(self) -> float:
        return self.heights.shape[0] * self.cell_m

    @property
    def width_m(self) -> float:
        return self.heights.shape[1] * self.cell_m

    def _cell_index(self, x, y):
        i = np.clip(((np.asarray(x) - self.origin[0]) / self.cell_m).astype(np.intp), 0, self.heights.shape[0] - 1)
        j = np.clip(((np.asarray(y) - self.origin[1]) / self.cell_m).astype(np.intp), 0, self.heights.shape[1] - 1)
        return i, j

    def height_at(self, x, y=None):
        """Nearest-cell height; out-of-bounds clamps to the edge cell."""
        if y is None:
            y = self.origin[1] + self.width_m / 2.0
        i, j = self._cell_index(x, y)
        return self.heights[i, j]

    def walkable_at(self, x, y=None):
        if y is None:
            y = self.origin[1] + self.width_m / 2.0
        i, j = self._cell_index(x, y)
        return self.walkable[i, j]

    # -- persistence (little-endian: magic, version u16, dims u32 x u32,
    #    cell_m f64, origin 2 x f64, row-major f32 heights, bit-packed mask)

    MAGIC = b"HFLD"
    VERSION = 1

    def save(self, path):
        rows, cols = self.heights.shape
        with open(path, "wb") as f:
            f.write(self.MAGIC)
            f.write(struct.pack("<H", self.VERSION))
            f.write(struct.pack("<II", rows, cols))
            f.write(struct.pack("<d", self.cell_m))
            f.write(struct.pack("<dd", *self.origin))
            f.write(self.heights.astype("<f4").tobytes())
            f.write(np.packbits(self.walkable.reshape(-1)).tobytes())

    @classmethod
    def load(cls, path) -> "HeightField":
        with open(path, "rb") as f:
            raw = f.read()
        if raw[:4] != cls.MAGIC:
            raise ValueError(f"{path}: bad heightfield magic {raw[:4]!r}")
        (version,) = struct.unpack_from("<H", raw, 4)
        if version != cls.VERSION:
            raise ValueError(f"{path}: unsupported heightfield version {version}")
        rows, cols = struct.unpack_from("<II", raw, 6)
        (cell_m,) = struct.unpack_from("<d", raw, 14)
        origin = struct.unpack_from("<dd", raw, 22)
        off = 38
        n = rows * cols
        end = off + 4 * n
        mask_bytes = (n + 7) // 8
        if len(raw) != end + mask_bytes:
            raise ValueError(f"{path}: truncated payload at offset {min(len(raw), end)}")
        heights = np.frombuffer(raw[off:end], dtype="<f4").astype(np.float64).reshape(rows, cols)
        mask = np.unpackbits(np.frombuffer(raw[end:], dtype=np.uint8))[:n].astype(bool).reshape(rows, cols)
        return cls(heights=heights, cell_m=cell_m, origin=origin, walkable=mask)


@dataclass
class EpisodeOutcome:
    success: bool
    distance_m: float
    terrain_length_m: float
    fall: bool = False
    timeout: bool = False

    @property
    def completion(self) -> float:
        if self.success:
            return 1.0
        return float(np.clip(self.distance_m / self.terrain_length_m, 0.0, 1.0))


# -- curriculum ----------------------------------------------------------------


def sample_curriculum_param(prange: ParamRange, difficulty: int, max_level: int, rng) -> float:
    """Level-interpolated draw: p0 + uniform over [0, c] (or [c, 0] when the
    range decreases), with c = (p1 - p0) / max_level * difficulty."""
    if max_level < 1:
        raise ValueError("max_level must be >= 1")
    if not 0 <= difficulty <= max_level:
        raise ValueError(f"difficulty {difficulty} outside [0, {max_level}]")
    c = (prange.p1 - prange.p0) / max_level * difficulty
    u = rng.uniform(min(0.0, c), max(0.0, c))
    return prange.p0 + u


def _sample(spec: TerrainSpec, name: str, difficulty: int, rng, prefix: str = "") -> float:
    return sample_curriculum_param(spec.params[prefix + name], difficulty, spec.max_terrain_level, rng)


def _sample_count(spec, name, difficulty, rng, prefix="") -> int:
    return int(round(_sample(spec, name, difficulty, rng, prefix)))


# -- generators ----------------------------------------------------------------


def _grid(spec: TerrainSpec):
    rows = int(round(spec.length_m / spec.cell_m))
    cols = int(round(spec.width_m / spec.cell_m))
    return np.zeros((rows, cols)), np.ones((rows, cols), dtype=bool)


def _rows(spec, meters: float) -> int:
    return max(1, int(round(meters / spec.cell_m)))


def _gen_flat(spec, difficulty, rng, prefix=""):
    return _grid(spec)


def _gen_uneven(spec, difficulty, rng, prefix=""):
    h, mask = _grid(spec)
    rows, cols = h.shape
    n = _sample_count(spec, "subsection_nums", difficulty, rng, prefix)
    start = _rows(spec, 1.0)  # spawn platform stays flat
    for _ in range(n):
        size = _sample(spec, "size_range", difficulty, rng, prefix)
        amp = _sample(spec, "height_range", difficulty, rng, prefix)
        sign = 1.0 if rng.random() < 0.5 else -1.0
        half = max(1, int(round(size / spec.cell_m / 2)))
        ci = rng.integers(start, rows)
        cj = rng.integers(0, cols)
        h[max(0, ci - half) : ci + half, max(0, cj - half) : cj + half] = sign * amp
    h[:start] = 0.0
    return h, mask


def _gen_stair(spec, difficulty, rng, prefix=""):
    h, mask = _grid(spec)
    n = _sample_count(spec, "subsection_nums", difficulty, rng, prefix)
    r = _rows(spec, 2.0)
    z = 0.0
    for _ in range(n):
        step_h = _sample(spec, "height_range", difficulty, rng, prefix)
        run = _sample(spec, "size_range", difficulty, rng, prefix)
        z += step_h
        nr = _rows(spec, run)
        h[r : r + nr] = z
        r += nr
        if r >= h.shape[0]:
            break
    h[r:] = z
    return h, mask


def _gen_gap(spec, difficulty, rng, prefix=""):
    h, mask = _grid(spec)
    n = _sample_count(spec, "subsection_nums", difficulty, rng, prefix)
    r = _rows(spec, 2.0)
    last = h.shape[0] - _rows(spec, 1.0)
    for _ in range(n):
        gap = rng.uniform(*GAP_CROSS_RANGE)
        platform = _sample(spec, "size_range", difficulty, rng, prefix)
        gr = _rows(spec, gap)
        if r + gr >= last:
            break
        h[r : r + gr] = VOID_DEPTH
        mask[r : r + gr] = False
        r += gr + _rows(spec, platform)
    return h, mask


def _bridge_strip(spec, difficulty, rng, h, mask, width_key="size_range", prefix=""):
    strip = _sample(spec, width_key, difficulty, rng, prefix)
    cols = h.shape[1]
    cj = cols // 2
    half = max(1, int(round(strip / spec.cell_m / 2)))
    r0 = _rows(spec, 2.0)
    r1 = h.shape[0] - _rows(spec, 1.0)
    off = np.ones(cols, dtype=bool)
    off[max(0, cj - half) : cj + half] = False
    h[r0:r1, off] = VOID_DEPTH
    mask[r0:r1, off] = False
    return h, mask


def _gen_bridge(spec, difficulty, rng, prefix=""):
    h, mask = _grid(spec)
    return _bridge_strip(spec, difficulty, rng, h, mask, prefix=prefix)


def _gen_parkour(spec, difficulty, rng, prefix=""):
    h, mask = _grid(spec)
    rows, cols = h.shape
    n = _sample_count(spec, "subsection_nums", difficulty, rng, prefix)
    hr = spec.params[prefix + "height_range"]
    r = _rows(spec, 2.0)
    last = rows - _rows(spec, 1.0)
    y = (np.arange(cols) - cols / 2.0) * spec.cell_m
    for _ in range(n):
        size = _sample(spec, "size_range", difficulty, rng, prefix)
        block_h = rng.uniform(hr.p0, hr.p1)  # no curriculum on parkour heights
        tilt = np.deg2rad(_sample(spec, "tilt_angle", difficulty, rng, prefix))
        sign = 1.0 if rng.random() < 0.5 else -1.0
        nr = _rows(spec, size)
        if r >= last:
            break
        h[r : min(r + nr, last)] = block_h + sign * np.tan(tilt) * y
        r += nr
    return h, mask


def _gen_slope_bridge(spec, difficulty, rng, prefix=""):
    h, mask = _grid(spec)
    amp = _sample(spec, "amplitude", difficulty, rng, prefix)
    x = np.arange(h.shape[0]) * spec.cell_m
    # arch: first half of the sine over the full terrain length
    h[:] = (amp * np.sin(np.pi * x / spec.length_m))[:, None]
    h, mask = _bridge_strip(spec, difficulty, rng, h, mask, prefix=prefix)
    return h, mask


def _add_waves(spec, difficulty, rng, h, mask, prefix=""):
    n_waves = _sample_count(spec, "wave_nums", difficulty, rng, prefix)
    x = np.arange(h.shape[0]) * spec.cell_m
    wave = np.zeros(h.shape[0])
    for _ in range(n_waves):
        amp = _sample(spec, "wave_amplitude", difficulty, rng, prefix)
        wavelength = rng.uniform(4.0, 12.0)
        phase = rng.uniform(0.0, 2.0 * np.pi)
        wave += amp * np.sin(2.0 * np.pi * x / wavelength + phase)
    h[mask] += np.broadcast_to(wave[:, None], h.shape)[mask]
    return h, mask


def _gen_wave_gap(spec, difficulty, rng, prefix=""):
    h, mask = _gen_gap(spec, difficulty, rng, prefix)
    return _add_waves(spec, difficulty, rng, h, mask, prefix)


def _gen_wave_bridge(spec, difficulty, rng, prefix=""):
    h, mask = _gen_bridge(spec, difficulty, rng, prefix)
    return _add_waves(spec, difficulty, rng, h, mask, prefix)


def _gen_gap_bridge(spec, difficulty, rng, prefix=""):
    h, mask = _gen_gap(spec, difficulty, rng, prefix)
    return _bridge_strip(spec, difficulty, rng, h, mask, width_key="bridge_size_range", prefix=prefix)


_GENERATORS = {
    "flat": _gen_flat,
    "uneven": _gen_uneven,
    "stair": _gen_stair,
    "gap": _gen_gap,
    "bridge": _gen_bridge,
    "parkour": _gen_parkour,
    "gap_bridge": _gen_gap_bridge,
    "slope_bridge": _gen_slope_bridge,
    "wave_gap": _gen_wave_gap,
    "wave_bridge": _gen_wave_bridge,
}


def generate_heightfield(spec: TerrainSpec, difficulty: int, seed: int) -> HeightField:
    """Deterministic terrain realization; identical (spec, difficulty, seed)
    produce bit-identical fields."""
    if not 0 <= difficulty <= spec.max_terrain_level:
        raise ValueError(f"difficulty {difficulty} outside [0, {spec.max_terrain_level}]")
    rng = np.random.default_rng(seed)
    if spec.kind in STAGE_SEGMENTS:
        h, mask = _gen_multistage(spec, difficulty, rng)
    else:
        h, mask = _GENERATORS[spec.kind](spec, difficulty, rng)
    return HeightField(heights=h, cell_m=spec.cell_m, walkable=mask)


def _gen_multistage(spec: TerrainSpec, difficulty: int, rng):
    segments = STAGE_SEGMENTS[spec.kind]
    seg_len = spec.length_m / len(segments)
    cols = int(round(spec.width_m / spec.cell_m))
    parts_h, parts_m = [], []
    z = 0.0
    for i, seg_kind in enumerate(segments):
        seg_spec = TerrainSpec(
            kind=seg_kind,
            length_m=seg_len,
            width_m=spec.width_m,
            cell_m=spec.cell_m,
            params={k: v for k, v in _SINGLE_PARAMS[seg_kind].items()},
            max_terrain_level=spec.max_terrain_level,
        )
        h, mask = _GENERATORS[seg_kind](seg_spec, difficulty, rng, prefix="")
        if i > 0:
            platform = sample_curriculum_param(spec.platform_range, difficulty, spec.max_terrain_level, rng)
            pr = max(1, int(round(max(platform, 0.0) / spec.cell_m)))
            parts_h.append(np.full((pr, cols), z))
            parts_m.append(np.ones((pr, cols), dtype=bool))
        h = h + z
        h[~mask] = VOID_DEPTH
        parts_h.append(h)
        parts_m.append(mask)
        z = float(np.max(h[-1][mask[-1]])) if mask[-1].any() else z
    return np.concatenate(parts_h, axis=0), np.concatenate(parts_m, axis=0)


def add_base_roughness(field: HeightField, difficulty_frac: float, rng) -> HeightField:
    """Uniform per-cell perturbation in [-0.05, 0.05] * difficulty_frac on
    walkable cells only."""
    noise = rng.uniform(-ROUGHNESS_AMP, ROUGHNESS_AMP, size=field.heights.shape) * difficulty_frac
    heights = field.heights.copy()
    heights[field.walkable] += noise[field.walkable]
    return HeightField(
        heights=heights,
        cell_m=field.cell_m,
        origin=field.origin,
        walkable=field.walkable,
        goal_x_m=field.goal_x_m,
    )


def egocentric_scan(field: HeightField, base_pose, base_z: float) -> np.ndarray:
    """Heights on the fixed 36x11 grid in the yaw-rotated robot frame,
    relative to the base height. Void cells yield the -1 m sentinel;
    out-of-bounds samples clamp to the nearest edge cell."""
    x, y, yaw = base_pose
    c, s = np.cos(yaw), np.sin(yaw)
    dx = SCAN_X[:, None]
    dy = SCAN_Y[None, :]
    px = x + c * dx - s * dy
    py = y + s * dx + c * dy
    i, j = field._cell_index(px, py)
    h = field.heights[i, j] - base_z
    scan = np.where(field.walkable[i, j], h, VOID_SENTINEL)
    return scan.reshape(-1)


def episode_metrics(outcomes) -> tuple:
    """Mean success indicator and mean clamped completion ratio."""
    outcomes = list(outcomes)
    if not outcomes:
        raise ValueError("episode_metrics needs at least one outcome")
    r_succ = float(np.mean([1.0 if o.success else 0.0 for o in outcomes]))
    r_cmp = float(np.mean([o.completion for o in outcomes]))
    return r_succ, r_cmp
