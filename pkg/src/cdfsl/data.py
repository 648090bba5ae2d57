"""Procedural moving-pattern clips with a controllable domain gap.

A class is a motion program (translate / rotate / oscillate / scale) plus a
parameter and a speed bin; a domain is a rendering style (texture, background,
noise, colour mixing, temporal jitter, static clutter). The frame is a torus,
so objects that leave one edge re-enter at the opposite one. Source and target share no
(program, parameter, bin) triple. Clips are pure functions of
(class, style, clip seed) and are regenerated on demand.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import rng as rngmod
from .errors import CapacityError, DisjointnessError, ValidationError
from .model import ClipSpec

PROGRAMS = ("translate", "rotate", "oscillate", "scale")
TEXTURES = ("flat", "stripes", "checker", "rings")


@dataclass(frozen=True)
class ClassDef:
    class_id: int
    program: str
    param: str
    speed_bin: int

    def __post_init__(self):
        if self.program not in PROGRAMS:
            raise ValidationError(f"unknown motion program {self.program!r}")
        if self.speed_bin not in (0, 1):
            raise ValidationError("speed_bin must be 0 (slow) or 1 (fast)")

    @property
    def key(self) -> tuple[str, str, int]:
        return (self.program, self.param, self.speed_bin)


def class_catalog() -> list[ClassDef]:
    """All 28 distinct class definitions, in a fixed order."""
    keys: list[tuple[str, str]] = [("translate", str(d)) for d in range(8)]
    keys += [("rotate", "cw"), ("rotate", "ccw")]
    keys += [("oscillate", "low"), ("oscillate", "high")]
    keys += [("scale", "grow"), ("scale", "shrink")]
    out = []
    for program, param in keys:
        for speed in (0, 1):
            out.append(ClassDef(len(out), program, param, speed))
    return out


@dataclass(frozen=True)
class DomainStyle:
    texture: str = "flat"
    background_level: float = 0.1
    noise_std: float = 0.0
    palette: tuple[tuple[float, ...], ...] = ((1.0, 0.0, 0.0), (0.0, 1.0, 0.0), (0.0, 0.0, 1.0))
    temporal_jitter: float = 0.0
    # static blobs that share the object's appearance but never move
    distractors: int = 0

    def __post_init__(self):
        if self.texture not in TEXTURES:
            raise ValidationError(f"unknown texture {self.texture!r}")
        pal = np.asarray(self.palette, dtype=np.float64)
        if pal.shape != (3, 3):
            raise ValidationError("palette must be 3x3")
        if not np.isfinite(np.linalg.cond(pal)) or np.linalg.cond(pal) >= 1e3:
            raise ValidationError("palette must be well conditioned (condition number < 1e3)")
        if self.noise_std < 0 or self.temporal_jitter < 0:
            raise ValidationError("noise_std and temporal_jitter must be non-negative")
        if self.distractors < 0:
            raise ValidationError("distractors must be non-negative")

    @property
    def palette_array(self) -> np.ndarray:
        return np.asarray(self.palette, dtype=np.float64)


SOURCE_STYLE = DomainStyle(
    texture="flat",
    background_level=0.12,
    noise_std=0.02,
    palette=((0.85, 0.15, 0.10), (0.15, 0.80, 0.10), (0.10, 0.15, 0.85)),
    temporal_jitter=0.0,
    distractors=0,
)
TARGET_STYLE = DomainStyle(
    texture="stripes",
    background_level=0.18,
    noise_std=0.06,
    palette=((0.20, 0.70, 0.30), (0.70, 0.15, 0.20), (0.35, 0.25, 0.75)),
    temporal_jitter=0.3,
    distractors=0,
)


def blend_styles(a: DomainStyle, b: DomainStyle, t: float) -> DomainStyle:
    """Interpolate numeric style fields; texture and clutter switch to ``b`` once ``t > 0``."""
    if not 0.0 <= t <= 1.0:
        raise ValidationError("domain gap must lie in [0, 1]")
    mix = lambda x, y: (1 - t) * x + t * y  # noqa: E731
    pal = mix(a.palette_array, b.palette_array)
    return DomainStyle(
        texture=a.texture if t == 0 else b.texture,
        background_level=mix(a.background_level, b.background_level),
        noise_std=mix(a.noise_std, b.noise_std),
        palette=tuple(tuple(float(v) for v in row) for row in pal),
        temporal_jitter=mix(a.temporal_jitter, b.temporal_jitter),
        distractors=a.distractors if t == 0 else b.distractors,
    )


# ---------------------------------------------------------------------------
# rendering


@dataclass(frozen=True)
class Trajectory:
    """Per-frame object state: centre (x, y), orientation and size in pixels."""

    cx: np.ndarray
    cy: np.ndarray
    angle: np.ndarray
    size: np.ndarray


def _trajectory(cls: ClassDef, spec: ClipSpec, r: np.random.Generator) -> Trajectory:
    t_count, h, w = spec.frames, spec.height, spec.width
    s = np.arange(t_count) - (t_count - 1) / 2.0
    fast = cls.speed_bin == 1
    # size and gain distributions are shared by all programs so that only motion identifies a class
    base = 0.16 * min(h, w)
    size = np.full(t_count, base * math.exp(r.uniform(-0.25, 0.25)))
    angle = np.full(t_count, r.uniform(0, math.pi))
    margin = 0.2 * min(h, w)

    def centre(extent_x: float, extent_y: float) -> tuple[float, float]:
        lo_x, hi_x = margin + extent_x, w - 1 - margin - extent_x
        lo_y, hi_y = margin + extent_y, h - 1 - margin - extent_y
        return r.uniform(lo_x, max(lo_x, hi_x)), r.uniform(lo_y, max(lo_y, hi_y))

    if cls.program == "translate":
        v = (0.075 if not fast else 0.15) * min(h, w)
        phi = int(cls.param) * math.pi / 4
        dx, dy = math.cos(phi), -math.sin(phi)
        half = v * (t_count - 1) / 2
        cx0, cy0 = centre(half * abs(dx), half * abs(dy))
        cx, cy = cx0 + v * dx * s, cy0 + v * dy * s
    elif cls.program == "rotate":
        omega = (math.pi / 10 if not fast else math.pi / 5) * (1 if cls.param == "ccw" else -1)
        cx0, cy0 = centre(0.0, 0.0)
        cx, cy = np.full(t_count, cx0), np.full(t_count, cy0)
        angle = angle + omega * s
    elif cls.program == "oscillate":
        cycles = 1.0 if cls.param == "low" else 2.0
        amp = (0.1 if not fast else 0.2) * min(h, w)
        phi = r.uniform(0, math.pi)
        dx, dy = math.cos(phi), math.sin(phi)
        cx0, cy0 = centre(amp * abs(dx), amp * abs(dy))
        wave = amp * np.sin(2 * math.pi * cycles * np.arange(t_count) / t_count + r.uniform(0, 2 * math.pi))
        cx, cy = cx0 + dx * wave, cy0 + dy * wave
    else:
        rate = 1.07 if not fast else 1.14
        sign = 1.0 if cls.param == "grow" else -1.0
        size = size * rate ** (sign * s)
        cx0, cy0 = centre(0.0, 0.0)
        cx, cy = np.full(t_count, cx0), np.full(t_count, cy0)
    return Trajectory(np.asarray(cx, float), np.asarray(cy, float), np.asarray(angle, float), size)


def _texture(kind: str, h: int, w: int, phase: float) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    if kind == "flat":
        return np.ones((h, w))
    if kind == "stripes":
        return 0.5 + 0.5 * np.cos(2 * math.pi * (xx + yy + phase) / 4.0)
    if kind == "checker":
        return ((np.floor((xx + phase) / 2) + np.floor(yy / 2)) % 2).astype(np.float64)
    r = np.hypot(xx - w / 2, yy - h / 2)
    return 0.5 + 0.5 * np.cos(2 * math.pi * (r + phase) / 3.0)


def object_masks(traj: Trajectory, spec: ClipSpec) -> np.ndarray:
    """Soft elongated blob per frame, ``[T, H, W]`` in [0, 1], on a torus."""
    h, w = spec.height, spec.width
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    # offset to the nearest periodic copy of the centre
    dx = (xx[None] - traj.cx[:, None, None] + w / 2) % w - w / 2
    dy = (yy[None] - traj.cy[:, None, None] + h / 2) % h - h / 2
    ca, sa = np.cos(traj.angle)[:, None, None], np.sin(traj.angle)[:, None, None]
    u = ca * dx + sa * dy
    v = -sa * dx + ca * dy
    sl = traj.size[:, None, None]
    return np.exp(-0.5 * ((u / sl) ** 2 + (v / (0.4 * sl)) ** 2))


def _clutter(count: int, clip_seed: int, spec: ClipSpec) -> np.ndarray:
    """Static blobs drawn from the object distributions, ``[H, W]`` in [0, 1]."""
    r = rngmod.stream(clip_seed, "clutter")
    out = np.zeros((spec.height, spec.width))
    for _ in range(count):
        size = 0.16 * min(spec.height, spec.width) * math.exp(r.uniform(-0.25, 0.25))
        one = Trajectory(
            np.array([r.uniform(0, spec.width)]),
            np.array([r.uniform(0, spec.height)]),
            np.array([r.uniform(0, math.pi)]),
            np.array([size]),
        )
        out = 1.0 - (1.0 - out) * (1.0 - r.uniform(0.5, 1.0) * object_masks(one, spec)[0])
    return out


def generate_clip(cls: ClassDef, style: DomainStyle, clip_seed: int, spec: ClipSpec) -> np.ndarray:
    """Render one clip ``[T, C, H, W]`` with values in [0, 1]."""
    if spec.channels != 3:
        raise ValidationError("the renderer produces 3-channel clips")
    motion_rng = rngmod.stream(clip_seed, "motion")
    traj = _trajectory(cls, spec, motion_rng)
    gain = motion_rng.uniform(0.5, 1.0)
    if style.temporal_jitter > 0:
        jit = rngmod.stream(clip_seed, "jitter").normal(0.0, style.temporal_jitter, (2, spec.frames))
        traj = Trajectory(traj.cx + jit[0], traj.cy + jit[1], traj.angle, traj.size)
    mask = gain * object_masks(traj, spec)
    if style.distractors:
        mask = 1.0 - (1.0 - mask) * (1.0 - _clutter(style.distractors, clip_seed, spec))[None]
    tex_phase = rngmod.stream(clip_seed, "texture").uniform(0, 4)
    tex = _texture(style.texture, spec.height, spec.width, tex_phase)
    base = np.stack(
        [
            mask,
            mask * (0.5 + 0.5 * tex),
            style.background_level * tex[None] * (1.0 - mask),
        ],
        axis=1,
    )  # [T, 3, H, W]
    clip = np.einsum("ck,tkhw->tchw", style.palette_array, base)
    if style.noise_std > 0:
        clip = clip + rngmod.stream(clip_seed, "noise").normal(0.0, style.noise_std, clip.shape)
    return np.clip(clip, 0.0, 1.0)


# ---------------------------------------------------------------------------
# manifests


@dataclass(frozen=True)
class SplitDef:
    classes: tuple[ClassDef, ...]
    style: DomainStyle
    n_per_class: int
    clip_seeds: tuple[tuple[int, ...], ...]
    labeled: bool = False

    def __post_init__(self):
        if len(self.clip_seeds) != len(self.classes):
            raise ValidationError("one clip-seed list per class is required")
        for seeds in self.clip_seeds:
            if len(seeds) != self.n_per_class:
                raise ValidationError("every class needs exactly n_per_class clip seeds")

    @property
    def size(self) -> int:
        return len(self.classes) * self.n_per_class

    def all_seeds(self) -> set[int]:
        return {s for seeds in self.clip_seeds for s in seeds}


@dataclass(frozen=True)
class DatasetManifest:
    source: SplitDef
    target_unlabeled: SplitDef
    target_test: SplitDef
    seed: int

    def __post_init__(self):
        shared = {c.key for c in self.source.classes} & {c.key for c in self.target_unlabeled.classes}
        if shared:
            raise DisjointnessError(f"source and target share classes {sorted(shared)}")
        if [c.key for c in self.target_unlabeled.classes] != [c.key for c in self.target_test.classes]:
            raise ValidationError("target_unlabeled and target_test must cover the same classes")
        if self.target_unlabeled.all_seeds() & self.target_test.all_seeds():
            raise DisjointnessError("target unlabeled and test splits share clip seeds")
        if not self.source.labeled:
            raise ValidationError("the source split must be labeled")

    def to_dict(self) -> dict:
        def split(s: SplitDef) -> dict:
            return {
                "classes": [asdict(c) for c in s.classes],
                "style": asdict(s.style),
                "n_per_class": s.n_per_class,
                "clip_seeds": [list(x) for x in s.clip_seeds],
                "labeled": s.labeled,
            }

        return {
            "format": "cdfsl-manifest/1",
            "seed": self.seed,
            "source": split(self.source),
            "target_unlabeled": split(self.target_unlabeled),
            "target_test": split(self.target_test),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetManifest":
        def split(s: dict) -> SplitDef:
            style = dict(s["style"])
            style["palette"] = tuple(tuple(row) for row in style["palette"])
            return SplitDef(
                classes=tuple(ClassDef(**c) for c in s["classes"]),
                style=DomainStyle(**style),
                n_per_class=s["n_per_class"],
                clip_seeds=tuple(tuple(x) for x in s["clip_seeds"]),
                labeled=s.get("labeled", False),
            )

        return cls(split(d["source"]), split(d["target_unlabeled"]), split(d["target_test"]), d["seed"])

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True))

    @classmethod
    def load(cls, path: str | Path) -> "DatasetManifest":
        return cls.from_dict(json.loads(Path(path).read_text()))


def build_manifest(
    n_source_classes: int = 8,
    n_target_classes: int = 5,
    n_per_class: int = 40,
    seed: int = 0,
    domain_gap: float = 1.0,
) -> DatasetManifest:
    """Draw disjoint source/target classes and clip seeds.

    Target classes are the first ``n_target_classes`` of a seeded permutation
    of the catalog and source classes follow, so for a fixed seed the target
    task stays the same while the source grows.
    """
    catalog = class_catalog()
    if n_source_classes < 1 or n_target_classes < 1 or n_per_class < 1:
        raise ValidationError("class counts and n_per_class must be positive")
    if n_source_classes + n_target_classes > len(catalog):
        raise CapacityError(
            f"{n_source_classes} + {n_target_classes} classes requested, catalog has {len(catalog)}"
        )
    r = rngmod.stream(seed, "manifest")
    order = r.permutation(len(catalog))
    target_classes = tuple(catalog[i] for i in order[:n_target_classes])
    source_classes = tuple(catalog[i] for i in order[n_target_classes : n_target_classes + n_source_classes])

    n_src = n_source_classes * n_per_class
    n_tgt = n_target_classes * n_per_class
    seeds = r.choice(2**31 - 1, size=n_src + 2 * n_tgt, replace=False).tolist()

    def chunk(flat: list[int], n_classes: int) -> tuple[tuple[int, ...], ...]:
        return tuple(tuple(flat[i * n_per_class : (i + 1) * n_per_class]) for i in range(n_classes))

    target_style = blend_styles(SOURCE_STYLE, TARGET_STYLE, domain_gap)
    return DatasetManifest(
        source=SplitDef(source_classes, SOURCE_STYLE, n_per_class, chunk(seeds[:n_src], n_source_classes), True),
        target_unlabeled=SplitDef(
            target_classes, target_style, n_per_class, chunk(seeds[n_src : n_src + n_tgt], n_target_classes)
        ),
        target_test=SplitDef(
            target_classes, target_style, n_per_class, chunk(seeds[n_src + n_tgt :], n_target_classes)
        ),
        seed=seed,
    )


# ---------------------------------------------------------------------------
# materialized splits


class ClipSet:
    """Rendered clips of one split, with audited label access.

    ``label_reads`` counts every label that leaves this object, so a stage
    that must stay label-free can be checked after the fact.
    """

    def __init__(self, split: SplitDef, spec: ClipSpec, name: str = ""):
        self.split = split
        self.spec = spec
        self.name = name
        self._labels = np.repeat(np.arange(len(split.classes)), split.n_per_class)
        self._seeds = np.array([s for seeds in split.clip_seeds for s in seeds], dtype=np.int64)
        self._clips: np.ndarray | None = None
        self.label_reads = 0

    def __len__(self) -> int:
        return len(self._seeds)

    @property
    def n_classes(self) -> int:
        return len(self.split.classes)

    @property
    def clip_seeds(self) -> np.ndarray:
        return self._seeds.copy()

    def clips(self, idx=None) -> np.ndarray:
        if self._clips is None:
            classes = [self.split.classes[i] for i in self._labels]
            self._clips = np.stack(
                [generate_clip(c, self.split.style, int(s), self.spec) for c, s in zip(classes, self._seeds)]
            )
        return self._clips if idx is None else self._clips[np.asarray(idx)]

    def labels(self, idx=None) -> np.ndarray:
        out = self._labels if idx is None else self._labels[np.asarray(idx)]
        self.label_reads += int(np.size(out))
        return out.copy()

    def indices_by_class(self) -> list[np.ndarray]:
        """Clip indices grouped by class. Counts as reading every label."""
        labels = self.labels()
        return [np.flatnonzero(labels == c) for c in range(self.n_classes)]


@dataclass
class Datasets:
    source: ClipSet
    target_unlabeled: ClipSet
    target_test: ClipSet

    @classmethod
    def from_manifest(cls, manifest: DatasetManifest, spec: ClipSpec) -> "Datasets":
        return cls(
            ClipSet(manifest.source, spec, "source"),
            ClipSet(manifest.target_unlabeled, spec, "target_unlabeled"),
            ClipSet(manifest.target_test, spec, "target_test"),
        )


@dataclass
class LabeledBatch:
    clips: np.ndarray
    labels: np.ndarray
    clip_ids: np.ndarray

    def __post_init__(self):
        if len(self.labels) != len(self.clips):
            raise ValidationError("one label per clip is required")


@dataclass
class UnlabeledBatch:
    clips: np.ndarray
    clip_ids: np.ndarray


def _chunks(perm: np.ndarray, bs: int) -> list[np.ndarray]:
    return [perm[i : i + bs] for i in range(0, len(perm), bs)]


def sample_batches(
    data: Datasets,
    batch_size_labeled: int,
    batch_size_unlabeled: int,
    rng: np.random.Generator,
):
    """One epoch of (labeled source, unlabeled target) batch pairs.

    Both splits are permuted independently; the shorter one cycles so the
    epoch length is set by the longer.
    """
    src, tgt = data.source, data.target_unlabeled
    if len(src) == 0 or len(tgt) == 0:
        raise ValidationError("cannot sample batches from an empty split")
    if not 1 <= batch_size_labeled <= len(src) or not 1 <= batch_size_unlabeled <= len(tgt):
        raise ValidationError("batch sizes must be between 1 and the split size")
    lab = _chunks(rng.permutation(len(src)), batch_size_labeled)
    unl = _chunks(rng.permutation(len(tgt)), batch_size_unlabeled)
    for i in range(max(len(lab), len(unl))):
        li, ui = lab[i % len(lab)], unl[i % len(unl)]
        yield (
            LabeledBatch(src.clips(li), src.labels(li), li),
            UnlabeledBatch(tgt.clips(ui), ui),
        )


# ---------------------------------------------------------------------------
# augmentation (pre-graph; one parameter draw per clip, shared by all frames)


@dataclass(frozen=True)
class WeakParams:
    top: float
    left: float
    crop_h: float
    crop_w: float
    flip: bool


@dataclass(frozen=True)
class StrongParams:
    weak: WeakParams
    jitter: bool
    brightness: float
    contrast: float
    grayscale: bool
    blur: bool
    sigma: float


@dataclass(frozen=True)
class AugmentConfig:
    crop_scale: tuple[float, float] = (0.6, 1.0)
    p_flip: float = 0.5
    p_jitter: float = 0.8
    jitter: float = 0.4
    p_gray: float = 0.2
    p_blur: float = 0.5
    blur_sigma: tuple[float, float] = (0.1, 1.0)


def sample_weak_params(rng: np.random.Generator, h: int, w: int, cfg: AugmentConfig = AugmentConfig()) -> WeakParams:
    scale = rng.uniform(*cfg.crop_scale)
    ch, cw = h * math.sqrt(scale), w * math.sqrt(scale)
    top = rng.uniform(0.0, h - ch)
    left = rng.uniform(0.0, w - cw)
    return WeakParams(top, left, ch, cw, bool(rng.random() < cfg.p_flip))


def sample_strong_params(rng: np.random.Generator, h: int, w: int, cfg: AugmentConfig = AugmentConfig()) -> StrongParams:
    weak = sample_weak_params(rng, h, w, cfg)
    jitter = bool(rng.random() < cfg.p_jitter)
    brightness = rng.uniform(1 - cfg.jitter, 1 + cfg.jitter)
    contrast = rng.uniform(1 - cfg.jitter, 1 + cfg.jitter)
    gray = bool(rng.random() < cfg.p_gray)
    blur = bool(rng.random() < cfg.p_blur)
    sigma = rng.uniform(*cfg.blur_sigma)
    return StrongParams(weak, jitter, brightness, contrast, gray, blur, sigma)


def _bilinear_axis(n_out: int, start: float, length: float, n_in: int):
    pos = start + (np.arange(n_out) + 0.5) * (length / n_out) - 0.5
    pos = np.clip(pos, 0.0, n_in - 1)
    lo = np.floor(pos).astype(np.int64)
    hi = np.minimum(lo + 1, n_in - 1)
    return lo, hi, pos - lo


def apply_weak(clip: np.ndarray, p: WeakParams) -> np.ndarray:
    """Crop-resize and optional flip of a ``[T, C, H, W]`` clip."""
    h, w = clip.shape[-2:]
    ylo, yhi, fy = _bilinear_axis(h, p.top, p.crop_h, h)
    xlo, xhi, fx = _bilinear_axis(w, p.left, p.crop_w, w)
    rows = clip[..., ylo, :] * (1 - fy)[:, None] + clip[..., yhi, :] * fy[:, None]
    out = rows[..., xlo] * (1 - fx) + rows[..., xhi] * fx
    if p.flip:
        out = out[..., ::-1]
    return np.ascontiguousarray(out)


def _gaussian_kernel(sigma: float) -> np.ndarray:
    radius = max(1, int(math.ceil(3 * sigma)))
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def gaussian_blur(clip: np.ndarray, sigma: float) -> np.ndarray:
    """Separable spatial blur with reflect padding, same kernel on every frame."""
    k = _gaussian_kernel(sigma)
    r = len(k) // 2
    h, w = clip.shape[-2:]
    pad = [(0, 0)] * (clip.ndim - 2) + [(r, r), (0, 0)]
    x = np.pad(clip, pad, mode="reflect" if h > r else "edge")
    clip = sum(k[i] * x[..., i : i + h, :] for i in range(len(k)))
    pad = [(0, 0)] * (clip.ndim - 1) + [(r, r)]
    x = np.pad(clip, pad, mode="reflect" if w > r else "edge")
    return sum(k[i] * x[..., i : i + w] for i in range(len(k)))


def grayscale(clip: np.ndarray) -> np.ndarray:
    if clip.shape[-3] == 3:
        luma = 0.299 * clip[..., 0, :, :] + 0.587 * clip[..., 1, :, :] + 0.114 * clip[..., 2, :, :]
    else:
        luma = clip.mean(axis=-3)
    return np.repeat(luma[..., None, :, :], clip.shape[-3], axis=-3)


def apply_strong(clip: np.ndarray, p: StrongParams) -> np.ndarray:
    out = apply_weak(clip, p.weak)
    if p.jitter:
        out = out * p.brightness
        mean = grayscale(out).mean()
        out = (out - mean) * p.contrast + mean
    if p.grayscale:
        out = grayscale(out)
    if p.blur:
        out = gaussian_blur(out, p.sigma)
    return np.clip(out, 0.0, 1.0)


def weak_augment(clips: np.ndarray, rng: np.random.Generator, cfg: AugmentConfig = AugmentConfig(), record: list | None = None) -> np.ndarray:
    """Temporally consistent crop + flip for a ``[B, T, C, H, W]`` batch."""
    h, w = clips.shape[-2:]
    out = np.empty_like(clips)
    for i in range(len(clips)):
        p = sample_weak_params(rng, h, w, cfg)
        if record is not None:
            record.append(p)
        out[i] = apply_weak(clips[i], p)
    return out


def strong_augment(clips: np.ndarray, rng: np.random.Generator, cfg: AugmentConfig = AugmentConfig(), record: list | None = None) -> np.ndarray:
    """Weak augmentation followed by jitter, grayscale and blur, all per clip."""
    h, w = clips.shape[-2:]
    out = np.empty_like(clips)
    for i in range(len(clips)):
        p = sample_strong_params(rng, h, w, cfg)
        if record is not None:
            record.append(p)
        out[i] = apply_strong(clips[i], p)
    return out


def export_clip(clip: np.ndarray, path: str | Path) -> None:
    """Debug dump: rank, shape, then raw little-endian float64 values."""
    arr = np.ascontiguousarray(clip, dtype="<f8")
    with open(path, "wb") as fh:
        fh.write(np.uint32(arr.ndim).astype("<u4").tobytes())
        fh.write(np.asarray(arr.shape, dtype="<u4").tobytes())
        fh.write(arr.tobytes())
