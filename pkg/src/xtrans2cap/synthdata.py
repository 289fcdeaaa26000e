"""Procedural scenes with grammar captions.

Color is the attribute that crosses modalities: it is exact in the 2D feature
and passes through a Gaussian-noise channel in the 3D feature, so a 3D-only
captioner has to guess what a 2D-aware one can read off directly.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .objrep import Box2D, Box3D, ObjectRecord, SceneSample
from .vocab import BOS_ID, EOS_ID, Vocab

COLORS = ("red", "green", "blue", "yellow", "white", "black", "brown", "gray")
SHAPES = ("chair", "table", "box", "lamp", "sofa", "shelf")
SIZES = ("small", "medium", "large")
RELATIONS = ("left of", "right of", "behind", "in front of", "above", "below", "next to")
FILLERS = ("a", "the", "this", "is", "it", "and", ".")

D3D = 32
D2D = 32
N_CLS = 18
NEXT_TO_RADIUS = 0.18
SIZE_SCALE = (0.08, 0.12, 0.16)
# per-shape (x, y, z) aspect
SHAPE_ASPECT = {
    "chair": (1.0, 1.0, 1.3),
    "table": (1.5, 1.0, 0.9),
    "box": (1.0, 1.0, 1.0),
    "lamp": (0.6, 0.6, 1.6),
    "sofa": (1.8, 0.9, 0.8),
    "shelf": (1.2, 0.5, 1.7),
}
CAMERA = np.array([0.5, -1.0, 0.5])

TEMPLATES = (
    "a {color} {shape} {rel} the {nshape}",
    "this is a {size} {color} {shape} . it is {rel} the {nshape}",
    "the {shape} is {color} and {rel} a {nshape}",
)


class GenerationError(RuntimeError):
    pass


class SplitParseError(ValueError):
    pass


@dataclass
class GenConfig:
    n_train: int = 2000
    n_val: int = 400
    n_test: int = 400
    M_range: tuple[int, int] = (4, 8)
    n_colors: int = 8
    n_shapes: int = 6
    n_sizes: int = 3
    noise_sigma3d: float = 0.75
    refs_per_object: int = 2
    seed: int = 0
    max_retries: int = 1000

    def __post_init__(self):
        self.M_range = tuple(self.M_range)
        if self.M_range[0] < 2 or self.M_range[1] < self.M_range[0]:
            raise ValueError("M_range must satisfy 2 <= min <= max")
        if min(self.n_colors, self.n_shapes, self.n_sizes) < 2:
            raise ValueError("category counts must be >= 2")
        if self.n_colors > len(COLORS) or self.n_shapes > len(SHAPES) or self.n_sizes > len(SIZES):
            raise ValueError("category counts exceed the grammar's word lists")
        if self.noise_sigma3d < 0:
            raise ValueError("noise_sigma3d must be >= 0")
        if not 1 <= self.refs_per_object <= len(TEMPLATES):
            raise ValueError(f"refs_per_object must be in [1, {len(TEMPLATES)}]")


def build_vocab() -> Vocab:
    words = list(FILLERS) + list(COLORS) + list(SHAPES) + list(SIZES)
    for rel in RELATIONS:
        words.extend(rel.split())
    return Vocab(words)


VOCAB = build_vocab()


# --------------------------------------------------------------- geometry

def relation(target: Box3D, other: Box3D) -> str:
    """Spatial relation of ``target`` with respect to ``other`` (fixed camera).

    The camera looks along +y: x grows to the right, y away from the viewer,
    z upwards.  The axis with the largest center offset decides; exact ties
    go to the earlier axis.
    """
    delta = np.asarray(other.center) - np.asarray(target.center)
    if np.linalg.norm(delta) < NEXT_TO_RADIUS:
        return "next to"
    axis = int(np.argmax(np.abs(delta)))
    positive = delta[axis] > 0
    if axis == 0:
        return "left of" if positive else "right of"
    if axis == 1:
        return "in front of" if positive else "behind"
    return "below" if positive else "above"


INVERSE = {"left of": "right of", "right of": "left of", "behind": "in front of",
           "in front of": "behind", "above": "below", "below": "above", "next to": "next to"}


def project_box(b: Box3D) -> Box2D:
    """Pinhole projection of the box onto the fixed virtual camera, clamped to [0, 1]^2."""
    x, y, z = b.center
    w, _, h = b.size
    depth = y - CAMERA[1]
    u = 0.5 + (x - CAMERA[0]) / depth
    v = 0.5 - (z - CAMERA[2]) / depth
    half_w, half_h = 0.5 * w / depth, 0.5 * h / depth
    lo_u, hi_u = max(0.0, u - half_w), min(1.0, u + half_w)
    lo_v, hi_v = max(0.0, v - half_h), min(1.0, v + half_h)
    return Box2D((lo_u + hi_u) / 2, (lo_v + hi_v) / 2, max(hi_u - lo_u, 1e-6), max(hi_v - lo_v, 1e-6))


def _overlap(a: Box3D, b: Box3D) -> bool:
    ca, sa = np.asarray(a.center), np.asarray(a.size)
    cb, sb = np.asarray(b.center), np.asarray(b.size)
    return bool(np.all(np.abs(ca - cb) < (sa + sb) / 2))


def nearest_neighbor(boxes: list[Box3D], i: int) -> int:
    c = np.array([b.center for b in boxes])
    dist = np.linalg.norm(c - c[i], axis=1)
    dist[i] = np.inf
    return int(np.argmin(dist))


# ------------------------------------------------------------------ scenes

def _features(rng, color: int, shape: int, size: int, cfg: GenConfig):
    f3d = np.zeros(D3D)
    f3d[shape] = 1.0
    f3d[len(SHAPES) + size] = 1.0
    c0 = len(SHAPES) + len(SIZES)
    f3d[c0 + color] = 1.0
    f3d[c0:c0 + len(COLORS)] += rng.normal(0.0, cfg.noise_sigma3d, len(COLORS))
    f2d = np.zeros(D2D)
    f2d[color] = 1.0
    f2d[len(COLORS) + shape] = 1.0
    return f3d, f2d


def render_caption(template: int, target: dict, rel: str, nshape: str) -> str:
    return TEMPLATES[template].format(color=target["color"], shape=target["shape"],
                                      size=target["size"], rel=rel, nshape=nshape)


def generate_scene(rng: np.random.Generator, cfg: GenConfig, scene_id: str = "scene") -> SceneSample:
    m = int(rng.integers(cfg.M_range[0], cfg.M_range[1] + 1))
    boxes: list[Box3D] = []
    latents = []
    for _ in range(m):
        color = int(rng.integers(cfg.n_colors))
        shape = int(rng.integers(cfg.n_shapes))
        size = int(rng.integers(cfg.n_sizes))
        dims = tuple(float(SIZE_SCALE[size] * a) for a in SHAPE_ASPECT[SHAPES[shape]])
        for _attempt in range(cfg.max_retries):
            center = tuple(float(rng.uniform(s / 2, 1 - s / 2)) for s in dims)
            box = Box3D(center, dims)
            if not any(_overlap(box, o) for o in boxes):
                break
        else:
            raise GenerationError(f"{scene_id}: could not place {m} non-overlapping boxes")
        boxes.append(box)
        latents.append((color, shape, size))

    objects = []
    for box, (color, shape, size) in zip(boxes, latents):
        f3d, f2d = _features(rng, color, shape, size, cfg)
        cls = np.zeros(N_CLS)
        cls[shape] = 1.0
        objects.append(ObjectRecord(f3d=f3d, cls=cls, b3d=box, f2d=f2d, b2d=project_box(box),
                                    latent={"color": COLORS[color], "shape": SHAPES[shape],
                                            "size": SIZES[size]}))
    target = int(rng.integers(m))
    nb = nearest_neighbor(boxes, target)
    rel = relation(boxes[target], boxes[nb])
    templates = rng.permutation(len(TEMPLATES))[: cfg.refs_per_object]
    refs = [VOCAB.encode(render_caption(int(t), objects[target].latent, rel, objects[nb].latent["shape"]))
            for t in sorted(templates)]
    return SceneSample(objects=objects, target_index=target, references=refs, scene_id=scene_id)


def scene_rng(seed: int, split: str, index: int) -> np.random.Generator:
    """Per-scene generator derived from (seed, split, index)."""
    code = {"train": 0, "val": 1, "test": 2}.get(split, sum(map(ord, split)))
    return np.random.default_rng([seed, code, index])


def generate_split(cfg: GenConfig, split: str, n: int | None = None) -> list[SceneSample]:
    n = getattr(cfg, f"n_{split}") if n is None else n
    return [generate_scene(scene_rng(cfg.seed, split, i), cfg, f"{split}-{i:05d}") for i in range(n)]


def generate_all(cfg: GenConfig) -> dict[str, list[SceneSample]]:
    return {s: generate_split(cfg, s) for s in ("train", "val", "test")}


# --------------------------------------------------------------- verifier

def verify_caption(tokens: list[str], scene: SceneSample) -> bool:
    """Rule-based check that a caption is derivable and true of the target."""
    tgt = scene.target.latent
    boxes = [o.b3d for o in scene.objects]
    nb = nearest_neighbor(boxes, scene.target_index)
    rel = relation(boxes[scene.target_index], boxes[nb])
    nshape = scene.objects[nb].latent["shape"]
    text = " ".join(tokens)
    return any(text == render_caption(t, tgt, rel, nshape) for t in range(len(TEMPLATES)))


def caption_color(tokens: list[str]) -> str | None:
    for w in tokens:
        if w in COLORS:
            return w
    return None


# --------------------------------------------------------------------- io

def scene_to_json(s: SceneSample) -> dict:
    objs = []
    for o in s.objects:
        d = {"f3d": o.f3d.tolist(), "cls": o.class_index, "b3d": o.b3d.as_vector().tolist()}
        if o.has_2d:
            d["f2d"] = o.f2d.tolist()
            d["b2d"] = o.b2d.as_vector().tolist()
        if o.latent:
            d["latent"] = dict(o.latent)
        objs.append(d)
    return {"scene_id": s.scene_id, "objects": objs, "target_index": s.target_index,
            "references": [list(map(int, r)) for r in s.references]}


def scene_from_json(d: dict, n_cls: int = N_CLS) -> SceneSample:
    objs = []
    for o in d["objects"]:
        cls = np.zeros(n_cls)
        cls[int(o["cls"])] = 1.0
        b2d = Box2D(*o["b2d"]) if o.get("b2d") is not None else None
        objs.append(ObjectRecord(f3d=np.array(o["f3d"], dtype=float), cls=cls, b3d=Box3D.from_vector(o["b3d"]),
                                 f2d=None if o.get("f2d") is None else np.array(o["f2d"], dtype=float),
                                 b2d=b2d, latent=dict(o.get("latent", {}))))
    refs = [list(map(int, r)) for r in d["references"]]
    for r in refs:
        if not r or r[0] != BOS_ID or r[-1] != EOS_ID:
            raise ValueError("reference must start with BOS and end with EOS")
    return SceneSample(objects=objs, target_index=int(d["target_index"]), references=refs,
                       scene_id=str(d["scene_id"]))


def write_split(samples: list[SceneSample], path) -> None:
    with open(path, "w") as fh:
        for s in samples:
            fh.write(json.dumps(scene_to_json(s), separators=(",", ":")) + "\n")


def read_split(path) -> list[SceneSample]:
    out = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                out.append(scene_from_json(json.loads(line)))
            except (ValueError, KeyError, TypeError, IndexError) as exc:
                raise SplitParseError(f"{path}:{lineno}: malformed scene record ({exc})") from exc
    return out


def write_dataset(cfg: GenConfig, out_dir) -> dict[str, Path]:
    """Write train/val/test JSONL plus ``vocab.json`` into ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {}
    for split, samples in generate_all(cfg).items():
        paths[split] = out / f"{split}.jsonl"
        write_split(samples, paths[split])
    VOCAB.save(out / "vocab.json")
    paths["vocab"] = out / "vocab.json"
    return paths
