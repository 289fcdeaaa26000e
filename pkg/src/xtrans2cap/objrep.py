"""Object tokens for the 3D-only (student) and multi-modal (teacher) inputs."""
from __future__ import annotations

from dataclasses import dataclass, field, fields

import numpy as np

from . import numerics as nx
from .numerics import Tensor

SELF_PE = (0.0, 0.0, 0.0, 1.0, 1.0, 1.0)


class DegenerateBoxError(ValueError):
    pass


class ModalityUnavailableError(ValueError):
    """2D fields were requested from a record or split that lacks them."""


class ConfigurationError(ValueError):
    pass


@dataclass(frozen=True)
class Box3D:
    center: tuple[float, float, float]
    size: tuple[float, float, float]

    def __post_init__(self):
        if len(self.center) != 3 or len(self.size) != 3:
            raise ValueError("Box3D needs 3 center and 3 size components")
        if min(self.size) <= 0:
            raise DegenerateBoxError(f"box size must be positive, got {self.size}")

    def as_vector(self) -> np.ndarray:
        return np.array([*self.center, *self.size], dtype=np.float64)

    @classmethod
    def from_vector(cls, v) -> Box3D:
        v = [float(x) for x in v]
        return cls(tuple(v[:3]), tuple(v[3:6]))


@dataclass(frozen=True)
class Box2D:
    """Normalised image box: center (u, v) and extent (w, h)."""

    u: float
    v: float
    w: float
    h: float

    def __post_init__(self):
        if self.w <= 0 or self.h <= 0:
            raise DegenerateBoxError("2D box extents must be positive")

    def as_vector(self) -> np.ndarray:
        return np.array([self.u, self.v, self.w, self.h], dtype=np.float64)


@dataclass
class ObjectRecord:
    f3d: np.ndarray
    cls: np.ndarray
    b3d: Box3D
    f2d: np.ndarray | None = None
    b2d: Box2D | None = None
    latent: dict = field(default_factory=dict)

    def __post_init__(self):
        self.f3d = np.asarray(self.f3d, dtype=np.float64)
        self.cls = np.asarray(self.cls, dtype=np.float64)
        if not (np.count_nonzero(self.cls == 1.0) == 1 and np.count_nonzero(self.cls) == 1):
            raise ValueError("cls must be a one-hot vector")
        if (self.f2d is None) != (self.b2d is None):
            raise ValueError("f2d and b2d must be both present or both absent")
        if self.f2d is not None:
            self.f2d = np.asarray(self.f2d, dtype=np.float64)

    @property
    def has_2d(self) -> bool:
        return self.f2d is not None

    @property
    def class_index(self) -> int:
        return int(np.argmax(self.cls))


@dataclass
class SceneSample:
    objects: list[ObjectRecord]
    target_index: int
    references: list[list[int]]
    scene_id: str

    def __post_init__(self):
        if not self.objects:
            raise ValueError("a scene needs at least one object")
        if not 0 <= self.target_index < len(self.objects):
            raise ValueError(f"target_index {self.target_index} out of range")
        if not self.references:
            raise ValueError("a scene needs at least one reference caption")

    @property
    def target(self) -> ObjectRecord:
        return self.objects[self.target_index]

    @property
    def has_2d(self) -> bool:
        return all(o.has_2d for o in self.objects)


@dataclass(frozen=True)
class AttributeToggles:
    """Which input attributes are fed; off means zeros of the same width."""

    f3d: bool = True
    cls: bool = True
    b3d: bool = True
    pe: bool = True
    f2d: bool = True
    b2d: bool = True

    @classmethod
    def parse(cls, text: str) -> AttributeToggles:
        """``"-cls,-pe"`` style: names prefixed with '-' are switched off."""
        off = {t.strip().lstrip("-") for t in text.split(",") if t.strip()}
        names = {f.name for f in fields(cls)}
        unknown = off - names
        if unknown:
            raise ConfigurationError(f"unknown attribute toggles: {sorted(unknown)}")
        return cls(**{n: n not in off for n in names})

    def describe(self) -> str:
        return ",".join(f"-{f.name}" for f in fields(self) if not getattr(self, f.name))


ALL_ON = AttributeToggles()


def positional_encoding(target: Box3D, other: Box3D) -> np.ndarray:
    """Center offset of ``other`` from ``target`` followed by relative size."""
    if min(target.size) <= 0:
        raise DegenerateBoxError(f"target box has non-positive size {target.size}")
    c_t, s_t = np.asarray(target.center, float), np.asarray(target.size, float)
    c_o, s_o = np.asarray(other.center, float), np.asarray(other.size, float)
    return np.concatenate([c_o - c_t, s_o / s_t])


# ------------------------------------------------------------------ params

@dataclass
class InputProjectionParams:
    """W1 (box), W2 (pe), optional W3 (2D box) and the final affine+ReLU."""

    W1: Tensor
    W2: Tensor
    T_w: Tensor
    T_b: Tensor
    W3: Tensor | None = None
    d3d: int = 32
    n_cls: int = 18
    d2d: int = 0

    @property
    def multi(self) -> bool:
        return self.W3 is not None

    @property
    def width(self) -> int:
        return self.T_w.shape[1]

    @classmethod
    def init(cls, rng: np.random.Generator, d: int, d3d: int = 32, n_cls: int = 18,
             d2d: int | None = None, dtype=np.float32) -> InputProjectionParams:
        """``d2d=None`` gives the 3D-only projection; an int enables the 2D slots."""

        def glorot(n_in, n_out):
            lim = np.sqrt(6.0 / (n_in + n_out))
            return Tensor(rng.uniform(-lim, lim, (n_in, n_out)).astype(dtype), requires_grad=True)

        n_in = d3d + n_cls + 2 * d
        W3 = None
        if d2d is not None:
            n_in += d2d + d
            W3 = glorot(4, d)
        return cls(W1=glorot(6, d), W2=glorot(6, d), T_w=glorot(n_in, d),
                   T_b=Tensor(np.zeros(d, dtype=dtype), requires_grad=True),
                   W3=W3, d3d=d3d, n_cls=n_cls, d2d=d2d or 0)

    def named(self) -> dict[str, Tensor]:
        out = {"W1": self.W1, "W2": self.W2, "T_w": self.T_w, "T_b": self.T_b}
        if self.W3 is not None:
            out["W3"] = self.W3
        return out


# ------------------------------------------------------------------ tokens

def raw_attributes(scene: SceneSample, modality: str, toggles: AttributeToggles = ALL_ON) -> dict:
    """Per-object input arrays for one scene (row m = object m).

    Toggled-off attributes are zeroed here so the parameter shapes stay fixed.
    """
    if modality not in ("3d", "multi"):
        raise ConfigurationError(f"unknown modality {modality!r}")
    target = scene.target.b3d
    objs = scene.objects
    out = {
        "f3d": np.stack([o.f3d for o in objs]),
        "cls": np.stack([o.cls for o in objs]),
        "b3d": np.stack([o.b3d.as_vector() for o in objs]),
        "pe": np.stack([positional_encoding(target, o.b3d) for o in objs]),
    }
    # the target's own encoding is the self-reference value by construction
    out["pe"][scene.target_index] = SELF_PE
    if modality == "multi":
        if not scene.has_2d:
            raise ModalityUnavailableError(f"scene {scene.scene_id} lacks 2D fields")
        out["f2d"] = np.stack([o.f2d for o in objs])
        out["b2d"] = np.stack([o.b2d.as_vector() for o in objs])
    for name, arr in out.items():
        if not getattr(toggles, name):
            out[name] = np.zeros_like(arr)
    return out


def collate(scenes: list[SceneSample], modality: str, toggles: AttributeToggles = ALL_ON,
            dtype=np.float32) -> dict:
    """Stack scenes into padded [B, M_max, *] arrays plus an object mask."""
    per = [raw_attributes(s, modality, toggles) for s in scenes]
    m_max = max(len(s.objects) for s in scenes)
    batch = {}
    for key in per[0]:
        width = per[0][key].shape[1]
        arr = np.zeros((len(scenes), m_max, width), dtype=dtype)
        for i, p in enumerate(per):
            arr[i, : p[key].shape[0]] = p[key]
        batch[key] = arr
    mask = np.zeros((len(scenes), m_max), dtype=bool)
    for i, s in enumerate(scenes):
        mask[i, : len(s.objects)] = True
    batch["obj_mask"] = mask
    return batch


def project_tokens(raw: dict, params: InputProjectionParams) -> Tensor:
    """Apply W1/W2(/W3) and the affine+ReLU transformation to raw arrays."""
    f3d, cls = raw["f3d"], raw["cls"]
    if f3d.shape[-1] != params.d3d or cls.shape[-1] != params.n_cls:
        raise ConfigurationError(
            f"record widths (f3d={f3d.shape[-1]}, cls={cls.shape[-1]}) do not match "
            f"params (f3d={params.d3d}, cls={params.n_cls})")
    dt = params.T_w.dtype
    parts = [
        Tensor(f3d.astype(dt)),
        Tensor(cls.astype(dt)),
        nx.matmul(Tensor(raw["b3d"].astype(dt)), params.W1),
        nx.matmul(Tensor(raw["pe"].astype(dt)), params.W2),
    ]
    if params.multi:
        if "f2d" not in raw:
            raise ModalityUnavailableError("multi-modal projection needs f2d/b2d")
        if raw["f2d"].shape[-1] != params.d2d:
            raise ConfigurationError(f"f2d width {raw['f2d'].shape[-1]} != {params.d2d}")
        parts.append(Tensor(raw["f2d"].astype(dt)))
        parts.append(nx.matmul(Tensor(raw["b2d"].astype(dt)), params.W3))
    x = nx.concat(parts, axis=-1)
    return nx.relu(nx.linear(x, params.T_w, params.T_b))


def _single(record: ObjectRecord, target: Box3D, modality: str,
            toggles: AttributeToggles = ALL_ON) -> dict:
    raw = {
        "f3d": record.f3d[None],
        "cls": record.cls[None],
        "b3d": record.b3d.as_vector()[None],
        "pe": positional_encoding(target, record.b3d)[None],
    }
    if modality == "multi":
        if not record.has_2d:
            raise ModalityUnavailableError("record has no 2D feature/box")
        raw["f2d"] = record.f2d[None]
        raw["b2d"] = record.b2d.as_vector()[None]
    for name in raw:
        if not getattr(toggles, name):
            raw[name] = np.zeros_like(raw[name])
    return raw


def build_3d_token(record: ObjectRecord, target: Box3D, params: InputProjectionParams) -> np.ndarray:
    if params.multi:
        raise ConfigurationError("build_3d_token needs 3D-only projection params")
    with nx.no_grad():
        return project_tokens(_single(record, target, "3d"), params).data[0]


def build_multi_token(record: ObjectRecord, target: Box3D, params: InputProjectionParams,
                      toggles: AttributeToggles = ALL_ON) -> np.ndarray:
    if not params.multi:
        raise ConfigurationError("build_multi_token needs multi-modal projection params")
    with nx.no_grad():
        return project_tokens(_single(record, target, "multi", toggles), params).data[0]


def assemble_tokens(scene: SceneSample, modality: str, params: InputProjectionParams,
                    toggles: AttributeToggles = ALL_ON) -> Tensor:
    """M x d token matrix for one scene; row m is object m."""
    raw = raw_attributes(scene, modality, toggles)
    return project_tokens(raw, params)
