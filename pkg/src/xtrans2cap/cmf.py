"""Student -> teacher cross-modal fusion between matching encoder layers.

Fusion only ever writes into the teacher's path.  The student's own forward
pass never sees a teacher tensor, which is what makes the teacher discardable.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .numerics import DimensionError, Tensor
from .transformer import AttnParams, key_bias, multi_head_attention

MODES = ("add_masked", "add_unmasked", "concat", "attention", "off")


@dataclass
class FusionConfig:
    mode: str = "add_masked"
    p: float = 0.2
    grad_to_student: bool = True

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown fusion mode {self.mode!r}; expected one of {MODES}")
        if not 0.0 <= self.p <= 1.0:
            raise ValueError(f"mask probability must be in [0, 1], got {self.p}")


@dataclass
class FusionLayerParams:
    """Extra weights some variants need; they belong to the teacher."""

    w: Tensor | None = None        # concat: [2d, d]
    b: Tensor | None = None
    attn: AttnParams | None = None  # attention variant

    @classmethod
    def init(cls, mode: str, d: int, rng: np.random.Generator, dtype=np.float32) -> FusionLayerParams:
        if mode == "concat":
            lim = np.sqrt(6.0 / (3 * d))
            return cls(w=Tensor(rng.uniform(-lim, lim, (2 * d, d)).astype(dtype), requires_grad=True),
                       b=Tensor(np.zeros(d, dtype=dtype), requires_grad=True))
        if mode == "attention":
            return cls(attn=AttnParams.init(rng, d, dtype))
        return cls()


def draw_indicator(rng: np.random.Generator, p: float, batch: int) -> np.ndarray:
    """Keep (1) with probability 1-p, mask (0) with probability p; one per sample."""
    return (rng.random(batch) >= p).astype(np.float64)


def fuse(student_l: Tensor, teacher_l: Tensor, cfg: FusionConfig, rng: np.random.Generator | None = None,
         params: FusionLayerParams | None = None, indicator: np.ndarray | None = None,
         heads: int = 4, obj_mask: np.ndarray | None = None) -> Tensor:
    """Teacher input for the next encoder layer.

    ``student_l``/``teacher_l`` are [M, d] or [B, M, d].  ``indicator`` (one
    value per sample) overrides the random draw; evaluation passes ones.
    """
    if student_l.shape != teacher_l.shape:
        raise DimensionError(f"fusion shape mismatch: {student_l.shape} vs {teacher_l.shape}")
    if cfg.mode == "off":
        return teacher_l
    s = student_l if cfg.grad_to_student else student_l.detach()
    if cfg.mode == "add_unmasked":
        return nx.add(s, teacher_l)
    if cfg.mode == "add_masked":
        batch = s.shape[0] if s.ndim == 3 else 1
        if indicator is None:
            if rng is None:
                raise ValueError("add_masked fusion needs an rng or an explicit indicator")
            indicator = draw_indicator(rng, cfg.p, batch)
        ind = np.asarray(indicator, dtype=s.dtype).reshape((batch, 1, 1) if s.ndim == 3 else (1, 1))
        return nx.add(s, nx.mul(teacher_l, Tensor(ind)))
    if params is None:
        raise ValueError(f"fusion mode {cfg.mode!r} needs its layer parameters")
    if cfg.mode == "concat":
        return nx.linear(nx.concat([s, teacher_l], axis=-1), params.w, params.b)
    # attention: teacher queries attend to student keys/values, residual on the teacher
    single = s.ndim == 2
    q = nx.reshape(teacher_l, (1, *teacher_l.shape)) if single else teacher_l
    kv = nx.reshape(s, (1, *s.shape)) if single else s
    att = multi_head_attention(q, kv, params.attn, heads, key_bias(obj_mask, q.shape[0], q.shape[1]))
    if single:
        att = nx.reshape(att, att.shape[1:])
    return nx.add(teacher_l, att)


def fuse_variant(student_l: Tensor, teacher_l: Tensor, mode: str, p: float = 0.2, **kw) -> Tensor:
    return fuse(student_l, teacher_l, FusionConfig(mode=mode, p=p), **kw)
