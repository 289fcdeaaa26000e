"""Feature alignment, captioning cross-entropy, CIDEr-D reward and their weighted sum."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .metrics import Entry, cider_d_scores
from .numerics import DimensionError, Tensor
from .vocab import PAD_ID, strip_special

HUBER_DELTA = 1.0


class UndefinedAverageError(ValueError):
    pass


@dataclass
class LossWeights:
    alpha: float = 1.0   # alignment
    beta: float = 1.0    # captioning cross-entropy
    gamma: float = 0.1   # CIDEr-D reward

    def __post_init__(self):
        if min(self.alpha, self.beta, self.gamma) < 0:
            raise ValueError("loss weights must be nonnegative")


@dataclass
class LossFlags:
    align: bool = True
    ce_student: bool = True
    ce_teacher: bool = True
    cider: bool = False
    align_bidirectional: bool = False
    cider_on_teacher: bool = False


@dataclass
class LossBreakdown:
    align: float = 0.0
    ce_student: float = 0.0
    ce_teacher: float = 0.0
    cider_reward: float = 0.0
    total: float = 0.0


def alignment_loss(student: Tensor, teacher: Tensor, mask: np.ndarray | None = None,
                   detach_teacher: bool = True, delta: float = HUBER_DELTA) -> Tensor:
    """Mean Huber loss between decoder features.

    ``mask`` ([B, T] or [T]) selects caption positions that count; the mean is
    over selected positions times feature width.
    """
    if student.shape != teacher.shape:
        raise DimensionError(f"alignment shape mismatch: {student.shape} vs {teacher.shape}")
    diff = student.data - teacher.data
    if mask is None:
        w = np.ones(diff.shape[:-1], dtype=diff.dtype)
    else:
        w = np.asarray(mask, dtype=diff.dtype).reshape(diff.shape[:-1])
    count = w.sum() * diff.shape[-1]
    if count == 0:
        raise UndefinedAverageError("alignment mask selects nothing")
    w = w[..., None]
    a = np.abs(diff)
    per = np.where(a <= delta, 0.5 * diff * diff, delta * (a - 0.5 * delta))
    value = np.asarray((per * w).sum() / count, dtype=diff.dtype)
    dval = np.clip(diff, -delta, delta) * w / count
    teacher_in = teacher.detach() if detach_teacher else teacher

    def backward(g):
        gs = g * dval
        return gs, -gs

    return nx.make_op(value, (student, teacher_in), backward)


def caption_ce(logits: Tensor, targets, pad_id: int = PAD_ID) -> Tensor:
    """Mean negative log-likelihood of ``targets`` over non-pad positions.

    ``logits`` is [T, V] or [B, T, V]; ``targets`` has the matching leading shape.
    """
    tgt = np.asarray(targets)
    lg = logits.data
    if lg.shape[:-1] != tgt.shape:
        raise DimensionError(f"logits {lg.shape} do not match targets {tgt.shape}")
    valid = tgt != pad_id
    n = int(valid.sum())
    if n == 0:
        raise UndefinedAverageError("all target positions are padding")
    z = lg - lg.max(axis=-1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    safe = np.where(valid, tgt, 0)
    picked = np.take_along_axis(logp, safe[..., None], axis=-1)[..., 0]
    value = np.asarray(-(picked * valid).sum() / n, dtype=lg.dtype)

    def backward(g):
        grad = np.exp(logp)
        np.put_along_axis(grad, safe[..., None], np.take_along_axis(grad, safe[..., None], axis=-1) - 1.0, axis=-1)
        return (g * grad * (valid[..., None] / n),)

    return nx.make_op(value, (logits,), backward)


def sequence_logprob(logits: Tensor, seqs: np.ndarray) -> Tensor:
    """Sum over t of log p(seqs[:, t+1] | prefix) for rows of ``seqs`` [N, T].

    ``logits`` are the teacher-forced outputs for ``seqs[:, :-1]``.  Positions
    after the first EOS (PAD) are excluded.
    """
    tgt = seqs[:, 1:]
    valid = tgt != PAD_ID
    lp = nx.log_softmax(logits, axis=-1)
    picked_np = np.zeros(lp.shape, dtype=lp.dtype)
    np.put_along_axis(picked_np, np.where(valid, tgt, 0)[..., None], 1.0, axis=-1)
    picked_np *= valid[..., None]
    return nx.sum(nx.sum(nx.mul(lp, Tensor(picked_np)), axis=-1), axis=-1)


def cider_rewards(samples: np.ndarray, references: list[list[list[int]]], k: int) -> np.ndarray:
    """CIDEr-D of every sampled caption against its scene's references.

    Document frequencies are taken over the scenes in this batch.
    """
    corpus = []
    for i, seq in enumerate(samples):
        refs = references[i // k]
        corpus.append(Entry([str(t) for t in strip_special(seq)],
                            [[str(t) for t in strip_special(r)] for r in refs]))
    return np.asarray(cider_d_scores(corpus))


def self_critical_loss(seq_logprob: Tensor, rewards: np.ndarray, k: int) -> Tensor:
    """-(1/N) sum_i (r_i - mean of its scene's k rewards) * log p(sample_i)."""
    r = np.asarray(rewards, dtype=np.float64).reshape(-1, k)
    adv = (r - r.mean(axis=1, keepdims=True)).reshape(-1)
    n = adv.size
    return nx.mul(nx.sum(nx.mul(seq_logprob, Tensor(adv.astype(seq_logprob.dtype)))), -1.0 / n)


def cider_reward_loss(net, batch: dict, references, k: int, rng: np.random.Generator,
                      enc_outputs=None, temperature: float = 1.0):
    """Mean-baseline self-critical loss for ``net`` on a collated batch.

    Returns (loss tensor, mean reward).  Rewards are constants; the gradient
    flows through the log-probabilities of the sampled tokens only.
    """
    if k < 2:
        raise ValueError("cider_reward_loss needs k >= 2 samples for the mean baseline")
    if enc_outputs is None:
        enc_outputs = net.encode(batch)
    seqs, _ = net.generate([e.detach() for e in enc_outputs], batch["obj_mask"], "sample",
                           k=k, rng=rng, temperature=temperature)
    rewards = cider_rewards(seqs, references, k)
    mask = np.repeat(batch["obj_mask"], k, axis=0)
    enc_k = [nx.index(e, np.repeat(np.arange(e.shape[0]), k)) for e in enc_outputs]
    logits = net.logits(net.features(enc_k, seqs[:, :-1], mask))
    loss = self_critical_loss(sequence_logprob(logits, seqs), rewards, k)
    return loss, float(rewards.mean())


def total_loss(parts: dict[str, Tensor], w: LossWeights, flags: LossFlags) -> tuple[Tensor | None, LossBreakdown]:
    """alpha*align + beta*(ce_student + ce_teacher) + gamma*cider over active terms."""
    terms = []
    bd = LossBreakdown()
    spec = (("align", "align", w.alpha, flags.align),
            ("ce_student", "ce_student", w.beta, flags.ce_student),
            ("ce_teacher", "ce_teacher", w.beta, flags.ce_teacher),
            ("cider", "cider_reward", w.gamma, flags.cider))
    for key, field_name, weight, active in spec:
        t = parts.get(key)
        if not active or t is None:
            continue
        setattr(bd, field_name, t.item())
        if weight != 0:
            terms.append(nx.mul(t, float(weight)))
    if not terms:
        return None, bd
    total = terms[0]
    for t in terms[1:]:
        total = nx.add(total, t)
    bd.total = total.item()
    return total, bd
