"""Joint teacher-student training, evaluation, checkpoints and the ablation harness."""
from __future__ import annotations

import csv
import io
import json
import logging
import struct
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import numerics as nx
from .cmf import FusionLayerParams, draw_indicator, fuse
from .config import RunConfig, dump_text, with_
from .losses import LossBreakdown, alignment_loss, caption_ce, cider_reward_loss, total_loss
from .metrics import Entry, MetricReport, evaluate_corpus
from .objrep import AttributeToggles, Box3D, ModalityUnavailableError, SceneSample, raw_attributes
from .synthdata import D2D, D3D, N_CLS, VOCAB, caption_color
from .transformer import CaptionNet, named_tensors
from .vocab import PAD_ID, Vocab

log = logging.getLogger(__name__)

MAGIC = b"XT2C"
FORMAT_VERSION = 1


class TrainingDivergedError(RuntimeError):
    def __init__(self, msg, checkpoint=None):
        super().__init__(msg)
        self.checkpoint = checkpoint


class CheckpointFormatError(ValueError):
    pass


class CheckpointShapeError(ValueError):
    pass


# ------------------------------------------------------------------ models

class Models:
    """Student, optional teacher and the teacher-owned fusion weights."""

    def __init__(self, cfg: RunConfig, with_teacher: bool | None = None):
        self.cfg = cfg
        seed = cfg.seed
        self.student = CaptionNet(cfg.model, "3d", np.random.default_rng([seed, 100]), D3D, N_CLS)
        self.teacher = None
        self.fusion: list[FusionLayerParams] = []
        if cfg.uses_teacher if with_teacher is None else with_teacher:
            self.teacher = CaptionNet(cfg.model, "multi", np.random.default_rng([seed, 200]), D3D, N_CLS, D2D)
            frng = np.random.default_rng([seed, 300])
            self.fusion = [FusionLayerParams.init(cfg.fusion.mode, cfg.model.d, frng)
                           for _ in range(cfg.model.L - 1)]

    def named_parameters(self) -> dict[str, nx.Tensor]:
        out = {f"student.{k}": v for k, v in self.student.named_parameters().items()}
        if self.teacher is not None:
            out.update({f"teacher.{k}": v for k, v in self.teacher.named_parameters().items()})
            out.update(named_tensors(self.fusion, "teacher.fusion."))
        return out

    def load_state(self, tensors: dict[str, np.ndarray], strict_teacher: bool = True) -> None:
        params = self.named_parameters()
        for name, t in params.items():
            if name not in tensors:
                if name.startswith("teacher.") and not strict_teacher:
                    continue
                raise CheckpointShapeError(f"checkpoint lacks tensor {name!r}")
            arr = tensors[name]
            if arr.shape != t.shape:
                raise CheckpointShapeError(f"tensor {name!r}: checkpoint shape {arr.shape} != model shape {t.shape}")
            t.data = np.array(arr, dtype=t.dtype)

    def state(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.named_parameters().items()}


def encode_pair(models: Models, batch_s: dict, batch_t: dict | None, rng=None, train: bool = True):
    """Student encoder outputs, then the teacher's with fusion injected."""
    cfg = models.cfg
    s_enc = models.student.encode(batch_s)
    if models.teacher is None or batch_t is None:
        return s_enc, None
    b = batch_s["obj_mask"].shape[0]
    fcfg = cfg.fusion
    if cfg.offline_teacher:
        fcfg = type(fcfg)(mode="off", p=fcfg.p)

    def inject(l, out):
        ind = None
        if fcfg.mode == "add_masked":
            ind = draw_indicator(rng, fcfg.p, b) if train else np.ones(b)
        return fuse(s_enc[l], out, fcfg, params=models.fusion[l] if models.fusion else None,
                    indicator=ind, heads=cfg.model.heads, obj_mask=batch_t["obj_mask"])

    t_enc = models.teacher.encode(batch_t, inject=inject)
    return s_enc, t_enc


# ------------------------------------------------------------------- adam

class Adam:
    def __init__(self, params: dict[str, nx.Tensor], lr: float, betas=(0.9, 0.999), eps=1e-8):
        self.params = params
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for k, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            m, v = self.m[k], self.v[k]
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p.data -= (self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.dtype)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None


# ------------------------------------------------------------------- data

class SplitCache:
    """Per-scene raw attribute arrays, computed once per run."""

    def __init__(self, scenes: list[SceneSample], student_toggles: str = "", teacher_toggles: str = "",
                 need_2d: bool = True):
        self.scenes = scenes
        st, tt = AttributeToggles.parse(student_toggles), AttributeToggles.parse(teacher_toggles)
        self.raw3d = [raw_attributes(s, "3d", st) for s in scenes]
        self.rawmm = [raw_attributes(s, "multi", tt) for s in scenes] if need_2d else None

    @staticmethod
    def _stack(raws: list[dict], dtype=np.float32) -> dict:
        m_max = max(r["f3d"].shape[0] for r in raws)
        out = {}
        for key in raws[0]:
            arr = np.zeros((len(raws), m_max, raws[0][key].shape[1]), dtype=dtype)
            for i, r in enumerate(raws):
                arr[i, : r[key].shape[0]] = r[key]
            out[key] = arr
        mask = np.zeros((len(raws), m_max), dtype=bool)
        for i, r in enumerate(raws):
            mask[i, : r["f3d"].shape[0]] = True
        out["obj_mask"] = mask
        return out

    def batch(self, idx, modality: str) -> dict:
        raws = self.raw3d if modality == "3d" else self.rawmm
        if raws is None:
            raise ModalityUnavailableError("split cache built without 2D fields")
        return self._stack([raws[i] for i in idx])


def pad_captions(caps: list[list[int]]) -> np.ndarray:
    t = max(len(c) for c in caps)
    out = np.full((len(caps), t), PAD_ID, dtype=np.int64)
    for i, c in enumerate(caps):
        out[i, : len(c)] = c
    return out


# -------------------------------------------------------------- checkpoint

@dataclass
class Checkpoint:
    config: RunConfig
    tensors: dict[str, np.ndarray]
    optimizer: dict[str, np.ndarray] = field(default_factory=dict)
    epoch: int = 0
    step: int = 0
    rng_state: dict = field(default_factory=dict)
    vocab: list[str] = field(default_factory=lambda: list(VOCAB.itos))
    best_val_cider: float = float("nan")

    def strip_teacher(self) -> Checkpoint:
        keep = {k: v for k, v in self.tensors.items() if not k.startswith("teacher.")}
        return Checkpoint(self.config, keep, {}, self.epoch, self.step, dict(self.rng_state), list(self.vocab),
                          self.best_val_cider)


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    meta = {"epoch": ckpt.epoch, "step": ckpt.step, "rng_state": ckpt.rng_state, "vocab": ckpt.vocab,
            "best_val_cider": ckpt.best_val_cider}
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", FORMAT_VERSION))
        for block in (dump_text(ckpt.config), json.dumps(meta, sort_keys=True)):
            raw = block.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
        items = sorted(ckpt.tensors.items()) + sorted((f"optim.{k}", v) for k, v in ckpt.optimizer.items())
        fh.write(struct.pack("<I", len(items)))
        for name, arr in items:
            nx.write_tensor(fh, name, arr)


def load_checkpoint(path, expect: RunConfig | None = None) -> Checkpoint:
    """Read a checkpoint; with ``expect`` every model tensor is shape-checked against it."""
    with open(path, "rb") as fh:
        if fh.read(4) != MAGIC:
            raise CheckpointFormatError(f"{path}: not a checkpoint (bad magic bytes)")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != FORMAT_VERSION:
            raise CheckpointFormatError(f"{path}: unsupported format version {version}")
        blocks = []
        for _ in range(2):
            (n,) = struct.unpack("<I", fh.read(4))
            blocks.append(fh.read(n).decode("utf-8"))
        cfg = RunConfig.from_text(blocks[0])
        meta = json.loads(blocks[1])
        (count,) = struct.unpack("<I", fh.read(4))
        tensors, optim = {}, {}
        for _ in range(count):
            name, arr = nx.read_tensor(fh)
            if name.startswith("optim."):
                optim[name[len("optim."):]] = arr
            else:
                tensors[name] = arr
    ckpt = Checkpoint(cfg, tensors, optim, meta["epoch"], meta["step"], meta["rng_state"], meta["vocab"],
                      meta["best_val_cider"])
    if expect is not None:
        ref = Models(expect, with_teacher=any(k.startswith("teacher.") for k in tensors))
        for name, t in ref.named_parameters().items():
            if name in tensors and tensors[name].shape != t.shape:
                raise CheckpointShapeError(
                    f"tensor {name!r}: checkpoint shape {tensors[name].shape} != config shape {t.shape}")
    return ckpt


def models_from_checkpoint(ckpt: Checkpoint, with_teacher: bool) -> Models:
    has_teacher = any(k.startswith("teacher.") for k in ckpt.tensors)
    if with_teacher and not has_teacher:
        raise ModalityUnavailableError("checkpoint has no teacher network")
    models = Models(ckpt.config, with_teacher=with_teacher)
    models.load_state(ckpt.tensors, strict_teacher=with_teacher)
    return models


# ---------------------------------------------------------------- training

@dataclass
class TrainResult:
    checkpoint: Checkpoint
    logs: list[dict]
    seconds: float = 0.0


def _rng_states(rngs: dict[str, np.random.Generator]) -> dict:
    return {k: r.bit_generator.state for k, r in rngs.items()}


def _step_losses(models: Models, cfg: RunConfig, cache: SplitCache, idx, caps: np.ndarray, epoch: int,
                 rngs) -> tuple[nx.Tensor | None, LossBreakdown]:
    batch_s = cache.batch(idx, "3d")
    need_teacher = models.teacher is not None
    batch_t = cache.batch(idx, "multi") if need_teacher else None
    inp, tgt = caps[:, :-1], caps[:, 1:]
    valid = tgt != PAD_ID
    parts = {}
    s_enc, t_enc = encode_pair(models, batch_s, batch_t, rngs["mask"], train=True)
    s_feat = models.student.features(s_enc, inp, batch_s["obj_mask"])
    if cfg.flags.ce_student:
        parts["ce_student"] = caption_ce(models.student.logits(s_feat), tgt)
    if need_teacher:
        t_feat = models.teacher.features(t_enc, inp, batch_t["obj_mask"])
        if cfg.flags.ce_teacher and not cfg.offline_teacher:
            parts["ce_teacher"] = caption_ce(models.teacher.logits(t_feat), tgt)
        if cfg.flags.align:
            parts["align"] = alignment_loss(s_feat, t_feat, valid,
                                            detach_teacher=not cfg.flags.align_bidirectional or cfg.offline_teacher)
    if cfg.variant_c and epoch >= cfg.schedule.ce_warmup_epochs:
        refs = [cache.scenes[i].references for i in idx]
        parts["cider"], _ = cider_reward_loss(models.student, batch_s, refs, cfg.cider_k, rngs["sample"],
                                              enc_outputs=s_enc)
        if cfg.flags.cider_on_teacher and need_teacher and not cfg.offline_teacher:
            t_loss, _ = cider_reward_loss(models.teacher, batch_t, refs, cfg.cider_k, rngs["sample"],
                                          enc_outputs=t_enc)
            parts["cider"] = nx.add(parts["cider"], t_loss)
    flags = cfg.flags
    if cfg.variant_c:
        flags = type(flags)(**{**flags.__dict__, "cider": True})
    return total_loss(parts, cfg.weights, flags)


def _make_checkpoint(models, opt, cfg, epoch, step, rngs, best) -> Checkpoint:
    optim = {}
    if opt is not None:
        optim = {f"m.{k}": v.copy() for k, v in opt.m.items()}
        optim.update({f"v.{k}": v.copy() for k, v in opt.v.items()})
    return Checkpoint(cfg, models.state(), optim, epoch, step, _rng_states(rngs), list(VOCAB.itos), best)


def train(cfg: RunConfig, train_split: list[SceneSample], val_split: list[SceneSample] | None = None,
          vocab: Vocab = VOCAB, log_path=None, max_steps: int | None = None,
          teacher_only: bool = False, frozen_teacher: Models | None = None) -> TrainResult:
    """Train student and teacher jointly; returns the best-validation checkpoint.

    ``teacher_only`` and ``frozen_teacher`` implement the two stages of the
    offline (pre-trained teacher) variant.
    """
    if not train_split:
        raise ValueError("empty training split")
    if cfg.model.V != len(vocab):
        cfg = with_(cfg, **{"model.V": len(vocab)})
    start = time.perf_counter()
    models = Models(cfg)
    if frozen_teacher is not None:
        models.teacher = frozen_teacher.teacher
        models.fusion = frozen_teacher.fusion
    if teacher_only:
        params = {k: v for k, v in models.named_parameters().items() if k.startswith("teacher.")}
    else:
        params = {k: v for k, v in models.named_parameters().items()
                  if not (frozen_teacher is not None and k.startswith("teacher."))}
    opt = Adam(params, cfg.optim.lr, cfg.optim.betas, cfg.optim.eps)
    rngs = {name: np.random.default_rng([cfg.seed, i]) for i, name in enumerate(("data", "mask", "sample"))}
    cache = SplitCache(train_split, cfg.student_toggles, cfg.teacher_toggles, need_2d=models.teacher is not None)
    val_cache = None
    if val_split:
        val_cache = SplitCache(val_split, cfg.student_toggles, cfg.teacher_toggles,
                               need_2d=teacher_only and models.teacher is not None)
    logs: list[dict] = []
    best = -np.inf
    best_ckpt = None
    step = 0
    n = len(train_split)
    bs = cfg.optim.batch_size
    log_fh = open(log_path, "w") if log_path else None
    try:
        for epoch in range(cfg.schedule.epochs):
            opt.lr = cfg.lr_at(epoch)
            order = rngs["data"].permutation(n)
            ref_pick = rngs["data"].integers(0, 1 << 30, n)
            sums = LossBreakdown()
            n_batches = 0
            for s in range(0, n, bs):
                idx = order[s:s + bs]
                caps = pad_captions([train_split[i].references[ref_pick[i] % len(train_split[i].references)]
                                     for i in idx])
                if teacher_only:
                    total, bd = _teacher_step(models, cfg, cache, idx, caps)
                else:
                    total, bd = _step_losses(models, cfg, cache, idx, caps, epoch, rngs)
                if total is None:
                    raise ValueError("no active loss terms")
                if not np.isfinite(total.data).all():
                    ckpt = _make_checkpoint(models, opt, cfg, epoch, step, rngs, best)
                    raise TrainingDivergedError(f"non-finite loss at epoch {epoch} step {step}", ckpt)
                opt.zero_grad()
                total.backward()
                opt.step()
                step += 1
                n_batches += 1
                for k in sums.__dict__:
                    setattr(sums, k, getattr(sums, k) + getattr(bd, k))
                if max_steps is not None and step >= max_steps:
                    break
            entry = {"epoch": epoch, "lr": opt.lr, "steps": step}
            entry.update({k: v / n_batches for k, v in sums.__dict__.items()})
            if val_cache is not None:
                mode = "teacher_multi" if teacher_only else "student_3d"
                rep = _evaluate_models(models, val_cache, mode, cfg)
                entry["val_cider"] = rep.cider
                entry["val_color_acc"] = rep.extra["color_acc"]
                score = rep.cider
            else:
                score = -entry["total"]
            logs.append(entry)
            if log_fh:
                log_fh.write(json.dumps(entry, sort_keys=True) + "\n")
                log_fh.flush()
            log.info("epoch %d %s", epoch, entry)
            if score > best:
                best = score
                best_ckpt = _make_checkpoint(models, opt, cfg, epoch + 1, step, rngs, float(score))
            if max_steps is not None and step >= max_steps:
                break
    finally:
        if log_fh:
            log_fh.close()
    assert best_ckpt is not None
    return TrainResult(best_ckpt, logs, time.perf_counter() - start)


def _teacher_step(models: Models, cfg: RunConfig, cache: SplitCache, idx, caps):
    batch_t = cache.batch(idx, "multi")
    t_enc = models.teacher.encode(batch_t)
    feats = models.teacher.features(t_enc, caps[:, :-1], batch_t["obj_mask"])
    ce = caption_ce(models.teacher.logits(feats), caps[:, 1:])
    flags = type(cfg.flags)(align=False, ce_student=False, ce_teacher=True, cider=False)
    return total_loss({"ce_teacher": ce}, cfg.weights, flags)


def train_offline(cfg: RunConfig, train_split, val_split=None, log_path=None) -> TrainResult:
    """Pre-train the teacher alone, freeze it, then train the student with CE + alignment."""
    tcfg = with_(cfg, offline_teacher=True, **{"fusion.mode": "off"})
    stage1 = train(tcfg, train_split, val_split, teacher_only=True)
    teacher = models_from_checkpoint(stage1.checkpoint, with_teacher=True)
    stage2 = train(tcfg, train_split, val_split, log_path=log_path, frozen_teacher=teacher)
    for row in stage1.logs:
        row["stage"] = "teacher"
    for row in stage2.logs:
        row["stage"] = "student"
    return TrainResult(stage2.checkpoint, stage1.logs + stage2.logs, stage1.seconds + stage2.seconds)


# -------------------------------------------------------------- evaluation

def jitter_box(box: Box3D, sigma: float, rng: np.random.Generator) -> Box3D:
    """Gaussian center jitter (scaled by box size) and log-normal size jitter."""
    size = np.asarray(box.size)
    center = np.asarray(box.center) + rng.normal(0.0, sigma, 3) * size
    new_size = size * np.exp(rng.normal(0.0, sigma, 3))
    return Box3D(tuple(center.tolist()), tuple(new_size.tolist()))


def _evaluate_models(models: Models, cache: SplitCache, mode: str, cfg: RunConfig,
                     iou_noise: float | None = None, seed: int = 0, vocab: Vocab = VOCAB) -> MetricReport:
    scenes = cache.scenes
    captions: list[list[int]] = []
    with nx.no_grad():
        for s in range(0, len(scenes), cfg.eval_batch):
            idx = np.arange(s, min(s + cfg.eval_batch, len(scenes)))
            if mode == "student_3d":
                batch = cache.batch(idx, "3d")
                enc = models.student.encode(batch)
                net = models.student
            else:
                batch = cache.batch(idx, "multi")
                if models.cfg.offline_teacher or models.cfg.fusion.mode == "off":
                    enc = models.teacher.encode(batch)
                else:
                    _, enc = encode_pair(models, cache.batch(idx, "3d"), batch, train=False)
                net = models.teacher
            seqs = net.generate(enc, batch["obj_mask"], "greedy")
            captions.extend(seqs.tolist())
    noise_rng = np.random.default_rng([seed, 77])
    entries, colors_ok = [], 0
    for sc, ids in zip(scenes, captions):
        cand = vocab.decode(ids)
        refs = [vocab.decode(r) for r in sc.references]
        pred = gt = None
        if iou_noise is not None:
            gt = sc.target.b3d
            pred = jitter_box(gt, iou_noise, noise_rng) if iou_noise > 0 else gt
        entries.append(Entry(cand, refs, pred, gt))
        colors_ok += int(caption_color(cand) == sc.target.latent.get("color"))
    report = evaluate_corpus(entries)
    report.extra = {"mode": mode, "color_acc": colors_ok / len(scenes)}
    report.extra["captions"] = [" ".join(e.candidate) for e in entries]
    return report


def evaluate(ckpt: Checkpoint, split: list[SceneSample], mode: str = "student_3d",
             iou_noise: float | None = None, seed: int = 0, include_captions: bool = False) -> MetricReport:
    """Greedy-decode every scene with the chosen inference path and score it."""
    if mode not in ("student_3d", "teacher_multi"):
        raise ValueError(f"unknown evaluation mode {mode!r}")
    if not split:
        raise ValueError("empty evaluation split")
    if mode == "teacher_multi" and not all(s.has_2d for s in split):
        raise ModalityUnavailableError("teacher_multi evaluation needs f2d/b2d on every object")
    models = models_from_checkpoint(ckpt, with_teacher=mode == "teacher_multi")
    cache = SplitCache(split, ckpt.config.student_toggles, ckpt.config.teacher_toggles,
                       need_2d=mode == "teacher_multi")
    report = _evaluate_models(models, cache, mode, ckpt.config, iou_noise, seed, Vocab(ckpt.vocab[4:]))
    if not include_captions:
        report.extra.pop("captions", None)
    return report


# ---------------------------------------------------------------- ablation

VARIANTS = {
    "full": {},
    "transcap": {"fusion.mode": "off", "flags.align": False, "flags.ce_teacher": False},
    "no_align": {"flags.align": False},
    "no_cmf": {"fusion.mode": "off"},
    "concat": {"fusion.mode": "concat"},
    "no_mask": {"fusion.mode": "add_unmasked"},
    "attention": {"fusion.mode": "attention"},
    "offline_teacher": {"offline_teacher": True, "fusion.mode": "off"},
    "variant_c": {"variant_c": True},
}


def variant_config(base: RunConfig, variant: str) -> RunConfig:
    """Config delta for a named variant; ``attr:student:-cls`` style toggles too."""
    if variant.startswith("attr:"):
        _, side, spec = variant.split(":", 2)
        if side not in ("student", "teacher"):
            raise ValueError(f"attribute toggles apply to 'student' or 'teacher', got {side!r}")
        AttributeToggles.parse(spec)
        return with_(base, **{f"{side}_toggles": spec})
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}; known: {sorted(VARIANTS)} or attr:<side>:<toggles>")
    return with_(base, **VARIANTS[variant])


def run_variant(base: RunConfig, variant: str, seed: int, data: dict) -> dict:
    """Train one (variant, seed) and score its student on the test split."""
    start = time.perf_counter()
    cfg = with_(variant_config(base, variant), seed=seed)
    if cfg.offline_teacher:
        res = train_offline(cfg, data["train"], data.get("val"))
    else:
        res = train(cfg, data["train"], data.get("val"))
    rep = evaluate(res.checkpoint, data["test"], "student_3d")
    return {"variant": variant, "seed": seed, "cider": rep.cider, "cider_x100": rep.cider_x100,
            "bleu4": rep.bleu4, "rouge_l": rep.rouge_l, "color_acc": rep.extra["color_acc"],
            "best_epoch": res.checkpoint.epoch, "seconds": round(time.perf_counter() - start, 1)}


METRIC_COLS = ("cider", "cider_x100", "bleu4", "rouge_l", "color_acc")


def aggregate(rows: list[dict]) -> list[dict]:
    out = []
    for v in dict.fromkeys(r["variant"] for r in rows):
        sub = [r for r in rows if r["variant"] == v]
        for stat, fn in (("mean", np.mean), ("sd", lambda x: np.std(x, ddof=1) if len(x) > 1 else 0.0)):
            row = {"variant": v, "seed": stat}
            row.update({c: float(fn([r[c] for r in sub])) for c in METRIC_COLS})
            out.append(row)
    return out


def ablate(base: RunConfig, variants: list[str], seeds: list[int], data: dict, workers: int = 1) -> list[dict]:
    """Train/evaluate every (variant, seed); returns per-run rows followed by mean/sd rows."""
    jobs = [(v, s) for v in variants for s in seeds]
    for v in variants:
        variant_config(base, v)
    if workers > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(workers) as ex:
            rows = list(ex.map(run_variant, [base] * len(jobs), [v for v, _ in jobs], [s for _, s in jobs],
                               [data] * len(jobs)))
    else:
        rows = [run_variant(base, v, s, data) for v, s in jobs]
    return rows + aggregate(rows)


def rows_to_csv(rows: list[dict]) -> str:
    cols = ["variant", "seed", *METRIC_COLS, "best_epoch", "seconds"]
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=cols, extrasaction="ignore", lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({c: r.get(c, "") for c in cols})
    return buf.getvalue()


def write_logs(logs: list[dict], path) -> None:
    Path(path).write_text("".join(json.dumps(r, sort_keys=True) + "\n" for r in logs))
