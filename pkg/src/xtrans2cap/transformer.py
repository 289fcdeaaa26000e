"""Memory-augmented encoder and meshed decoder (the TransCap captioner).

Batched tensors use the layout [B, M, d] for object tokens and [B, T, d] for
caption positions.  Single-scene helpers accept [M, d] and add the batch axis.
"""
from __future__ import annotations

from dataclasses import dataclass, fields, is_dataclass

import numpy as np

from . import numerics as nx
from .numerics import Tensor
from .vocab import BOS_ID, EOS_ID, PAD_ID

NEG_INF = -1e9


class VocabularyError(ValueError):
    pass


@dataclass
class ModelConfig:
    L: int = 3
    d: int = 128
    heads: int = 4
    n_mem: int = 8
    d_ff: int = 256
    V: int = 64
    max_len: int = 24
    gate: str = "computed"  # "computed": sigmoid(affine([Y; CA])); "free": sigmoid(per-dim param)

    def __post_init__(self):
        for name in ("L", "d", "heads", "d_ff", "V", "max_len"):
            if getattr(self, name) <= 0:
                raise ValueError(f"ModelConfig.{name} must be positive")
        if self.n_mem < 0:
            raise ValueError("n_mem must be >= 0")
        if self.d % self.heads:
            raise ValueError(f"heads={self.heads} does not divide d={self.d}")
        if self.gate not in ("computed", "free"):
            raise ValueError(f"unknown gate form {self.gate!r}")


# ------------------------------------------------------------------ params

def _glorot(rng, n_in, n_out, dtype):
    lim = np.sqrt(6.0 / (n_in + n_out))
    return Tensor(rng.uniform(-lim, lim, (n_in, n_out)).astype(dtype), requires_grad=True)


def _zeros(shape, dtype, value=0.0):
    return Tensor(np.full(shape, value, dtype=dtype), requires_grad=True)


@dataclass
class AttnParams:
    wq: Tensor
    bq: Tensor
    wk: Tensor
    bk: Tensor
    wv: Tensor
    bv: Tensor
    wo: Tensor
    bo: Tensor

    @classmethod
    def init(cls, rng, d, dtype):
        return cls(_glorot(rng, d, d, dtype), _zeros(d, dtype), _glorot(rng, d, d, dtype), _zeros(d, dtype),
                   _glorot(rng, d, d, dtype), _zeros(d, dtype), _glorot(rng, d, d, dtype), _zeros(d, dtype))


@dataclass
class EncoderLayerParams:
    attn: AttnParams
    mk: Tensor  # persistent memory keys [n_mem, d]
    mv: Tensor  # persistent memory values [n_mem, d]
    ff1_w: Tensor
    ff1_b: Tensor
    ff2_w: Tensor
    ff2_b: Tensor
    ln1_g: Tensor
    ln1_b: Tensor
    ln2_g: Tensor
    ln2_b: Tensor

    @classmethod
    def init(cls, rng, cfg: ModelConfig, dtype):
        d, dk = cfg.d, cfg.d // cfg.heads
        return cls(
            attn=AttnParams.init(rng, d, dtype),
            mk=Tensor((rng.standard_normal((cfg.n_mem, d)) / np.sqrt(dk)).astype(dtype), requires_grad=True),
            mv=Tensor((rng.standard_normal((cfg.n_mem, d)) / np.sqrt(cfg.n_mem or 1)).astype(dtype),
                      requires_grad=True),
            ff1_w=_glorot(rng, d, cfg.d_ff, dtype), ff1_b=_zeros(cfg.d_ff, dtype),
            ff2_w=_glorot(rng, cfg.d_ff, d, dtype), ff2_b=_zeros(d, dtype),
            ln1_g=_zeros(d, dtype, 1.0), ln1_b=_zeros(d, dtype),
            ln2_g=_zeros(d, dtype, 1.0), ln2_b=_zeros(d, dtype),
        )

    @property
    def n_mem(self) -> int:
        return self.mk.shape[0]


@dataclass
class GateParams:
    w: Tensor | None  # [2d, d] for computed gates
    b: Tensor         # [d]; the free per-dimension logit when w is None


@dataclass
class DecoderParams:
    emb: Tensor
    self_attn: AttnParams
    ln1_g: Tensor
    ln1_b: Tensor
    cross: list[AttnParams]
    gates: list[GateParams]
    ln2_g: Tensor
    ln2_b: Tensor
    ff1_w: Tensor
    ff1_b: Tensor
    ff2_w: Tensor
    ff2_b: Tensor
    ln3_g: Tensor
    ln3_b: Tensor
    out_w: Tensor
    out_b: Tensor

    @classmethod
    def init(cls, rng, cfg: ModelConfig, dtype):
        d = cfg.d
        if cfg.gate == "computed":
            gates = [GateParams(_glorot(rng, 2 * d, d, dtype), _zeros(d, dtype)) for _ in range(cfg.L)]
        else:
            gates = [GateParams(None, _zeros(d, dtype)) for _ in range(cfg.L)]
        return cls(
            emb=Tensor((rng.standard_normal((cfg.V, d)) * 0.1).astype(dtype), requires_grad=True),
            self_attn=AttnParams.init(rng, d, dtype),
            ln1_g=_zeros(d, dtype, 1.0), ln1_b=_zeros(d, dtype),
            cross=[AttnParams.init(rng, d, dtype) for _ in range(cfg.L)],
            gates=gates,
            ln2_g=_zeros(d, dtype, 1.0), ln2_b=_zeros(d, dtype),
            ff1_w=_glorot(rng, d, cfg.d_ff, dtype), ff1_b=_zeros(cfg.d_ff, dtype),
            ff2_w=_glorot(rng, cfg.d_ff, d, dtype), ff2_b=_zeros(d, dtype),
            ln3_g=_zeros(d, dtype, 1.0), ln3_b=_zeros(d, dtype),
            out_w=_glorot(rng, d, cfg.V, dtype), out_b=_zeros(cfg.V, dtype),
        )

    @property
    def V(self) -> int:
        return self.emb.shape[0]


def named_tensors(obj, prefix: str = "") -> dict[str, Tensor]:
    """Flatten nested dataclasses/lists of tensors into dotted names."""
    out: dict[str, Tensor] = {}
    if isinstance(obj, Tensor):
        out[prefix.rstrip(".")] = obj
    elif is_dataclass(obj):
        for f in fields(obj):
            v = getattr(obj, f.name)
            if isinstance(v, (Tensor, list)) or is_dataclass(v):
                out.update(named_tensors(v, f"{prefix}{f.name}."))
    elif isinstance(obj, (list, tuple)):
        for i, v in enumerate(obj):
            out.update(named_tensors(v, f"{prefix}{i}."))
    return out


# --------------------------------------------------------------- attention

def _split_heads(x: Tensor, heads: int) -> Tensor:
    b, t, d = x.shape
    return nx.transpose(nx.reshape(x, (b, t, heads, d // heads)), (0, 2, 1, 3))


def multi_head_attention(q_in: Tensor, kv_in: Tensor, p: AttnParams, heads: int,
                         bias: np.ndarray | None = None, mem_k: Tensor | None = None,
                         mem_v: Tensor | None = None) -> Tensor:
    """Scaled dot-product attention; memory rows are appended after projection.

    ``bias`` is added to the scores and must broadcast to [B, 1, Tq, Tk(+n_mem)].
    """
    b, tq, d = q_in.shape
    dk = d // heads
    q = _split_heads(nx.linear(q_in, p.wq, p.bq), heads)
    k = nx.linear(kv_in, p.wk, p.bk)
    v = nx.linear(kv_in, p.wv, p.bv)
    if mem_k is not None and mem_k.shape[0] > 0:
        n = mem_k.shape[0]
        k = nx.concat([k, nx.broadcast_to(mem_k, (b, n, d))], axis=1)
        v = nx.concat([v, nx.broadcast_to(mem_v, (b, n, d))], axis=1)
    tk = k.shape[1]
    kt = nx.transpose(nx.reshape(k, (b, tk, heads, dk)), (0, 2, 3, 1))
    v = _split_heads(v, heads)
    scores = nx.mul(nx.matmul(q, kt), 1.0 / np.sqrt(dk))
    if bias is not None:
        scores = nx.add(scores, Tensor(bias.astype(scores.dtype)))
    att = nx.softmax(scores, axis=-1)
    o = nx.transpose(nx.matmul(att, v), (0, 2, 1, 3))
    return nx.linear(nx.reshape(o, (b, tq, d)), p.wo, p.bo)


def key_bias(obj_mask: np.ndarray | None, batch: int, n_keys: int, n_mem: int = 0) -> np.ndarray | None:
    """Additive score bias hiding padded objects; memory slots always visible."""
    if obj_mask is None or obj_mask.all():
        return None
    bias = np.where(obj_mask, 0.0, NEG_INF)
    if n_mem:
        bias = np.concatenate([bias, np.zeros((batch, n_mem))], axis=1)
    return bias[:, None, None, :]


def _batched(x: Tensor) -> tuple[Tensor, bool]:
    if x.ndim == 2:
        return nx.reshape(x, (1, *x.shape)), True
    return x, False


def memory_self_attention(X: Tensor, p: EncoderLayerParams, heads: int,
                          obj_mask: np.ndarray | None = None) -> Tensor:
    """Self-attention over objects with the layer's persistent memory slots."""
    X, single = _batched(X)
    b, m, _ = X.shape
    out = multi_head_attention(X, X, p.attn, heads, key_bias(obj_mask, b, m, p.n_mem), p.mk, p.mv)
    return nx.reshape(out, out.shape[1:]) if single else out


def encoder_layer(X: Tensor, p: EncoderLayerParams, heads: int, obj_mask=None) -> Tensor:
    h = nx.layer_norm(nx.add(X, memory_self_attention(X, p, heads, obj_mask)), p.ln1_g, p.ln1_b)
    ff = nx.linear(nx.relu(nx.linear(h, p.ff1_w, p.ff1_b)), p.ff2_w, p.ff2_b)
    return nx.layer_norm(nx.add(h, ff), p.ln2_g, p.ln2_b)


def encode(tokens: Tensor, layers: list[EncoderLayerParams], heads: int, obj_mask=None,
           inject=None) -> list[Tensor]:
    """Run every encoder layer and return all L outputs.

    ``inject(l, out_l)`` may return a replacement input for layer l+1 (the
    teacher side of cross-modal fusion); the returned list always holds the
    layers' own outputs.
    """
    outs = []
    x = tokens
    for l, p in enumerate(layers):
        out = encoder_layer(x, p, heads, obj_mask)
        outs.append(out)
        x = out
        if inject is not None and l < len(layers) - 1:
            x = inject(l, out)
    return outs


# ----------------------------------------------------------------- decoder

def sinusoid_table(n: int, d: int) -> np.ndarray:
    pos = np.arange(n)[:, None]
    i = np.arange(d)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / d)
    return np.where(i % 2 == 0, np.sin(angle), np.cos(angle))


def causal_bias(t: int) -> np.ndarray:
    return np.triu(np.full((t, t), NEG_INF), k=1)[None, None]


def decoder_features(enc_outputs: list[Tensor], prefix, p: DecoderParams, heads: int,
                     obj_mask=None) -> Tensor:
    """Final decoder hidden states [B, T, d] for teacher-forced ``prefix`` [B, T]."""
    ids = np.asarray(prefix)
    if ids.ndim == 1:
        ids = ids[None]
    if ids.max(initial=0) >= p.V or ids.min(initial=0) < 0:
        raise VocabularyError(f"token id outside vocabulary of size {p.V}")
    b, t = ids.shape
    d = p.emb.shape[1]
    dt = p.emb.dtype
    y = nx.add(nx.embedding(p.emb, ids), Tensor(sinusoid_table(t, d).astype(dt)))
    y = nx.layer_norm(nx.add(y, multi_head_attention(y, y, p.self_attn, heads, causal_bias(t))),
                      p.ln1_g, p.ln1_b)
    m = enc_outputs[0].shape[1]
    kb = key_bias(obj_mask, b, m)
    mesh = None
    for x_l, ca, gate in zip(enc_outputs, p.cross, p.gates):
        c = multi_head_attention(y, x_l, ca, heads, kb)
        if gate.w is not None:
            alpha = nx.sigmoid(nx.linear(nx.concat([y, c], axis=-1), gate.w, gate.b))
        else:
            alpha = nx.sigmoid(gate.b)
        term = nx.mul(alpha, c)
        mesh = term if mesh is None else nx.add(mesh, term)
    y = nx.layer_norm(nx.add(y, mesh), p.ln2_g, p.ln2_b)
    ff = nx.linear(nx.relu(nx.linear(y, p.ff1_w, p.ff1_b)), p.ff2_w, p.ff2_b)
    return nx.layer_norm(nx.add(y, ff), p.ln3_g, p.ln3_b)


def project_logits(feats: Tensor, p: DecoderParams) -> Tensor:
    return nx.linear(feats, p.out_w, p.out_b)


def decode_logits(enc_outputs: list[Tensor], prefix, p: DecoderParams, heads: int,
                  obj_mask=None) -> Tensor:
    """Next-token logits for every prefix position: [T, V] (or [B, T, V])."""
    single = np.asarray(prefix).ndim == 1 and enc_outputs[0].ndim == 2
    if single:
        enc_outputs = [nx.reshape(e, (1, *e.shape)) for e in enc_outputs]
    logits = project_logits(decoder_features(enc_outputs, prefix, p, heads, obj_mask), p)
    return nx.reshape(logits, logits.shape[1:]) if single else logits


# -------------------------------------------------------------- generation

def _tile(enc_outputs, obj_mask, k):
    enc = [Tensor(np.repeat(e.data, k, axis=0)) for e in enc_outputs]
    mask = None if obj_mask is None else np.repeat(obj_mask, k, axis=0)
    return enc, mask


def _last_logprobs(enc, seqs, p, heads, mask, temperature=1.0):
    logits = decode_logits(enc, seqs, p, heads, mask).data[:, -1, :].astype(np.float64)
    logits = logits / temperature
    z = logits - logits.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def greedy(enc_outputs, p: DecoderParams, heads: int, max_len: int, obj_mask=None) -> np.ndarray:
    """Argmax chains from BOS; returns [B, <=max_len] ids, PAD after EOS."""
    with nx.no_grad():
        b = enc_outputs[0].shape[0]
        seqs = np.full((b, 1), BOS_ID, dtype=np.int64)
        done = np.zeros(b, dtype=bool)
        while seqs.shape[1] < max_len and not done.all():
            nxt = np.argmax(_last_logprobs(enc_outputs, seqs, p, heads, obj_mask), axis=1)
            nxt = np.where(done, PAD_ID, nxt)
            seqs = np.concatenate([seqs, nxt[:, None]], axis=1)
            done |= nxt == EOS_ID
    return seqs


def sample(enc_outputs, p: DecoderParams, heads: int, max_len: int, k: int,
           rng: np.random.Generator, temperature: float = 1.0, obj_mask=None):
    """k multinomial rollouts per scene.

    Returns (seqs [B*k, T], logprobs [B*k, T-1]); rows b*k..b*k+k-1 belong to
    scene b and logprobs are zero after EOS.
    """
    with nx.no_grad():
        enc, mask = _tile(enc_outputs, obj_mask, k)
        n = enc[0].shape[0]
        seqs = np.full((n, 1), BOS_ID, dtype=np.int64)
        lps = np.zeros((n, 0))
        done = np.zeros(n, dtype=bool)
        while seqs.shape[1] < max_len and not done.all():
            lp = _last_logprobs(enc, seqs, p, heads, mask, temperature)
            cdf = np.cumsum(np.exp(lp), axis=1)
            u = rng.random(n) * cdf[:, -1]
            nxt = np.minimum((cdf < u[:, None]).sum(axis=1), lp.shape[1] - 1)
            tok_lp = lp[np.arange(n), nxt]
            nxt = np.where(done, PAD_ID, nxt)
            tok_lp = np.where(done, 0.0, tok_lp)
            seqs = np.concatenate([seqs, nxt[:, None]], axis=1)
            lps = np.concatenate([lps, tok_lp[:, None]], axis=1)
            done |= nxt == EOS_ID
    return seqs, lps


def beam_search(enc_outputs, p: DecoderParams, heads: int, max_len: int, width: int,
                obj_mask=None) -> list[list[int]]:
    """Length-normalised beam search, one scene at a time."""
    results = []
    b = enc_outputs[0].shape[0]
    with nx.no_grad():
        for i in range(b):
            enc = [Tensor(e.data[i:i + 1]) for e in enc_outputs]
            mask = None if obj_mask is None else obj_mask[i:i + 1]
            beams = [([BOS_ID], 0.0)]
            finished = []
            while beams:
                seqs = np.array([s for s, _ in beams])
                enc_b, mask_b = _tile(enc, mask, len(beams))
                lp = _last_logprobs(enc_b, seqs, p, heads, mask_b)
                cand = []
                for j, (s, score) in enumerate(beams):
                    for tok in np.argsort(-lp[j])[:width]:
                        cand.append((s + [int(tok)], score + float(lp[j, tok])))
                cand.sort(key=lambda c: -c[1])
                beams = []
                for s, score in cand:
                    if s[-1] == EOS_ID or len(s) >= max_len:
                        finished.append((s, score / (len(s) - 1)))
                    else:
                        beams.append((s, score))
                    if len(beams) == width:
                        break
                if len(finished) >= width:
                    break
            best = max(finished, key=lambda c: c[1])
            results.append(best[0])
    return results


def generate(enc_outputs, p: DecoderParams, heads: int, max_len: int, mode: str = "greedy",
             obj_mask=None, k: int = 5, temperature: float = 1.0, width: int = 3,
             rng: np.random.Generator | None = None):
    if mode == "greedy":
        return greedy(enc_outputs, p, heads, max_len, obj_mask)
    if mode == "sample":
        if rng is None:
            raise ValueError("sample mode needs an explicit rng")
        return sample(enc_outputs, p, heads, max_len, k, rng, temperature, obj_mask)
    if mode == "beam":
        return beam_search(enc_outputs, p, heads, max_len, width, obj_mask)
    raise ValueError(f"unknown decoding mode {mode!r}")


# ------------------------------------------------------------------- model

class CaptionNet:
    """Input projection + L encoder layers + meshed decoder for one modality."""

    def __init__(self, cfg: ModelConfig, modality: str, rng: np.random.Generator,
                 d3d: int = 32, n_cls: int = 18, d2d: int = 32, dtype=np.float32):
        from .objrep import InputProjectionParams

        if modality not in ("3d", "multi"):
            raise ValueError(f"unknown modality {modality!r}")
        self.cfg = cfg
        self.modality = modality
        self.inp = InputProjectionParams.init(rng, cfg.d, d3d, n_cls, d2d if modality == "multi" else None, dtype)
        self.enc = [EncoderLayerParams.init(rng, cfg, dtype) for _ in range(cfg.L)]
        self.dec = DecoderParams.init(rng, cfg, dtype)

    def named_parameters(self) -> dict[str, Tensor]:
        out = {f"inp.{k}": v for k, v in self.inp.named().items()}
        out.update(named_tensors(self.enc, "enc."))
        out.update(named_tensors(self.dec, "dec."))
        return out

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())

    def tokens(self, batch: dict) -> Tensor:
        from .objrep import project_tokens

        return project_tokens(batch, self.inp)

    def encode(self, batch: dict, inject=None) -> list[Tensor]:
        return encode(self.tokens(batch), self.enc, self.cfg.heads, batch["obj_mask"], inject)

    def features(self, enc_outputs, prefix, obj_mask) -> Tensor:
        return decoder_features(enc_outputs, prefix, self.dec, self.cfg.heads, obj_mask)

    def logits(self, feats: Tensor) -> Tensor:
        return project_logits(feats, self.dec)

    def generate(self, enc_outputs, obj_mask, mode="greedy", **kw):
        return generate(enc_outputs, self.dec, self.cfg.heads, self.cfg.max_len, mode, obj_mask, **kw)
