"""One-stage fine-tuning: masked NLL over the response span, AdamW with a
linear-warmup cosine schedule, gradient accumulation, and a binary
checkpoint format that restores training bitwise.
"""

from __future__ import annotations

import json
import math
import os
import struct
from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from . import encoders
from .alignment import InstructionSequence, align, align_multihead, assemble_prefix, transform
from .autograd import Tensor
from .cognitive import DecoderConfig, ModelParams, embed_tokens, forward
from .encoders import MediaRef, ModalityConfig
from .errors import (BadMagic, CorruptPayload, EmptyDataset, NoResponseSpan,
                     VersionMismatch)
from .tokenizer import BOS, EOS, SEP, Vocab

_CKPT_MAGIC = b"MCWC"
_CKPT_VERSION = 1


@dataclass(frozen=True)
class TrainConfig:
    lr_peak: float = 3e-5
    warmup_ratio: float = 0.03
    epochs: int = 5
    micro_batch: int = 4
    grad_accum: int = 3
    max_seq_len: int = 512
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    loss_reduction: str = "mean"   # per-example mean or sum over response tokens
    freeze_embedding: bool = False
    max_grad_norm: float | None = None

    def __post_init__(self):
        if not 0.0 < self.warmup_ratio < 1.0:
            raise ValueError("warmup_ratio must lie in (0, 1)")
        for name in ("lr_peak", "micro_batch", "grad_accum", "max_seq_len"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.loss_reduction not in ("mean", "sum"):
            raise ValueError("loss_reduction must be 'mean' or 'sum'")

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in (
            "lr_peak", "warmup_ratio", "epochs", "micro_batch", "grad_accum",
            "max_seq_len", "seed", "beta1", "beta2", "eps", "weight_decay",
            "loss_reduction", "freeze_embedding", "max_grad_norm")}

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


def frame_text_ids(vocab: Vocab, instruction: str, response: str | None):
    """Token framing: [BOS] instruction [SEP], response as y [EOS]."""
    instr = [BOS] + vocab.encode(instruction) + [SEP]
    resp = vocab.encode(response) + [EOS] if response is not None else None
    return instr, resp


def build_sequence(example, params: ModelParams, dec_cfg: DecoderConfig,
                   mod_cfg: ModalityConfig, vocab: Vocab, train_cfg=None,
                   with_response: bool = True) -> InstructionSequence:
    """Encode media, transform/align them into soft tokens, and assemble the
    full input sequence for one dataset example."""
    freeze = bool(train_cfg and train_cfg.freeze_embedding)
    aligned = {"image": None, "video": None, "audio": None}
    for m in example.media:
        ref = m if isinstance(m, MediaRef) else MediaRef.from_path(
            m["kind"], m["path"], frames=m.get("frames"))
        if aligned[ref.kind] is not None:
            continue
        feats = encoders.encode(ref, mod_cfg)
        h_prime = transform(feats, params.transform_weights(ref.kind),
                            mod_cfg.l_prime)
        if dec_cfg.alignment_heads > 1:
            proj = {n: params[f"align.{ref.kind}.w{n[-1]}"]
                    for n in ("wq", "wk", "wv", "wo")}
            aligned[ref.kind] = align_multihead(h_prime, params.embedding, proj,
                                                dec_cfg.alignment_heads, ref.kind)
        else:
            aligned[ref.kind] = align(h_prime, params.embedding, ref.kind,
                                      freeze_embedding=freeze)
    instr_ids, resp_ids = frame_text_ids(
        vocab, example.instruction,
        example.response if with_response else None)
    return assemble_prefix(aligned["image"], aligned["video"], aligned["audio"],
                           instr_ids, lambda ids: embed_tokens(ids, params),
                           response_ids=resp_ids)


def response_nll(logits: Tensor, seq: InstructionSequence,
                 reduction: str = "mean") -> Tensor:
    """NLL over response-span targets only; every other position is masked
    out by construction. Target at position p is predicted from logits[p-1]."""
    span = seq.span("response-text")
    if span is None:
        raise NoResponseSpan("sequence has no response span")
    a, b = span
    targets = seq.ids[a:b]
    lsm = ag.log_softmax_rows(ag.slice_rows(logits, a - 1, b - 1))
    picked = ag.pick(lsm, np.arange(b - a), targets)
    agg = ag.mean_all(picked) if reduction == "mean" else ag.sum_all(picked)
    return ag.mul(agg, -1.0)


def lr_at(step: int, total_steps: int, cfg: TrainConfig) -> float:
    """Linear warmup from 0 to lr_peak, then cosine decay to 0."""
    if total_steps <= 0:
        return 0.0
    warmup = round(cfg.warmup_ratio * total_steps)
    if step < warmup:
        return cfg.lr_peak * step / warmup
    denom = total_steps - warmup
    if denom <= 0:
        return 0.0
    return cfg.lr_peak * 0.5 * (1.0 + math.cos(math.pi * (step - warmup) / denom))


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0

    @classmethod
    def init(cls, params: ModelParams) -> "AdamState":
        return cls(m={n: np.zeros_like(params[n].data) for n in params.names()},
                   v={n: np.zeros_like(params[n].data) for n in params.names()})


def adam_update(params: ModelParams, grads: dict, state: AdamState, lr: float,
                cfg: TrainConfig) -> None:
    state.t += 1
    b1, b2 = cfg.beta1, cfg.beta2
    for name in params.names():
        g = grads[name]
        state.m[name] = b1 * state.m[name] + (1 - b1) * g
        state.v[name] = b2 * state.v[name] + (1 - b2) * g * g
        mhat = state.m[name] / (1 - b1 ** state.t)
        vhat = state.v[name] / (1 - b2 ** state.t)
        p = params[name]
        p.data -= lr * (mhat / (np.sqrt(vhat) + cfg.eps)
                        + cfg.weight_decay * p.data)


def _batch_loss_and_grads(examples, params, dec_cfg, mod_cfg, vocab, cfg,
                          micro_batches):
    """Accumulate gradients of the mean loss over `examples`, computed in
    micro-batch chunks. Returns (loss value, grads dict)."""
    n_total = len(examples)
    grads = {name: np.zeros_like(params[name].data) for name in params.names()}
    total_loss = 0.0
    for micro in micro_batches:
        params.zero_grad()
        loss = None
        for ex in micro:
            seq = build_sequence(ex, params, dec_cfg, mod_cfg, vocab, cfg)
            logits = forward(seq, params, dec_cfg)
            l = response_nll(logits, seq, reduction=cfg.loss_reduction)
            loss = l if loss is None else ag.add(loss, l)
        # sum over the micro, normalized by the full batch size, so grads
        # accumulated over micros equal the single-batch mean gradient
        loss = ag.mul(loss, 1.0 / n_total)
        loss.backward()
        total_loss += float(loss.data)
        for name in params.names():
            g = params[name].grad
            if g is not None:
                grads[name] += g
    return total_loss, grads


def train_step(batch, params: ModelParams, opt_state: AdamState,
               cfg: TrainConfig, dec_cfg: DecoderConfig,
               mod_cfg: ModalityConfig, vocab: Vocab, lr: float) -> dict:
    """One optimizer update from one macro-batch (micro_batch*grad_accum
    examples, possibly fewer at the epoch tail)."""
    micros = [batch[i:i + cfg.micro_batch]
              for i in range(0, len(batch), cfg.micro_batch)]
    loss, grads = _batch_loss_and_grads(batch, params, dec_cfg, mod_cfg,
                                        vocab, cfg, micros)
    norm = math.sqrt(sum(float((g * g).sum()) for _, g in sorted(grads.items())))
    if cfg.max_grad_norm is not None and norm > cfg.max_grad_norm:
        scale = cfg.max_grad_norm / norm
        grads = {n: g * scale for n, g in grads.items()}
    adam_update(params, grads, opt_state, lr, cfg)
    return {"loss": loss, "grad_norm": norm, "lr": lr}


@dataclass
class Checkpoint:
    dec_cfg: DecoderConfig
    train_cfg: TrainConfig
    mod_cfg: ModalityConfig
    vocab: Vocab
    params: ModelParams
    opt_state: AdamState
    step: int
    rng_state: dict


def total_optimizer_steps(n_examples: int, cfg: TrainConfig) -> int:
    per_epoch = math.ceil(n_examples / (cfg.micro_batch * cfg.grad_accum))
    return cfg.epochs * per_epoch


def fit(dataset, dec_cfg: DecoderConfig, mod_cfg: ModalityConfig,
        vocab: Vocab, cfg: TrainConfig, params: ModelParams | None = None,
        out_dir=None, resume_from: "Checkpoint | str | None" = None,
        max_steps: int | None = None, log_fn=None):
    """Run the full training loop; returns (Checkpoint, metrics list).

    Per-epoch checkpoints (and the final one) are written under out_dir when
    given. resume_from restarts from a saved checkpoint and reproduces the
    uninterrupted run bitwise.
    """
    dataset = list(dataset)
    if not dataset:
        raise EmptyDataset("cannot fit on an empty dataset")
    n = len(dataset)
    macro = cfg.micro_batch * cfg.grad_accum
    per_epoch = math.ceil(n / macro)
    total = cfg.epochs * per_epoch

    if resume_from is not None:
        ckpt = (load_checkpoint(resume_from) if isinstance(resume_from, str)
                else resume_from)
        params, opt_state, step = ckpt.params, ckpt.opt_state, ckpt.step
        rng = np.random.default_rng()
        rng.bit_generator.state = ckpt.rng_state
        start_epoch = step // per_epoch if per_epoch else 0
    else:
        rng = np.random.default_rng(cfg.seed)
        if params is None:
            from .cognitive import init_params
            params = init_params(dec_cfg, mod_cfg, rng)
        opt_state = AdamState.init(params)
        step = 0
        start_epoch = 0

    metrics = []
    for epoch in range(start_epoch, cfg.epochs):
        perm = rng.permutation(n)
        for i in range(0, n, macro):
            if max_steps is not None and step >= max_steps:
                break
            batch = [dataset[j] for j in perm[i:i + macro]]
            lr = lr_at(step, total, cfg)
            m = train_step(batch, params, opt_state, cfg, dec_cfg, mod_cfg,
                           vocab, lr)
            m["step"] = step
            metrics.append(m)
            if log_fn:
                log_fn(m)
            step += 1
        if out_dir is not None:
            ckpt = Checkpoint(dec_cfg, cfg, mod_cfg, vocab, params, opt_state,
                              step, rng.bit_generator.state)
            save_checkpoint(os.path.join(out_dir, f"epoch{epoch + 1}.ckpt"), ckpt)
        if max_steps is not None and step >= max_steps:
            break
    final = Checkpoint(dec_cfg, cfg, mod_cfg, vocab, params, opt_state, step,
                       rng.bit_generator.state)
    if out_dir is not None:
        save_checkpoint(os.path.join(out_dir, "final.ckpt"), final)
    return final, metrics


def evaluate(dataset, ckpt: Checkpoint) -> dict:
    """Mean response NLL and perplexity over a dataset."""
    dataset = list(dataset)
    if not dataset:
        raise EmptyDataset("cannot evaluate an empty dataset")
    nlls = []
    for ex in dataset:
        seq = build_sequence(ex, ckpt.params, ckpt.dec_cfg, ckpt.mod_cfg,
                             ckpt.vocab)
        logits = forward(seq, ckpt.params, ckpt.dec_cfg)
        nlls.append(float(response_nll(logits, seq).data))
    mean_nll = float(np.mean(nlls))
    return {"mean_response_nll": mean_nll, "perplexity": math.exp(mean_nll),
            "n_examples": len(dataset)}


# ---------------------------------------------------------------------------
# checkpoint serialization
# ---------------------------------------------------------------------------

def _json_bytes(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


def _write_block(out: bytearray, payload: bytes):
    out += struct.pack("<I", len(payload))
    out += payload


def _write_tensor(out: bytearray, name: str, arr: np.ndarray):
    nb = name.encode("utf-8")
    out += struct.pack("<I", len(nb))
    out += nb
    out += struct.pack("<I", arr.ndim)
    for d in arr.shape:
        out += struct.pack("<I", d)
    out += arr.astype("<f8").tobytes(order="C")


class _Reader:
    def __init__(self, raw: bytes, offset: int = 0):
        self.raw = raw
        self.pos = offset

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.raw):
            raise CorruptPayload("checkpoint truncated")
        b = self.raw[self.pos:self.pos + n]
        self.pos += n
        return b

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def u64(self) -> int:
        return struct.unpack("<Q", self.take(8))[0]

    def block(self) -> bytes:
        return self.take(self.u32())

    def tensor(self):
        name = self.take(self.u32()).decode("utf-8")
        rank = self.u32()
        shape = tuple(self.u32() for _ in range(rank))
        count = int(np.prod(shape)) if shape else 1
        data = np.frombuffer(self.take(count * 8), dtype="<f8").reshape(shape)
        return name, data.copy()


def save_checkpoint(path: str, ckpt: Checkpoint) -> None:
    out = bytearray()
    out += _CKPT_MAGIC
    out += struct.pack("<I", _CKPT_VERSION)
    cfg = {"decoder": ckpt.dec_cfg.to_dict(), "train": ckpt.train_cfg.to_dict(),
           "modality": ckpt.mod_cfg.to_dict()}
    _write_block(out, _json_bytes(cfg))
    _write_block(out, _json_bytes(ckpt.vocab.to_dict()))
    names = ckpt.params.names()
    out += struct.pack("<I", len(names))
    for name in names:
        _write_tensor(out, name, ckpt.params[name].data)
    out += struct.pack("<I", 2 * len(names))
    for name in names:
        _write_tensor(out, "m:" + name, ckpt.opt_state.m[name])
        _write_tensor(out, "v:" + name, ckpt.opt_state.v[name])
    out += struct.pack("<Q", ckpt.opt_state.t)
    out += struct.pack("<Q", ckpt.step)
    _write_block(out, _json_bytes(ckpt.rng_state))
    with open(path, "wb") as f:
        f.write(bytes(out))


def load_checkpoint(path: str) -> Checkpoint:
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:4] != _CKPT_MAGIC:
        raise BadMagic(f"{path}: bad checkpoint magic {raw[:4]!r}")
    r = _Reader(raw, 4)
    version = r.u32()
    if version != _CKPT_VERSION:
        raise VersionMismatch(f"{path}: checkpoint version {version}")
    try:
        cfg = json.loads(r.block())
        vocab = Vocab.from_dict(json.loads(r.block()))
        n_params = r.u32()
        tensors = {}
        for _ in range(n_params):
            name, data = r.tensor()
            tensors[name] = Tensor(data, requires_grad=True)
        n_opt = r.u32()
        state = AdamState()
        for _ in range(n_opt):
            name, data = r.tensor()
            kind, pname = name.split(":", 1)
            (state.m if kind == "m" else state.v)[pname] = data
        state.t = r.u64()
        step = r.u64()
        rng_state = json.loads(r.block())
    except CorruptPayload:
        raise
    except Exception as e:
        raise CorruptPayload(f"{path}: {e}") from e
    if r.pos != len(raw):
        raise CorruptPayload(f"{path}: {len(raw) - r.pos} trailing bytes")
    return Checkpoint(dec_cfg=DecoderConfig.from_dict(cfg["decoder"]),
                      train_cfg=TrainConfig.from_dict(cfg["train"]),
                      mod_cfg=ModalityConfig.from_dict(cfg["modality"]),
                      vocab=vocab, params=ModelParams(tensors),
                      opt_state=state, step=step, rng_state=rng_state)
