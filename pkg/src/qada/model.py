"""Tiny pre-norm transformer reader with exposed attention and hidden-state cutoff."""
from __future__ import annotations

import base64
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence, Union

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .corpus import CLS, PAD, SEP, QaExample
from .numerics import masked_softmax

Span = tuple[int, int]  # [start, end) in sequence positions


class ContractError(ValueError):
    """A caller broke a precondition of the model interface."""


class DecodeError(ValueError):
    """No valid answer span exists."""


@dataclass
class ModelConfig:
    vocab_size: int
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    d_ff: int = 128
    max_len: int = 192
    max_answer_len: int = 12
    dropout: float = 0.1

    def __post_init__(self):
        for name in ("vocab_size", "d_model", "n_layers", "n_heads", "d_ff", "max_len", "max_answer_len"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")


@dataclass
class EncodedBatch:
    """``[CLS] question [SEP] context [SEP]`` rows, right-padded to the longest row."""

    input_ids: torch.Tensor  # [B, L] long
    attention_mask: torch.Tensor  # [B, L] bool
    question_spans: list[Span]
    context_spans: list[Span]
    start_positions: torch.Tensor  # [B] long, -1 when unlabeled
    end_positions: torch.Tensor
    answer_mask: torch.Tensor  # [B, L] bool
    nonanswer_mask: torch.Tensor
    domains: list[str]
    examples: list[QaExample] = field(default_factory=list)

    def __len__(self) -> int:
        return self.input_ids.shape[0]

    @property
    def context_mask(self) -> torch.Tensor:
        mask = torch.zeros_like(self.attention_mask)
        for b, (s, e) in enumerate(self.context_spans):
            mask[b, s:e] = True
        return mask

    @property
    def segment_ids(self) -> torch.Tensor:
        """0 for [CLS] + question + first [SEP], 1 from the context on."""
        seg = torch.zeros_like(self.input_ids)
        for b, (s, _) in enumerate(self.context_spans):
            seg[b, s:] = 1
        return seg

    @property
    def labeled(self) -> torch.Tensor:
        return self.start_positions >= 0


def encode_examples(examples: Sequence[QaExample], max_len: int = 192) -> EncodedBatch:
    """Lay out examples as model rows; contexts are truncated to fit ``max_len``."""
    rows, q_spans, c_spans, starts, ends = [], [], [], [], []
    for ex in examples:
        q = list(ex.question_ids)[: max_len - 4]
        room = max_len - len(q) - 3
        c = list(ex.context_ids)[:room]
        if not c:
            raise ContractError(f"{ex.id}: no room for context within max_len={max_len}")
        q_start, c_start = 1, len(q) + 2
        rows.append([CLS] + q + [SEP] + c + [SEP])
        q_spans.append((q_start, q_start + len(q)))
        c_spans.append((c_start, c_start + len(c)))
        if ex.answer is not None and ex.answer[1] < len(c):
            starts.append(c_start + ex.answer[0])
            ends.append(c_start + ex.answer[1])
        else:
            starts.append(-1)
            ends.append(-1)
    width = max(len(r) for r in rows)
    ids = torch.full((len(rows), width), PAD, dtype=torch.long)
    for b, r in enumerate(rows):
        ids[b, : len(r)] = torch.tensor(r)
    attention = ids != PAD
    answer = torch.zeros_like(attention)
    real = torch.zeros_like(attention)
    for b in range(len(rows)):
        (qs, qe), (cs, ce) = q_spans[b], c_spans[b]
        real[b, qs:qe] = True
        real[b, cs:ce] = True
        if starts[b] >= 0:
            answer[b, starts[b] : ends[b] + 1] = True
    return EncodedBatch(
        input_ids=ids,
        attention_mask=attention,
        question_spans=q_spans,
        context_spans=c_spans,
        start_positions=torch.tensor(starts),
        end_positions=torch.tensor(ends),
        answer_mask=answer,
        nonanswer_mask=real & ~answer,
        domains=[ex.domain for ex in examples],
        examples=list(examples),
    )


def sinusoidal_positions(n: int, d: int) -> torch.Tensor:
    pos = torch.arange(n, dtype=torch.float64)[:, None]
    freq = torch.exp(torch.arange(0, d, 2, dtype=torch.float64) * (-math.log(10000.0) / d))
    table = torch.zeros(n, d, dtype=torch.float64)
    table[:, 0::2] = torch.sin(pos * freq)
    table[:, 1::2] = torch.cos(pos * freq)
    return table


class SelfAttention(nn.Module):
    def __init__(self, d_model: int, n_heads: int):
        super().__init__()
        self.n_heads = n_heads
        self.qkv = nn.Linear(d_model, 3 * d_model)
        self.out = nn.Linear(d_model, d_model)

    def forward(self, x, key_mask):
        B, L, d = x.shape
        h = self.n_heads
        q, k, v = self.qkv(x).view(B, L, 3, h, d // h).permute(2, 0, 3, 1, 4)
        scores = q @ k.transpose(-1, -2) / math.sqrt(d // h)
        weights = masked_softmax(scores, key_mask[:, None, None, :])
        # rows of padded queries are zeroed so summed attention only counts real tokens
        weights = weights * key_mask[:, None, :, None].to(weights.dtype)
        ctx = (weights @ v).transpose(1, 2).reshape(B, L, d)
        return self.out(ctx), weights


class Block(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.drop = nn.Dropout(cfg.dropout)
        self.ln1 = nn.LayerNorm(cfg.d_model)
        self.attn = SelfAttention(cfg.d_model, cfg.n_heads)
        self.ln2 = nn.LayerNorm(cfg.d_model)
        self.ff = nn.Sequential(nn.Linear(cfg.d_model, cfg.d_ff), nn.GELU(), nn.Linear(cfg.d_ff, cfg.d_model))

    def forward(self, x, key_mask):
        a, weights = self.attn(self.ln1(x), key_mask)
        x = x + self.drop(a)
        return x + self.drop(self.ff(self.ln2(x))), weights


# per layer: one optional span per example; or a callable (layer, attention [B,H,L,L]) -> spans
CutoffPlan = Union[Sequence[Sequence[Union[Span, None]] | None], Callable[[int, torch.Tensor], Sequence[Union[Span, None]]]]
Overrides = dict[tuple[int, int], torch.Tensor]  # (batch row, sequence position) -> embedding row


@dataclass
class QAOutput:
    start_logits: torch.Tensor  # [B, L], -inf outside the context
    end_logits: torch.Tensor
    attentions: list[torch.Tensor]  # per layer [B, H, L, L]
    hidden: torch.Tensor  # final encoder states [B, L, d]


class QAModel(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.tok_emb = nn.Embedding(cfg.vocab_size, cfg.d_model)
        self.seg_emb = nn.Embedding(2, cfg.d_model)
        self.register_buffer("pos_emb", sinusoidal_positions(cfg.max_len, cfg.d_model), persistent=False)
        self.drop = nn.Dropout(cfg.dropout)
        self.blocks = nn.ModuleList(Block(cfg) for _ in range(cfg.n_layers))
        self.ln_f = nn.LayerNorm(cfg.d_model)
        self.norm = nn.BatchNorm1d(cfg.d_model)
        self.span_head = nn.Linear(cfg.d_model, 2)

    def embed(self, batch: EncodedBatch, overrides: Overrides | None = None) -> torch.Tensor:
        ids = batch.input_ids
        tok = self.tok_emb(ids)
        if overrides:
            tok = tok.clone()
            for (b, p), row in overrides.items():
                qs, qe = batch.question_spans[b]
                if not qs <= p < qe:
                    raise ContractError(f"override at position {p} outside question span {qs}..{qe - 1}")
                tok[b, p] = row.to(tok.dtype)
        return tok + self.pos_emb[: ids.shape[1]].to(tok.dtype)[None] + self.seg_emb(batch.segment_ids)

    def encode(
        self,
        batch: EncodedBatch,
        cutoff: CutoffPlan | None = None,
        overrides: Overrides | None = None,
    ) -> tuple[torch.Tensor, list[torch.Tensor]]:
        x = self.drop(self.embed(batch, overrides))
        key_mask = batch.attention_mask
        attentions = []
        n = len(self.blocks)
        if cutoff is not None and not callable(cutoff):
            if len(cutoff) > n or (len(cutoff) == n and cutoff[-1] is not None and any(s is not None for s in cutoff[-1])):
                raise ContractError("cutoff requested on the final transformer layer")
        for layer, block in enumerate(self.blocks):
            x, weights = block(x, key_mask)
            attentions.append(weights)
            if cutoff is None or layer == n - 1:
                continue
            spans = cutoff(layer, weights.detach()) if callable(cutoff) else (cutoff[layer] if layer < len(cutoff) else None)
            if spans is not None:
                x = x.masked_fill(self._cutoff_mask(batch, spans)[:, :, None], 0.0)
        return self.ln_f(x), attentions

    @staticmethod
    def _cutoff_mask(batch: EncodedBatch, spans) -> torch.Tensor:
        mask = torch.zeros_like(batch.attention_mask)
        for b, span in enumerate(spans):
            if span is None:
                continue
            s, e = span
            cs, ce = batch.context_spans[b]
            row_len = int(batch.attention_mask[b].sum())
            # a span wholly inside the row's padding is a harmless no-op
            in_padding = row_len <= s < e <= batch.input_ids.shape[1]
            if not (cs <= s < e <= ce or in_padding):
                raise ContractError(f"cutoff span {span} outside context span {(cs, ce)}")
            mask[b, s:e] = True
        return mask

    def qa_forward(
        self,
        batch: EncodedBatch,
        cutoff: CutoffPlan | None = None,
        overrides: Overrides | None = None,
    ) -> QAOutput:
        hidden, attentions = self.encode(batch, cutoff, overrides)
        valid = batch.attention_mask
        normed = torch.zeros_like(hidden)
        normed[valid] = self.norm(hidden[valid])
        logits = self.span_head(normed)
        outside = ~batch.context_mask
        start = logits[..., 0].masked_fill(outside, float("-inf"))
        end = logits[..., 1].masked_fill(outside, float("-inf"))
        return QAOutput(start, end, attentions, hidden)

    def forward(self, batch: EncodedBatch, cutoff=None, overrides=None) -> QAOutput:
        return self.qa_forward(batch, cutoff, overrides)


def build_model(cfg: ModelConfig, seed: int, dtype=torch.float32) -> QAModel:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = QAModel(cfg)
    return model.to(dtype)


def span_ce(out: QAOutput, starts: torch.Tensor, ends: torch.Tensor) -> torch.Tensor:
    """Mean over examples of (start CE + end CE) / 2."""
    return 0.5 * (F.cross_entropy(out.start_logits, starts) + F.cross_entropy(out.end_logits, ends))


def decode_span(start_logits, end_logits, max_answer_len: int) -> tuple[int, int, float]:
    """Best ``(start, end, confidence)`` over valid spans.

    Valid spans lie on finite logits with ``start <= end < start + max_answer_len``.
    The score is ``p_start(s) * p_end(e)`` under softmaxes over the finite
    positions; ties go to the lowest start, then the shortest span.  The
    confidence is the geometric mean ``sqrt(p_start * p_end)``.
    """
    s_logits = np.asarray(torch.as_tensor(start_logits).detach().double(), dtype=np.float64)
    e_logits = np.asarray(torch.as_tensor(end_logits).detach().double(), dtype=np.float64)
    valid = np.isfinite(s_logits) & np.isfinite(e_logits)
    if not valid.any():
        raise DecodeError("no finite positions to decode")
    ps = masked_softmax(np.where(valid, s_logits, 0.0), valid)
    pe = masked_softmax(np.where(valid, e_logits, 0.0), valid)
    n = len(ps)
    idx = np.arange(n)
    band = (idx[None, :] >= idx[:, None]) & (idx[None, :] - idx[:, None] < max_answer_len)
    band &= valid[:, None] & valid[None, :]
    if not band.any():
        raise DecodeError("no valid (start, end) pair")
    scores = np.where(band, ps[:, None] * pe[None, :], -1.0)
    flat = int(np.argmax(scores))
    s, e = divmod(flat, n)
    return s, e, math.sqrt(ps[s] * pe[e])


# --- checkpoints --------------------------------------------------------------------

CHECKPOINT_FORMAT = "qada-checkpoint"
CHECKPOINT_VERSION = 1


def _encode_tensor(t: torch.Tensor) -> dict:
    arr = t.detach().cpu().contiguous().numpy()
    return {
        "dtype": str(arr.dtype),
        "shape": list(arr.shape),
        "data": base64.b64encode(arr.astype(arr.dtype.newbyteorder("<")).tobytes()).decode("ascii"),
    }


def _decode_tensor(d: dict) -> torch.Tensor:
    dtype = np.dtype(d["dtype"]).newbyteorder("<")
    arr = np.frombuffer(base64.b64decode(d["data"]), dtype=dtype).reshape(d["shape"])
    return torch.from_numpy(arr.astype(arr.dtype.newbyteorder("="), copy=True))


def checkpoint_dict(model: QAModel, meta: dict | None = None) -> dict:
    return {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": asdict(model.cfg),
        "state": {k: _encode_tensor(v) for k, v in model.state_dict().items()},
        "meta": meta or {},
    }


def save_checkpoint(path, model: QAModel, meta: dict | None = None) -> None:
    Path(path).write_text(json.dumps(checkpoint_dict(model, meta), sort_keys=True), encoding="utf-8")


def model_from_dict(d: dict) -> tuple[QAModel, dict]:
    if d.get("format") != CHECKPOINT_FORMAT or d.get("version") != CHECKPOINT_VERSION:
        raise ValueError("not a qada checkpoint (format/version mismatch)")
    state = {k: _decode_tensor(v) for k, v in d["state"].items()}
    model = QAModel(ModelConfig(**d["config"]))
    model.to(state["tok_emb.weight"].dtype)
    model.load_state_dict(state)
    return model, d.get("meta", {})


def load_checkpoint(path) -> tuple[QAModel, dict]:
    return model_from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def state_fingerprint(model: nn.Module) -> str:
    """Hash of every parameter and buffer, for bitwise-equality checks."""
    import hashlib

    h = hashlib.sha256()
    for k, v in model.state_dict().items():
        h.update(k.encode())
        h.update(v.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()
