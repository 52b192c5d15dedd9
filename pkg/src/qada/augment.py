"""Hidden-space augmentation: Dirichlet mixtures over synonym hulls and attentive context cutoff."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch

from .corpus import Neighborhood
from .numerics import Rng, dirichlet_sample, masked_softmax

Span = tuple[int, int]


@dataclass
class AugmentConfig:
    zeta: float = 0.4
    phi_cut: float = 0.2
    alpha_original: float = 1.0
    decay: float = 0.1

    def __post_init__(self):
        if not 0.0 <= self.zeta <= 1.0:
            raise ValueError(f"zeta must lie in [0, 1], got {self.zeta}")
        if not 0.0 <= self.phi_cut < 1.0:
            raise ValueError(f"phi_cut must lie in [0, 1), got {self.phi_cut}")
        if self.alpha_original <= 0:
            raise ValueError(f"alpha_original must be positive, got {self.alpha_original}")
        if not 0.0 < self.decay <= 1.0:
            raise ValueError(f"decay must lie in (0, 1], got {self.decay}")


@dataclass
class HullSample:
    position: int  # index into the question tokens
    vertices: list[int]  # token ids, the original token first
    alphas: list[float]
    eta: np.ndarray


def _stochastic_round(x: float, rng: Rng) -> int:
    base = math.floor(x)
    return base + (1 if rng.uniform() < x - base else 0)


def sample_question_hulls(
    question_ids: Sequence[int],
    neighborhood: Neighborhood,
    config: AugmentConfig,
    rng: Rng,
) -> list[HullSample]:
    """Pick question positions with synonyms and draw Dirichlet coefficients for each.

    The number of picked positions is ``zeta * Q`` rounded stochastically, so
    its expectation is exactly ``zeta * Q`` (Q = positions with synonyms).
    """
    eligible = [i for i, tok in enumerate(question_ids) if neighborhood.has_synonyms(tok)]
    if not eligible or config.zeta == 0.0:
        return []
    k = min(len(eligible), _stochastic_round(config.zeta * len(eligible), rng))
    if k == 0:
        return []
    picked = sorted(eligible[i] for i in rng.choice(len(eligible), k))
    samples = []
    for pos in picked:
        tok = question_ids[pos]
        syn = neighborhood[tok]
        vertices = [tok] + [s for s, _, _ in syn]
        # hop concentrations scale with the configured original-token alpha
        scale = config.alpha_original / neighborhood.alpha_original
        alphas = [config.alpha_original] + [a * scale for _, _, a in syn]
        samples.append(HullSample(pos, vertices, alphas, dirichlet_sample(alphas, rng)))
    return samples


def mix_embeddings(samples: Sequence[HullSample], embedding: torch.Tensor) -> dict[int, torch.Tensor]:
    """Convex combinations of embedding rows; coefficients are constants, rows stay differentiable."""
    out = {}
    for smp in samples:
        eta = torch.as_tensor(smp.eta, dtype=embedding.dtype)
        out[smp.position] = eta @ embedding[smp.vertices]
    return out


def augment_question(
    question_ids: Sequence[int],
    neighborhood: Neighborhood,
    embedding: torch.Tensor,
    config: AugmentConfig,
    rng: Rng,
) -> dict[int, torch.Tensor]:
    """Question position -> augmented embedding row (positions index the question tokens)."""
    return mix_embeddings(sample_question_hulls(question_ids, neighborhood, config, rng), embedding)


def cutoff_width(n_context: int, phi_cut: float) -> int:
    # round half up; Python's round() is banker's rounding
    return int(math.floor(phi_cut * n_context + 0.5))


def attention_received(attention: torch.Tensor) -> torch.Tensor:
    """Head-averaged attention each key receives, summed over queries: [H, L, L] -> [L]."""
    return attention.sum(dim=-2).mean(dim=0)


def place_span(midpoint: int, width: int, context_span: Span) -> Span:
    """Window of ``width`` centred on ``midpoint``, shifted inward to fit the context."""
    cs, ce = context_span
    width = min(width, ce - cs)
    start = midpoint - width // 2
    start = max(cs, min(start, ce - width))
    return start, start + width


def sample_cutoff_span(attention: torch.Tensor, context_span: Span, phi_cut: float, rng: Rng) -> Span | None:
    """One cutoff span from a single layer's attention [H, L, L]; None when the width rounds to 0."""
    cs, ce = context_span
    if ce <= cs:
        raise ValueError("empty context span")
    width = cutoff_width(ce - cs, phi_cut)
    if width < 1:
        return None
    scores = attention_received(attention.detach().double())[cs:ce]
    probs = masked_softmax(scores, torch.ones_like(scores, dtype=torch.bool))
    mid = cs + rng.categorical(probs.numpy())
    return place_span(mid, width, context_span)


def plan_cutoff(
    attention: Sequence[torch.Tensor] | None,
    context_span: Span,
    config: AugmentConfig,
    rng: Rng,
) -> list[Span | None]:
    """Per-layer spans for one example from per-layer attention arrays [H, L, L].

    The span applied after layer ``l`` is drawn from layer ``l``'s own
    attention; the final layer never gets one.
    """
    if attention is None or len(attention) == 0:
        raise ValueError("plan_cutoff needs the attention of every layer")
    plan = [sample_cutoff_span(a, context_span, config.phi_cut, rng) for a in attention[:-1]]
    return plan + [None]


class AttentiveCutoff:
    """Cutoff planner called by the encoder after each non-final layer."""

    def __init__(self, context_spans: Sequence[Span], phi_cut: float, rngs: Sequence[Rng], active: Sequence[bool] | None = None):
        self.context_spans = list(context_spans)
        self.phi_cut = phi_cut
        self.rngs = list(rngs)
        self.active = list(active) if active is not None else [True] * len(self.context_spans)
        self.history: list[list[Span | None]] = []

    def __call__(self, layer: int, attention: torch.Tensor) -> list[Span | None]:
        spans = [
            sample_cutoff_span(attention[b], span, self.phi_cut, self.rngs[b]) if self.active[b] else None
            for b, span in enumerate(self.context_spans)
        ]
        self.history.append(spans)
        return spans
