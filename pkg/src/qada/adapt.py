"""Attention-sampled class features and the MMD-based contrastive adaptation loss."""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from typing import IO

import torch

from .augment import attention_received
from .corpus import SOURCE, TARGET
from .numerics import Rng, masked_softmax

log = logging.getLogger(__name__)

ANSWER, NONANSWER = "answer", "nonanswer"


@dataclass
class KernelConfig:
    bandwidth: str = "median"  # "median" or "fixed"
    fixed_sigma: float = 1.0

    def __post_init__(self):
        if self.bandwidth not in ("median", "fixed"):
            raise ValueError(f"bandwidth policy must be 'median' or 'fixed', got {self.bandwidth!r}")
        if not self.fixed_sigma > 0:
            raise ValueError(f"fixed_sigma must be positive, got {self.fixed_sigma}")


@dataclass
class ClassFeatures:
    """One sampled final-layer vector per example and class, split by domain."""

    source_answer: list[torch.Tensor] = field(default_factory=list)
    target_answer: list[torch.Tensor] = field(default_factory=list)
    source_nonanswer: list[torch.Tensor] = field(default_factory=list)
    target_nonanswer: list[torch.Tensor] = field(default_factory=list)
    # (example index, domain, class, sequence position) in insertion order
    origin: list[tuple[int, str, str, int]] = field(default_factory=list)

    def add(self, domain: str, cls: str, vector: torch.Tensor, example: int = -1, position: int = -1):
        getattr(self, f"{domain}_{cls}").append(vector)
        self.origin.append((example, domain, cls, position))

    def all(self) -> list[torch.Tensor]:
        return self.source_answer + self.target_answer + self.source_nonanswer + self.target_nonanswer


def sample_class_feature(
    hidden: torch.Tensor,
    attention: torch.Tensor,
    class_mask: torch.Tensor,
    rng: Rng,
) -> tuple[torch.Tensor, int] | None:
    """Draw a position of one class with probability softmax(attention received) and return its state.

    ``hidden`` is [L, d], ``attention`` the final layer's [H, L, L].  Returns
    None for an empty class mask so the caller can drop the example.
    """
    if not bool(class_mask.any()):
        return None
    scores = attention_received(attention.detach().double())
    probs = masked_softmax(scores, class_mask.to(torch.bool))
    idx = rng.categorical(probs.numpy())
    return hidden[idx], idx


def collect_class_features(out, batch, rng: Rng, include: torch.Tensor | None = None) -> ClassFeatures:
    """One answer and one non-answer feature per labelled example in the batch."""
    feats = ClassFeatures()
    final_attention = out.attentions[-1]
    for b in range(len(batch)):
        if include is not None and not bool(include[b]):
            continue
        if int(batch.start_positions[b]) < 0:
            continue
        for cls, mask in ((ANSWER, batch.answer_mask), (NONANSWER, batch.nonanswer_mask)):
            got = sample_class_feature(out.hidden[b], final_attention[b], mask[b], rng)
            if got is not None:
                feats.add(batch.domains[b], cls, got[0], b, got[1])
    return feats


def gaussian_kernel(a: torch.Tensor, b: torch.Tensor, sigma) -> torch.Tensor:
    diff = a[:, None, :] - b[None, :, :]
    return torch.exp(-(diff * diff).sum(-1) / (2 * sigma * sigma))


def median_bandwidth(vectors: torch.Tensor) -> float:
    """Median pairwise Euclidean distance (off-diagonal); 1.0 if degenerate."""
    with torch.no_grad():
        x = vectors.detach()
        n = x.shape[0]
        if n < 2:
            return 1.0
        d = torch.cdist(x, x)
        iu = torch.triu_indices(n, n, offset=1)
        med = float(d[iu[0], iu[1]].median())
    return med if med > 0 else 1.0


def mmd(features_a: torch.Tensor, features_b: torch.Tensor, sigma: float = 1.0) -> torch.Tensor:
    """Biased (V-statistic) squared MMD with a Gaussian kernel, clamped at 0."""
    if features_a.ndim != 2 or features_b.ndim != 2 or not len(features_a) or not len(features_b):
        raise ValueError("mmd needs two non-empty [n, d] feature sets")
    kaa = gaussian_kernel(features_a, features_a, sigma).mean()
    kbb = gaussian_kernel(features_b, features_b, sigma).mean()
    kab = gaussian_kernel(features_a, features_b, sigma).mean()
    return torch.clamp(kaa + kbb - 2 * kab, min=0.0)


@dataclass
class QadaTerms:
    loss: torch.Tensor
    answer_discrepancy: float | None
    nonanswer_discrepancy: float | None
    extraction: float | None
    sigma: float
    dropped: list[str]

    @property
    def degenerate(self) -> bool:
        return len(self.dropped) == 3


def qada_loss(features: ClassFeatures, kernel: KernelConfig | None = None, sigma: float | None = None) -> QadaTerms:
    """Cross-domain same-class discrepancies minus the answer/non-answer discrepancy.

    Terms whose sets are empty are dropped and listed in ``dropped``.  The
    median bandwidth is computed once over all pooled features and treated as
    a constant.
    """
    kernel = kernel or KernelConfig()
    everything = features.all()
    if sigma is None:
        if kernel.bandwidth == "fixed" or len(everything) < 2:
            sigma = kernel.fixed_sigma
        else:
            sigma = median_bandwidth(torch.stack(everything))

    def stack(vs):
        return torch.stack(vs) if vs else None

    sa, ta = stack(features.source_answer), stack(features.target_answer)
    sn, tn = stack(features.source_nonanswer), stack(features.target_nonanswer)
    aa = stack(features.source_answer + features.target_answer)
    nn_ = stack(features.source_nonanswer + features.target_nonanswer)

    terms, dropped, values = [], [], {}
    for name, a, b, sign in (
        ("answer_discrepancy", sa, ta, 1.0),
        ("nonanswer_discrepancy", sn, tn, 1.0),
        ("extraction", aa, nn_, -1.0),
    ):
        if a is None or b is None:
            dropped.append(name)
            values[name] = None
            continue
        d = mmd(a, b, sigma)
        values[name] = d.item()
        terms.append(sign * d)
    if terms:
        loss = torch.stack(terms).sum()
    else:
        log.warning("all contrastive terms dropped; returning zero loss")
        ref = everything[0] if everything else torch.zeros(1)
        loss = ref.sum() * 0.0
    return QadaTerms(loss, values["answer_discrepancy"], values["nonanswer_discrepancy"], values["extraction"], float(sigma), dropped)


def total_loss(ce, qada, lam: float):
    if lam < 0:
        raise ValueError(f"lambda must be non-negative, got {lam}")
    return ce + lam * qada


def dump_features(fh: IO[str], step: int, features: ClassFeatures) -> None:
    """Append sampled features as JSON lines: step, domain, class, vector."""
    for (_, domain, cls, _), vec in zip(features.origin, _ordered(features)):
        fh.write(json.dumps({"step": step, "domain": domain, "class": cls, "vector": [float(v) for v in vec.detach()]}) + "\n")


def _ordered(features: ClassFeatures):
    # replay insertion order from the origin log
    cursors = {(d, c): 0 for d in (SOURCE, TARGET) for c in (ANSWER, NONANSWER)}
    for _, domain, cls, _ in features.origin:
        i = cursors[(domain, cls)]
        cursors[(domain, cls)] += 1
        yield getattr(features, f"{domain}_{cls}")[i]
