"""Source pretraining, per-epoch pseudo labelling + augmentation + contrastive adaptation, EM/F1."""
from __future__ import annotations

import collections
import copy
import json
import logging
import math
import re
import string
from dataclasses import asdict, dataclass, field, replace
from typing import IO, Iterator, Sequence

import torch

from .adapt import ClassFeatures, KernelConfig, collect_class_features, dump_features, qada_loss, total_loss
from .augment import AttentiveCutoff, AugmentConfig, mix_embeddings, sample_question_hulls
from .corpus import (
    SOURCE,
    TARGET,
    GenConfig,
    Neighborhood,
    QaExample,
    build_neighborhood,
    generate_domain_pair,
    make_example,
    split_dev,
)
from .model import ModelConfig, QAModel, build_model, decode_span, encode_examples, span_ce, state_fingerprint
from .numerics import Rng

log = logging.getLogger(__name__)


class ConfigError(ValueError):
    """A configuration value is outside its valid range."""

    def __init__(self, name: str, message: str):
        super().__init__(f"{name}: {message}")
        self.field = name


@dataclass
class AdaptConfig:
    tau: float = 0.6
    lam: float = 0.0005
    epochs_pretrain: int = 2
    epochs_adapt: int = 4
    n_source: int = 12
    n_target: int = 12
    batch_size_pretrain: int = 12
    lr_pretrain: float = 3e-5
    lr_adapt: float = 2e-5
    warmup: float = 0.1
    weight_decay: float = 0.01
    augment_domains: str = "both"  # or "target-only"
    seed: int = 0
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    kernel: KernelConfig = field(default_factory=KernelConfig)

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if not 0.0 <= self.tau <= 1.0:
            raise ConfigError("tau", f"must lie in [0, 1], got {self.tau}")
        if self.lam < 0:
            raise ConfigError("lam", f"must be >= 0, got {self.lam}")
        for name in ("n_source", "n_target", "batch_size_pretrain"):
            if getattr(self, name) < 1:
                raise ConfigError(name, "must be >= 1")
        for name in ("epochs_pretrain", "epochs_adapt"):
            if getattr(self, name) < 0:
                raise ConfigError(name, "must be >= 0")
        for name in ("lr_pretrain", "lr_adapt"):
            if not getattr(self, name) > 0:
                raise ConfigError(name, "must be > 0")
        if not 0.0 <= self.warmup < 1.0:
            raise ConfigError("warmup", f"must lie in [0, 1), got {self.warmup}")
        if self.augment_domains not in ("both", "target-only"):
            raise ConfigError("augment_domains", "must be 'both' or 'target-only'")


# --- evaluation ---------------------------------------------------------------------


def normalize_answer(text: str) -> str:
    """Lowercase, drop punctuation and articles, collapse whitespace."""
    text = text.lower()
    text = "".join(ch for ch in text if ch not in set(string.punctuation))
    text = re.sub(r"\b(a|an|the)\b", " ", text)
    return " ".join(text.split())


def exact_match(prediction: str, gold: str) -> float:
    return float(normalize_answer(prediction) == normalize_answer(gold))


def f1_score(prediction: str, gold: str) -> float:
    return overlap_f1(normalize_answer(prediction).split(), normalize_answer(gold).split())


def overlap_f1(pred: Sequence[str], ref: Sequence[str]) -> float:
    """Multiset token-overlap F1; two empty sequences count as a match."""
    if not pred or not ref:
        return float(list(pred) == list(ref))
    common = collections.Counter(pred) & collections.Counter(ref)
    same = sum(common.values())
    if same == 0:
        return 0.0
    precision, recall = same / len(pred), same / len(ref)
    return 2 * precision * recall / (precision + recall)


def score_prediction(prediction: str, golds: Sequence[str]) -> tuple[float, float]:
    if not golds:
        raise ValueError("cannot score an example without gold answers")
    return max(exact_match(prediction, g) for g in golds), max(f1_score(prediction, g) for g in golds)


@torch.no_grad()
def predict(model: QAModel, examples: Sequence[QaExample], batch_size: int = 64) -> list[tuple[int, int, float]]:
    """(start, end, confidence) per example in context-token indices, in evaluation mode."""
    was_training = model.training
    model.eval()
    preds = []
    try:
        for i in range(0, len(examples), batch_size):
            batch = encode_examples(examples[i : i + batch_size], model.cfg.max_len)
            out = model(batch)
            for b, (cs, _) in enumerate(batch.context_spans):
                s, e, conf = decode_span(out.start_logits[b], out.end_logits[b], model.cfg.max_answer_len)
                preds.append((s - cs, e - cs, conf))
    finally:
        model.train(was_training)
    return preds


def evaluate(model: QAModel, examples: Sequence[QaExample]) -> dict[str, float]:
    """EM and F1 as percentages."""
    for ex in examples:
        if not ex.answer_texts:
            raise ValueError(f"{ex.id}: evaluation needs gold answers")
    if not examples:
        return {"em": 0.0, "f1": 0.0}
    em = f1 = 0.0
    for ex, (s, e, _) in zip(examples, predict(model, examples)):
        a, b = score_prediction(ex.span_text(s, e), ex.answer_texts)
        em += a
        f1 += b
    return {"em": 100.0 * em / len(examples), "f1": 100.0 * f1 / len(examples)}


# --- pseudo labelling ---------------------------------------------------------------


@dataclass
class PseudoLabelResult:
    pool: list[QaExample]
    confidences: list[float]

    @property
    def acceptance(self) -> float:
        return len(self.pool) / len(self.confidences) if self.confidences else 0.0


def pseudo_label(model: QAModel, examples: Sequence[QaExample], tau: float, with_stats: bool = False):
    """Keep examples whose decoded confidence is >= tau, labelled with the predicted span."""
    preds = predict(model, examples)
    pool = [ex.with_answer(s, e, conf) for ex, (s, e, conf) in zip(examples, preds) if conf >= tau]
    if with_stats:
        return PseudoLabelResult(pool, [c for _, _, c in preds])
    return pool


# --- optimisation -------------------------------------------------------------------


def _linear_schedule(optimizer, total_steps: int, warmup: float):
    warm = int(math.ceil(warmup * total_steps))

    def factor(step: int) -> float:
        if warm and step < warm:
            return (step + 1) / warm
        return max(0.0, (total_steps - step) / max(1, total_steps - warm))

    return torch.optim.lr_scheduler.LambdaLR(optimizer, factor)


def _optimizer(model: QAModel, lr: float, weight_decay: float):
    return torch.optim.AdamW(model.parameters(), lr=lr, weight_decay=weight_decay)


def _cycle(items: Sequence, rng: Rng) -> Iterator:
    """Endless stream of ``items``, reshuffled every pass."""
    while True:
        for i in rng.gen.permutation(len(items)):
            yield items[int(i)]


@dataclass
class PretrainResult:
    model: QAModel
    best_state: dict
    best_dev_f1: float | None
    epoch_losses: list[float]


def pretrain(
    model: QAModel,
    source: Sequence[QaExample],
    config: AdaptConfig,
    dev: Sequence[QaExample] | None = None,
) -> PretrainResult:
    """Minimise span cross-entropy on labelled source data (linear warmup, then linear decay)."""
    if not source:
        raise ValueError("pretraining needs a non-empty labelled source set")
    labeled = [ex for ex in source if ex.answer is not None]
    if not labeled:
        raise ValueError("pretraining needs labelled examples")
    rng = Rng(config.seed).split(2)[0]
    with rng.torch_scope():
        return _pretrain(model, labeled, config, dev, rng)


def _pretrain(model, labeled, config, dev, rng) -> PretrainResult:
    bs = config.batch_size_pretrain
    steps_per_epoch = math.ceil(len(labeled) / bs)
    opt = _optimizer(model, config.lr_pretrain, config.weight_decay)
    sched = _linear_schedule(opt, steps_per_epoch * config.epochs_pretrain, config.warmup)
    best_state, best_f1, epoch_losses = copy.deepcopy(model.state_dict()), None, []
    model.train()
    for _ in range(config.epochs_pretrain):
        order = [int(i) for i in rng.gen.permutation(len(labeled))]
        losses = []
        for k in range(steps_per_epoch):
            chunk = [labeled[i] for i in order[k * bs : (k + 1) * bs]]
            batch = encode_examples(chunk, model.cfg.max_len)
            out = model(batch)
            loss = span_ce(out, batch.start_positions, batch.end_positions)
            opt.zero_grad()
            loss.backward()
            opt.step()
            sched.step()
            losses.append(loss.item())
        epoch_losses.append(sum(losses) / len(losses))
        if dev:
            f1 = evaluate(model, dev)["f1"]
            if best_f1 is None or f1 > best_f1:
                best_f1, best_state = f1, copy.deepcopy(model.state_dict())
    if not dev:
        best_state = copy.deepcopy(model.state_dict())
    return PretrainResult(model, best_state, best_f1, epoch_losses)


# --- adaptation ---------------------------------------------------------------------


@dataclass
class EpochReport:
    epoch: int
    pool_size: int
    acceptance_rate: float
    mean_confidence: float
    ce: float
    qada: float | None
    answer_discrepancy: float | None
    nonanswer_discrepancy: float | None
    extraction: float | None
    steps: int
    source_em: float | None = None
    source_f1: float | None = None
    target_em: float | None = None
    target_f1: float | None = None

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


def _mean(values):
    values = [v for v in values if v is not None]
    return sum(values) / len(values) if values else None


def augmentation_overrides(batch, model: QAModel, neighborhood: Neighborhood, aug: AugmentConfig, rngs, active) -> dict:
    """(row, sequence position) -> Dirichlet-mixed embedding for the batch's questions."""
    overrides = {}
    table = model.tok_emb.weight
    for b, ex in enumerate(batch.examples):
        if not active[b]:
            continue
        qs, qe = batch.question_spans[b]
        hulls = sample_question_hulls(ex.question_ids[: qe - qs], neighborhood, aug, rngs[b])
        for pos, row in mix_embeddings(hulls, table).items():
            overrides[(b, qs + pos)] = row
    return overrides


@dataclass
class AdaptResult:
    model: QAModel
    reports: list[EpochReport]


def adapt(
    model: QAModel,
    source: Sequence[QaExample],
    target_unlabeled: Sequence[QaExample],
    neighborhood: Neighborhood,
    config: AdaptConfig,
    dev_source: Sequence[QaExample] | None = None,
    dev_target: Sequence[QaExample] | None = None,
    metrics_fh: IO[str] | None = None,
    feature_fh: IO[str] | None = None,
) -> AdaptResult:
    """Per epoch: pseudo label the target set, then train on mixed source/target
    batches with question/context augmentation and ``ce + lam * contrastive``."""
    labeled_source = [ex for ex in source if ex.answer is not None]
    if not labeled_source:
        raise ValueError("adaptation needs labelled source examples")
    _, rng = Rng(config.seed).split(2)
    with rng.torch_scope():
        return _adapt(model, labeled_source, target_unlabeled, neighborhood, config, rng,
                      dev_source, dev_target, metrics_fh, feature_fh)


def _adapt(model, labeled_source, target_unlabeled, neighborhood, config, rng,
           dev_source, dev_target, metrics_fh, feature_fh) -> AdaptResult:
    aug, kernel = config.augment, config.kernel
    src_rng, tgt_rng, aug_rng, feat_rng = rng.split(4)
    source_stream = _cycle(labeled_source, src_rng)
    opt = _optimizer(model, config.lr_adapt, config.weight_decay)
    reports, global_step, ever_pooled = [], 0, False

    for epoch in range(config.epochs_adapt):
        labels = pseudo_label(model, target_unlabeled, config.tau, with_stats=True)
        pool = labels.pool
        ever_pooled |= bool(pool)
        if not pool:
            log.warning("epoch %d: empty pseudo-label pool, training on source only", epoch)
        n_src = config.n_source
        if pool:
            steps = math.ceil(len(pool) / config.n_target)
            target_stream = _cycle(pool, tgt_rng)
        else:
            steps = math.ceil(len(labeled_source) / n_src)
        for group in opt.param_groups:
            group["lr"] = config.lr_adapt
        sched = _linear_schedule(opt, steps, config.warmup)
        model.train()
        ce_log, q_log, terms_log = [], [], []
        for _ in range(steps):
            members = [next(source_stream) for _ in range(n_src)]
            if pool:
                members += [next(target_stream) for _ in range(config.n_target)]
            batch = encode_examples(members, model.cfg.max_len)
            rngs = aug_rng.split(len(members))
            active = [config.augment_domains == "both" or d == TARGET for d in batch.domains]
            overrides = augmentation_overrides(batch, model, neighborhood, aug, rngs, active) if aug.zeta > 0 else None
            cutoff = AttentiveCutoff(batch.context_spans, aug.phi_cut, rngs, active) if aug.phi_cut > 0 else None
            out = model(batch, cutoff, overrides)
            ce = span_ce(out, batch.start_positions, batch.end_positions)
            loss = ce
            if config.lam > 0:
                feats = collect_class_features(out, batch, feat_rng)
                terms = qada_loss(feats, kernel)
                loss = total_loss(ce, terms.loss, config.lam)
                q_log.append(terms.loss.item())
                terms_log.append(terms)
                if feature_fh is not None:
                    dump_features(feature_fh, global_step, feats)
            opt.zero_grad()
            loss.backward()
            opt.step()
            sched.step()
            ce_log.append(ce.item())
            global_step += 1

        report = EpochReport(
            epoch=epoch,
            pool_size=len(pool),
            acceptance_rate=labels.acceptance,
            mean_confidence=_mean(labels.confidences) or 0.0,
            ce=_mean(ce_log) or 0.0,
            qada=_mean(q_log),
            answer_discrepancy=_mean(t.answer_discrepancy for t in terms_log),
            nonanswer_discrepancy=_mean(t.nonanswer_discrepancy for t in terms_log),
            extraction=_mean(t.extraction for t in terms_log),
            steps=steps,
        )
        if dev_source:
            m = evaluate(model, dev_source)
            report.source_em, report.source_f1 = m["em"], m["f1"]
        if dev_target:
            m = evaluate(model, dev_target)
            report.target_em, report.target_f1 = m["em"], m["f1"]
        log.info("adapt epoch %d: %s", epoch, report.to_json())
        if metrics_fh is not None:
            metrics_fh.write(report.to_json() + "\n")
            metrics_fh.flush()
        reports.append(report)
    if config.epochs_adapt and not ever_pooled:
        log.warning("pseudo-label pool was empty in every epoch; result is continued source training")
    return AdaptResult(model, reports)


# --- desk-scale experiment ----------------------------------------------------------


def desk_config(seed: int = 0, **overrides) -> AdaptConfig:
    """Settings for the tiny model on the synthetic pair.

    A 2-layer model trained from scratch on ~200 examples needs far larger
    steps and more pretraining epochs than a pretrained encoder being
    fine-tuned; everything else keeps the library defaults.
    """
    base = dict(lr_pretrain=3e-3, epochs_pretrain=40, lr_adapt=2e-3, warmup=0.02, weight_decay=0.0, seed=seed)
    base.update(overrides)
    return AdaptConfig(**base)


def self_training_baseline(config: AdaptConfig) -> AdaptConfig:
    """Raw pseudo labels: no threshold, no augmentation, no contrastive term."""
    return replace(config, tau=0.0, lam=0.0, augment=AugmentConfig(zeta=0.0, phi_cut=0.0))


@dataclass
class DeskData:
    source_train: list[QaExample]
    source_dev: list[QaExample]
    target: list[QaExample]
    neighborhood: Neighborhood
    vocab_size: int

    @property
    def target_unlabeled(self) -> list[QaExample]:
        return [ex.unlabeled() for ex in self.target]


def desk_data(seed: int, gen: GenConfig | None = None) -> DeskData:
    gen = gen or GenConfig()
    data_rng, split_rng = Rng(seed).split(2)
    pair = generate_domain_pair(gen, data_rng)
    source = [make_example(r, pair.vocab) for r in pair.source]
    target = [make_example(r, pair.vocab) for r in pair.target]
    train, dev = split_dev(source, gen.dev_fraction, split_rng)
    return DeskData(train, dev, target, build_neighborhood(pair.vocab, pair.lexicon), len(pair.vocab))


@dataclass
class DirectionalResult:
    seed: int
    source_dev: dict[str, float]
    zero_shot: dict[str, float]
    adapted: dict[str, float]
    baseline: dict[str, float]
    fingerprints: dict[str, str]

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


def directional_run(seed: int, gen: GenConfig | None = None, config: AdaptConfig | None = None,
                    model_cfg: dict | None = None) -> DirectionalResult:
    """Pretrain on source, then adapt a copy with the given settings and another
    with the raw self-training baseline; all target scores use gold labels the
    training never sees."""
    config = config or desk_config(seed)
    data = desk_data(seed, gen)
    model = build_model(ModelConfig(vocab_size=data.vocab_size, **(model_cfg or {})), seed)
    pretrain(model, data.source_train, config, dev=data.source_dev)
    source_dev, zero_shot = evaluate(model, data.source_dev), evaluate(model, data.target)
    scores, prints = {}, {"pretrained": state_fingerprint(model)}
    for name, cfg in (("adapted", config), ("baseline", self_training_baseline(config))):
        copy_ = copy.deepcopy(model)
        adapt(copy_, data.source_train, data.target_unlabeled, data.neighborhood, cfg)
        scores[name] = evaluate(copy_, data.target)
        prints[name] = state_fingerprint(copy_)
    return DirectionalResult(seed, source_dev, zero_shot, scores["adapted"], scores["baseline"], prints)
