"""QA records, tokenisation, synonym neighbourhoods and the synthetic domain pair."""
from __future__ import annotations

import json
import logging
import re
from collections import deque
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterable, Sequence

from .numerics import Rng

log = logging.getLogger(__name__)

PAD, UNK, CLS, SEP = 0, 1, 2, 3
SPECIAL_TOKENS = ("[PAD]", "[UNK]", "[CLS]", "[SEP]")
SOURCE, TARGET = "source", "target"

_TOKEN_RE = re.compile(r"\w+|[^\w\s]")


class DataError(ValueError):
    """Malformed dataset or lexicon content."""


class Vocab:
    """Token <-> id bijection with the four reserved ids fixed at 0..3."""

    def __init__(self, tokens: Iterable[str] = ()):
        self.itos: list[str] = list(SPECIAL_TOKENS)
        self.stoi: dict[str, int] = {t: i for i, t in enumerate(self.itos)}
        for t in tokens:
            self.add(t)

    def add(self, token: str) -> int:
        if token not in self.stoi:
            self.stoi[token] = len(self.itos)
            self.itos.append(token)
        return self.stoi[token]

    def __len__(self) -> int:
        return len(self.itos)

    def __contains__(self, token: str) -> bool:
        return token in self.stoi

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocab) and self.itos == other.itos

    def id(self, token: str) -> int:
        return self.stoi.get(token, UNK)

    def token(self, idx: int) -> str:
        return self.itos[idx]

    def save(self, path) -> None:
        Path(path).write_text("\n".join(self.itos[len(SPECIAL_TOKENS):]) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocab":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        return cls(line for line in lines if line)

    @classmethod
    def from_texts(cls, texts: Iterable[str]) -> "Vocab":
        vocab = cls()
        for text in texts:
            for match in _TOKEN_RE.finditer(text.lower()):
                vocab.add(match.group())
        return vocab


def split_words(text: str) -> list[tuple[str, int, int]]:
    """Lowercased word/punctuation pieces with their character spans."""
    return [(m.group(), m.start(), m.end()) for m in _TOKEN_RE.finditer(text.lower())]


def tokenize(text: str, vocab: Vocab) -> tuple[list[int], list[tuple[int, int]]]:
    pieces = split_words(text)
    return [vocab.id(w) for w, _, _ in pieces], [(s, e) for _, s, e in pieces]


@dataclass(frozen=True)
class QaExample:
    id: str
    context: str
    question: str
    context_ids: tuple[int, ...]
    context_offsets: tuple[tuple[int, int], ...]
    question_ids: tuple[int, ...]
    answer: tuple[int, int] | None = None
    answer_texts: tuple[str, ...] = ()
    domain: str = SOURCE
    pseudo: bool = False
    confidence: float | None = None

    def __post_init__(self):
        if self.answer is not None:
            s, e = self.answer
            if not 0 <= s <= e < len(self.context_ids):
                raise ValueError(f"{self.id}: answer span {self.answer} outside context")
        if self.pseudo and self.confidence is None:
            raise ValueError(f"{self.id}: pseudo label without confidence")
        if self.domain not in (SOURCE, TARGET):
            raise ValueError(f"{self.id}: unknown domain {self.domain!r}")

    def span_text(self, start: int, end: int) -> str:
        return self.context[self.context_offsets[start][0] : self.context_offsets[end][1]]

    def with_answer(self, start: int, end: int, confidence: float) -> "QaExample":
        """Copy carrying a pseudo label."""
        return QaExample(
            self.id, self.context, self.question, self.context_ids, self.context_offsets,
            self.question_ids, (start, end), self.answer_texts, self.domain,
            pseudo=True, confidence=confidence,
        )

    def unlabeled(self) -> "QaExample":
        return QaExample(
            self.id, self.context, self.question, self.context_ids, self.context_offsets,
            self.question_ids, None, (), self.domain,
        )


def char_span_to_tokens(offsets: Sequence[tuple[int, int]], start: int, end: int) -> tuple[int, int] | None:
    """Smallest token window covering characters ``[start, end)``; None if nothing overlaps."""
    covering = [i for i, (s, e) in enumerate(offsets) if s < end and e > start]
    if not covering:
        return None
    return covering[0], covering[-1]


def make_example(record: dict, vocab: Vocab) -> QaExample:
    """Build a :class:`QaExample` from one dataset record; the first answer sets the span."""
    context, question = record["context"], record["question"]
    c_ids, offsets = tokenize(context, vocab)
    q_ids, _ = tokenize(question, vocab)
    answers = record.get("answers") or []
    span = None
    if answers:
        first = answers[0]
        start = int(first["answer_start"])
        end = start + len(first["text"])
        if start < 0 or end > len(context) or not first["text"]:
            raise DataError(f"answer span [{start}, {end}) outside context")
        span = char_span_to_tokens(offsets, start, end)
        if span is None:
            raise DataError(f"answer span [{start}, {end}) covers no token")
    return QaExample(
        id=str(record["id"]),
        context=context,
        question=question,
        context_ids=tuple(c_ids),
        context_offsets=tuple(offsets),
        question_ids=tuple(q_ids),
        answer=span,
        answer_texts=tuple(a["text"] for a in answers),
        domain=record.get("domain", SOURCE),
    )


def example_to_record(ex: QaExample) -> dict:
    record = {"id": ex.id, "context": ex.context, "question": ex.question, "domain": ex.domain}
    if ex.answer is not None:
        s, e = ex.answer
        # gold texts are written as the token-aligned span so that reloading is lossless
        texts = list(ex.answer_texts) or [ex.span_text(s, e)]
        start = ex.context_offsets[s][0]
        answers = [{"text": ex.span_text(s, e), "answer_start": start}]
        answers += [{"text": t, "answer_start": _find(ex.context, t, start)} for t in texts if t != answers[0]["text"]]
        record["answers"] = answers
    return record


def _find(context: str, text: str, near: int) -> int:
    pos = context.find(text, max(0, near - len(text)))
    return pos if pos >= 0 else max(0, context.find(text))


@dataclass
class LoadReport:
    examples: list[QaExample]
    rejected: int = 0


def load_dataset(path, vocab: Vocab, with_report: bool = False):
    """Read a JSON Lines dataset; records with unusable spans are rejected and counted."""
    examples, rejected = [], 0
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as err:
                raise DataError(f"{path}:{lineno}: malformed JSON ({err.msg})") from err
            try:
                examples.append(make_example(record, vocab))
            except (DataError, ValueError) as err:
                log.warning("%s:%d: rejected record: %s", path, lineno, err)
                rejected += 1
    if with_report:
        return LoadReport(examples, rejected)
    return examples


def save_dataset(path, examples: Iterable[QaExample | dict]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for ex in examples:
            record = ex if isinstance(ex, dict) else example_to_record(ex)
            fh.write(json.dumps(record, ensure_ascii=False) + "\n")


# --- synonym lexicon and neighbourhoods ---------------------------------------------


def read_lexicon(path=None) -> list[tuple[str, str]]:
    """Whitespace-separated pairs, one per line, ``#`` comments.  Default: bundled lexicon."""
    if path is None:
        text = resources.files("qada").joinpath("data/lexicon.txt").read_text(encoding="utf-8")
    else:
        text = Path(path).read_text(encoding="utf-8")
    pairs = []
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 2:
            raise DataError(f"lexicon line {lineno}: expected two tokens, got {len(parts)}")
        pairs.append((parts[0].lower(), parts[1].lower()))
    return pairs


@dataclass
class Neighborhood:
    """token id -> [(synonym id, hop, concentration)], ordered by hop then discovery."""

    entries: dict[int, list[tuple[int, int, float]]] = field(default_factory=dict)
    alpha_original: float = 1.0
    skipped_pairs: int = 0

    def __getitem__(self, token: int) -> list[tuple[int, int, float]]:
        return self.entries.get(token, [])

    def has_synonyms(self, token: int) -> bool:
        return bool(self.entries.get(token))


def build_neighborhood(
    vocab: Vocab,
    lexicon: Iterable[tuple[str, str]],
    max_hops: int = 2,
    alpha_original: float = 1.0,
    decay: float = 0.1,
) -> Neighborhood:
    """Breadth-first multi-hop closure over a directed synonym graph.

    A synonym reachable at several depths keeps its shortest hop; its
    concentration is ``alpha_original * decay**hop``.
    """
    if not 0 < decay <= 1:
        raise ValueError(f"decay must lie in (0, 1], got {decay}")
    if alpha_original <= 0:
        raise ValueError(f"alpha_original must be positive, got {alpha_original}")
    graph: dict[int, list[int]] = {}
    skipped = 0
    for a, b in lexicon:
        if a not in vocab or b not in vocab:
            skipped += 1
            continue
        ia, ib = vocab.id(a), vocab.id(b)
        if ia != ib and ib not in graph.setdefault(ia, []):
            graph[ia].append(ib)
    if skipped:
        log.warning("skipped %d lexicon pairs with out-of-vocabulary tokens", skipped)

    entries = {}
    for root in graph:
        seen = {root: 0}
        queue = deque([root])
        found = []
        while queue:
            node = queue.popleft()
            hop = seen[node]
            if hop == max_hops:
                continue
            for nxt in graph.get(node, ()):
                if nxt not in seen:
                    seen[nxt] = hop + 1
                    found.append((nxt, hop + 1, alpha_original * decay ** (hop + 1)))
                    queue.append(nxt)
        if found:
            entries[root] = found
    return Neighborhood(entries, alpha_original, skipped)


# --- synthetic source/target pair ---------------------------------------------------


@dataclass
class GenConfig:
    n_source: int = 200
    n_target: int = 200
    source_facts: tuple[int, int] = (2, 3)
    target_facts: tuple[int, int] = (3, 4)
    target_fillers: tuple[int, int] = (1, 3)
    # relation concepts in use (a prefix of RELATIONS)
    n_relations: int = 4
    # object names per relation in each domain's pool
    objects_per_relation: int = 4
    # how many of a target relation's objects are reused from the source pool
    shared_objects: int = 3
    # share of target questions that still use the source relation word
    target_shared_relation: float = 0.5
    two_word_answer: float = 0.2
    dev_fraction: float = 0.1

    def __post_init__(self):
        for name in ("source_facts", "target_facts", "target_fillers"):
            lo, hi = getattr(self, name)
            if lo < 0 or hi < lo:
                raise ValueError(f"{name} must be an increasing non-negative range, got {(lo, hi)}")
        for name in ("source_facts", "target_facts"):
            lo, hi = getattr(self, name)
            if lo < 1 or hi > self.n_relations:
                raise ValueError(f"{name} must lie within 1..n_relations={self.n_relations}")
        if not 1 <= self.n_relations <= len(RELATIONS):
            raise ValueError(f"n_relations must lie in 1..{len(RELATIONS)}")
        if not 0 <= self.shared_objects <= self.objects_per_relation:
            raise ValueError("shared_objects must lie in [0, objects_per_relation]")
        if self.objects_per_relation * len(RELATIONS) > _NAME_CAPACITY:
            raise ValueError(f"at most {_NAME_CAPACITY // len(RELATIONS)} objects per relation")
        for name in ("target_shared_relation", "two_word_answer", "dev_fraction"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")


# relation concept -> (source word, 1-hop target synonym, 2-hop target synonym)
RELATIONS = {
    "capital": ("capital", "seat", "hub"),
    "river": ("river", "stream", "creek"),
    "leader": ("leader", "ruler", "chief"),
    "language": ("language", "tongue", "dialect"),
    "currency": ("currency", "money", "coin"),
    "mountain": ("mountain", "peak", "summit"),
    "founder": ("founder", "creator", "originator"),
    "export": ("export", "product", "good"),
}

_SOURCE_SYLLABLES = ("ka", "lo", "mi", "ra", "te", "su", "no", "vi", "pe", "ho")
_TARGET_SYLLABLES = ("zu", "be", "qo", "fa", "xi", "do", "wy", "gu", "ja", "ce")
_NAME_CAPACITY = len(_SOURCE_SYLLABLES) * (len(_SOURCE_SYLLABLES) - 1)
_SOURCE_MODIFIERS = ("old", "new", "great", "little")
_TARGET_MODIFIERS = ("upper", "lower", "north", "south")


def _names(syllables, suffix=""):
    return [a + b + suffix for a in syllables for b in syllables if a != b]


def _subjects(domain: str) -> list[str]:
    # subjects stay out of the vocabulary and read as [UNK]
    return _names(_SOURCE_SYLLABLES if domain == SOURCE else _TARGET_SYLLABLES, "a")


def object_pools(cfg: GenConfig) -> dict[str, dict[str, list[str]]]:
    """domain -> relation concept -> object names.

    Each relation owns a disjoint block of names, so an object's identity
    carries its relation type.  The target pool reuses the first
    ``shared_objects`` source names of each relation; the rest are new.
    """
    k = cfg.objects_per_relation
    src_names = _names(_SOURCE_SYLLABLES, "n")
    tgt_names = _names(_TARGET_SYLLABLES, "r")
    pools = {SOURCE: {}, TARGET: {}}
    for c, concept in enumerate(relations(cfg)):
        src = src_names[c * k:(c + 1) * k]
        fresh = tgt_names[c * k:(c + 1) * k - cfg.shared_objects]
        pools[SOURCE][concept] = src
        pools[TARGET][concept] = src[:cfg.shared_objects] + fresh
    return pools


_FILLERS = {
    SOURCE: ["people there like music .", "it is a quiet place ."],
    TARGET: [
        "many visitors travel to {s} every year .",
        "the weather around {s} was mild last spring .",
        "reports about {s} appeared in several newspapers .",
        "{s} remains popular among travelers .",
    ],
}


def bundled_lexicon_pairs(concepts: Sequence[str] | None = None) -> list[tuple[str, str]]:
    """Synonym pairs for the generator's relation words (both directions)."""
    pairs = []
    for concept in concepts or RELATIONS:
        base, hop1, hop2 = RELATIONS[concept]
        for a, b in ((base, hop1), (hop1, hop2)):
            pairs += [(a, b), (b, a)]
    return pairs


def relations(cfg: GenConfig) -> list[str]:
    return list(RELATIONS)[: cfg.n_relations]


def _fact(domain: str, rel_word: str, obj: str, rng: Rng) -> str:
    if domain == SOURCE or rng.uniform() < 0.5:
        return f"its {rel_word} is {obj} ."
    return f"there the {rel_word} is {obj} ."


def _question(domain: str, rel_word: str, subj: str) -> str:
    if domain == SOURCE:
        return f"what is the {rel_word} of {subj} ?"
    return f"which {rel_word} does {subj} have ?"


def _generate(domain: str, n: int, cfg: GenConfig, pools: dict[str, list[str]], rng: Rng) -> list[dict]:
    subjects = _subjects(domain)
    mods = _SOURCE_MODIFIERS if domain == SOURCE else _TARGET_MODIFIERS
    concepts = list(pools)
    lo, hi = cfg.source_facts if domain == SOURCE else cfg.target_facts
    records = []
    for i in range(n):
        subj = subjects[rng.integers(0, len(subjects))]
        n_facts = rng.integers(lo, hi + 1)
        facts = []
        for c in rng.choice(len(concepts), n_facts):
            concept = concepts[c]
            names = pools[concept]
            obj = names[rng.integers(0, len(names))]
            if rng.uniform() < cfg.two_word_answer:
                obj = f"{mods[rng.integers(0, len(mods))]} {obj}"
            base, hop1, hop2 = RELATIONS[concept]
            if domain == SOURCE or rng.uniform() < cfg.target_shared_relation:
                rel_word = base
            else:
                rel_word = hop1 if rng.uniform() < 0.5 else hop2
            facts.append((rel_word, obj))
        asked = rng.integers(0, len(facts))
        # (sentence, fact index or None for fillers)
        sentences = [(_fact(domain, rel, obj, rng), k) for k, (rel, obj) in enumerate(facts)]
        if domain == TARGET:
            f_lo, f_hi = cfg.target_fillers
            fillers = _FILLERS[domain]
            for _ in range(rng.integers(f_lo, f_hi + 1)):
                tmpl = fillers[rng.integers(0, len(fillers))]
                sentences.insert(rng.integers(0, len(sentences) + 1), (tmpl.format(s=subj), None))
        else:
            if rng.uniform() < 0.5:
                fillers = _FILLERS[domain]
                sentences.insert(rng.integers(0, len(sentences) + 1), (fillers[rng.integers(0, len(fillers))], None))
        sentences.insert(0, (f"this is {subj} .", None))
        rel_word, obj = facts[asked]
        parts, answer_start, offset = [], 0, 0
        for sent, k in sentences:
            if k == asked:
                answer_start = offset + sent.rindex(obj)
            parts.append(sent)
            offset += len(sent) + 1
        records.append({
            "id": f"{domain}-{i:05d}",
            "context": " ".join(parts),
            "question": _question(domain, rel_word, subj),
            "answers": [{"text": obj, "answer_start": answer_start}],
            "domain": domain,
        })
    return records


@dataclass
class DomainPair:
    source: list[dict]
    target: list[dict]
    vocab: Vocab
    lexicon: list[tuple[str, str]]

    @property
    def target_unlabeled(self) -> list[dict]:
        return [{k: v for k, v in r.items() if k != "answers"} for r in self.target]


def generate_domain_pair(cfg: GenConfig, rng: Rng) -> DomainPair:
    """Source and target QA records that differ in templates, context length,
    relation wording (lexicon synonyms) and part of the answer entities."""
    src_rng, tgt_rng = rng.split(2)
    pools = object_pools(cfg)
    source = _generate(SOURCE, cfg.n_source, cfg, pools[SOURCE], src_rng)
    target = _generate(TARGET, cfg.n_target, cfg, pools[TARGET], tgt_rng)
    return DomainPair(source, target, full_vocab(cfg), bundled_lexicon_pairs(relations(cfg)))


def full_vocab(cfg: GenConfig | None = None) -> Vocab:
    """Every in-vocabulary token the generator can emit, in a fixed order."""
    cfg = cfg or GenConfig()
    words = ["the", "of", "is", "what", "which", "does", "have", "?", ".", "its", "there", "this"]
    words += list(_SOURCE_MODIFIERS) + list(_TARGET_MODIFIERS)
    for domain in (SOURCE, TARGET):
        for tmpl in _FILLERS[domain]:
            words += [w for w, _, _ in split_words(tmpl.replace("{s}", ""))]
    for concept in relations(cfg):
        words += list(RELATIONS[concept])
    for domain, pools in object_pools(cfg).items():
        for names in pools.values():
            words += names
    return Vocab(words)


def split_dev(items: Sequence, fraction: float, rng: Rng) -> tuple[list, list]:
    """Seeded (train, dev) split with ``round(fraction * n)`` dev items."""
    n_dev = int(round(fraction * len(items)))
    dev_idx = set(rng.choice(len(items), n_dev)) if n_dev else set()
    train = [x for i, x in enumerate(items) if i not in dev_idx]
    dev = [x for i, x in enumerate(items) if i in dev_idx]
    return train, dev
