"""Template-grammar pseudo report generator and its inverse parser.

The generator emits free-text "Findings" paragraphs in a small family of
sentence templates (varied ordering, connectives and same-site merging).
The parser is built from the same templates plus a vocabulary, so every
generated paragraph parses back to its finding multiset.
"""

from __future__ import annotations

import functools
import json
import random
import re
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Sequence

from .report_model import MODALITIES, Finding, Vocabulary

CONNECTIVES: tuple[str, ...] = (
    "Additionally",
    "Also",
    "Moreover",
    "In addition",
    "Furthermore",
    "Meanwhile",
)

NORMAL_PARAGRAPHS: tuple[tuple[str, ...], ...] = (
    (
        "The shape and size of the skull are normal.",
        "No abnormal signal is observed in the brain parenchyma.",
        "The morphology of the ventricles and sulci seen are without abnormal "
        "dilation or narrowing, and there is no midline shift.",
    ),
    (
        "Skull morphology and size show no abnormalities.",
        "The brain parenchyma shows no abnormal signal.",
        "The ventricles, sulci and cisterns show no abnormal dilation or narrowing.",
        "The midline structures are centered.",
    ),
    (
        "No definite abnormality is seen in the brain.",
        "The midline structures are centered.",
    ),
)

# Background sentences an abnormal report may close with.
BACKGROUND_SENTENCES: tuple[str, ...] = (
    "The midline structures are centered.",
    "The ventricles, sulci and cisterns show no abnormal dilation or narrowing.",
    "The shape and size of the skull are normal.",
)

_NORMAL_SENTENCES = frozenset(
    s.lower() for para in NORMAL_PARAGRAPHS for s in para
) | frozenset(s.lower() for s in BACKGROUND_SENTENCES)

# Single-finding sentence bodies. {W} is "[orientation ]site".
_SINGLE_TEMPLATES: tuple[str, ...] = (
    "in the {W}, {A} is seen on {M}.",
    "on {M}, {A} is visible in the {W}.",
    "{A} appears in the {W} on {M}.",
    "{M} shows {A} at the {W}.",
    "the {W} demonstrates {A} on {M}.",
)

# Merged bodies for several findings at the same orientation and site. {L}
# is a list of "{A} on {M}" items.
_MERGED_TEMPLATES: tuple[str, ...] = (
    "in the {W}, {L} are seen.",
    "the {W} demonstrates {L}.",
)

_FORBIDDEN_IN_TOKENS = (",", ".", " on ", " and ", " in the ", " at the ")


class ParseFailure(ValueError):
    """Text is outside the language emitted by ``generate_pseudo_report``."""


class LengthMismatch(ValueError):
    pass


@dataclass(frozen=True)
class StyleConfig:
    clause_order: str = "as_given"
    connective_set: tuple[str, ...] = CONNECTIVES
    merge_same_site: bool = False
    seed: int = 0
    background_rate: float = 0.5

    def __post_init__(self):
        if self.clause_order not in ("as_given", "shuffled"):
            raise ValueError(f"clause_order: {self.clause_order!r}")
        if not self.connective_set:
            raise ValueError("connective_set must be nonempty")
        unknown = [c for c in self.connective_set if c not in CONNECTIVES]
        if unknown:
            raise ValueError(f"connectives not recognised by the parser: {unknown}")
        object.__setattr__(self, "connective_set", tuple(self.connective_set))


def all_styles(seeds: Iterable[int] = (0,)) -> list[StyleConfig]:
    """Cartesian product of style switches; used for coverage sweeps."""
    connective_sets = (CONNECTIVES, ("Also",), ("In addition", "Furthermore"))
    out = []
    for seed in seeds:
        for order in ("as_given", "shuffled"):
            for merge in (False, True):
                for cs in connective_sets:
                    out.append(StyleConfig(order, cs, merge, seed))
    return out


def _where(f: Finding) -> str:
    if f.orientation == "none":
        return f.anatomic_site
    return f"{f.orientation} {f.anatomic_site}"


def _item_list(items: Sequence[Finding]) -> str:
    parts = [f"{f.appearance} on {f.modality}" for f in items]
    return ", ".join(parts[:-1]) + " and " + parts[-1]


def _capitalize(s: str) -> str:
    return s[:1].upper() + s[1:]


def _rng_for(findings: Sequence[Finding], style: StyleConfig) -> random.Random:
    key = json.dumps([style.seed, [f.to_json() for f in findings]], sort_keys=True)
    return random.Random(key)


def generate_pseudo_report(findings: Sequence[Finding], style: StyleConfig | None = None) -> str:
    """Render ``findings`` as a styled free-text paragraph.

    Deterministic in ``(findings, style)``. Empty input yields one of the
    fixed normal paragraphs.
    """
    style = style or StyleConfig()
    findings = list(findings)
    rng = _rng_for(findings, style)
    if not findings:
        return " ".join(rng.choice(NORMAL_PARAGRAPHS))

    ordered = list(findings)
    if style.clause_order == "shuffled":
        rng.shuffle(ordered)

    groups: list[list[Finding]] = []
    if style.merge_same_site:
        index: dict[tuple[str, str], int] = {}
        for f in ordered:
            key = (f.orientation, f.anatomic_site)
            if key in index:
                groups[index[key]].append(f)
            else:
                index[key] = len(groups)
                groups.append([f])
    else:
        groups = [[f] for f in ordered]

    sentences = []
    for k, group in enumerate(groups):
        if len(group) == 1:
            f = group[0]
            body = rng.choice(_SINGLE_TEMPLATES).format(W=_where(f), A=f.appearance, M=f.modality)
        else:
            body = rng.choice(_MERGED_TEMPLATES).format(W=_where(group[0]), L=_item_list(group))
        if k > 0 and rng.random() < 0.5:
            sentences.append(f"{rng.choice(style.connective_set)}, {body}")
        else:
            sentences.append(_capitalize(body))
    if rng.random() < style.background_rate:
        sentences.append(rng.choice(BACKGROUND_SENTENCES))
    return " ".join(sentences)


class _Grammar:
    """Compiled sentence patterns for one vocabulary."""

    def __init__(self, vocab: Vocabulary):
        for tok in vocab.finding_sites + vocab.finding_appearances:
            bad = [s for s in _FORBIDDEN_IN_TOKENS if s in tok]
            if bad:
                raise ValueError(f"vocabulary token {tok!r} contains reserved text {bad}")
        self.sites = {s.lower(): s for s in vocab.finding_sites}
        self.apps = {a.lower(): a for a in vocab.finding_appearances}
        self.mods = {m.lower(): m for m in MODALITIES}

        def alt(tokens):
            return "|".join(re.escape(t) for t in sorted(tokens, key=len, reverse=True))

        site, app, mod = alt(self.sites), alt(self.apps), alt(self.mods)
        where = rf"(?:(?P<ori>left|right|bilateral)\s)?(?P<site>{site})"
        self.item = re.compile(rf"(?P<app>{app}) on (?P<mod>{mod})", re.IGNORECASE)
        item = rf"(?:{app}) on (?:{mod})"
        lst = rf"(?P<list>{item}(?:, {item})* and {item})"
        conn = "|".join(re.escape(c) for c in CONNECTIVES)
        prefix = rf"^(?:(?:{conn}), )?"

        def compile_body(body: str) -> re.Pattern:
            # Literal template text is escaped; slots become named groups.
            pieces = re.split(r"(\{[WAML]\})", body)
            out = []
            for p in pieces:
                if p == "{W}":
                    out.append(where)
                elif p == "{A}":
                    out.append(rf"(?P<app>{app})")
                elif p == "{M}":
                    out.append(rf"(?P<mod>{mod})")
                elif p == "{L}":
                    out.append(lst)
                else:
                    out.append(re.escape(p))
            return re.compile(prefix + "".join(out) + "$", re.IGNORECASE)

        self.single = [compile_body(b) for b in _SINGLE_TEMPLATES]
        self.merged = [compile_body(b) for b in _MERGED_TEMPLATES]

    def _finding(self, mod: str, ori: str | None, site: str, app: str) -> Finding:
        return Finding(
            self.mods[mod.lower()],
            ori.lower() if ori else "none",
            self.sites[site.lower()],
            self.apps[app.lower()],
        )

    def parse_sentence(self, sentence: str) -> list[Finding]:
        if sentence.lower() in _NORMAL_SENTENCES:
            return []
        for pat in self.single:
            m = pat.match(sentence)
            if m:
                return [self._finding(m["mod"], m["ori"], m["site"], m["app"])]
        for pat in self.merged:
            m = pat.match(sentence)
            if m:
                return [
                    self._finding(it["mod"], m["ori"], m["site"], it["app"])
                    for it in self.item.finditer(m["list"])
                ]
        raise ParseFailure(f"unrecognised sentence: {sentence!r}")


@functools.lru_cache(maxsize=16)
def _grammar(vocab: Vocabulary) -> _Grammar:
    return _Grammar(vocab)


_SENTENCE_SPLIT = re.compile(r"(?<=\.)\s+")


def parse_report(text: str, vocab: Vocabulary) -> list[Finding]:
    """Extract the finding multiset from a generated paragraph.

    Raises ParseFailure on anything outside the template language.
    """
    text = text.strip()
    if not text:
        raise ParseFailure("empty report")
    if not text.endswith("."):
        raise ParseFailure("report does not end with a sentence terminator")
    grammar = _grammar(vocab)
    out: list[Finding] = []
    for sentence in _SENTENCE_SPLIT.split(text):
        out.extend(grammar.parse_sentence(sentence))
    return out


@dataclass
class ExtractionReport:
    parse_success_rate: float
    accuracy: float
    tp: int
    fp: int
    fn: int
    n_reports: int = 0
    n_parsed: int = 0
    failures: list[int] = field(default_factory=list)

    def to_json(self) -> dict:
        return {
            "parse_success_rate": self.parse_success_rate,
            "accuracy": self.accuracy,
            "tp": self.tp,
            "fp": self.fp,
            "fn": self.fn,
            "n_reports": self.n_reports,
            "n_parsed": self.n_parsed,
            "failures": list(self.failures),
        }


def eval_extraction(
    predictions: Sequence[Sequence[Finding] | ParseFailure],
    gold: Sequence[Sequence[Finding]],
) -> ExtractionReport:
    """Report-level parse rate and item-level TP/(TP+FP+FN).

    Items are matched as multisets on all four fields. A ParseFailure entry
    counts every gold item of that report as missed.
    """
    if len(predictions) != len(gold):
        raise LengthMismatch(f"{len(predictions)} predictions vs {len(gold)} gold reports")
    tp = fp = fn = 0
    failures = []
    for i, (pred, ref) in enumerate(zip(predictions, gold)):
        ref_c = Counter(ref)
        if isinstance(pred, ParseFailure):
            failures.append(i)
            fn += sum(ref_c.values())
            continue
        pred_c = Counter(pred)
        hit = sum((pred_c & ref_c).values())
        tp += hit
        fp += sum(pred_c.values()) - hit
        fn += sum(ref_c.values()) - hit
    total = len(gold)
    denom = tp + fp + fn
    return ExtractionReport(
        parse_success_rate=(total - len(failures)) / total if total else 0.0,
        accuracy=tp / denom if denom else 0.0,
        tp=tp,
        fp=fp,
        fn=fn,
        n_reports=total,
        n_parsed=total - len(failures),
        failures=failures,
    )
