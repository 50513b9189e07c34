"""Structured MRI findings and their canonical text rendering."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence, Union

MODALITIES: tuple[str, ...] = ("T1WI", "T2WI", "DWI", "ADC", "T2FLAIR")
ORIENTATIONS: tuple[str, ...] = ("left", "right", "bilateral", "none")

SENTINEL_SITE = "global"
SENTINEL_APPEARANCE = "normal"

NORMAL_EXPRESSION = (
    "The shape and size of the skull are normal. "
    "No abnormal signal is observed in the brain parenchyma. "
    "The morphology of the ventricles and sulci seen are without abnormal "
    "dilation or narrowing, and there is no midline shift."
)

CLAUSE_SEPARATOR = " "


class FindingError(ValueError):
    """Base class for rejected finding records. ``field`` names the culprit."""

    field: str = ""

    def __init__(self, value: Any, detail: str = ""):
        self.value = value
        msg = f"{self.field}: {value!r}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class UnknownModality(FindingError):
    field = "modality"


class UnknownOrientation(FindingError):
    field = "orientation"


class OutOfVocabularySite(FindingError):
    field = "anatomic_site"


class OutOfVocabularyAppearance(FindingError):
    field = "appearance"


@dataclass(frozen=True, order=True)
class Finding:
    modality: str
    orientation: str
    anatomic_site: str
    appearance: str

    def to_json(self) -> dict[str, str]:
        return {
            "modality": self.modality,
            "orientation": self.orientation,
            "anatomic_site": self.anatomic_site,
            "appearance": self.appearance,
        }


@dataclass(frozen=True)
class NormalSentinel:
    """Clause metadata carried by the normal description."""

    anatomic_site: str = SENTINEL_SITE
    appearance: str = SENTINEL_APPEARANCE


NORMAL = NormalSentinel()

ClauseFinding = Union[Finding, NormalSentinel]


@dataclass(frozen=True)
class Vocabulary:
    sites: tuple[str, ...]
    appearances: tuple[str, ...]

    def __post_init__(self):
        sites = tuple(self.sites)
        apps = tuple(self.appearances)
        if SENTINEL_SITE not in sites:
            sites = sites + (SENTINEL_SITE,)
        if SENTINEL_APPEARANCE not in apps:
            apps = apps + (SENTINEL_APPEARANCE,)
        for name, toks in (("sites", sites), ("appearances", apps)):
            if len(set(toks)) != len(toks):
                raise ValueError(f"duplicate tokens in vocabulary {name}")
            if any(not t or t != t.strip() for t in toks):
                raise ValueError(f"blank or padded token in vocabulary {name}")
        object.__setattr__(self, "sites", sites)
        object.__setattr__(self, "appearances", apps)

    @property
    def finding_sites(self) -> tuple[str, ...]:
        """Sites usable in real findings (the sentinel is reserved)."""
        return tuple(s for s in self.sites if s != SENTINEL_SITE)

    @property
    def finding_appearances(self) -> tuple[str, ...]:
        return tuple(a for a in self.appearances if a != SENTINEL_APPEARANCE)

    def to_json(self) -> dict[str, list[str]]:
        return {"sites": list(self.sites), "appearances": list(self.appearances)}

    @classmethod
    def from_json(cls, obj: Mapping[str, Sequence[str]]) -> "Vocabulary":
        return cls(tuple(obj["sites"]), tuple(obj["appearances"]))

    @classmethod
    def load(cls, path: str | Path) -> "Vocabulary":
        return cls.from_json(json.loads(Path(path).read_text()))


def validate_finding(candidate: Mapping[str, Any] | Finding, vocab: Vocabulary) -> Finding:
    """Check a raw finding record against the enums and ``vocab``.

    Accepts either a mapping with the four JSON keys or an existing Finding.
    The sentinel site/appearance are reserved for normal descriptions and
    are rejected here.
    """
    if isinstance(candidate, Finding):
        candidate = candidate.to_json()
    modality = candidate.get("modality")
    orientation = candidate.get("orientation")
    site = candidate.get("anatomic_site")
    appearance = candidate.get("appearance")
    if modality not in MODALITIES:
        raise UnknownModality(modality)
    if orientation not in ORIENTATIONS:
        raise UnknownOrientation(orientation)
    if site == SENTINEL_SITE:
        raise OutOfVocabularySite(site, "reserved for normal descriptions")
    if site not in vocab.sites:
        raise OutOfVocabularySite(site)
    if appearance == SENTINEL_APPEARANCE:
        raise OutOfVocabularyAppearance(appearance, "reserved for normal descriptions")
    if appearance not in vocab.appearances:
        raise OutOfVocabularyAppearance(appearance)
    return Finding(modality, orientation, site, appearance)


def render_clause(f: Finding) -> str:
    if f.orientation == "none":
        where = f.anatomic_site
    else:
        where = f"{f.orientation} {f.anatomic_site}"
    return f"In modal {f.modality}, at {where}, the appearance is {f.appearance}."


@dataclass(frozen=True)
class Description:
    text: str
    clauses: tuple[tuple[str, ClauseFinding], ...] = field(default_factory=tuple)

    def __post_init__(self):
        if not self.clauses:
            raise ValueError("a description needs at least one clause")
        joined = CLAUSE_SEPARATOR.join(c for c, _ in self.clauses)
        if joined != self.text:
            raise ValueError("description text does not match its clauses")

    @property
    def is_normal(self) -> bool:
        return len(self.clauses) == 1 and isinstance(self.clauses[0][1], NormalSentinel)

    @property
    def findings(self) -> list[Finding]:
        return [f for _, f in self.clauses if isinstance(f, Finding)]

    def to_json(self) -> dict[str, Any]:
        return {
            "text": self.text,
            "clauses": [
                {"text": t, "finding": f.to_json() if isinstance(f, Finding) else None}
                for t, f in self.clauses
            ],
        }

    @classmethod
    def from_json(cls, obj: Mapping[str, Any]) -> "Description":
        clauses = []
        for c in obj["clauses"]:
            f = c.get("finding")
            clauses.append((c["text"], NORMAL if f is None else finding_from_json(f)))
        return cls(obj["text"], tuple(clauses))


def render_description(findings: Iterable[Finding]) -> Description:
    findings = list(findings)
    if not findings:
        return Description(NORMAL_EXPRESSION, ((NORMAL_EXPRESSION, NORMAL),))
    clauses = tuple((render_clause(f), f) for f in findings)
    return Description(CLAUSE_SEPARATOR.join(c for c, _ in clauses), clauses)


def finding_from_json(obj: Mapping[str, Any]) -> Finding:
    """Build a Finding from its JSON object without vocabulary checks."""
    return Finding(obj["modality"], obj["orientation"], obj["anatomic_site"], obj["appearance"])


def findings_to_json(findings: Iterable[Finding]) -> list[dict[str, str]]:
    return [f.to_json() for f in findings]


def findings_from_json(arr: Iterable[Mapping[str, Any]], vocab: Vocabulary | None = None) -> list[Finding]:
    if vocab is None:
        return [finding_from_json(o) for o in arr]
    return [validate_finding(o, vocab) for o in arr]


SITE_POOL: tuple[str, ...] = (
    "basal ganglia", "pons", "thalamus", "frontal lobe", "temporal lobe",
    "parietal lobe", "occipital lobe", "cerebellar hemisphere", "corona radiata",
    "centrum semiovale", "periventricular white matter", "ethmoid sinus",
    "brainstem", "insula", "hippocampus", "internal capsule", "caudate nucleus",
    "maxillary sinus", "temporal lobe gyri", "midbrain",
)
APPEARANCE_POOL: tuple[str, ...] = (
    "long T2 signal", "long T1 signal", "high signal", "low signal",
    "patchy high signal", "point-like long T2 signal", "restricted diffusion",
    "short T1 signal", "flake-like high signal", "mixed signal", "cystic signal",
    "slightly high signal", "strip-like low signal", "nodular high signal",
    "short T2 signal", "iso signal",
)


def default_vocabulary(n_sites: int = 12, n_appearances: int = 8) -> Vocabulary:
    """First ``n`` entries of the built-in pools, padded with numbered tokens."""
    if n_sites < 1 or n_appearances < 1:
        raise ValueError("vocabulary sizes must be positive")
    sites = list(SITE_POOL[:n_sites]) + [f"region {k}" for k in range(len(SITE_POOL), n_sites)]
    apps = list(APPEARANCE_POOL[:n_appearances]) + [
        f"pattern {k}" for k in range(len(APPEARANCE_POOL), n_appearances)
    ]
    return Vocabulary(tuple(sites), tuple(apps))
