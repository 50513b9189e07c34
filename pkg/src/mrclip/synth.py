"""Synthetic paired corpus: latent findings, per-modality image features and
their rendered descriptions.

Image features come from a frozen random linear code. Each finding maps to
the sum of per-field block codes (modality, orientation, site, appearance)
plus a small joint code indexed by the full quadruple; the joint part makes
the map injective on finding multisets while the block part keeps the
alignment learnable by small encoders.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .report_model import (
    MODALITIES,
    ORIENTATIONS,
    Description,
    Finding,
    Vocabulary,
    default_vocabulary,
    findings_from_json,
    findings_to_json,
    render_description,
)


class EmptyInput(ValueError):
    pass


@dataclass(frozen=True)
class SynthConfig:
    n_subjects: int = 2000
    vocab_sizes: tuple[int, int] = (12, 8)
    max_findings: int = 3
    feature_dim: int = 64
    noise_sigma: float = 0.1
    near_duplicate_rate: float = 0.3
    normal_rate: float = 0.2
    seed: int = 0
    joint_code_scale: float = 0.25

    def __post_init__(self):
        if self.n_subjects < 2:
            raise ValueError("n_subjects must be >= 2")
        if self.feature_dim < 4:
            raise ValueError("feature_dim must be >= 4")
        if self.max_findings < 1:
            raise ValueError("max_findings must be >= 1")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be nonnegative")
        for name in ("near_duplicate_rate", "normal_rate"):
            r = getattr(self, name)
            if not 0.0 <= r <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        object.__setattr__(self, "vocab_sizes", tuple(self.vocab_sizes))

    @property
    def vocabulary(self) -> Vocabulary:
        return default_vocabulary(*self.vocab_sizes)


@dataclass
class ImageTextPair:
    modality: str
    image: np.ndarray
    description: Description


@dataclass
class SubjectRecord:
    subject_id: int
    findings: list[Finding]
    pairs: list[ImageTextPair] = field(default_factory=list)

    @property
    def is_normal(self) -> bool:
        return not self.findings

    def to_json(self) -> dict:
        return {
            "subject_id": self.subject_id,
            "findings": findings_to_json(self.findings),
            "pairs": [
                {
                    "modality": p.modality,
                    "image": [float(x) for x in p.image],
                    "description": p.description.to_json(),
                }
                for p in self.pairs
            ],
        }

    @classmethod
    def from_json(cls, obj: dict) -> "SubjectRecord":
        pairs = [
            ImageTextPair(p["modality"], np.asarray(p["image"], dtype=np.float64), Description.from_json(p["description"]))
            for p in obj["pairs"]
        ]
        return cls(obj["subject_id"], findings_from_json(obj["findings"]), pairs)


class ImageCode:
    """Frozen random linear code from finding multisets to feature vectors."""

    def __init__(self, cfg: SynthConfig):
        vocab = cfg.vocabulary
        self.sites = vocab.finding_sites
        self.apps = vocab.finding_appearances
        d = cfg.feature_dim
        rng = np.random.default_rng([cfg.seed, 0xC0DE])
        scale = 1.0 / np.sqrt(d)
        self.normal = rng.normal(scale=scale, size=d)
        self.mod = rng.normal(scale=scale, size=(len(MODALITIES), d))
        self.ori = rng.normal(scale=scale, size=(len(ORIENTATIONS), d))
        self.site = rng.normal(scale=scale, size=(len(self.sites), d))
        self.app = rng.normal(scale=scale, size=(len(self.apps), d))
        shape = (len(MODALITIES), len(ORIENTATIONS), len(self.sites), len(self.apps), d)
        self.joint = cfg.joint_code_scale * rng.normal(scale=scale, size=shape)
        self._site_idx = {s: k for k, s in enumerate(self.sites)}
        self._app_idx = {a: k for k, a in enumerate(self.apps)}

    def finding_code(self, f: Finding) -> np.ndarray:
        m = MODALITIES.index(f.modality)
        o = ORIENTATIONS.index(f.orientation)
        s = self._site_idx[f.anatomic_site]
        a = self._app_idx[f.appearance]
        return self.mod[m] + self.ori[o] + self.site[s] + self.app[a] + self.joint[m, o, s, a]

    def encode(self, findings: Iterable[Finding]) -> np.ndarray:
        out = self.normal.copy()
        for f in sorted(findings):
            out = out + self.finding_code(f)
        return out


def ground_truth_image(
    findings: Sequence[Finding],
    modality: str,
    cfg: SynthConfig,
    rng: np.random.Generator,
    code: ImageCode | None = None,
) -> np.ndarray:
    """Code of the findings seen on ``modality`` plus Gaussian noise."""
    if modality not in MODALITIES:
        raise ValueError(f"modality: {modality!r}")
    code = code or ImageCode(cfg)
    clean = code.encode(f for f in findings if f.modality == modality)
    if cfg.noise_sigma == 0:
        return clean
    return clean + rng.normal(scale=cfg.noise_sigma, size=clean.shape)


def random_finding(vocab: Vocabulary, rng: np.random.Generator) -> Finding:
    sites, apps = vocab.finding_sites, vocab.finding_appearances
    return Finding(
        MODALITIES[rng.integers(len(MODALITIES))],
        ORIENTATIONS[rng.integers(len(ORIENTATIONS))],
        sites[rng.integers(len(sites))],
        apps[rng.integers(len(apps))],
    )


def _perturb(f: Finding, vocab: Vocabulary, rng: np.random.Generator) -> Finding:
    """Copy ``f`` with exactly one field changed."""
    fields = (
        ("modality", MODALITIES),
        ("orientation", ORIENTATIONS),
        ("anatomic_site", vocab.finding_sites),
        ("appearance", vocab.finding_appearances),
    )
    choices = [(name, opts) for name, opts in fields if len(opts) > 1]
    name, opts = choices[rng.integers(len(choices))]
    current = getattr(f, name)
    alternatives = [o for o in opts if o != current]
    new = alternatives[rng.integers(len(alternatives))]
    kw = f.to_json()
    kw[name] = new
    return Finding(**kw)


def sample_subject(
    cfg: SynthConfig,
    rng: np.random.Generator,
    subject_id: int = 0,
    history: list[Finding] | None = None,
    code: ImageCode | None = None,
) -> SubjectRecord:
    """Draw one subject and its image-text pairs.

    Normal subjects pair all five modalities with the normal description;
    abnormal subjects pair only the modalities their findings mention.
    ``history`` holds earlier findings for near-duplicate copying and is
    extended in place.
    """
    vocab = cfg.vocabulary
    code = code or ImageCode(cfg)
    findings: list[Finding] = []
    if rng.random() >= cfg.normal_rate:
        k = int(rng.integers(1, cfg.max_findings + 1))
        attempts = 0
        while len(findings) < k and attempts < 100 * k:
            attempts += 1
            if history and rng.random() < cfg.near_duplicate_rate:
                f = _perturb(history[rng.integers(len(history))], vocab, rng)
            else:
                f = random_finding(vocab, rng)
            if f not in findings:
                findings.append(f)
        if history is not None:
            history.extend(findings)

    pairs = []
    if not findings:
        desc = render_description([])
        for m in MODALITIES:
            pairs.append(ImageTextPair(m, ground_truth_image([], m, cfg, rng, code), desc))
    else:
        for m in MODALITIES:
            on_m = [f for f in findings if f.modality == m]
            if on_m:
                pairs.append(ImageTextPair(m, ground_truth_image(on_m, m, cfg, rng, code), render_description(on_m)))
    return SubjectRecord(subject_id, findings, pairs)


def generate_corpus(cfg: SynthConfig) -> list[SubjectRecord]:
    rng = np.random.default_rng(cfg.seed)
    code = ImageCode(cfg)
    history: list[Finding] = []
    return [sample_subject(cfg, rng, i, history, code) for i in range(cfg.n_subjects)]


def preprocess_intensities(raw, percentile: float = 99.9) -> np.ndarray:
    """Clip at the given percentile (nearest rank), then min-max to [0, 1].

    A constant array maps to zeros.
    """
    x = np.asarray(raw, dtype=np.float64)
    if x.size == 0:
        raise EmptyInput("empty intensity array")
    hi = np.percentile(x, percentile, method="inverted_cdf")
    x = np.minimum(x, hi)
    lo, top = x.min(), x.max()
    if top == lo:
        return np.zeros_like(x)
    return (x - lo) / (top - lo)


def split_dataset(
    records: Sequence[SubjectRecord], train_fraction: float, seed: int
) -> tuple[list[SubjectRecord], list[SubjectRecord]]:
    """Subject-level random split; train gets ``round(n * fraction)`` subjects."""
    if not 0 < train_fraction < 1:
        raise ValueError("train_fraction must lie in (0, 1)")
    n = len(records)
    perm = np.random.default_rng(seed).permutation(n)
    n_train = int(round(n * train_fraction))
    train_idx = sorted(perm[:n_train].tolist())
    test_idx = sorted(perm[n_train:].tolist())
    return [records[i] for i in train_idx], [records[i] for i in test_idx]


def save_corpus(records: Iterable[SubjectRecord], path: str | Path, cfg: SynthConfig | None = None) -> None:
    with open(path, "w") as fh:
        for r in records:
            fh.write(json.dumps(r.to_json()) + "\n")
    if cfg is not None:
        meta = asdict(cfg)
        Path(str(path) + ".config.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def load_corpus(path: str | Path) -> list[SubjectRecord]:
    with open(path) as fh:
        return [SubjectRecord.from_json(json.loads(line)) for line in fh if line.strip()]


def iter_pairs(records: Iterable[SubjectRecord]) -> list[ImageTextPair]:
    return [p for r in records for p in r.pairs]
