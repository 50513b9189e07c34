"""Contrastive pretraining loop for the toy encoders.

Each iteration draws a batch with pairwise-distinct texts, encodes both
sides, builds the soft target from the batch descriptions (selip mode),
evaluates the combined loss, backpropagates and takes one Adam step with
per-encoder scheduled learning rates.
"""

from __future__ import annotations

import csv
import dataclasses
import io
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import checkpoint
from .encoders import IMAGE_PARAMS, TEXT_PARAMS, EncoderParams, TokenVocab, encode_bag, encode_image, init_params
from .losses import LossConfig, loss_graph
from .numeric import AdamState, ScheduleConfig, adam_step, grad_eval, scheduled_lr
from .numeric.autodiff import Parameter
from .retrieval import RetrievalResult, dedupe_candidates, topk_accuracy
from .similarity import batch_similarity_matrix, description_similarity
from .synth import ImageTextPair, SubjectRecord, iter_pairs

log = logging.getLogger(__name__)

MODES = ("clip_only", "selip")
LOG_COLUMNS = ("iteration", "lr_image", "lr_text", "L_clip", "L_se", "L_total")
VAL_COLUMNS = ("iteration", "n_candidates", "top1", "top2", "top5", "top10")


class InsufficientDistinctTexts(ValueError):
    pass


class NonFiniteLoss(FloatingPointError):
    def __init__(self, iteration: int, value: float):
        self.iteration = iteration
        super().__init__(f"non-finite loss {value!r} at iteration {iteration}")


class SoftTargetMismatch(AssertionError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 64
    iterations_per_epoch: int = 250
    epochs: int = 120
    schedule: ScheduleConfig = ScheduleConfig()
    loss: LossConfig = LossConfig()
    seed: int = 0
    mode: str = "selip"
    d_emb: int = 32
    d_hidden: int = 64
    d_proj: int = 32
    val_every: int = 100
    val_pairs: int = 256
    s_check_every: int = 100
    checkpoint_every: int = 0

    def __post_init__(self):
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.iterations_per_epoch != self.schedule.iterations_per_epoch:
            raise ValueError("iterations_per_epoch disagrees with the schedule")

    @property
    def total_iterations(self) -> int:
        return self.epochs * self.iterations_per_epoch

    @property
    def effective_loss(self) -> LossConfig:
        if self.mode == "clip_only":
            return dataclasses.replace(self.loss, beta=0.0)
        return self.loss

    def to_json(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_json(cls, obj: dict) -> "TrainConfig":
        obj = dict(obj)
        obj["schedule"] = ScheduleConfig(**obj["schedule"])
        obj["loss"] = LossConfig(**obj["loss"])
        return cls(**obj)


def toy_config(**overrides) -> TrainConfig:
    """Desk-scale settings: 2000 iterations, one warm-up epoch, then decay."""
    ipe = overrides.pop("iterations_per_epoch", 250)
    epochs = overrides.pop("epochs", 8)
    schedule = overrides.pop(
        "schedule",
        ScheduleConfig(
            lr_init_image=2e-3,
            lr_init_text=1e-3,
            t_max_warmup=ipe,
            e_max=max(1, epochs - 1),
            iterations_per_epoch=ipe,
        ),
    )
    return TrainConfig(iterations_per_epoch=ipe, epochs=epochs, schedule=schedule, **overrides)


@dataclass
class TrainLog:
    records: list[dict] = field(default_factory=list)
    validation: list[dict] = field(default_factory=list)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(LOG_COLUMNS)
        for r in self.records:
            w.writerow([r["iteration"]] + [repr(float(r[c])) for c in LOG_COLUMNS[1:]])
        return buf.getvalue()

    def validation_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(VAL_COLUMNS)
        for r in self.validation:
            w.writerow([r["iteration"], r["n_candidates"]] + [repr(float(r[c])) for c in VAL_COLUMNS[2:]])
        return buf.getvalue()


class UniqueTextSampler:
    """Batches whose rendered descriptions are pairwise distinct.

    Text classes are drawn uniformly without replacement, then one pair is
    drawn uniformly from each chosen class.
    """

    def __init__(self, texts: Sequence[str], batch_size: int):
        classes: dict[str, list[int]] = {}
        for i, t in enumerate(texts):
            classes.setdefault(t, []).append(i)
        if len(classes) < batch_size:
            raise InsufficientDistinctTexts(f"{len(classes)} distinct texts for batch size {batch_size}")
        self.class_texts = list(classes)
        self.members = [np.asarray(v) for v in classes.values()]
        self.batch_size = batch_size

    @property
    def n_classes(self) -> int:
        return len(self.members)

    def sample(self, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
        """Returns (pair indices, class indices)."""
        cls = rng.choice(self.n_classes, size=self.batch_size, replace=False)
        picks = np.array([self.members[c][rng.integers(len(self.members[c]))] for c in cls])
        return picks, cls


def unique_text_sampler(texts: Sequence[str], batch_size: int, rng: np.random.Generator) -> np.ndarray:
    return UniqueTextSampler(texts, batch_size).sample(rng)[0]


def evaluate_retrieval(
    params: EncoderParams, pairs: Sequence[ImageTextPair], ks: Sequence[int] = (1, 2, 5, 10)
) -> RetrievalResult:
    texts = [p.description.text for p in pairs]
    cands, gold = dedupe_candidates(texts)
    images = np.stack([p.image for p in pairs])
    img = encode_image(params, images).value
    txt = encode_bag(params, params.vocab.bag(cands)).value
    ks = [k for k in ks if k <= len(cands)]
    return topk_accuracy(img, txt, gold, ks)


class Trainer:
    def __init__(
        self,
        train_records: Sequence[SubjectRecord],
        cfg: TrainConfig,
        val_records: Sequence[SubjectRecord] | None = None,
    ):
        self.cfg = cfg
        self.pairs = iter_pairs(train_records)
        texts = [p.description.text for p in self.pairs]
        self.sampler = UniqueTextSampler(texts, cfg.batch_size)
        self.images = np.stack([p.image for p in self.pairs])
        vocab = TokenVocab.from_texts(self.sampler.class_texts)
        self.class_bags = vocab.bag(self.sampler.class_texts)
        self.val_pairs = iter_pairs(val_records)[: cfg.val_pairs] if val_records else []

        self.params = init_params(
            self.images.shape[1],
            vocab,
            np.random.default_rng([cfg.seed, 1]),
            d_emb=cfg.d_emb,
            d_hidden=cfg.d_hidden,
            d_proj=cfg.d_proj,
        )
        self.opt = AdamState.for_params(self.params.ordered())
        self.rng = np.random.default_rng([cfg.seed, 2])
        self.iteration = 0
        self.log = TrainLog()

    def _lrs(self, it: int) -> tuple[float, float]:
        sch = self.cfg.schedule
        return scheduled_lr(it, sch, sch.lr_init_image), scheduled_lr(it, sch, sch.lr_init_text)

    def step(self) -> dict:
        cfg = self.cfg
        it = self.iteration + 1
        idx, cls = self.sampler.sample(self.rng)
        batch_pairs = [self.pairs[i] for i in idx]
        texts = [p.description.text for p in batch_pairs]
        if len(set(texts)) != len(texts):
            raise AssertionError(f"duplicate text in batch at iteration {it}")

        loss_cfg = cfg.effective_loss
        S = None
        if loss_cfg.beta > 0:
            descs = [p.description for p in batch_pairs]
            S = batch_similarity_matrix(descs).values
            if cfg.s_check_every and it % cfg.s_check_every == 0:
                _check_soft_target(S, descs, it)

        self.params.zero_grad()
        V = encode_image(self.params, self.images[idx])
        T = encode_bag(self.params, self.class_bags[cls])
        total, parts = loss_graph(V, T, S, loss_cfg)
        value = float(total.value)
        if not np.isfinite(value):
            raise NonFiniteLoss(it, value)
        grad_eval(total)

        lr_img, lr_txt = self._lrs(it)
        rates = [lr_img] * len(IMAGE_PARAMS) + [lr_txt] * len(TEXT_PARAMS)
        adam_step(self.opt, self.params.ordered(), rates)
        self.iteration = it

        rec = {
            "iteration": it,
            "lr_image": lr_img,
            "lr_text": lr_txt,
            "L_clip": float(parts["L_clip"].value),
            "L_se": float(parts["L_se"].value),
            "L_total": value,
        }
        self.log.records.append(rec)
        if self.val_pairs and cfg.val_every and it % cfg.val_every == 0:
            res = evaluate_retrieval(self.params, self.val_pairs)
            acc = res.top_k_accuracy
            self.log.validation.append(
                {
                    "iteration": it,
                    "n_candidates": res.n_candidates,
                    **{f"top{k}": acc.get(k, 1.0) for k in (1, 2, 5, 10)},
                }
            )
        return rec

    def run(self, until: int | None = None, ckpt_dir: str | Path | None = None) -> tuple[EncoderParams, TrainLog]:
        """Train up to iteration ``until`` (default: the configured total)."""
        stop = self.cfg.total_iterations if until is None else min(until, self.cfg.total_iterations)
        while self.iteration < stop:
            self.step()
            every = self.cfg.checkpoint_every
            if ckpt_dir is not None and every and self.iteration % every == 0:
                self.save(Path(ckpt_dir) / f"ckpt_{self.iteration:06d}.bin")
        if ckpt_dir is not None and self.iteration > 0:
            self.save(Path(ckpt_dir) / "final.bin")
        return self.params, self.log

    # -- checkpointing -------------------------------------------------

    def state_arrays(self) -> dict[str, np.ndarray]:
        arrays = {}
        for name, p in self.params.params.items():
            arrays[f"param/{name}"] = p.value
        names = list(IMAGE_PARAMS + TEXT_PARAMS)
        for name, m, v in zip(names, self.opt.m, self.opt.v):
            arrays[f"adam_m/{name}"] = m
            arrays[f"adam_v/{name}"] = v
        return arrays

    def state_meta(self) -> dict:
        return {
            "config": self.cfg.to_json(),
            "iteration": self.iteration,
            "feature_dim": self.params.feature_dim,
            "vocab": self.params.vocab.tokens,
            "adam": {
                "step_count": self.opt.step_count,
                "beta1": self.opt.beta1,
                "beta2": self.opt.beta2,
                "eps": self.opt.eps,
            },
            "rng": self.rng.bit_generator.state,
            "log": self.log.records,
            "validation": self.log.validation,
        }

    def save(self, path: str | Path) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        checkpoint.save(path, self.state_arrays(), self.state_meta())

    def restore(self, path: str | Path) -> None:
        arrays, meta = checkpoint.load(path)
        if TrainConfig.from_json(meta["config"]) != self.cfg:
            raise ValueError("checkpoint was written with a different training config")
        if meta["vocab"] != self.params.vocab.tokens:
            raise ValueError("checkpoint token vocabulary differs from the corpus")
        for name, p in self.params.params.items():
            p.value = arrays[f"param/{name}"].copy()
            p.zero_grad()
        names = list(IMAGE_PARAMS + TEXT_PARAMS)
        self.opt = AdamState(
            [arrays[f"adam_m/{n}"].copy() for n in names],
            [arrays[f"adam_v/{n}"].copy() for n in names],
            **meta["adam"],
        )
        self.rng.bit_generator.state = meta["rng"]
        self.iteration = meta["iteration"]
        self.log = TrainLog(list(meta["log"]), list(meta["validation"]))


def _check_soft_target(S: np.ndarray, descs, it: int) -> None:
    n = len(descs)
    for i in range(n):
        for j in range(n):
            if S[i, j] != description_similarity(descs[i], descs[j]):
                raise SoftTargetMismatch(f"S[{i},{j}] differs from the pairwise oracle at iteration {it}")


def checkpoint_save(trainer: Trainer, path: str | Path) -> None:
    trainer.save(path)


def checkpoint_load(path: str | Path) -> tuple[EncoderParams, AdamState, dict]:
    """Read parameters, optimizer state and metadata without a corpus."""
    arrays, meta = checkpoint.load(path)
    vocab = TokenVocab(meta["vocab"])
    params = EncoderParams(
        {k.split("/", 1)[1]: Parameter(v, name=k.split("/", 1)[1]) for k, v in arrays.items() if k.startswith("param/")},
        vocab,
        meta["feature_dim"],
    )
    names = list(IMAGE_PARAMS + TEXT_PARAMS)
    opt = AdamState([arrays[f"adam_m/{n}"] for n in names], [arrays[f"adam_v/{n}"] for n in names], **meta["adam"])
    return params, opt, meta


def train_run(
    train_records: Sequence[SubjectRecord],
    cfg: TrainConfig,
    val_records: Sequence[SubjectRecord] | None = None,
    ckpt_dir: str | Path | None = None,
    resume_from: str | Path | None = None,
) -> tuple[EncoderParams, TrainLog]:
    trainer = Trainer(train_records, cfg, val_records)
    if resume_from is not None:
        trainer.restore(resume_from)
    return trainer.run(ckpt_dir=ckpt_dir)
