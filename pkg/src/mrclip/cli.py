"""Command-line entry point.

Every command takes ``--seed`` and ``--config FILE`` (flat ``key = value``
lines named after the long flags; command-line flags win) and writes one
run manifest. Failures exit nonzero with a JSON error object on stderr.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import struct
import sys
import time
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import report_codec as codec
from .losses import EmbeddingBatch, LossConfig, loss_graph, total_loss
from .numeric import Parameter, ScheduleConfig, finite_diff_check
from .report_model import Description, Vocabulary, default_vocabulary, findings_from_json, findings_to_json, render_description
from .retrieval import write_table_csv
from .similarity import TokenizerConfig, batch_similarity_matrix
from .synth import SynthConfig, generate_corpus, random_finding, iter_pairs, load_corpus, save_corpus, split_dataset
from .trainer import Trainer, TrainConfig, checkpoint_load, evaluate_retrieval

KS_DEFAULT = (1, 2, 5, 10)


class CliError(Exception):
    exit_code = 1

    def payload(self) -> dict:
        return {"error": type(self).__name__, "message": str(self)}


class UnknownCommand(CliError):
    exit_code = 2


class ConfigError(CliError):
    exit_code = 2

    def __init__(self, key: str, message: str):
        self.key = key
        super().__init__(f"{key}: {message}")

    def payload(self) -> dict:
        return {**super().payload(), "key": self.key}


def _sha256(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _dump_json(obj, path: str | Path) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


class Run:
    """Collects inputs and outputs of one command for its manifest."""

    def __init__(self, command: str, args: argparse.Namespace):
        self.command = command
        self.args = args
        self.inputs: list[str] = []
        self.outputs: list[str] = []
        self.extra: dict = {}
        self.start = time.perf_counter()

    def read(self, path) -> Path:
        self.inputs.append(str(path))
        return Path(path)

    def wrote(self, path) -> None:
        self.outputs.append(str(path))

    def manifest(self) -> dict:
        config = {k: v for k, v in vars(self.args).items() if k not in ("func", "manifest", "explicit")}
        return {
            "command": self.command,
            "config": config,
            "seed": getattr(self.args, "seed", None),
            "inputs": {p: _sha256(p) for p in self.inputs if Path(p).is_file()},
            "outputs": {p: _sha256(p) for p in self.outputs if Path(p).is_file()},
            "result": self.extra,
            "wall_clock_seconds": time.perf_counter() - self.start,
        }

    def emit_manifest(self) -> None:
        target = self.args.manifest
        if target is None and self.outputs:
            target = self.outputs[0] + ".manifest.json"
        data = json.dumps(self.manifest(), indent=2, sort_keys=True, default=str) + "\n"
        if target is None:
            sys.stderr.write(data)
        else:
            Path(target).write_text(data)


def _ints(text: str) -> list[int]:
    return [int(x) for x in str(text).split(",") if x.strip()]


# -- commands ----------------------------------------------------------------


def cmd_gen_data(args, run: Run) -> None:
    cfg = SynthConfig(
        n_subjects=args.subjects,
        vocab_sizes=(args.n_sites, args.n_appearances),
        max_findings=args.max_findings,
        feature_dim=args.feature_dim,
        noise_sigma=args.noise_sigma,
        near_duplicate_rate=args.near_dup_rate,
        normal_rate=args.normal_rate,
        seed=args.seed,
    )
    records = generate_corpus(cfg)
    save_corpus(records, args.out, cfg)
    run.wrote(args.out)
    run.wrote(args.out + ".config.json")
    run.extra = {"subjects": len(records), "pairs": len(iter_pairs(records))}


def _vocab(args, run: Run) -> Vocabulary:
    if getattr(args, "vocab", None):
        return Vocabulary.load(run.read(args.vocab))
    return default_vocabulary(args.n_sites, args.n_appearances)


def cmd_gen_reports(args, run: Run) -> None:
    vocab = _vocab(args, run)
    rng = np.random.default_rng(args.seed)
    styles = codec.all_styles(seeds=range(args.seed, args.seed + 4))
    with open(args.out, "w") as fh:
        for i in range(args.n):
            k = int(rng.integers(args.min_findings, args.max_findings + 1))
            findings = [random_finding(vocab, rng) for _ in range(k)]
            style = styles[i % len(styles)]
            text = codec.generate_pseudo_report(findings, style)
            fh.write(json.dumps({"text": text, "gold": findings_to_json(findings)}) + "\n")
    run.wrote(args.out)
    run.extra = {"reports": args.n}


def _read_jsonl(path) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def cmd_parse_reports(args, run: Run) -> None:
    vocab = _vocab(args, run)
    with open(args.out, "w") as fh:
        for rec in _read_jsonl(run.read(args.input)):
            try:
                found = codec.parse_report(rec["text"], vocab)
                out = {"findings": findings_to_json(found)}
            except codec.ParseFailure as exc:
                out = {"parse_failure": str(exc)}
            fh.write(json.dumps(out) + "\n")
    run.wrote(args.out)


def cmd_eval_extraction(args, run: Run) -> None:
    preds = []
    for rec in _read_jsonl(run.read(args.pred)):
        if "parse_failure" in rec:
            preds.append(codec.ParseFailure(rec["parse_failure"]))
        else:
            preds.append(findings_from_json(rec["findings"]))
    gold = [findings_from_json(rec["gold"]) for rec in _read_jsonl(run.read(args.gold))]
    report = codec.eval_extraction(preds, gold)
    _dump_json(report.to_json(), args.out)
    run.wrote(args.out)
    run.extra = {"parse_success_rate": report.parse_success_rate, "accuracy": report.accuracy}


def _description_from_record(rec: dict) -> Description:
    if "clauses" in rec:
        return Description.from_json(rec)
    return render_description(findings_from_json(rec.get("findings", [])))


def cmd_sim_matrix(args, run: Run) -> None:
    batch = [_description_from_record(r) for r in _read_jsonl(run.read(args.input))]
    S = batch_similarity_matrix(batch, TokenizerConfig(mode=args.tokenizer)).values
    _dump_json(S.tolist(), args.out)
    run.wrote(args.out)
    if args.csv:
        np.savetxt(args.csv, S, delimiter=",", fmt="%.17g")
        run.wrote(args.csv)


def read_embeddings(path) -> EmbeddingBatch:
    """Binary layout: int64 N, int64 d, then N*d image floats, N*d text floats."""
    blob = Path(path).read_bytes()
    if len(blob) < 16:
        raise ValueError("embedding file too short")
    n, d = struct.unpack_from("<qq", blob)
    need = 16 + 2 * n * d * 8
    if n < 1 or d < 1 or len(blob) != need:
        raise ValueError(f"embedding file has {len(blob)} bytes, expected {need} for N={n}, d={d}")
    data = np.frombuffer(blob, dtype="<f8", offset=16).astype(np.float64)
    return EmbeddingBatch(data[: n * d].reshape(n, d), data[n * d :].reshape(n, d))


def write_embeddings(path, images: np.ndarray, texts: np.ndarray) -> None:
    images = np.asarray(images, dtype="<f8")
    texts = np.asarray(texts, dtype="<f8")
    n, d = images.shape
    Path(path).write_bytes(struct.pack("<qq", n, d) + images.tobytes() + texts.tobytes())


def cmd_loss_eval(args, run: Run) -> None:
    batch = read_embeddings(run.read(args.embeddings))
    S = None
    if args.S:
        S = np.asarray(json.loads(run.read(args.S).read_text()), dtype=np.float64)
    cfg = LossConfig(tau=args.tau, alpha=args.alpha, beta=args.beta, epsilon_smooth=args.eps)
    out = total_loss(batch, S, cfg)
    _dump_json(out.to_json(), args.out)
    run.wrote(args.out)
    run.extra = out.scalars()


def grad_check(seed: int, n_configs: int = 20, h: float = 1e-5) -> dict:
    """Finite-difference check of the full loss over random configurations."""
    rng = np.random.default_rng(seed)
    rows = []
    for k in range(n_configs):
        n = int(rng.choice([2, 4, 8]))
        d = int(rng.choice([3, 16]))
        tau = float(rng.choice([0.07, 1.0]))
        V = Parameter(rng.normal(size=(n, d)), name="V")
        T = Parameter(rng.normal(size=(n, d)), name="T")
        S = rng.uniform(size=(n, n))
        S = (S + S.T) / 2
        np.fill_diagonal(S, 1.0)
        cfg = LossConfig(tau=tau, alpha=1.0, beta=1.0)
        err = finite_diff_check(lambda: loss_graph(V, T, S, cfg)[0], [V, T], h)
        rows.append({"N": n, "d": d, "tau": tau, "max_rel_err": err})
    worst = max(r["max_rel_err"] for r in rows)
    return {"h": h, "configs": rows, "max_rel_err": worst, "passed": worst < 1e-4}


def cmd_grad_check(args, run: Run) -> None:
    report = grad_check(args.seed, args.configs, args.h)
    text = json.dumps(report, indent=2, sort_keys=True) + "\n"
    if args.out:
        Path(args.out).write_text(text)
        run.wrote(args.out)
    else:
        sys.stdout.write(text)
    run.extra = {"max_rel_err": report["max_rel_err"]}
    if not report["passed"]:
        raise CliError(f"max relative error {report['max_rel_err']:.3e} exceeds 1e-4")


_MODE = {"clip": "clip_only", "selip": "selip"}


def build_train_config(args, seed: int | None = None, mode: str | None = None) -> TrainConfig:
    mode = mode or _MODE[args.mode]
    if mode == "clip_only" and args.beta is not None and "beta" in args.explicit:
        raise ConfigError("beta", "beta is forbidden in clip mode")
    beta = 0.0 if mode == "clip_only" else (1.0 if args.beta is None else args.beta)
    loss = LossConfig(tau=args.tau, alpha=args.alpha, beta=beta)
    seed = args.seed if seed is None else seed
    common = dict(
        batch_size=args.batch_size,
        loss=loss,
        seed=seed,
        mode=mode,
        d_proj=args.d_proj,
        checkpoint_every=args.ckpt_every,
    )
    ipe = args.iterations_per_epoch
    if args.preset == "full":
        epochs = 120 if args.epochs is None else args.epochs
        schedule = ScheduleConfig(
            lr_init_image=args.lr_image or 1e-4,
            lr_init_text=args.lr_text or 5e-5,
            t_max_warmup=args.warmup or 5000,
            e_max=args.e_max or 100,
            iterations_per_epoch=ipe,
        )
    else:
        epochs = 8 if args.epochs is None else args.epochs
        schedule = ScheduleConfig(
            lr_init_image=args.lr_image or 2e-3,
            lr_init_text=args.lr_text or 1e-3,
            t_max_warmup=args.warmup or ipe,
            e_max=args.e_max or max(1, epochs - 1),
            iterations_per_epoch=ipe,
        )
    return TrainConfig(iterations_per_epoch=ipe, epochs=epochs, schedule=schedule, **common)


def _split(args, run: Run):
    records = load_corpus(run.read(args.corpus))
    return split_dataset(records, args.train_fraction, args.split_seed)


def cmd_train(args, run: Run) -> None:
    cfg = build_train_config(args)
    train, test = _split(args, run)
    trainer = Trainer(train, cfg, test)
    if args.resume:
        trainer.restore(run.read(args.resume))
    ckpt_dir = args.ckpt_dir
    if ckpt_dir:
        Path(ckpt_dir).mkdir(parents=True, exist_ok=True)
    _, log = trainer.run(until=args.stop_at, ckpt_dir=ckpt_dir)
    if args.log_csv:
        Path(args.log_csv).write_text(log.to_csv())
        run.wrote(args.log_csv)
        Path(args.log_csv + ".validation.csv").write_text(log.validation_csv())
        run.wrote(args.log_csv + ".validation.csv")
    if ckpt_dir:
        run.wrote(str(Path(ckpt_dir) / "final.bin"))
    last = log.records[-1] if log.records else {}
    run.extra = {"iterations": trainer.iteration, "final": last, "train_config": cfg.to_json()}


def _eval_split(args, run: Run):
    if args.split == "all":
        return load_corpus(run.read(args.corpus))
    train, test = _split(args, run)
    return train if args.split == "train" else test


def cmd_eval_retrieval(args, run: Run) -> None:
    records = _eval_split(args, run)
    params, _, meta = checkpoint_load(run.read(args.ckpt))
    res = evaluate_retrieval(params, iter_pairs(records), _ints(args.ks))
    if args.out_json:
        _dump_json(res.to_json(), args.out_json)
        run.wrote(args.out_json)
    if args.out_csv:
        method = meta["config"]["mode"]
        write_table_csv(args.out_csv, {method: res}, list(res.top_k_accuracy))
        run.wrote(args.out_csv)
    run.extra = {"top_k_accuracy": res.top_k_accuracy, "n_candidates": res.n_candidates}


def run_compare(train, test, args, seeds: Sequence[int]) -> list[dict]:
    rows = []
    pairs = iter_pairs(test)
    for seed in seeds:
        for mode in ("clip_only", "selip"):
            cfg = build_train_config(args, seed=seed, mode=mode)
            params, log = Trainer(train, cfg).run()
            res = evaluate_retrieval(params, pairs, KS_DEFAULT)
            last = log.records[-1]
            rows.append(
                {
                    "seed": seed,
                    "mode": mode,
                    **{f"Top-{k}": res.top_k_accuracy[k] for k in KS_DEFAULT},
                    "final L_clip": last["L_clip"],
                    "final L_se": last["L_se"],
                    "n_candidates": res.n_candidates,
                }
            )
    return rows


COMPARE_COLUMNS = ("seed", "mode", "Top-1", "Top-2", "Top-5", "Top-10", "final L_clip", "final L_se")


def compare_csv(rows: list[dict]) -> str:
    lines = [",".join(COMPARE_COLUMNS)]
    for r in rows:
        lines.append(",".join(str(r[c]) if c in ("seed", "mode") else repr(float(r[c])) for c in COMPARE_COLUMNS))
    for mode in ("clip_only", "selip"):
        sel = [r for r in rows if r["mode"] == mode]
        if sel:
            means = [repr(float(np.mean([r[c] for r in sel]))) for c in COMPARE_COLUMNS[2:]]
            lines.append(",".join(["mean", mode] + means))
    return "\n".join(lines) + "\n"


def cmd_compare(args, run: Run) -> None:
    if args.corpus:
        train, test = _split(args, run)
    else:
        cfg = SynthConfig(
            n_subjects=args.subjects,
            noise_sigma=args.noise_sigma,
            near_duplicate_rate=args.near_dup_rate,
            seed=args.data_seed,
        )
        train, test = split_dataset(generate_corpus(cfg), args.train_fraction, args.split_seed)
    args.explicit.discard("beta")
    rows = run_compare(train, test, args, _ints(args.seeds))
    Path(args.out_csv).write_text(compare_csv(rows))
    run.wrote(args.out_csv)
    top1 = {m: float(np.mean([r["Top-1"] for r in rows if r["mode"] == m])) for m in ("clip_only", "selip")}
    run.extra = {"mean_top1": top1, "selip_at_least_clip": top1["selip"] >= top1["clip_only"]}
    sys.stdout.write(compare_csv(rows))


# -- parser ------------------------------------------------------------------


def _train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--mode", choices=("clip", "selip"), default="selip")
    p.add_argument("--alpha", type=float, default=1.0)
    p.add_argument("--beta", type=float, default=None)
    p.add_argument("--tau", type=float, default=0.07)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--iterations-per-epoch", type=int, default=250)
    p.add_argument("--preset", choices=("toy", "full"), default="toy")
    p.add_argument("--lr-image", type=float, default=None)
    p.add_argument("--lr-text", type=float, default=None)
    p.add_argument("--warmup", type=int, default=None)
    p.add_argument("--e-max", type=int, default=None)
    p.add_argument("--d-proj", type=int, default=32)
    p.add_argument("--ckpt-every", type=int, default=0)
    p.add_argument("--train-fraction", type=float, default=0.7)
    p.add_argument("--split-seed", type=int, default=17)


COMMANDS: dict[str, tuple[Callable, str]] = {
    "gen-data": (cmd_gen_data, "generate a synthetic paired corpus"),
    "gen-reports": (cmd_gen_reports, "generate styled pseudo reports with gold findings"),
    "parse-reports": (cmd_parse_reports, "parse pseudo reports back to findings"),
    "eval-extraction": (cmd_eval_extraction, "score parsed findings against gold"),
    "sim-matrix": (cmd_sim_matrix, "soft target matrix for a batch of descriptions"),
    "loss-eval": (cmd_loss_eval, "evaluate the loss breakdown on stored embeddings"),
    "grad-check": (cmd_grad_check, "finite-difference check of loss gradients"),
    "train": (cmd_train, "train the toy encoders"),
    "eval-retrieval": (cmd_eval_retrieval, "image-to-text Top-K retrieval from a checkpoint"),
    "compare": (cmd_compare, "matched-seed CLIP vs soft-target comparison"),
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError("argv", message)


def build_parser() -> tuple[argparse.ArgumentParser, dict[str, argparse.ArgumentParser]]:
    parser = _Parser(prog="mrclip", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    subs = {}
    for name, (fn, help_) in COMMANDS.items():
        p = sub.add_parser(name, help=help_)
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--config", default=None, help="flat key = value file; flags override")
        p.add_argument("--manifest", default=None, help="manifest path (default: next to the first output)")
        p.set_defaults(func=fn)
        subs[name] = p

    p = subs["gen-data"]
    p.add_argument("--subjects", type=int, default=2000)
    p.add_argument("--noise-sigma", type=float, default=0.1)
    p.add_argument("--near-dup-rate", type=float, default=0.3)
    p.add_argument("--normal-rate", type=float, default=0.2)
    p.add_argument("--n-sites", type=int, default=12)
    p.add_argument("--n-appearances", type=int, default=8)
    p.add_argument("--max-findings", type=int, default=3)
    p.add_argument("--feature-dim", type=int, default=64)
    p.add_argument("--out", required=True)

    p = subs["gen-reports"]
    p.add_argument("--n", type=int, default=1000)
    p.add_argument("--min-findings", type=int, default=0)
    p.add_argument("--max-findings", type=int, default=4)
    p.add_argument("--n-sites", type=int, default=12)
    p.add_argument("--n-appearances", type=int, default=8)
    p.add_argument("--vocab", default=None)
    p.add_argument("--out", required=True)

    p = subs["parse-reports"]
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--n-sites", type=int, default=12)
    p.add_argument("--n-appearances", type=int, default=8)
    p.add_argument("--vocab", default=None)
    p.add_argument("--out", required=True)

    p = subs["eval-extraction"]
    p.add_argument("--pred", required=True)
    p.add_argument("--gold", required=True)
    p.add_argument("--out", required=True)

    p = subs["sim-matrix"]
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--tokenizer", choices=("word", "character"), default="word")
    p.add_argument("--out", required=True)
    p.add_argument("--csv", default=None)

    p = subs["loss-eval"]
    p.add_argument("--embeddings", required=True)
    p.add_argument("--S", default=None)
    p.add_argument("--tau", type=float, default=0.07)
    p.add_argument("--alpha", type=float, default=1.0)
    p.add_argument("--beta", type=float, default=1.0)
    p.add_argument("--eps", type=float, default=1e-6)
    p.add_argument("--out", required=True)

    p = subs["grad-check"]
    p.add_argument("--configs", type=int, default=20)
    p.add_argument("--h", type=float, default=1e-5)
    p.add_argument("--out", default=None)

    p = subs["train"]
    p.add_argument("--corpus", required=True)
    _train_flags(p)
    p.add_argument("--log-csv", default=None)
    p.add_argument("--ckpt-dir", default=None)
    p.add_argument("--resume", default=None)
    p.add_argument("--stop-at", type=int, default=None, help="stop after this iteration")

    p = subs["eval-retrieval"]
    p.add_argument("--corpus", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--ks", default="1,2,5,10")
    p.add_argument("--split", choices=("all", "train", "test"), default="test")
    p.add_argument("--train-fraction", type=float, default=0.7)
    p.add_argument("--split-seed", type=int, default=17)
    p.add_argument("--out-json", default=None)
    p.add_argument("--out-csv", default=None)

    p = subs["compare"]
    p.add_argument("--corpus", default=None)
    p.add_argument("--subjects", type=int, default=2000)
    p.add_argument("--noise-sigma", type=float, default=0.1)
    p.add_argument("--near-dup-rate", type=float, default=0.3)
    p.add_argument("--data-seed", type=int, default=17)
    p.add_argument("--seeds", default="1,2,3,4,5")
    _train_flags(p)
    p.add_argument("--out-csv", required=True)
    return parser, subs


def _read_config(path: str) -> dict[str, str]:
    values = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}", "expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        values[key] = value
    return values


def _apply_config(sub: argparse.ArgumentParser, values: dict[str, str]) -> set[str]:
    actions = {}
    for a in sub._actions:
        for opt in a.option_strings:
            if opt.startswith("--"):
                actions[opt[2:]] = a
                actions[opt[2:].replace("-", "_")] = a
    defaults = {}
    for key, raw in values.items():
        action = actions.get(key)
        if action is None or action.dest in ("config", "help"):
            raise ConfigError(key, "unknown configuration key")
        try:
            value = action.type(raw) if action.type else raw
        except (TypeError, ValueError) as exc:
            raise ConfigError(key, f"bad value {raw!r}: {exc}") from None
        if action.choices and value not in action.choices:
            raise ConfigError(key, f"{value!r} not in {list(action.choices)}")
        defaults[action.dest] = value
    sub.set_defaults(**defaults)
    return set(defaults)


def _explicit_dests(sub: argparse.ArgumentParser, argv: Sequence[str]) -> set[str]:
    dests = set()
    for a in sub._actions:
        for opt in a.option_strings:
            if any(tok == opt or tok.startswith(opt + "=") for tok in argv):
                dests.add(a.dest)
    return dests


def dispatch(argv: Sequence[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        if not argv or argv[0] in ("-h", "--help"):
            build_parser()[0].print_help()
            return 0 if argv else 2
        if argv[0] not in COMMANDS:
            raise UnknownCommand(f"unknown command {argv[0]!r}; expected one of {sorted(COMMANDS)}")
        parser, subs = build_parser()
        sub = subs[argv[0]]
        explicit = _explicit_dests(sub, argv[1:])
        if "--config" in argv or any(a.startswith("--config=") for a in argv):
            pre = argparse.ArgumentParser(add_help=False)
            pre.add_argument("--config")
            known, _ = pre.parse_known_args(argv[1:])
            if known.config:
                explicit |= _apply_config(sub, _read_config(known.config))
        args = parser.parse_args(argv)
        args.explicit = explicit
        run = Run(argv[0], args)
        try:
            args.func(args, run)
        finally:
            run.emit_manifest()
        return 0
    except CliError as exc:
        sys.stderr.write(json.dumps(exc.payload(), sort_keys=True) + "\n")
        return exc.exit_code
    except SystemExit as exc:
        return int(exc.code or 0)
    except Exception as exc:  # noqa: BLE001 - reported as machine-readable JSON
        sys.stderr.write(json.dumps({"error": type(exc).__name__, "message": str(exc)}, sort_keys=True) + "\n")
        return 1


def main() -> None:
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
