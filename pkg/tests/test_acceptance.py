"""End-to-end acceptance checks, one test per criterion.

Each test records a PASS/FAIL line that is printed in the terminal summary.
"""

import csv
import json
import math
import time
from collections import Counter

import acceptance_log
import numpy as np
import oracles
import pytest

from mrclip.cli import dispatch
from mrclip.losses import EmbeddingBatch, LossConfig, se_loss, soft_target, total_loss
from mrclip.numeric import ScheduleConfig, poly_lr, warmup_lr
from mrclip.report_codec import ParseFailure, all_styles, eval_extraction, generate_pseudo_report, parse_report
from mrclip.report_model import default_vocabulary, render_description
from mrclip.retrieval import topk_accuracy
from mrclip.similarity import batch_similarity_matrix
from mrclip.synth import random_finding


def _cli(*argv):
    return dispatch([str(a) for a in argv])


def test_criterion_1_gradient_check(tmp_path):
    out = tmp_path / "grad.json"
    start = time.perf_counter()
    code = _cli("grad-check", "--seed", 7, "--configs", 20, "--h", 1e-5, "--out", out)
    elapsed = time.perf_counter() - start
    rep = json.loads(out.read_text())
    ok = code == 0 and len(rep["configs"]) == 20 and rep["max_rel_err"] < 1e-4 and elapsed < 60
    acceptance_log.record(1, ok, f"max rel err {rep['max_rel_err']:.2e} over 20 configs in {elapsed:.1f}s")
    assert ok


def test_criterion_2_similarity_oracle():
    vocab = default_vocabulary(12, 8)
    rng = np.random.default_rng(2024)
    start = time.perf_counter()
    mismatched = 0
    for _ in range(100):
        batch = [render_description([random_finding(vocab, rng) for _ in range(int(rng.integers(0, 4)))]) for _ in range(8)]
        if batch_similarity_matrix(batch).values.tolist() != oracles.similarity_matrix(batch):
            mismatched += 1
    elapsed = time.perf_counter() - start
    ok = mismatched == 0 and elapsed < 10
    acceptance_log.record(2, ok, f"{100 - mismatched}/100 batches bit-identical to brute force in {elapsed:.2f}s")
    assert ok


def test_criterion_3_loss_identities():
    rng = np.random.default_rng(3)
    # (a) constant embeddings at batch 64
    v = np.tile(rng.normal(size=(1, 16)), (64, 1))
    l_clip = total_loss(EmbeddingBatch(v, v), None, LossConfig(beta=0.0)).L_clip
    a = abs(l_clip - math.log(64))
    # (b) predictions equal to the smoothed soft target in both directions
    S = rng.uniform(size=(8, 8))
    S = (S + S.T) / 2
    np.fill_diagonal(S, 1.0)
    l_se = se_loss(soft_target(S), soft_target(S.T), S)[2]
    # (c) beta = 0
    batch = EmbeddingBatch(rng.normal(size=(8, 5)), rng.normal(size=(8, 5)))
    out = total_loss(batch, S, LossConfig(alpha=1.7, beta=0.0))
    c = out.L_total == 1.7 * out.L_clip
    ok = a < 1e-9 and l_se < 1e-9 and c
    acceptance_log.record(3, ok, f"|L_clip - ln 64| = {a:.1e}, L_se at target = {l_se:.1e}, beta=0 exact: {c}")
    assert ok


def test_criterion_4_extraction_round_trip():
    vocab = default_vocabulary(12, 8)
    styles = all_styles(range(10))
    rng = np.random.default_rng(4)
    gold, preds = [], []
    for i in range(1000):
        findings = [random_finding(vocab, rng) for _ in range(int(rng.integers(0, 5)))]
        text = generate_pseudo_report(findings, styles[i % len(styles)])
        try:
            preds.append(parse_report(text, vocab))
        except ParseFailure as exc:
            preds.append(exc)
        gold.append(findings)
    rep = eval_extraction(preds, gold)
    mismatches = [i for i, (p, g) in enumerate(zip(preds, gold)) if isinstance(p, Exception) or Counter(p) != Counter(g)]
    ok = rep.parse_success_rate >= 0.99 and rep.accuracy >= 0.95
    detail = (
        f"parse success {rep.parse_success_rate:.4f}, item accuracy {rep.accuracy:.4f} "
        f"over {len(gold)} reports and {len(styles)} styles; shortfall items: {mismatches[:10]}"
    )
    acceptance_log.record(4, ok, detail)
    assert ok


def test_criterion_5_schedules():
    cfg = ScheduleConfig(lr_init_image=1e-4, t_max_warmup=5000, e_max=100)
    checks = {
        "warmup_lr(5000) = 1e-4": warmup_lr(5000, cfg) == 1e-4,
        "warmup_lr(2500) = 5e-5": abs(warmup_lr(2500, cfg) - 5e-5) < 1e-20,
        "poly_lr(0) = 1e-4": poly_lr(0, cfg) == 1e-4,
        "poly_lr(100) = 0": poly_lr(100, cfg) == 0.0,
        "poly_lr(50)": abs(poly_lr(50, cfg) - 1e-4 * 0.5**0.9) < 1e-12,
    }
    ok = all(checks.values())
    acceptance_log.record(5, ok, ", ".join(k for k, v in checks.items() if not v) or "all five schedule values exact")
    assert ok


@pytest.fixture(scope="module")
def toy_corpus(tmp_path_factory):
    path = tmp_path_factory.mktemp("toy") / "corpus.jsonl"
    assert _cli("gen-data", "--subjects", 2000, "--seed", 17, "--noise-sigma", 0.1, "--near-dup-rate", 0.3, "--out", path) == 0
    return path


def test_criterion_6_toy_training(toy_corpus, tmp_path):
    start = time.perf_counter()
    code = _cli(
        "train", "--corpus", toy_corpus, "--seed", 17, "--mode", "selip", "--batch-size", 64, "--d-proj", 32,
        "--log-csv", tmp_path / "log.csv", "--ckpt-dir", tmp_path / "ckpt",
    )
    assert code == 0
    code = _cli("eval-retrieval", "--corpus", toy_corpus, "--ckpt", tmp_path / "ckpt" / "final.bin", "--out-json", tmp_path / "ret.json")
    elapsed = time.perf_counter() - start
    assert code == 0
    rows = list(csv.DictReader(open(tmp_path / "log.csv")))
    res = json.loads((tmp_path / "ret.json").read_text())
    top1 = res["top_k_accuracy"]["1"]
    chance = 1.0 / res["n_candidates"]
    final_clip = float(rows[-1]["L_clip"])
    ok = len(rows) == 2000 and top1 >= 10 * chance and elapsed < 600 and final_clip < 0.5 * math.log(64)
    acceptance_log.record(
        6,
        ok,
        f"held-out Top-1 {top1:.4f} vs chance {chance:.5f} ({top1 / chance:.0f}x) with {res['n_candidates']} candidates, "
        f"{len(rows)} iterations, final L_clip {final_clip:.3f} (half of ln 64 is {0.5 * math.log(64):.3f}), {elapsed:.0f}s",
    )
    assert ok


def test_criterion_7_selip_vs_clip(toy_corpus, tmp_path, capsys):
    out = tmp_path / "compare.csv"
    code = _cli("compare", "--corpus", toy_corpus, "--seeds", "1,2,3,4,5", "--out-csv", out)
    assert code == 0
    table = out.read_text()
    with capsys.disabled():
        print("\n" + table)
    means = {r["mode"]: float(r["Top-1"]) for r in csv.DictReader(table.splitlines()) if r["seed"] == "mean"}
    ok = means["selip"] >= means["clip_only"]
    acceptance_log.record(7, ok, f"mean Top-1 selip {means['selip']:.4f} vs clip_only {means['clip_only']:.4f} over 5 seeds")
    assert ok


def test_criterion_8_retrieval_oracle():
    rng = np.random.default_rng(8)
    exact = 0
    for _ in range(50):
        n_img = int(rng.integers(1, 65))
        n_cand = int(rng.integers(1, 129))
        d = int(rng.integers(2, 9))
        img = rng.normal(size=(n_img, d))
        cand = rng.normal(size=(n_cand, d))
        gold = rng.integers(0, n_cand, n_img).tolist()
        ks = sorted({1, n_cand, min(5, n_cand)})
        res = topk_accuracy(img, cand, gold, ks)
        ranks = oracles.retrieval_ranks(img, cand, gold)
        expected = {k: sum(r <= k for r in ranks) / n_img for k in ks}
        exact += res.ranks == ranks and res.top_k_accuracy == expected

    n_img, c, seeds = 64, 128, 50
    hits = {1: 0.0, 10: 0.0}
    for seed in range(seeds):
        r = np.random.default_rng(1000 + seed)
        res = topk_accuracy(r.normal(size=(n_img, 8)), r.normal(size=(c, 8)), r.integers(0, c, n_img).tolist(), ks=(1, 10))
        for k in hits:
            hits[k] += res.top_k_accuracy[k] * n_img
    total = n_img * seeds
    z = {k: (hits[k] / total - k / c) / math.sqrt((k / c) * (1 - k / c) / total) for k in hits}
    ok = exact == 50 and all(abs(v) < 3 for v in z.values())
    acceptance_log.record(8, ok, f"{exact}/50 instances match exhaustive sort; chance z-scores {z[1]:+.2f} (K=1), {z[10]:+.2f} (K=10)")
    assert ok


def test_criterion_9_determinism_and_resume(toy_corpus, tmp_path):
    flags = ["--corpus", toy_corpus, "--seed", 9, "--batch-size", 32, "--iterations-per-epoch", 20, "--epochs", 3, "--ckpt-every", 20]
    for name in ("a", "b"):
        assert _cli("train", *flags, "--log-csv", tmp_path / f"{name}.csv", "--ckpt-dir", tmp_path / name) == 0
    same_log = (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    ckpts = sorted(p.name for p in (tmp_path / "a").glob("*.bin"))
    same_ckpt = all((tmp_path / "a" / n).read_bytes() == (tmp_path / "b" / n).read_bytes() for n in ckpts)

    assert _cli("train", *flags, "--ckpt-dir", tmp_path / "part", "--stop-at", 25) == 0
    assert _cli("train", *flags, "--log-csv", tmp_path / "r.csv", "--ckpt-dir", tmp_path / "r", "--resume", tmp_path / "part" / "final.bin") == 0
    resumed = (tmp_path / "r.csv").read_bytes() == (tmp_path / "a.csv").read_bytes() and (
        (tmp_path / "r" / "final.bin").read_bytes() == (tmp_path / "a" / "final.bin").read_bytes()
    )
    ok = same_log and same_ckpt and resumed and len(ckpts) == 4
    acceptance_log.record(
        9, ok, f"log identical: {same_log}, {len(ckpts)} checkpoints identical: {same_ckpt}, resume from iteration 25 bit-exact: {resumed}"
    )
    assert ok
