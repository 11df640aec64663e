"""Acceptance criteria; each test prints one PASS/FAIL line even when output is captured."""

import itertools
import math
import time

import numpy as np
import pytest

from pcmnet.captioner import Captioner, ModelConfig, as_constants, init_params
from pcmnet.cli import main, toy_gradient_check
from pcmnet.concept_vocab import ConceptVocabulary, detect_salient
from pcmnet.config import RunConfig
from pcmnet.decoding import beam_search, greedy
from pcmnet.metrics import EvalPair, bleu4, cider_d
from pcmnet.pcm import aggregate_textual_map, compute_affinity, mixup
from pcmnet.pipeline import VARIANTS, prepare_data, run_experiment
from pcmnet.tokenizer import BOS_ID, EOS_ID, PAD_ID
from pcmnet.training import Batch, clip_weight, cxe_loss, noam_lr


@pytest.fixture
def verdict(capsys):
    def report(n, what, ok, detail=""):
        with capsys.disabled():
            print(f"\n{'PASS' if ok else 'FAIL'} criterion {n}: {what}" + (f" [{detail}]" if detail else ""))
        assert ok, detail
    return report


def test_criterion_1_gradient_fidelity(verdict):
    t0 = time.perf_counter()
    report = toy_gradient_check(seed=0)
    elapsed = time.perf_counter() - t0
    ok = report.passed(1e-4) and elapsed < 60
    verdict(1, "tape gradients match central differences", ok,
            f"{len(report.probes)} scalars, max rel err {report.max_rel_error:.2e}, {elapsed:.1f}s")


def test_criterion_2_pcm_oracles(verdict):
    rng = np.random.default_rng(2024)
    salient_bad = select_bad = 0
    for _ in range(1000):
        n_c, d, k = rng.integers(2, 12), rng.integers(2, 8), None
        k = int(rng.integers(1, n_c + 1))
        emb = rng.normal(size=(n_c, d))
        if rng.random() < 0.2:
            emb[rng.integers(n_c)] = emb[0]  # force an exact tie
        vocab = ConceptVocabulary(tuple(f"c{i}" for i in range(n_c)), emb)
        g = rng.normal(size=d)
        cos = [float(e @ g / (np.linalg.norm(e) * np.linalg.norm(g))) for e in emb]
        # exhaustive: best-scoring K-subset, listed by score then index
        best = max(itertools.combinations(range(n_c), k), key=lambda s: (sum(cos[i] for i in s), [-i for i in s]))
        expected = sorted(best, key=lambda i: (-cos[i], i))
        got = detect_salient(g, vocab, k).ids.tolist()
        if got != expected and not np.allclose([cos[i] for i in got], [cos[i] for i in expected], atol=1e-12):
            salient_bad += 1

        n_p, m = int(rng.integers(1, 10)), None
        m = int(rng.integers(0, n_p + 1))
        patches, concepts = rng.normal(size=(n_p, d)), rng.normal(size=(k, d))
        aff = compute_affinity(patches, concepts)
        rel = [max(float(p @ c / (np.linalg.norm(p) * np.linalg.norm(c))) for c in concepts) for p in patches]
        brute = sorted(range(n_p), key=lambda j: (-rel[j], j))[:m]
        picked = mixup(patches, patches, aff, m, "train").indices.tolist()
        if picked != brute and not np.allclose([rel[j] for j in picked], [rel[j] for j in brute], atol=1e-12):
            select_bad += 1
    verdict(2, "salient top-K and mix-up selection match brute force", salient_bad + select_bad == 0,
            f"1000 instances, {salient_bad} salient and {select_bad} selection mismatches")


def test_criterion_3_affinity_normalisation(verdict):
    rng = np.random.default_rng(3)
    worst_sum = 0.0
    norm_violations = 0
    rows = 0
    while rows < 10_000:
        k, d, n = int(rng.integers(1, 9)), int(rng.integers(2, 10)), 100
        concepts = rng.normal(size=(k, d)) * rng.uniform(0.1, 10, size=(k, 1))
        aff = compute_affinity(rng.normal(size=(n, d)), concepts, float(rng.choice([0.01, 0.07, 1.0])))
        worst_sum = max(worst_sum, float(np.abs(aff.weights.sum(axis=1) - 1).max()))
        vt = aggregate_textual_map(aff, concepts)
        limit = np.linalg.norm(concepts, axis=1).max()
        norm_violations += int(np.sum(np.linalg.norm(vt, axis=1) > limit * (1 + 1e-12)))
        rows += n
    verdict(3, "affinity rows sum to one and textual rows stay within the concept norm bound",
            worst_sum <= 1e-9 and norm_violations == 0,
            f"{rows} rows, worst |sum-1| {worst_sum:.1e}, {norm_violations} norm violations")


def test_criterion_4_unit_weights_give_plain_cross_entropy(verdict):
    rng = np.random.default_rng(4)
    worst = 0.0
    for trial in range(10):
        cfg = ModelConfig(vocab_size=15, d_global=5, d_patch=6, d_model=8, n_heads=2, n_enc=1,
                          n_dec=1, max_visual_tokens=8, max_caption_len=10)
        model, params = Captioner(cfg), init_params(cfg, trial)
        b, t = 3, 6
        ids = rng.integers(4, 15, size=(b, t))
        ids[:, 0] = BOS_ID
        ids[0, 3], ids[0, 4:] = EOS_ID, PAD_ID
        ids[1:, -1] = EOS_ID
        batch = Batch(rng.normal(size=(b, 5)), rng.normal(size=(b, 4, 6)), None, None, ids, np.ones(b))
        P = as_constants(params)
        loss = cxe_loss(model, P, batch).value
        # oracle: log-softmax of the raw logits in plain numpy
        memory = model.encode_images(P, batch.globals_, batch.patches).memory
        logits = model.decode_full(P, ids[:, :-1], memory).value
        shifted = logits - logits.max(axis=-1, keepdims=True)
        logp = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
        nll = 0.0
        for i in range(b):
            for j in range(t - 1):
                if ids[i, j + 1] != PAD_ID:
                    nll -= logp[i, j, ids[i, j + 1]]
        worst = max(worst, abs(float(loss) - nll / b))
    verdict(4, "CXE with unit weights equals unweighted cross-entropy", worst <= 1e-12,
            f"max abs diff {worst:.1e}")


def test_criterion_5_clip_weight_values(verdict):
    a = np.array([1.0, 0.0])
    b = np.array([0.1, math.sqrt(0.99)])
    exact = clip_weight(a, b, 4.0) == 0.4
    rng = np.random.default_rng(5)
    saturated = True
    for cos in np.concatenate([[0.25], rng.uniform(0.25, 1.0, 500)]):
        v = np.array([cos, math.sqrt(1 - cos * cos)])
        saturated &= clip_weight(a, v, 4.0) == 1.0
    verdict(5, "clip weight is 0.4 at cos 0.1 and saturates for cos >= 0.25 with w=4",
            exact and bool(saturated), f"c(0.1)={clip_weight(a, b, 4.0)!r}")


def test_criterion_6_causality_and_beam_reductions(verdict):
    problems = []
    for seed in range(5):
        cfg = ModelConfig(vocab_size=12, d_global=5, d_patch=6, d_model=8, n_heads=2, n_enc=1,
                          n_dec=2, max_visual_tokens=8, max_caption_len=10)
        model, params = Captioner(cfg), init_params(cfg, seed)
        params["head.w"] *= 6.0
        P = as_constants(params)
        r = np.random.default_rng(seed)
        mem = model.encode_images(P, r.normal(size=5), r.normal(size=(4, 6))).memory
        ids = np.concatenate([[BOS_ID], r.integers(4, 12, size=6)])[None]
        base = model.decode_full(P, ids, mem).value
        for t in range(1, 7):
            alt = ids.copy()
            alt[0, t:] = r.integers(4, 12, size=7 - t)
            if not np.array_equal(model.decode_full(P, alt, mem).value[0, :t], base[0, :t]):
                problems.append(f"seed {seed}: prefix {t} changed")
        g, b = greedy(model, P, mem, 8), beam_search(model, P, mem, 1, 8)
        if (g.tokens, g.score, g.truncated) != (b.tokens, b.score, b.truncated):
            problems.append(f"seed {seed}: beam 1 != greedy")

        # two real words (ids 4 and 5) besides the specials
        small = ModelConfig(vocab_size=6, d_global=5, d_patch=6, d_model=8, n_heads=2, n_enc=1,
                            n_dec=1, max_visual_tokens=8, max_caption_len=10)
        sm, sp = Captioner(small), init_params(small, seed)
        sp["head.w"] *= 6.0
        SP = as_constants(sp)
        smem = sm.encode_images(SP, r.normal(size=5), r.normal(size=(4, 6))).memory
        content = [t for t in range(6) if t not in (BOS_ID, EOS_ID, PAD_ID)]
        best = None
        for n in range(1, 3):
            for body in itertools.product(content, repeat=n):
                seq = np.array([[BOS_ID, *body, EOS_ID]])
                score = float(sm.token_logprobs(SP, smem, seq).value.sum())
                key = (-score, n, body)
                best = key if best is None or key < best else best
        res = beam_search(sm, SP, smem, beam_size=6 ** 3, max_len=3)
        if res.tokens != list(best[2]) + [EOS_ID] or abs(res.score + best[0]) > 1e-9:
            problems.append(f"seed {seed}: full beam {res.tokens} vs exhaustive {best[2]}")
    verdict(6, "decoder is causal, beam 1 is greedy, full-width beam is exhaustive",
            not problems, "; ".join(problems) or "5 seeds")


def test_criterion_7_ablation_direction(verdict):
    base_cfg = RunConfig()
    assert (base_cfg.n_train, base_cfg.n_val, base_cfg.p_defect, base_cfg.epochs) == (500, 100, 0.3, 30)
    t0 = time.perf_counter()
    table = {}
    wanted = {"Base", "Base+Mix-up", "Base+Mix-up+CXE"}
    for seed in range(4):
        for name, mix, cxe in VARIANTS:
            if name not in wanted:
                continue
            cfg = base_cfg.replace(seed=seed, use_mixup=mix, use_cxe=cxe, eval_every=base_cfg.epochs)
            last = run_experiment(cfg, data=prepare_data(cfg)).history[-1]
            table[seed, name] = last.bleu4
    elapsed = time.perf_counter() - t0
    full_wins = sum(table[s, "Base+Mix-up+CXE"] > table[s, "Base"] for s in range(4))
    mix_ok = sum(table[s, "Base+Mix-up"] >= table[s, "Base"] for s in range(4))
    detail = "; ".join(f"seed {s}: " + " ".join(f"{table[s, n]:.4f}" for n in
                       ("Base", "Base+Mix-up", "Base+Mix-up+CXE")) for s in range(4))
    ok = full_wins >= 3 and mix_ok >= 3 and elapsed < 600
    verdict(7, "full > Base and Mix-up >= Base in val BLEU-4 on at least 3 of 4 seeds", ok,
            f"full wins {full_wins}/4, mix-up holds {mix_ok}/4, {elapsed:.0f}s; {detail}")


def test_criterion_8_determinism(verdict, tmp_path):
    small = ["n_train=200", "n_val=20", "epochs=3"]
    outputs = []
    for run in ("a", "b"):
        d = tmp_path / run
        assert main(["gen-data", "--out", str(d / "data"), "--seed", "11", *small]) == 0
        assert main(["build-vocab", "--data", str(d / "data"), "--out", str(d / "vocab")]) == 0
        assert main(["train", "--data", str(d / "data"), "--vocab", str(d / "vocab"),
                     "--out", str(d / "run")]) == 0
        outputs.append(((d / "run" / "checkpoint.pcmc").read_bytes(),
                        (d / "run" / "metrics.tsv").read_bytes()))
    same = outputs[0] == outputs[1]
    verdict(8, "identical config and seed give byte-identical checkpoint and metrics", same,
            f"checkpoint {len(outputs[0][0])} bytes")


def test_criterion_9_schedule(verdict):
    warmup = 10000
    lrs = np.array([noam_lr(s, 512, warmup) for s in range(1, 3 * warmup)])
    peak = int(np.argmax(lrs)) + 1
    value = noam_lr(100, 512, warmup)
    ok = peak == warmup and abs(value - 4.4194e-6) <= 1e-9
    verdict(9, "noam schedule peaks at warmup and matches the reference value", ok,
            f"peak step {peak}, lr(100) = {value:.6e}")


def test_criterion_10_metric_sanity(verdict):
    refs = ["a dog runs on the grass", "two cats sit near a red ball", "a man holds a tree branch"]
    identity = [EvalPair.from_text(str(i), r, [r]) for i, r in enumerate(refs)]
    disjoint = [EvalPair.from_text(str(i), "zebra xylophone", [r]) for i, r in enumerate(refs)]
    multi = [("0", "a dog on the grass", ["a dog runs on the grass", "the dog on grass", "a brown dog"]),
             ("1", "two cats near a ball", ["two cats sit near a red ball", "cats near the ball"]),
             ("2", "a man with a branch", ["a man holds a tree branch", "the man and a branch"])]
    forward = [EvalPair.from_text(i, h, r) for i, h, r in multi]
    backward = [EvalPair.from_text(i, h, r[::-1]) for i, h, r in multi]
    checks = {
        "identity bleu": bleu4(identity) == 1.0,
        "zero overlap": bleu4(disjoint) == 0.0 and cider_d(disjoint) == 0.0,
        "permutation": bleu4(forward) == pytest.approx(bleu4(backward), abs=1e-12)
        and cider_d(forward) == pytest.approx(cider_d(backward), abs=1e-12),
    }
    verdict(10, "BLEU-4/CIDEr-D identity, zero overlap and reference permutation", all(checks.values()),
            ", ".join(k for k, v in checks.items() if not v) or "all checks")
