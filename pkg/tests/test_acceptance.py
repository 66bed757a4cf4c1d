"""Acceptance gate: one test per primary criterion, one PASS/FAIL line each.

Run the whole gate with ``pytest tests/test_acceptance.py -v`` or directly
with ``python tests/test_acceptance.py``.  The three trend criteria share one
set of training runs on the default dataset (about an hour on one core).
Set ``LAIL_ACCEPT_SEEDS`` to change the seed list (at least three).
"""

import math
import os
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest
from scipy.special import log_softmax

from lail import tensor as T
from lail.config import ExperimentConfig
from lail.connector import ConnectorStack, LAILConfig, lail_loss, build_connectors, total_loss
from lail.ctc import collapse, ctc_brute_force, ctc_loss, greedy_decode, label_posteriors, prefix_beam_search
from lail.data import generate_dataset
from lail.encoder import ConformerLayer, EncoderConfig
from lail.gradcheck import gradcheck, numeric_grad, rel_error
from lail.lm import CausalLM, CausalLMConfig, Tokenizer, clm_loss
from lail.nn import RngState
from lail.tensor import Tensor
from lail.train import (REFERENCE_PLACEMENTS, AblationCell, evaluate_wer, metrics_jsonl, scale_placement,
                        train_asr)

SEEDS = tuple(int(s) for s in os.environ.get("LAIL_ACCEPT_SEEDS", "0,1,2").split(","))
SPLITS = ("test_clean", "test_other")
E2E_BUDGET_S = 30 * 60
VERDICTS: list[str] = []


def verdict(name, ok, detail):
    line = f"{'PASS' if ok else 'FAIL'}  {name}: {detail}"
    VERDICTS.append(line)
    assert ok, line


# -- property criteria ---------------------------------------------------------


def test_ctc_oracle_equivalence():
    rng = np.random.default_rng(100)
    t0 = time.perf_counter()
    worst, n = 0.0, 0
    for _ in range(200):
        Tn, V, N = int(rng.integers(1, 7)), int(rng.integers(1, 5)), int(rng.integers(0, 4))
        logp = log_softmax(rng.normal(size=(Tn, V + 1)) * 2, axis=-1)
        y = rng.integers(1, V + 1, size=N).tolist()
        ref, got = ctc_brute_force(logp, y), ctc_loss(logp, y).loss
        if ref == -np.inf:
            ok = got == np.inf
            worst = max(worst, 0.0 if ok else np.inf)
        else:
            worst = max(worst, abs(got + ref))
        n += 1
    dt = time.perf_counter() - t0
    verdict("CTC oracle equivalence", worst < 1e-10 and dt < 10,
            f"{n} instances, max |loss + log p_brute| = {worst:.2e} (< 1e-10), {dt:.2f}s (< 10s)")


def test_ctc_gradient():
    rng = np.random.default_rng(101)
    worst, n = 0.0, 0
    while n < 50:
        Tn, V, N = int(rng.integers(1, 7)), int(rng.integers(1, 5)), int(rng.integers(0, 4))
        logp = log_softmax(rng.normal(size=(Tn, V + 1)), axis=-1)
        y = rng.integers(1, V + 1, size=N).tolist()
        res = ctc_loss(logp, y)
        if not np.isfinite(res.loss):
            continue
        num = numeric_grad(lambda: ctc_loss(logp, y).loss, logp, h=1e-6)
        worst = max(worst, rel_error(res.grad_logp, num))
        n += 1
    verdict("CTC gradient", worst < 1e-5, f"{n} instances, worst rel err {worst:.2e} (< 1e-5)")


def _per_op_cases(rng):
    def r(*s):
        return Tensor(rng.normal(size=s), requires_grad=True)

    pos = Tensor(rng.uniform(0.5, 2.0, size=(3, 4)), requires_grad=True)
    a, b, v = r(3, 4), r(3, 4), r(4)
    m1, m2 = r(3, 5), r(5, 4)
    bm, bw = r(2, 3, 5), r(5, 4)
    x3 = r(2, 6, 4)
    k_full, k_dw, bias = r(3, 4, 5), r(3, 4), r(5)
    g, beta = r(4), r(4)
    table = r(5, 4)
    idx = np.array([[0, 3, 3], [1, 4, 0]])
    mask = rng.random((3, 4)) > 0.4
    return {
        "add": (lambda: T.add(a, v), [a, v]),
        "sub": (lambda: T.sub(a, b), [a, b]),
        "mul": (lambda: T.mul(a, v), [a, v]),
        "div": (lambda: T.div(a, pos), [a, pos]),
        "exp": (lambda: T.exp(a), [a]),
        "log": (lambda: T.log(pos), [pos]),
        "sqrt": (lambda: T.sqrt(pos), [pos]),
        "sigmoid": (lambda: T.sigmoid(a), [a]),
        "swish": (lambda: T.swish(a), [a]),
        "tanh": (lambda: T.tanh(a), [a]),
        "glu": (lambda: T.glu(a), [a]),
        "where": (lambda: T.where(mask, a, -1.0), [a]),
        "sum": (lambda: T.tsum(a, axis=0, keepdims=True), [a]),
        "mean": (lambda: T.mean(a, axis=1), [a]),
        "reshape": (lambda: T.reshape(a, (2, 6)), [a]),
        "transpose": (lambda: T.transpose(x3, (2, 0, 1)), [x3]),
        "swapaxes": (lambda: T.swapaxes(x3, 1, 2), [x3]),
        "getitem": (lambda: a[1:, ::2], [a]),
        "take_rows": (lambda: T.take_rows(table, idx), [table]),
        "concat": (lambda: T.concat([a, b], axis=1), [a, b]),
        "matmul": (lambda: T.matmul(m1, m2), [m1, m2]),
        "matmul_batched": (lambda: T.matmul(bm, bw), [bm, bw]),
        "softmax": (lambda: T.softmax(a), [a]),
        "log_softmax": (lambda: T.log_softmax(a), [a]),
        "layer_norm": (lambda: T.layer_norm(x3, g, beta), [x3, g, beta]),
        "conv1d": (lambda: T.conv1d(x3, k_full, bias), [x3, k_full, bias]),
        "conv1d_stride2": (lambda: T.conv1d(x3, k_full, bias, stride=2), [x3, k_full, bias]),
        "conv1d_depthwise": (lambda: T.conv1d(x3, k_dw, depthwise=True), [x3, k_dw]),
    }


def test_autodiff_suite():
    rng = np.random.default_rng(102)
    per_op = {}
    for name, (f, inputs) in _per_op_cases(rng).items():
        w = rng.normal(size=f().shape)
        per_op[name] = gradcheck(lambda: (f() * w).sum(), inputs)
    worst_op = max(per_op, key=per_op.get)
    x = Tensor(rng.normal(size=(2, 6, 8)), requires_grad=True)
    valid = np.arange(6)[None, :] < np.array([6, 4])[:, None]
    comp = {}
    for scheme in ("rotary", "sinusoidal"):
        layer = ConformerLayer(EncoderConfig(d_model=8, num_heads=2, ffn_dim=16, conv_kernel=3, d_feat=4,
                                             positional_scheme=scheme), RngState(3))
        w = rng.normal(size=x.shape)
        comp[scheme] = gradcheck(lambda: (layer(x, valid) * w).sum(), [x] + layer.parameters())
    ok = per_op[worst_op] < 1e-5 and max(comp.values()) < 1e-4
    verdict("Autodiff suite", ok,
            f"{len(per_op)} ops, worst {worst_op} {per_op[worst_op]:.1e} (< 1e-5); conformer layer "
            + ", ".join(f"{k} {v:.1e}" for k, v in comp.items()) + " (< 1e-4)")


def test_conformer_structure():
    cfg = EncoderConfig(d_model=8, num_heads=2, ffn_dim=16, conv_kernel=3, d_feat=4)
    x = Tensor(np.random.default_rng(103).normal(size=(1, 7, 8)))

    def zeroed():
        layer = ConformerLayer(cfg, RngState(4))
        for lin in (layer.ffn1.w2, layer.mhsa.out, layer.conv.pw2, layer.ffn2.w2):
            lin.weight.data[...] = 0.0
            lin.bias.data[...] = 0.0
        return layer

    layer = zeroed()
    ln = T.layer_norm(x, Tensor(np.ones(8)), Tensor(np.zeros(8)))
    exact = np.array_equal(layer(x).data, ln.data)
    # with the other branches zero and the final norm removed, an FFN that
    # doubles its input must contribute exactly x + 0.5 * 2x = 2x
    halves = []
    for which in ("ffn1", "ffn2"):
        layer = zeroed()
        setattr(layer, which, lambda h: h * 2.0)
        layer.final_norm = lambda h: h
        halves.append(np.array_equal(layer(x).data, 2.0 * x.data))
    verdict("Conformer structural checks", exact and all(halves),
            f"zero sub-blocks == LayerNorm(x) exactly: {exact}; half-step FFN1/FFN2 exact: {halves}")


def test_lm_causality():
    tok = Tokenizer(" abcdefghiklmnoprstuwxy")
    cfg = CausalLMConfig(d_llm=16, num_layers=2, num_heads=2, context_cap=48)
    lm = CausalLM(cfg, tok.vocab_size, RngState(5))
    rng = np.random.default_rng(104)
    bad, checked = 0, 0
    for _ in range(100):
        n = int(rng.integers(2, 16))
        toks = rng.integers(1, tok.num_chars + 1, size=n).tolist()
        P = int(rng.integers(0, 5))
        prefix = Tensor(rng.normal(size=(P, cfg.d_llm))) if P else None
        base = lm(prefix, toks).data
        for j in range(n):
            changed = list(toks)
            changed[j] = changed[j] % tok.num_chars + 1
            # row t is the distribution for token t given tokens < t
            if not np.array_equal(base[:j + 1], lm(prefix, changed).data[:j + 1]):
                bad += 1
            checked += 1
    verdict("LM causality", bad == 0, f"100 cases, {checked} perturbed positions, {bad} logit changes")


def test_loss_arithmetic():
    rng = np.random.default_rng(105)
    d_llm = 12
    lm = CausalLM(CausalLMConfig(d_llm=d_llm, num_layers=1, num_heads=2, context_cap=64), 12, RngState(6))
    lm.freeze()
    worst_clm = 0.0
    for _ in range(20):
        prefix = Tensor(rng.normal(size=(int(rng.integers(0, 5)), d_llm)))
        y = rng.integers(1, 10, size=int(rng.integers(1, 8))).tolist()
        logits = lm(prefix, y).data
        manual = -log_softmax(logits, axis=-1)[np.arange(len(y)), y].sum()
        worst_clm = max(worst_clm, abs(clm_loss(lm, prefix, y).item() - manual))

    taps = {l: Tensor(rng.normal(size=(2, 9, 8))) for l in (1, 3)}
    stacks = build_connectors(8, d_llm, LAILConfig(tap_layers=(1, 3)), RngState(7))
    ys, lengths = [[1, 2, 3], [4, 5, 6, 7]], np.array([9, 6])
    lam = {1: 0.25, 3: 0.5}
    a, per = lail_loss(LAILConfig(tap_layers=(1, 3), lambdas=lam), taps, stacks, lm, ys, lengths)
    b, _ = lail_loss(LAILConfig(tap_layers=(1, 3), lambdas={l: 2 * v for l, v in lam.items()}), taps, stacks, lm,
                     ys, lengths)
    linear = abs(b.item() - 2 * a.item()) < 1e-12 and abs(a.item() - sum(lam[l] * per[l].item() for l in lam)) < 1e-12

    total_exact = all(total_loss(Tensor(c), Tensor(l), al).item() == c + al * l
                      for c, l, al in rng.uniform(0, 5, size=(50, 3)))

    data = generate_dataset(3, replace(ExperimentConfig().data, n_train=16, n_dev=2, n_test=2, n_lm=50))
    tok = Tokenizer(data.alphabet())
    enc = EncoderConfig(num_layers=2, d_model=16, num_heads=2, ffn_dim=32, conv_kernel=3)
    small_lm = CausalLM(CausalLMConfig(d_llm=16, num_layers=1, num_heads=2), tok.vocab_size, RngState(8))
    small_lm.freeze()
    base = dict(epochs=2, batch_size=8, lr=1e-3, warmup_steps=2, seed=11)
    m0, m1 = [], []
    r0 = train_asr(replace(ExperimentConfig().train, **base, lail=LAILConfig(tap_layers=(1, 2), alpha=0.0)),
                   data, tok, small_lm, enc, m0)
    r1 = train_asr(replace(ExperimentConfig().train, **base, lail=LAILConfig(tap_layers=(), alpha=0.0)),
                   data, tok, None, enc, m1)
    s0, s1 = r0.encoder.state_dict(), r1.encoder.state_dict()
    bit_identical = metrics_jsonl(m0) == metrics_jsonl(m1) and all(np.array_equal(s0[k], s1[k]) for k in s0)

    ok = worst_clm < 1e-12 and linear and total_exact and bit_identical
    verdict("Loss arithmetic", ok,
            f"clm vs manual {worst_clm:.1e} (< 1e-12); lail linear in lambda: {linear}; "
            f"total == ctc + alpha*lail exactly: {total_exact}; alpha=0 bit-identical to baseline: {bit_identical}")


def test_connector_length_law():
    x = np.random.default_rng(106).normal(size=(200, 8))
    bad = 0
    for k in range(6):
        stack = ConnectorStack(8, 12, k, RngState(k))
        for Tn in range(1, 201):
            z, zl = stack(Tensor(x[:Tn]))
            want = math.ceil(Tn / 2 ** k)
            bad += z.shape != (want, 12) or zl.tolist() != [want]
    verdict("Connector length law", bad == 0, f"T in 1..200, k in 0..5: {bad} mismatches of ceil(T/2^k) x d_llm")


def test_decoding_oracles():
    rng = np.random.default_rng(107)
    greedy_bad = sum(greedy_decode(lp) != collapse(lp.argmax(-1).tolist())
                     for lp in (log_softmax(rng.normal(size=(10, 5)) * 3, axis=-1) for _ in range(100)))
    beam_bad = 0
    for _ in range(10):
        lp = log_softmax(rng.normal(size=(4, 3)) * 1.5, axis=-1)
        post = label_posteriors(lp)
        got = tuple(prefix_beam_search(lp, beam=10 ** 4))
        beam_bad += abs(post[got] - max(post.values())) > 1e-12
    verdict("Decoding oracles", greedy_bad == 0 and beam_bad == 0,
            f"greedy != argmax+collapse in {greedy_bad}/100; exhaustive beam misses exact MAP in {beam_bad}/10")


def test_determinism(tmp_path):
    from lail.cli import main
    tiny = str(Path(__file__).parent / "data" / "tiny.cfg")
    lail_cfg = tmp_path / "lail.cfg"
    lail_cfg.write_text(Path(tiny).read_text().replace("alpha = 0.0", "alpha = 0.3"))
    files = ("dataset.bin", "lm_small.ckpt", "lm_small.metrics.jsonl", "run/metrics.jsonl", "run/asr.ckpt",
             "run/eval.jsonl", "hyp.txt", "abl/ablation.jsonl")
    for rep in ("a", "b"):
        d = tmp_path / rep
        cmds = [["gen-data", "--seed", "4", "--config", tiny, "--out-dir", d],
                ["train-lm", "--config", tiny, "--data", d / "dataset.bin", "--out-dir", d],
                ["train-asr", "--config", lail_cfg, "--data", d / "dataset.bin", "--lm", d / "lm_small.ckpt",
                 "--out-dir", d / "run"],
                ["eval", "--data", d / "dataset.bin", "--run", d / "run"],
                ["decode", "--data", d / "dataset.bin", "--run", d / "run", "--mode", "beam", "--beam", "4",
                 "--output", d / "hyp.txt"],
                ["ablate", "--config", tiny, "--data", d / "dataset.bin", "--lm-dir", d, "--seeds", "0",
                 "--groups", "alpha", "--out-dir", d / "abl"]]
        for c in cmds:
            assert main([str(x) for x in c]) == 0, c
    same = [f for f in files if (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()]
    verdict("Determinism", len(same) == len(files),
            f"{len(same)}/{len(files)} output files byte-identical across repeated commands")


# -- trend criteria --------------------------------------------------------------


def _wer(rows):
    """Per-split mean and sample std over seeds, plus the split-averaged mean."""
    out = {s: (float(np.mean([r[s] for r in rows])), float(np.std([r[s] for r in rows], ddof=1))) for s in SPLITS}
    avg = [np.mean([r[s] for s in SPLITS]) for r in rows]
    out["avg"] = (float(np.mean(avg)), float(np.std(avg, ddof=1)))
    return out


def _fmt(stats):
    return ", ".join(f"{k} {m:.2f}+-{s:.2f}" for k, (m, s) in stats.items())


@pytest.fixture(scope="module")
def trend_runs():
    """Train every run the three trend criteria need, once."""
    from lail.cli import pretrain_lm
    assert len(SEEDS) >= 3
    cfg = ExperimentConfig()
    data = generate_dataset(0, cfg.data)
    tok = Tokenizer(data.alphabet())
    full = scale_placement(REFERENCE_PLACEMENTS["4 heads"], desk_depth=cfg.encoder.num_layers)
    single = scale_placement(REFERENCE_PLACEMENTS["1 head"], desk_depth=cfg.encoder.num_layers)
    alpha = 0.3
    lms, lm_time = {}, {}

    def lm_for(tier):
        if tier not in lms:
            t0 = time.perf_counter()
            lms[tier] = pretrain_lm(data, tok, replace(cfg, lm=replace(cfg.lm, tier=tier)))
            lm_time[tier] = time.perf_counter() - t0
        return lms[tier]

    cells = {
        "baseline": AblationCell("baseline", replace(cfg.train, lail=LAILConfig(tap_layers=(), alpha=0.0)), None),
        "full": AblationCell("full", replace(cfg.train, lail=LAILConfig(tap_layers=full, alpha=alpha)), "large"),
        "single": AblationCell("single", replace(cfg.train, lail=LAILConfig(tap_layers=single, alpha=alpha)), "large"),
        "lm=small": AblationCell("lm=small", replace(cfg.train, lail=LAILConfig(tap_layers=full, alpha=alpha)), "small"),
        "lm=medium": AblationCell("lm=medium", replace(cfg.train, lail=LAILConfig(tap_layers=full, alpha=alpha)),
                                  "medium"),
    }
    results, seconds = {}, {}
    for name, cell in cells.items():
        lm = lm_for(cell.lm_tier) if cell.lm_tier else None
        results[name], seconds[name] = [], 0.0
        for seed in SEEDS:
            t0 = time.perf_counter()
            model = train_asr(replace(cell.train, seed=seed), data, tok, lm, cfg.encoder)
            results[name].append({s: evaluate_wer(model, data, s, tok).wer for s in SPLITS})
            seconds[name] += time.perf_counter() - t0
    return {"wer": results, "seconds": seconds, "lm_seconds": lm_time, "taps": {"full": full, "single": single}}


@pytest.mark.slow
def test_end_to_end_trend(trend_runs):
    base, lail = _wer(trend_runs["wer"]["baseline"]), _wer(trend_runs["wer"]["full"])
    gain = {s: base[s][0] - lail[s][0] for s in SPLITS}
    elapsed = trend_runs["seconds"]["baseline"] + trend_runs["seconds"]["full"] + trend_runs["lm_seconds"]["large"]
    ok_mean = lail["avg"][0] <= base["avg"][0]
    ok_other = gain["test_other"] >= gain["test_clean"]
    ok_time = elapsed < E2E_BUDGET_S
    verdict("End-to-end trend", ok_mean and ok_other and ok_time,
            f"seeds {list(SEEDS)}; baseline [{_fmt(base)}]; LAIL a=0.3 taps {trend_runs['taps']['full']} "
            f"[{_fmt(lail)}]; LAIL <= baseline: {ok_mean}; gain other {gain['test_other']:+.2f} >= "
            f"clean {gain['test_clean']:+.2f}: {ok_other}; {elapsed / 60:.1f} min (< 30): {ok_time}")


@pytest.mark.slow
def test_ablation_trend(trend_runs):
    full, single = _wer(trend_runs["wer"]["full"]), _wer(trend_runs["wer"]["single"])
    ok = single["avg"][0] >= full["avg"][0]
    verdict("Ablation trend", ok,
            f"single tap {trend_runs['taps']['single']} [{_fmt(single)}] >= full {trend_runs['taps']['full']} "
            f"[{_fmt(full)}]: {ok}")


@pytest.mark.slow
def test_lm_size_trend(trend_runs):
    w = {t: _wer(trend_runs["wer"]["full" if t == "large" else f"lm={t}"]) for t in ("small", "medium", "large")}
    m = {t: w[t]["avg"][0] for t in w}
    pooled = {(a, b): math.sqrt((w[a]["avg"][1] ** 2 + w[b]["avg"][1] ** 2) / 2)
              for a, b in (("small", "medium"), ("medium", "large"), ("small", "large"))}
    gate = m["large"] <= m["small"] + pooled[("small", "large")]
    medium_ok = (m["medium"] <= m["small"] + pooled[("small", "medium")]
                 and m["large"] <= m["medium"] + pooled[("medium", "large")])
    verdict("LM-size trend", gate,
            f"mean WER small {m['small']:.2f} / medium {m['medium']:.2f} / large {m['large']:.2f}; "
            f"gate large <= small + pooled std {pooled[('small', 'large')]:.2f}: {gate}; "
            f"medium within band (report only): {medium_ok}")


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-q"]))
