"""Acceptance criteria, each checked at its stated tolerance.

Every test records one PASS/FAIL line (printed in the terminal summary by
conftest.py). The end-to-end criteria share cached per-seed runs on the default
synthetic world: GNN, pretrained frozen LM, adapters per ablation variant, and
greedy generations over the test split.
"""
import functools
import math
import time

import numpy as np

from xrec.adapter import make_fixed_inputs
from xrec.datagen import WorldConfig, generate_world, train_graph
from xrec.emissions import DISCREPANCY_NOTE, EmissionsParams, emissions_estimate
from xrec.evaluation import (MetricRow, aggregate, detect_numeric_anomaly, embed_sim_score, likelihood_score,
                             lm_embedder, render_report, stub_judge, usr)
from xrec.graph import GnnConfig, InteractionGraph, k_core_filter, train_gnn
from xrec.lm import ToyLmConfig
from xrec.pipeline import (VARIANTS, AblationFlags, EarlyStopState, TrainConfig, adapted_vectors, early_stop_update,
                           generate_explanations, make_adapters, pretrain_explainer_lm, train_adapter)

from acceptance_log import record
from gradcases import ALL_CASES, worst_error
from test_graph import brute_auc, peel_oracle, random_graph
from test_evaluation import EXAMPLES
from test_lm import constant_logit_lm

SEEDS = (0, 1, 2, 3, 4)
# Adapter learning rate for the end-to-end runs. The library default (1e-4)
# barely moves the adapters within one pass over a desk-scale world.
ADAPTER_LR = 1e-2


# ---------------------------------------------------------------------------
# shared end-to-end runs
# ---------------------------------------------------------------------------

@functools.lru_cache(maxsize=None)
def base(seed):
    t0 = time.perf_counter()
    world = generate_world(WorldConfig(seed=seed))
    graph = train_graph(world.samples, len(world.profiles.users), len(world.profiles.items))
    t_gnn = time.perf_counter()
    emb = train_gnn(graph, GnnConfig(seed=seed))
    gnn_seconds = time.perf_counter() - t_gnn
    lm = pretrain_explainer_lm(world.split("train"), world.profiles, emb, ToyLmConfig(seed=seed))
    return {"world": world, "graph": graph, "emb": emb, "lm": lm, "gnn_seconds": gnn_seconds,
            "seconds": time.perf_counter() - t0}


@functools.lru_cache(maxsize=None)
def variant(seed, name):
    b = base(seed)
    world, emb, lm = b["world"], b["emb"], b["lm"]
    t0 = time.perf_counter()
    flags = VARIANTS[name]
    adapters = make_adapters(emb.dim, lm.config.d_lm, seed=seed)
    fixed = make_fixed_inputs(emb.dim, seed) if flags.fixed_moe_inputs else None
    result = train_adapter(lm, adapters, emb, world.split("train"), world.profiles,
                           TrainConfig(learning_rate=ADAPTER_LR, seed=seed), flags, fixed_inputs=fixed)
    gens = generate_explanations(lm, result.adapters, emb, world.split("test"), world.profiles, flags,
                                 fixed_inputs=fixed)
    scores = [stub_judge(g.text, g.sample.explanation) for g in gens if g.ok]
    return {"result": result, "gens": gens, "fixed": fixed, "mean": float(np.mean(scores)),
            "failed": sum(not g.ok for g in gens), "seconds": time.perf_counter() - t0}


def seed_seconds(seed, names=("full", "wo-injection", "wo-embeddings")):
    return base(seed)["seconds"] + sum(variant(seed, n)["seconds"] for n in names)


# ---------------------------------------------------------------------------
# criteria
# ---------------------------------------------------------------------------

def test_c01_gradient_suite():
    t0 = time.perf_counter()
    errors = {name: worst_error(name, repetitions=10, epsilon=1e-3) for name in ALL_CASES}
    seconds = time.perf_counter() - t0
    worst = max(errors, key=errors.get)
    ok = errors[worst] <= 1e-4 and seconds < 10
    record(1, ok, f"{len(errors)} cases, worst {worst} rel err {errors[worst]:.2e}, {seconds:.1f}s")
    assert ok


def test_c02_frozen_lm_digest():
    b = base(0)
    lm, world, emb = b["lm"], b["world"], b["emb"]
    before = lm.digest()
    combos = [AblationFlags(p, i, e, f) for p in (True, False) for i in (True, False)
              for e in (True, False) for f in (True, False)]
    changed = []
    for flags in combos:
        train_adapter(lm, make_adapters(emb.dim, lm.config.d_lm), emb, world.split("train")[:25], world.profiles,
                      TrainConfig(learning_rate=ADAPTER_LR), flags)
        if lm.digest() != before or lm.frozen_digest != before:
            changed.append(flags)
    ok = not changed
    record(2, ok, f"digest unchanged across {len(combos) - len(changed)}/{len(combos)} flag combinations")
    assert ok


def test_c03_usr():
    texts = [g.text for g in variant(0, "full")["gens"] if g.ok]
    full_usr = usr(texts)
    rng = np.random.default_rng(0)
    mismatches = 0
    for _ in range(1000):
        pool = [" a", "a", "b ", "c", "dd", "e f", ""]
        lst = [pool[k] for k in rng.integers(len(pool), size=int(rng.integers(1, 30)))]
        seen = []
        for s in lst:
            if s.strip() not in seen:
                seen.append(s.strip())
        mismatches += usr(lst) != len(seen) / len(lst)
    ok = full_usr >= 0.99 and mismatches == 0
    record(3, ok, f"full-pipeline USR {full_usr:.4f} on {len(texts)} test generations; "
                  f"oracle mismatches {mismatches}/1000")
    assert ok


def test_c04_ablation_ordering():
    lines, wins, slow = [], 0, []
    for seed in SEEDS:
        m = {n: variant(seed, n)["mean"] for n in ("full", "wo-injection", "wo-embeddings")}
        good = m["full"] > m["wo-injection"] > m["wo-embeddings"]
        wins += good
        secs = seed_seconds(seed)
        if secs >= 600:
            slow.append(seed)
        lines.append(f"s{seed}:{m['full']:.2f}>{m['wo-injection']:.2f}>{m['wo-embeddings']:.2f}"
                     f"{'' if good else '(x)'} {secs:.0f}s")
    ok = wins >= 4 and not slow
    record(4, ok, f"ordering holds in {wins}/5 seeds; " + "; ".join(lines))
    assert ok


def test_c05_profile_ablation():
    wins, lines = 0, []
    for seed in SEEDS:
        full, wo = variant(seed, "full")["mean"], variant(seed, "wo-profiles")["mean"]
        wins += full >= wo
        lines.append(f"s{seed}:{full:.2f} vs {wo:.2f}")
    ok = wins >= 3
    record(5, ok, f"full >= w/o-profiles in {wins}/5 seeds; " + "; ".join(lines))
    assert ok


def test_c06_fixed_moe():
    b = base(0)
    run = variant(0, "fixed-moe")
    flags = VARIANTS["fixed-moe"]
    vecs = [adapted_vectors(b["lm"], run["result"].adapters, b["emb"], s, flags, run["fixed"])
            for s in b["world"].split("test")]
    identical = all(np.array_equal(vecs[0][0], u) and np.array_equal(vecs[0][1], i) for u, i in vecs)
    atl = [t[2] for t in run["result"].trace]
    n = len(atl)
    tail = math.ceil(n / 10)
    change = abs(atl[-1] - atl[-1 - tail]) / abs(atl[-1 - tail])
    # block means over the last two N/10 stretches, reported for context only
    block = abs(np.mean(atl[-tail:]) - np.mean(atl[-2 * tail:-tail])) / np.mean(atl[-2 * tail:-tail])
    ok = identical and change < 0.01
    record(6, ok, f"adapted vectors identical across {len(vecs)} test samples: {identical}; "
                  f"ATL relative change over final {tail} samples {change:.4f} "
                  f"(block-mean change {block:.4f})")
    assert ok


def test_c07_gnn_quality():
    b = base(0)
    world, emb = b["world"], b["emb"]
    held = [(s.uid, s.iid) for s in world.split("test")]
    auc = brute_auc(emb, held, b["graph"])
    ok = auc > 0.8 and b["gnn_seconds"] < 60
    record(7, ok, f"held-out ranking AUC {auc:.4f}, train_gnn {b['gnn_seconds']:.1f}s")
    assert ok


def test_c08_kcore():
    rng = np.random.default_rng(2024)
    mismatches = 0
    for _ in range(100):
        nu, ni, edges = random_graph(rng)
        k = int(rng.integers(1, 5))
        core = k_core_filter(InteractionGraph(nu, ni, edges), k)
        mismatches += (set(core.user_ids.tolist()), set(core.item_ids.tolist())) != peel_oracle(nu, ni, edges, k)
    ok = mismatches == 0
    record(8, ok, f"{100 - mismatches}/100 random graphs match the peeling oracle")
    assert ok


def test_c09_metric_identities():
    lm = base(0)["lm"]
    words = [w for w in lm.vocab.itos if w.isalpha()]
    rng = np.random.default_rng(9)
    emb = lm_embedder(lm)
    worst_self = 0.0
    for _ in range(100):
        text = " ".join(rng.choice(words, size=int(rng.integers(1, 12))))
        worst_self = max(worst_self, max(abs(v - 1.0) for v in embed_sim_score(text, text, emb)))
    uniform = constant_logit_lm(np.zeros(8))
    lik_err = abs(likelihood_score("a b", "c", uniform) + math.log(len(uniform.vocab)))
    vals = rng.normal(size=500) * 7 + 3
    rep = aggregate([MetricRow(str(k), "m", float(v)) for k, v in enumerate(vals)])
    mean = sum(vals) / len(vals)
    std = math.sqrt(sum((v - mean) ** 2 for v in vals) / len(vals))
    agg_err = max(abs(rep.means["m"] - mean), abs(rep.stds["m"] - std))
    ok = worst_self <= 1e-12 and lik_err <= 1e-9 and agg_err <= 1e-12
    record(9, ok, f"self-sim dev {worst_self:.1e}, uniform likelihood err {lik_err:.1e}, "
                  f"aggregate err {agg_err:.1e}")
    assert ok


def test_c10_early_stopping():
    state = EarlyStopState(100)
    processed = 0
    for _ in range(100):
        processed += 1
        if not early_stop_update(state, 1.0):
            break
    ok = processed == 31 and state.enabled_after == 20 and state.patience == 10
    record(10, ok, f"constant trace, N=100: halted after {processed} samples")
    assert ok


def test_c11_emissions():
    worst = 0.0
    for profile, power in (("h100", 0.91), ("a100_mig", 0.65)):
        for hours in (1.0, 2.0, 18.244444):
            hand = 0.22 * 1.2 * power * hours
            worst = max(worst, abs(emissions_estimate(EmissionsParams.for_profile(profile, hours)) - hand))
    rep = aggregate([MetricRow("0", "judge", 50.0)], "full", ["x"])
    note = DISCREPANCY_NOTE in render_report([rep])
    ok = worst <= 1e-9 and note
    record(11, ok, f"max abs err vs hand values {worst:.1e}; discrepancy note in report: {note}")
    assert ok


def test_c12_anomaly_detector():
    flagged = sum(detect_numeric_anomaly(s) for s in EXAMPLES["digit_runs"])
    false_pos = sum(detect_numeric_anomaly(s) for s in EXAMPLES["well_formed"])
    ok = flagged == len(EXAMPLES["digit_runs"]) == 2 and false_pos == 0 and len(EXAMPLES["well_formed"]) == 6
    record(12, ok, f"flagged {flagged}/2 digit-run examples, {false_pos}/6 well-formed examples")
    assert ok
