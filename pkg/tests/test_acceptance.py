"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run alone with ``pytest tests/test_acceptance.py -v`` (the lines are echoed
in the terminal summary) or ``python tests/test_acceptance.py``.
"""

import math
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))
from _oracles import mec_brute_force, random_log_probs  # noqa: E402

from rnada import checks  # noqa: E402
from rnada import tensor as T  # noqa: E402
from rnada.data import GenSpec, generate, load, save  # noqa: E402
from rnada.losses import cent_loss, cross_entropy, mec_labels, mec_loss, rna_loss  # noqa: E402
from rnada.tensor import Graph, Tensor  # noqa: E402
from rnada.training import RunConfig, evaluate, loss_log_lines, train  # noqa: E402

RESULTS: list[str] = []
SEEDS = range(5)
RUN_LIMIT_S = 300.0


def report(criterion: str, ok: bool, detail: str) -> None:
    line = f"[{'PASS' if ok else 'FAIL'}] {criterion}: {detail}"
    RESULTS.append(line)
    print(line)
    assert ok, line


def test_criterion_1_gradient_suite():
    start = time.perf_counter()
    results = checks.run_checks(n_seeds=10)
    worst = max(r["max_error"] for n, r in results.items() if n != "grl")
    # direct op-level check: upstream times -beta, bit for bit
    exact = True
    rng = np.random.default_rng(0)
    for beta in (0.0, 0.75, 1.3):
        with Graph() as g:
            x = Tensor(rng.standard_normal(7), requires_grad=True)
            up = rng.standard_normal(7)
            T.backward((T.grad_reverse(x, beta) * Tensor(up)).sum(), g)
        exact &= x.grad.tobytes() == (-beta * up).tobytes()
    elapsed = time.perf_counter() - start
    ok = worst < 1e-4 and results["grl"]["max_error"] == 0.0 and exact and elapsed < 60
    report("1 gradient suite", ok,
           f"max rel err {worst:.2e} < 1e-4 over 10 seeds, grl gap {results['grl']['max_error']}, "
           f"op-level exact {exact}, {elapsed:.1f}s < 60s")


def test_criterion_2_closed_forms():
    rna = rna_loss({"rgb": 5.0, "audio": 1.0}).item()
    cent = cent_loss(Tensor([[0.5, 0.25, 0.25]])).item()
    mec = mec_loss(np.log([[[0.9, 0.1]], [[0.6, 0.4]]])).item()
    ce_err = max(abs(cross_entropy(Tensor(np.zeros((3, c))), [0, c - 1, 1]).item() - math.log(c))
                 for c in (2, 3, 5, 10))
    ok = (abs(rna - 16) <= 1e-12 and abs(cent - math.log(2)) <= 1e-12
          and abs(mec - 0.3081) <= 1e-4 and ce_err <= 1e-12)
    report("2 closed forms", ok,
           f"rna {rna!r}, cent-ln2 {cent - math.log(2):.1e}, mec {mec:.6f}, uniform CE err {ce_err:.1e}")


def test_criterion_3_mec_oracle():
    rng = np.random.default_rng(2024)
    value_err, label_mismatch = 0.0, 0
    for _ in range(1000):
        b, m, c = int(rng.integers(1, 4)), int(rng.integers(1, 5)), int(rng.integers(2, 6))
        lp = random_log_probs(rng, b, m, c)
        best, labels = mec_brute_force(lp)
        value_err = max(value_err, abs(mec_loss(lp).item() - best) / max(1.0, abs(best)))
        label_mismatch += not np.array_equal(mec_labels(lp), labels)
    ok = value_err < 1e-12 and label_mismatch == 0
    report("3 mec oracle", ok, f"1000 cases, max rel err {value_err:.1e}, "
                               f"tie-break mismatches {label_mismatch}")


def _target_run(config, seed):
    cfg = replace(config, seed=seed, data=GenSpec())
    dataset = generate(cfg.data, seed)
    t0 = time.perf_counter()
    ck = train(cfg, dataset)
    elapsed = time.perf_counter() - t0
    return evaluate(ck.members, dataset["target_eval"]), elapsed


@pytest.fixture(scope="module")
def ablation():
    base = RunConfig()
    arms = {
        "source-only": base.with_preset("source-only"),
        "uda": base.with_preset("uda"),
        "source-only+rna": replace(base.with_preset("source-only"), losses=("rna",)),
        "uda b=2": replace(base.with_preset("uda"), ensemble_size=2),
        "mec b=2": replace(base.with_preset("mec"), ensemble_size=2),
    }
    out = {name: [_target_run(cfg, s) for s in SEEDS] for name, cfg in arms.items()}
    return out


def _mean(runs, attr):
    return float(np.mean([getattr(r, attr) for r, _ in runs]))


def test_criterion_4a_uda_beats_source_only(ablation):
    so, uda = _mean(ablation["source-only"], "action_top1"), _mean(ablation["uda"], "action_top1")
    report("4a uda vs source-only", uda - so >= 0.03,
           f"action top-1 {uda:.4f} vs {so:.4f}, gain {100 * (uda - so):.2f} >= 3 points")


def test_criterion_4b_rna_helps(ablation):
    so = _mean(ablation["source-only"], "action_top1")
    rna = _mean(ablation["source-only+rna"], "action_top1")
    report("4b rna at 10:1 norms", rna - so >= 0.01,
           f"action top-1 {rna:.4f} vs {so:.4f}, gain {100 * (rna - so):.2f} >= 1 point")


def test_criterion_4c_mec_reduces_disagreement(ablation):
    off = _mean(ablation["uda b=2"], "disagreement")
    on = _mean(ablation["mec b=2"], "disagreement")
    drop = (off - on) / off if off > 0 else 0.0
    report("4c mec disagreement", drop >= 0.20,
           f"disagreement {on:.4f} vs {off:.4f}, relative drop {100 * drop:.1f}% >= 20%")


def test_criterion_4d_run_time(ablation):
    slowest = max(t for runs in ablation.values() for _, t in runs)
    report("4d per-run time", slowest < RUN_LIMIT_S, f"slowest run {slowest:.2f}s < {RUN_LIMIT_S:.0f}s")


def test_criterion_5_determinism(tmp_path):
    cfg = replace(RunConfig().with_preset("mstaa"), ensemble_size=2, epochs=3, data=GenSpec())
    blobs = []
    for name in ("a", "b"):
        ck = train(cfg)
        ck.save(tmp_path / f"{name}.json")
        (tmp_path / f"{name}.ndjson").write_text(loss_log_lines(ck.history))
        blobs.append(((tmp_path / f"{name}.json").read_bytes(),
                      (tmp_path / f"{name}.ndjson").read_bytes()))
    ok = blobs[0] == blobs[1]
    report("5 determinism", ok, f"checkpoint {len(blobs[0][0])} bytes and loss log identical: {ok}")


def test_criterion_6_round_trip(tmp_path):
    save(generate(GenSpec(), 0), tmp_path / "first")
    save(load(tmp_path / "first"), tmp_path / "second")
    names = sorted(p.name for p in (tmp_path / "first").iterdir())
    same = [n for n in names if (tmp_path / "first" / n).read_bytes() ==
            (tmp_path / "second" / n).read_bytes()]
    report("6 format round trip", len(names) == 4 and same == names,
           f"{len(same)}/{len(names)} files byte-identical after re-save")


def test_criterion_7_mstaa_structure():
    found = {}
    for k in (1, 2, 3):
        spec = GenSpec(n_kitchens=k, samples_per_kitchen=8, eval_per_kitchen=2)
        cfg = replace(RunConfig().with_preset("mstaa"), epochs=1, data=spec)
        entry = train(cfg).history[0]
        found[k] = len([n for n in entry["components"] if n.startswith("adv_")])
    ok = all(found[k] == 2 * k + 1 for k in found)
    report("7 mstaa structure", ok, ", ".join(f"K={k}: {n} (want {2 * k + 1})" for k, n in found.items()))


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-q"]))
