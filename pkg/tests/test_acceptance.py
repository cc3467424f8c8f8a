"""End-to-end acceptance checks at desk scale.

Every check records a PASS/FAIL line that is repeated in the terminal
summary. Training runs are cached per (scheme, seed, overrides) so checks
that share a configuration share the run.
"""

import math
import time
from functools import lru_cache

import numpy as np
import pytest

from fedcl import cli
from fedcl.channel import ChannelConfig, transmit_rows
from fedcl.config import ExperimentConfig
from fedcl.diagnostics import GRAD_TOLERANCE, channel_check, gradcheck_suite
from fedcl.protocol import BATCH, UPLINK, build_datasets, build_states, run_training, stream

from oracles import centralized_sgd

SEEDS = range(5)

# heterogeneity benchmark: one class per client, 16-dim blobs squeezed into 8 features
BENCH = ExperimentConfig(num_classes=4, input_dim=16, clients=8, m=1, q=50, snr_db=5.0,
                         rounds=200, feature_dim=8, lam=1.0, lr=1e-3, client_lrs=(1e-3,))

# m sweep at a fixed K*m*q = 8 * 48
M_GRID = {1: 48, 2: 24, 4: 12}


@lru_cache(maxsize=None)
def _run(scheme, seed, **changes):
    return run_training(BENCH.replace(scheme=scheme, seed=seed, **changes))


def _mean_acc(scheme, **changes):
    return float(np.mean([_run(scheme, s, **changes).mean_test_accuracy for s in SEEDS]))


def test_gradient_fidelity(report):
    start = time.perf_counter()
    results = gradcheck_suite()
    elapsed = time.perf_counter() - start
    worst = max(results, key=lambda r: r.max_rel_error)
    ok = all(r.passed for r in results) and elapsed < 30
    report("1 gradient fidelity", ok,
           f"{len(results)} checks, worst {worst.max_rel_error:.2e} ({worst.name}) "
           f"< {GRAD_TOLERANCE:g}, {elapsed:.1f}s < 30s")
    assert ok


def test_channel_calibration(report):
    measured = {snr: channel_check(snr, 100_000, seed=0).measured_db for snr in (0.0, 5.0, 10.0, 20.0)}
    worst = max(abs(m - s) for s, m in measured.items())
    x = np.ones((1, 200_000))
    cfg = ChannelConfig(snr_db=0.0)
    n0 = transmit_rows(x, cfg, stream(0, UPLINK, 0, 0)) - x
    n1 = transmit_rows(x, cfg, stream(0, UPLINK, 0, 1)) - x
    corr = abs(np.corrcoef(n0.ravel(), n1.ravel())[0, 1])
    ok = worst <= 0.2 and corr < 0.01
    report("2 channel calibration", ok,
           f"max |measured - configured| {worst:.3f} dB over 1e5 symbols at 0/5/10/20 dB, "
           f"client stream |corr| {corr:.4f}")
    assert ok


def test_degeneracy_equivalence(report):
    cfg = BENCH.replace(clients=1, m=4, q=100, lam=0.0, snr_db=math.inf, lr=0.01,
                        client_lrs=(0.01,), seed=7)
    start = time.perf_counter()
    train, _ = build_datasets(cfg)
    clients, server = build_states(cfg, train)
    client = clients[0]
    batches = [stream(cfg.seed, BATCH, t, 0, 0).choice(client.size, cfg.batch_size, replace=False)
               for t in range(cfg.rounds)]
    expected = centralized_sgd([(l.W, l.b) for l in client.encoder.layers],
                               [(l.W, l.b) for l in server.decoder.layers],
                               client.X, client.y, batches, cfg.lr)
    got = run_training(cfg).loss_curve()
    gap = float(np.max(np.abs(got - np.array(expected))))
    elapsed = time.perf_counter() - start
    ok = gap <= 1e-9 and elapsed < 60
    report("3 degeneracy equivalence", ok,
           f"K=1 noiseless lambda=0 vs centralized SGD over {cfg.rounds} rounds: "
           f"max gap {gap:.1e}, {elapsed:.1f}s")
    assert ok


def test_ordering(report):
    start = time.perf_counter()
    acc = {s: _mean_acc(s) for s in ("fedcl", "fedproto", "vanilla")}
    elapsed = time.perf_counter() - start
    ok = acc["fedcl"] >= acc["fedproto"] >= acc["vanilla"] and acc["fedcl"] - acc["vanilla"] >= 0.02
    report("4 ordering", ok,
           f"fedcl {acc['fedcl']:.4f} >= fedproto {acc['fedproto']:.4f} >= vanilla "
           f"{acc['vanilla']:.4f}, gap {100 * (acc['fedcl'] - acc['vanilla']):.1f} points, "
           f"{elapsed:.0f}s")
    assert ok


def test_fedavg_below_fedcl(report):
    fedcl, fedavg = _mean_acc("fedcl"), _mean_acc("fedavg")
    ok = fedavg < fedcl
    report("4b fedavg below fedcl", ok, f"fedavg {fedavg:.4f} < fedcl {fedcl:.4f}")
    assert ok


def test_heterogeneity_robustness(report):
    acc = {s: {m: _mean_acc(s, m=m, q=q) for m, q in M_GRID.items()} for s in ("fedcl", "vanilla")}
    # accuracy falls as m grows (fewer samples per class); the drop is the swing across the sweep
    drop = {s: abs(acc[s][4] - acc[s][1]) for s in acc}
    ok = drop["fedcl"] < drop["vanilla"]
    grid = "; ".join(f"{s} m=1/2/4: " + "/".join(f"{acc[s][m]:.3f}" for m in M_GRID) for s in acc)
    report("5 heterogeneity robustness", ok,
           f"drop between m=4 and m=1: fedcl {drop['fedcl']:.4f} < vanilla {drop['vanilla']:.4f} ({grid})")
    assert ok


def test_noise_robustness(report):
    ratio = {s: _mean_acc(s, snr_db=0.0) / _mean_acc(s, snr_db=20.0) for s in ("fedcl", "vanilla")}
    ok = ratio["fedcl"] > ratio["vanilla"]
    report("6 noise robustness", ok,
           f"acc(0 dB)/acc(20 dB): fedcl {ratio['fedcl']:.4f} > vanilla {ratio['vanilla']:.4f}")
    assert ok


def test_separability(report):
    pairs = [(_run("fedcl", s).final_separability, _run("vanilla", s).final_separability) for s in SEEDS]
    wins = sum(a > b for a, b in pairs)
    ok = wins >= 4
    report("7 separability", ok,
           f"fedcl above vanilla in {wins}/5 seeds at 5 dB ("
           + ", ".join(f"{a:.2f} vs {b:.2f}" for a, b in pairs) + ")")
    assert ok


def test_convergence_diagnostic(report):
    drops = []
    for s in SEEDS:
        curve = _run("fedcl", s).loss_curve()
        drops.append((curve[:10].mean(), curve[190:200].mean()))
    ok = all(late < early for early, late in drops)
    report("8 convergence diagnostic", ok,
           "10-round mean loss at t=10 -> t=200: "
           + ", ".join(f"{e:.2f}->{l:.2f}" for e, l in drops))
    assert ok


def test_determinism(tmp_path, monkeypatch, report):
    outs = []
    for i, threads in enumerate(("1", "4", "1")):
        monkeypatch.setenv(cli.THREADS_ENV, threads)
        out = tmp_path / f"run{i}"
        cli.train_one(BENCH.replace(seed=11), out)
        outs.append(((out / "metrics.csv").read_bytes(), (out / "features.csv").read_bytes()))
    ok = outs[0] == outs[1] == outs[2]
    report("9 determinism", ok,
           f"metrics.csv and features.csv byte-identical across 3 runs with 1, 4 and 1 threads "
           f"({len(outs[0][0])} bytes)")
    assert ok
