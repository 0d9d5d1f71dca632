import math
import random
from dataclasses import replace

import pytest

from wanspec.controller import ControllerConfig
from wanspec.oracle import OracleConfig, SequenceView, open_oracle
from wanspec.sim import (
    TARGET_DONE,
    TO_CONTROLLER,
    TO_WORKER,
    SimConfig,
    Workbench,
    pareto_fraction,
    phi_grid,
    run_ablation,
    run_sim,
    run_views,
    sequences_for,
    simulate_baseline,
    simulate_request,
)
from wanspec.worker import WorkerConfig

T_T, T_D = 23.4, 7.5


def perfect_view(length, seed=0):
    cfg = OracleConfig(seed=seed, match_prob=1.0, sequence_length=length)
    return SequenceView(open_oracle(cfg).next_sequence())


def closed_form(L, k, t_t=T_T, t_d=T_D):
    q, r = divmod(L, k + 1)
    return q * (k * t_d + t_t) + (((r - 1) * t_d + t_t) if r else 0.0)


@pytest.mark.parametrize("k", [1, 2, 4])
def test_baseline_closed_form(k):
    m = simulate_baseline(perfect_view(100), k, T_T, T_D)
    assert m.total_latency == pytest.approx(closed_form(100, k), abs=1e-9)
    assert m.tokens_committed == 100 and m.sync_stalls == 0


def test_baseline_k2_value():
    # 33 full rounds of (2 drafts + 1 target), then one target step for token 100
    assert closed_form(100, 2) == pytest.approx(33 * (2 * 7.5 + 23.4) + 23.4)


def test_hand_traced_ten_token_schedule():
    view = perfect_view(10)
    log = []
    m, ctrl, worker = simulate_request(
        view,
        ControllerConfig(k=2, R=0.0, phi=math.inf, t_target=T_T, t_draft=T_D),
        WorkerConfig(b=2, theta=math.inf, s=4, t_draft=T_D),
        0.0,
        log=log,
    )
    done = [t for t, kind, _ in log if kind == TARGET_DONE]
    assert done == pytest.approx([38.4, 61.8, 85.2, 108.6])
    assert m.total_latency == pytest.approx(108.6)
    assert m.total_latency <= closed_form(10, 2) == pytest.approx(138.6)
    assert m.controller_draft_steps == 0 and m.target_steps == 4
    assert worker.draft_steps == 10
    arrivals = [t for t, kind, _ in log if kind == TO_CONTROLLER]
    assert arrivals == pytest.approx([7.5 * i for i in range(1, 11)])


def test_zero_rtt_perfect_match_never_drafts_locally():
    for seed in range(5):
        cfg = SimConfig(
            rtt=0.0,
            oracle_cfg=OracleConfig(seed=seed, match_prob=1.0),
            num_requests=3,
        )
        run = run_sim(cfg)
        assert run.total("controller_draft_steps") == 0


def test_same_seed_identical_metrics():
    cfg = SimConfig(rtt=15.0, num_requests=4, jitter=2.0)
    assert run_sim(cfg).as_tuples() == run_sim(cfg).as_tuples()


@pytest.mark.parametrize("mode", ["baseline_sequential", "wanspec"])
@pytest.mark.parametrize("rtt", [0.0, 10.0, 70.0])
def test_output_correct(mode, rtt):
    cfg = SimConfig(rtt=rtt, mode=mode, num_requests=4, oracle_cfg=OracleConfig(seed=2))
    views = sequences_for(cfg.oracle_cfg, 4)
    run = run_views(cfg, views)
    for m, v in zip(run.requests, views):
        assert m.committed == v.target_tokens


def test_causality_and_fifo():
    view = sequences_for(OracleConfig(seed=3), 1)[0]
    log = []
    cfg = SimConfig(rtt=20.0, jitter=8.0)
    simulate_request(
        view, cfg.effective_controller(), cfg.effective_worker(), 20.0, jitter=8.0, rng=random.Random(1), log=log
    )
    times = [t for t, _, _ in log]
    assert times == sorted(times)
    for kind in (TO_CONTROLLER, TO_WORKER):
        seqs = [d.seq_no for _, k, d in log if k == kind]
        assert seqs == list(range(len(seqs)))


def test_worker_prefix_of_controller():
    view = sequences_for(OracleConfig(seed=4), 1)[0]
    cfg = SimConfig(rtt=30.0)
    _, ctrl, worker = simulate_request(view, cfg.effective_controller(), cfg.effective_worker(), 30.0)
    assert ctrl.committed[: len(worker.committed)] == worker.committed


def test_per_step_commit_bounds():
    view = sequences_for(OracleConfig(seed=5), 1)[0]
    cfg = SimConfig(rtt=10.0)
    m, ctrl, _ = simulate_request(view, cfg.effective_controller(), cfg.effective_worker(), 10.0)
    assert m.target_steps <= m.tokens_committed <= 3 * m.target_steps


def test_branches_monotone_in_theta():
    views = sequences_for(OracleConfig(seed=6), 3)
    counts = []
    for theta in [0.0, 0.25, 0.5, 1.0, 2.0, math.inf]:
        cfg = SimConfig(rtt=0.0, worker_cfg=WorkerConfig(theta=theta))
        total = 0
        for v in views:
            _, _, w = simulate_request(v, cfg.effective_controller(), cfg.effective_worker(), 0.0)
            total += w.branches
        counts.append(total)
    assert counts == sorted(counts, reverse=True)
    assert counts[-1] == 0


def test_phi_extremes_bound_resets():
    views = sequences_for(OracleConfig(seed=7), 3)
    lo = run_views(SimConfig(rtt=20.0, controller_cfg=ControllerConfig(phi=0.0)), views)
    hi = run_views(SimConfig(rtt=20.0, controller_cfg=ControllerConfig(phi=math.inf)), views)
    assert lo.total("resets") >= hi.total("resets")
    assert hi.total("resets") == hi.total("sync_stalls")
    assert lo.controller_draft_passes >= hi.controller_draft_passes


def test_zero_rtt_ablation_never_slower():
    rows = run_ablation(SimConfig(num_requests=3), [0.0], iterations=3)
    assert len(rows) == 4
    assert all(r["median_latency_ratio"] <= 1.0 for r in rows)


def test_prompt_relay_delays_worker():
    view = sequences_for(OracleConfig(seed=8), 1)[0]
    cfg = SimConfig(rtt=40.0)
    a, _, _ = simulate_request(view, cfg.effective_controller(), cfg.effective_worker(), 40.0)
    b, _, _ = simulate_request(view, cfg.effective_controller(), cfg.effective_worker(), 40.0, prompt_relay=True)
    assert a.committed == b.committed


def test_phi_grid_spans_entropies():
    bench = Workbench(SimConfig(num_requests=2), 2)
    ent = bench.target_entropies()
    grid = phi_grid(ent, 5)
    assert grid[0] == ent.min() and grid[-1] == ent.max()
    assert grid == sorted(grid)


def test_pareto_fraction():
    assert pareto_fraction([(1, 3), (2, 2), (3, 1)]) == 1.0
    assert pareto_fraction([(1, 1), (2, 2)]) == 0.5


def test_stage_configs():
    base = SimConfig()
    none = replace(base, branching=False, theta_on=False, phi_on=False)
    assert none.effective_worker().b == 1 and none.effective_worker().theta == 0.0
    assert none.effective_controller().phi == -math.inf
    assert base.effective_controller().R == base.rtt
