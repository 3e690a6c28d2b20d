"""Acceptance criteria 1 to 15. Each test prints one PASS/FAIL line, repeated in the run summary."""

import dataclasses
import filecmp
import time
import warnings

import numpy as np
import pytest

from crowdgen.cli import EXIT_OK, main
from crowdgen.emitter import CONTEXT_DIM, PARAM_DIM, NoiseSchedule, emit_agents, forward_diffuse
from crowdgen.fixtures import corridor_fixture, crossing_fixture, uniform_layout
from crowdgen.layout import occupancy_map
from crowdgen.metrics import dtw, emd_1d, evaluate, metric_col, quadrat_series, QuadratGrid
from crowdgen.navmesh import NavGraph, path_length
from crowdgen.oracles import collision_count_direct, dtw_exhaustive, emd_lp
from crowdgen.orca import orca_rollout
from crowdgen.pipeline import RunConfig, generate, train
from crowdgen.raster import GridRaster, GridSpec
from crowdgen.trajectory import Agent, Scenario, write_trajectory_file
from crowdgen.vocab import kmeans_fit

from conftest import TINY_TRAINING, random_scenario, record_acceptance
from gradcheck import check_net, random_nets
from test_navmesh import blocked_cells_crossed, u_obstacle
from test_orca import min_separation, spec as orca_spec

# Hyperparameters sized for a laptop CPU; the defaults target full datasets.
DESK_TRAINING = dict(emitter_epochs=60, emitter_batch=64, emitter_lr=1e-3, window_stride=10,
                     sim_epochs=40, sim_batch=256, sim_lr=1e-3, segment_stride=4)


def run_config(**kw):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return RunConfig(**kw)


# --- 1-5: metric oracles ---------------------------------------------------------------

def test_01_emd_matches_transport_lp():
    rng = np.random.default_rng(1)
    pairs = [(rng.normal(0, 3, rng.integers(1, 9)), rng.normal(1, 2, rng.integers(1, 9))) for _ in range(200)]
    t = time.perf_counter()
    worst = max(abs(emd_1d(a, b) - emd_lp(a, b)) for a, b in pairs)
    elapsed = time.perf_counter() - t
    ok = worst <= 1e-9 and elapsed < 1.0
    assert record_acceptance("1 EMD oracle", ok, f"max |emd - LP| = {worst:.2e} over 200 pairs in {elapsed:.2f} s")


def test_02_dtw_matches_exhaustive_alignment():
    rng = np.random.default_rng(2)
    pairs = [(rng.normal(size=(rng.integers(1, 7), 2)), rng.normal(size=(rng.integers(1, 7), 2))) for _ in range(100)]
    dtw(pairs[0][0], pairs[0][1])  # compile once
    t = time.perf_counter()
    mismatches = sum(dtw(a, b) != dtw_exhaustive(a, b) for a, b in pairs)
    elapsed = time.perf_counter() - t
    ok = mismatches == 0 and elapsed < 1.0
    assert record_acceptance("2 DTW oracle", ok, f"{mismatches} mismatches over 100 pairs in {elapsed:.2f} s")


def test_03_metric_fixed_point():
    gt = random_scenario(np.random.default_rng(3), 8, 80)
    twin = Agent(100, "pedestrian", gt.agents[0].spawn_frame, gt.agents[0].trajectory + [0.05, 0.0])
    gt = Scenario(gt.fps, gt.total_frames, gt.agents + (twin,), gt.scene_id)
    r = evaluate([gt], gt)
    direct = 100.0 * collision_count_direct(gt) / (gt.total_frames * len(gt))
    zeros = (r.dens, r.freq, r.cov, r.pop, r.kinem, r.dtw) == (0, 0, 0, 0, 0, 0)
    ok = zeros and r.div == 1 and r.col == direct
    assert record_acceptance("3 metric fixed point", ok,
                             f"similarity metrics {r.values()[:6]}, div {r.div}, col {r.col:.4f} vs direct {direct:.4f}")


def test_04_collision_constructions():
    tr = np.column_stack([np.linspace(0, 5, 30), np.zeros(30)])
    a = Agent(0, "pedestrian", 0, tr)
    coincident = metric_col(Scenario(5.0, 30, (a, Agent(1, "pedestrian", 0, tr.copy())), "s"))
    apart = metric_col(Scenario(5.0, 30, (a, Agent(1, "pedestrian", 0, tr + [0.0, 0.3])), "s"))
    ok = coincident == 100.0 and apart == 0.0
    assert record_acceptance("4 collision constructions", ok, f"coincident {coincident}, 0.3 m apart {apart}")


def test_05_quadrat_conservation():
    rng = np.random.default_rng(5)
    bad = 0
    for _ in range(50):
        sc = random_scenario(rng, int(rng.integers(0, 12)), int(rng.integers(2, 80)))
        grid = QuadratGrid.for_scenario(sc) if len(sc) else QuadratGrid(np.zeros(2), np.ones(2))
        s = quadrat_series(sc, grid)
        alive = np.array([sum(a.position_at(int(f)) is not None for a in sc.agents) for f in s["frames"]])
        bad += not np.array_equal(s["counts"].sum(axis=1), alive)
    assert record_acceptance("5 quadrat conservation", bad == 0, f"{bad} of 50 fuzzed scenarios violate the sum")


# --- 6-9: learning components ------------------------------------------------------------

def test_06_gradient_check():
    rng = np.random.default_rng(6)
    errors = [check_net(net, inputs, rng) for net, inputs in random_nets(6, count=20)]
    worst = max(errors)
    assert record_acceptance("6 gradient check", worst < 1e-4, f"max relative error {worst:.2e} over 20 nets")


def test_07_diffusion_marginal():
    sched = NoiseSchedule.linear(50)
    alpha0 = np.linspace(-2, 2, PARAM_DIM)
    n = 10_000
    worst = 0.0
    for m in (1, 25, 50):
        rng = np.random.default_rng(m)
        x = np.stack([forward_diffuse(alpha0, m, rng, sched) for _ in range(n)])
        ab = sched.alpha_bar[m]
        var = 1 - ab
        z_mean = np.abs(x.mean(0) - np.sqrt(ab) * alpha0) / np.sqrt(var / n)
        z_var = np.abs(x.var(0, ddof=1) - var) / (var * np.sqrt(2 / (n - 1)))
        worst = max(worst, z_mean.max(), z_var.max())
    assert record_acceptance("7 diffusion marginal", worst <= 4, f"largest deviation {worst:.2f} standard errors")


def test_08_ddim_determinism_and_equivariance(tiny_corridor):
    fx, models = tiny_corridor
    occ = occupancy_map(fx.layout.spec, np.array([[5.0, 4.0], [9.0, 3.0]]))
    runs = [emit_agents(models.emitter, fx.layout, occ, 9, 50, np.random.default_rng(8), fx.navgraph)[0] for _ in range(2)]
    same = all(a.kind == b.kind and a.pace == b.pace and a.spawn_frame == b.spawn_frame
               and np.array_equal(a.start, b.start) and np.array_equal(a.destination, b.destination)
               for a, b in zip(*runs))
    rng = np.random.default_rng(80)
    x, ctx = rng.normal(size=(7, PARAM_DIM)), rng.normal(size=(12, CONTEXT_DIM))
    perm = rng.permutation(7)
    gap = np.max(np.abs(models.emitter.predict_noise(x[perm], 17, ctx) - models.emitter.predict_noise(x, 17, ctx)[perm]))
    ok = same and len(runs[0]) == len(runs[1]) and gap <= 1e-6
    assert record_acceptance("8 DDIM determinism and equivariance", ok,
                             f"identical emissions: {same}; permutation gap {gap:.1e}")


def test_09_kmeans():
    rng = np.random.default_rng(9)
    means = np.array([np.full(40, -3.0), np.zeros(40), np.full(40, 3.0)])
    X = np.vstack([m + rng.normal(0, 0.2, (80, 40)) for m in means])
    vocab = kmeans_fit(X, B=3, seed=0)
    monotone = all(b <= a for a, b in zip(vocab.sse_history, vocab.sse_history[1:]))
    dist = max(np.min(np.linalg.norm(vocab.centers - X[i * 80:(i + 1) * 80].mean(0), axis=1)) for i in range(3))
    ok = monotone and dist <= 0.05
    assert record_acceptance("9 k-means", ok, f"SSE non-increasing: {monotone}; worst center offset {dist:.2e}")


# --- 10-11: navigation and the baseline ------------------------------------------------------

def test_10_navigation():
    spec = GridSpec(60, 60, 0.5)
    open_graph = NavGraph(GridRaster(spec, np.ones(spec.shape, int)))
    rng = np.random.default_rng(10)
    ratio = 0.0
    for _ in range(20):
        a, b = rng.uniform(0.5, 29.5, 2), rng.uniform(0.5, 29.5, 2)
        ratio = max(ratio, path_length(open_graph.shortest_path(a, b)) / np.linalg.norm(b - a))
    u = u_obstacle()
    p1 = u.shortest_path((10.25, 12.25), (10.25, 17.25))
    p2 = u.shortest_path((10.25, 12.25), (10.25, 17.25))
    crossed = blocked_cells_crossed(u, p1)
    ok = ratio <= 1.05 and crossed == 0 and np.array_equal(p1, p2)
    assert record_acceptance("10 navigation", ok,
                             f"open-map ratio {ratio:.4f}; U-obstacle blocked cells {crossed}; repeatable {np.array_equal(p1, p2)}")


def test_11_orca_safety():
    pair = orca_rollout([orca_spec(0, (-6, 0), (6, 0), 1.5), orca_spec(0, (6, 0), (-6, 0), 1.5)], None, 80)
    trio = orca_rollout([orca_spec(0, (-5, 0), (5, 0), 1.5), orca_spec(0, (0, -5), (0, 5), 1.2),
                         orca_spec(0, (4, 4), (-4, -4), 1.0)], None, 100)
    d_pair, d_trio = min_separation(pair), min_separation(trio)
    ok = d_pair >= 0.4 and d_trio >= 0.4 and len(pair) == 2 and len(trio) == 3
    assert record_acceptance("11 ORCA safety", ok, f"min separation head-on {d_pair:.3f} m, crossing {d_trio:.3f} m")


# --- 12-14: end-to-end on synthetic scenes -------------------------------------------------------

@pytest.fixture(scope="module")
def corridor_run():
    fx = corridor_fixture(0, n_scenarios=8)
    config = run_config(scene="corridor", **DESK_TRAINING)
    t = time.perf_counter()
    models = train(config, fx.scenarios, fx.layout, fx.navgraph)
    return fx, models, time.perf_counter() - t


@pytest.mark.slow
def test_12_corridor_end_to_end(corridor_run):
    fx, models, train_seconds = corridor_run
    gt = corridor_fixture(99, n_scenarios=1, frames=2500).scenarios[0]
    base = run_config(scene="corridor", duration_frames=gt.total_frames)
    gens, departures = [], {"arrived": 0, "timeout": 0}
    for rep in range(5):
        d = {}
        gens.append(generate(dataclasses.replace(base, seed=rep), fx.layout, models, fx.navgraph, d))
        for k in departures:
            departures[k] += d[k]
    flat = uniform_layout(fx.layout)
    baseline = [generate(dataclasses.replace(base, seed=rep, engine="se-orca"), flat, models, fx.navgraph)
                for rep in range(5)]
    ours, theirs = evaluate(gens, gt), evaluate(baseline, gt)

    reach = departures["arrived"] / max(1, departures["arrived"] + departures["timeout"])
    ok_a = record_acceptance("12a corridor arrivals", reach >= 0.9 and train_seconds < 300,
                             f"{reach:.1%} of finished agents arrived; training took {train_seconds:.0f} s")
    ok_b = record_acceptance("12b corridor Pop/Dens vs baseline",
                             ours.pop <= 0.5 * theirs.pop and ours.dens <= 0.5 * theirs.dens,
                             f"Pop {ours.pop:.3f} vs {theirs.pop:.3f} (ratio {ours.pop / theirs.pop:.2f}), "
                             f"Dens {ours.dens:.4f} vs {theirs.dens:.4f} (ratio {ours.dens / theirs.dens:.2f}); need <= 0.50")
    starts = np.array([a.start for g in gens for a in g.agents if a.spawn_frame > 0])
    inside = float(fx.in_start_region(starts).mean())
    ok_c = record_acceptance("12c corridor appearance region", inside >= 0.9,
                             f"{inside:.1%} of {len(starts)} emitted starts in the spawn region")
    assert ok_a and ok_b and ok_c


@pytest.mark.slow
def test_13_social_ablation_raises_collisions():
    fx = crossing_fixture(0, n_scenarios=8, rate=0.16, radius=0.35)
    full_cfg = run_config(scene="crossing", duration_frames=500, **DESK_TRAINING)
    ablated_cfg = dataclasses.replace(full_cfg, ablate=("no-social",))
    full_models = train(full_cfg, fx.scenarios, fx.layout, fx.navgraph)
    ablated_models = train(ablated_cfg, fx.scenarios, fx.layout, fx.navgraph)
    full, ablated = [], []
    for seed in range(20):
        full.append(metric_col(generate(dataclasses.replace(full_cfg, seed=seed), fx.layout, full_models, fx.navgraph)))
        ablated.append(metric_col(generate(dataclasses.replace(ablated_cfg, seed=seed), fx.layout, ablated_models,
                                           fx.navgraph)))
    higher = sum(a > f for a, f in zip(ablated, full))
    ok = np.mean(ablated) > np.mean(full)
    assert record_acceptance("13 social ablation direction", ok,
                             f"mean col full {np.mean(full):.3f} vs no-social {np.mean(ablated):.3f}; "
                             f"ablation higher in {higher} of 20 runs")


@pytest.mark.slow
def test_14_one_hour_generation_time(corridor_run):
    fx, models, _ = corridor_run
    # a target of 28 agents keeps the crowd close to the 30-agent ceiling
    config = run_config(scene="corridor", duration_frames=18_000, seed=14, population=tuple([0.0] * 28 + [1.0]))
    t = time.perf_counter()
    sc = generate(config, fx.layout, models, fx.navgraph)
    elapsed = time.perf_counter() - t
    peak = int(sc.alive_counts().max())
    ok = elapsed <= 120 and peak <= 30 and sc.total_frames == 18_000
    assert record_acceptance("14 one-hour generation", ok, f"{elapsed:.1f} s for 18000 frames, peak {peak} agents")


# --- 15: reproducibility through the command line ----------------------------------------------------

def test_15_cli_reproducibility(tmp_path):
    fx = corridor_fixture(15, n_scenarios=2, frames=250)
    raw = []
    for i, sc in enumerate(fx.scenarios):
        raw.append(str(tmp_path / f"rec{i}.txt"))
        write_trajectory_file(sc, raw[-1])
    data = str(tmp_path / "data")
    assert main(["prepare", *raw, "--out", data, "--scene", "corridor"]) == EXIT_OK
    sets = [a for k, v in TINY_TRAINING.items() for a in ("--set", f"{k}={v}")]
    for name in ("ck1", "ck2"):
        assert main(["train", "--data", data, "--checkpoints", str(tmp_path / name), "--seed", "3", *sets]) == EXIT_OK
    files = ("vocab.txt", "emitter.ckpt", "simulator.ckpt", "prior.ckpt",
             "losses_emitter.csv", "losses_simulator.csv", "vocab_sse.csv")
    train_same = all(filecmp.cmp(tmp_path / "ck1" / f, tmp_path / "ck2" / f, shallow=False) for f in files)
    for name in ("g1.traj", "g2.traj"):
        assert main(["generate", "--data", data, "--checkpoints", str(tmp_path / "ck1"), "--seed", "3",
                     "--duration-frames", "300", "--output", str(tmp_path / name)]) == EXIT_OK
    gen_same = filecmp.cmp(tmp_path / "g1.traj", tmp_path / "g2.traj", shallow=False)
    assert record_acceptance("15 reproducibility", train_same and gen_same,
                             f"train outputs identical: {train_same}; generate outputs identical: {gen_same}")
