"""Acceptance suite: one test per criterion, each with its own time budget.

``pytest tests/test_acceptance.py`` prints a ``CRITERION n: PASS/FAIL`` line per
criterion in the terminal summary.  Criteria 5 and 6 train agents on the desk
scenario and take most of an hour.
"""
import time

import numpy as np
import pytest

import test_neural
import test_topology
from marlsched.agents import AgentConfig, PolicyNet, actor_critic_losses
from marlsched.config import ExperimentConfig, desk_config
from marlsched.interference import (
    CoLocationContext, InterferenceCoefficients, ablated_models, cpu_slowdown, fit, pcie_slowdown,
    predict_arrays, synthesize_samples, total_slowdown, u_c, u_p,
)
from marlsched.neural import tensor as T
from marlsched.neural.tensor import masked_softmax
from marlsched.runner import build_world, run_episode, run_eval, run_training, write_outputs

SEEDS = range(5)
BASELINES = ("tetris", "lb", "lif")


class Budget:
    def __init__(self, seconds):
        self.seconds = seconds

    def __enter__(self):
        self.t0 = time.perf_counter()
        return self

    def __exit__(self, *exc):
        self.elapsed = time.perf_counter() - self.t0
        if exc[0] is None:
            assert self.elapsed < self.seconds, f"took {self.elapsed:.1f} s > {self.seconds} s"


# -- 1 -----------------------------------------------------------------------------------

def test_criterion_1_interference_fit_recovery(note):
    rng = np.random.default_rng(2024)
    hidden = InterferenceCoefficients(
        rng.uniform(0.03, 0.08), rng.uniform(0.08, 0.15), rng.uniform(0.02, 0.08),
        rng.uniform(0.0, 0.03), rng.uniform(0.002, 0.006), rng.uniform(0.001, 0.003),
        rng.uniform(0.0, 0.02))
    with Budget(120):
        samples = synthesize_samples(hidden, 480, seed=11, noise=0.05)
        _, report = fit(samples, seed=0)
        variants = ablated_models(samples, seed=0)
    note(f"held-out error {report['heldout']:.3f}; variants "
         + ", ".join(f"{k} {v:.3f}" for k, v in variants.items()))
    assert report["heldout"] <= 0.15
    assert variants["full"] <= 0.15
    for name, err in variants.items():
        if name != "full":
            assert variants["full"] < err, name


# -- 2 -----------------------------------------------------------------------------------

def test_criterion_2_gradient_finite_differences():
    configs = 0
    with Budget(60):
        for seed in test_neural.SEEDS:
            for act in ("relu", "identity"):
                test_neural.test_dense_gradients(seed, act)
                configs += 1
            for mode in ("matrix", "scalar"):
                test_neural.test_ecc_gradients(seed, mode)
                configs += 1
            test_neural.test_ecc_update_gradients(seed)
            test_neural.test_masked_softmax_gradients(seed)
            test_neural.test_actor_critic_loss_gradients(seed)
            configs += 3
    assert configs >= 100 and test_neural.TOL <= 1e-4


# -- 3 -----------------------------------------------------------------------------------

def test_criterion_3_topology_formulas():
    with Budget(10):
        for k, servers, cores in [(2, 2, 1), (4, 16, 4), (20, 2000, 100)]:
            test_topology.test_fat_tree_counts(k, servers, cores)
        for k, spt, servers, tors in [(2, 1, 1, 1), (4, 2, 8, 4), (20, 20, 2000, 100)]:
            test_topology.test_vl2_counts(k, spt, servers, tors)
        for n, levels, servers, switches in [(2, 0, 2, 1), (3, 1, 9, 6), (2, 2, 8, 12)]:
            test_topology.test_bcube_small(n, levels, servers, switches)
        test_topology.test_bcube_paper_scale()
        test_topology.test_fat_tree_k2_hand_built()
        test_topology.test_fat_tree_k4_hand_count()
        test_topology.test_vl2_k4_hand_built()
        test_topology.test_bcube_3_1_hand_built()


# -- 4 -----------------------------------------------------------------------------------

def randomized_config():
    return ExperimentConfig.model_validate({
        "seed": 17,
        "policy": "random",
        "topology": {"params": {"k": 4, "pods": 2, "servers_per_edge": 2}},
        "workload": {"pattern": "poisson", "rate": 0.6, "horizon": 500,
                     "epochs_range": [5, 40]},
        "check_conservation": True,
    })


def test_criterion_4_conservation_and_determinism(tmp_path, monkeypatch):
    from marlsched import sim

    checks = []
    original = sim.SimState.check_conservation

    def counted(self):
        checks.append(self.clock)
        return original(self)

    monkeypatch.setattr(sim.SimState, "check_conservation", counted)
    with Budget(60):
        outputs = []
        for run in range(2):
            cfg = randomized_config()
            world = build_world(cfg)
            res = run_episode(world, world.trace, "random", max_intervals=500)
            assert len(res.intervals) == 500
            out = tmp_path / f"run{run}"
            write_outputs(out, cfg, "random", res)
            outputs.append((out / "jobs.csv").read_bytes())
    assert checks == list(range(1, 501)) * 2
    assert outputs[0] == outputs[1]


# -- 5 and 6 -------------------------------------------------------------------------------

@pytest.fixture(scope="session")
def desk_runs():
    """Multi-agent training plus baseline evaluations for every seed."""
    runs = {}
    t0 = time.perf_counter()
    for seed in SEEDS:
        world = build_world(desk_config(seed=seed))
        base = {p: run_eval(world, p).avg_jct for p in BASELINES}
        runs[seed] = (world, base, run_training(world, "multi"))
    return runs, time.perf_counter() - t0


def test_criterion_5_desk_learning_beats_heuristics(desk_runs, note):
    runs, seconds = desk_runs
    gains = []
    for seed, (world, base, res) in runs.items():
        best = min(base.values())
        marl = res.final_eval.avg_jct
        gains.append((best - marl) / best)
        note(f"seed {seed}: marl {marl:.3f}, best baseline {best:.3f} "
             f"({min(base, key=base.get)}), gain {gains[-1]:+.1%}")
        assert world.cfg.training.epochs <= 500
    note(f"mean gain {np.mean(gains):+.1%}; training took {seconds / 60:.1f} min")
    assert seconds <= 45 * 60
    assert all(g >= 0 for g in gains)
    assert np.mean(gains) >= 0.05


def test_criterion_6_multi_converges_no_later_than_single(desk_runs, note):
    runs, seconds = desk_runs
    wins = 0
    t0 = time.perf_counter()
    for seed, (world, _, multi) in runs.items():
        single = run_training(world, "single")
        wins += multi.best_epoch <= single.best_epoch
        note(f"seed {seed}: best epoch multi {multi.best_epoch}, single {single.best_epoch}")
    total = seconds + time.perf_counter() - t0
    note(f"multi no later in {wins}/5 seeds; {total / 60:.1f} min including multi runs")
    assert total <= 90 * 60
    assert wins >= 4


# -- 7 -----------------------------------------------------------------------------------

def test_criterion_7_bandit_policy_gradient():
    rng = np.random.default_rng(7)
    cfg = AgentConfig(inner_width=4, encoder_width=8, inter_width=8, hidden=16, lr=1e-3)
    net = PolicyNet(cfg, 3, 4, 2, False, rng)
    x = T.Tensor(rng.normal(size=(1, cfg.encoder_width)))
    mask = np.ones((1, 2), bool)
    with Budget(30):
        for _ in range(2000):
            logits, v = net.heads(x)
            a = int(rng.choice(2, p=masked_softmax(logits, mask).value[0]))
            actor, critic, _ = actor_critic_losses(logits, v, mask, [a], [float(a == 0)], [0.0],
                                                   [1.0], 0.9)
            net.opt.zero_grad()
            T.add(actor, critic).backward()
            net.opt.step()
    assert masked_softmax(net.heads(x)[0], mask).value[0, 0] > 0.9


# -- 8 -----------------------------------------------------------------------------------

def random_context(rng, n_core=8):
    same = tuple((rng.uniform(0, 12), rng.uniform(0, 60)) for _ in range(rng.integers(0, 5)))
    diff = tuple(rng.uniform(0, 12) for _ in range(rng.integers(0, 5)))
    return CoLocationContext(rng.uniform(0, 12), rng.uniform(0, 60), same, diff, n_core)


def positive_coeffs(rng):
    hi = (0.2, 0.4, 0.2, 0.1, 0.01, 0.01, 0.1)
    return InterferenceCoefficients(*(rng.uniform(0, h) for h in hi))


def any_coeffs(rng):
    return InterferenceCoefficients(*rng.uniform(-1, 1, 7))


def with_(ctx, **kw):
    d = dict(subject_cpu=ctx.subject_cpu, subject_pcie=ctx.subject_pcie, same_group=ctx.same_group,
             diff_group=ctx.diff_group, n_core=ctx.n_core)
    d.update(kw)
    return CoLocationContext(**d)


def prop_same_group_monotone(rng):
    c, x = positive_coeffs(rng), random_context(rng)
    bump = rng.uniform(0, 10)
    same = list(x.same_group) or [(0.0, 0.0)]
    i = rng.integers(len(same))
    same[i] = (same[i][0] + bump, same[i][1])
    assert cpu_slowdown(with_(x, same_group=tuple(same)), c) >= cpu_slowdown(x, c) - 1e-12


def prop_diff_total_monotone(rng):
    c, x = positive_coeffs(rng), random_context(rng)
    more = with_(x, diff_group=x.diff_group + (rng.uniform(0, 10),))
    assert cpu_slowdown(more, c) >= cpu_slowdown(x, c) - 1e-12


def prop_u_c_permutation_and_threshold(rng):
    x = random_context(rng, n_core=int(rng.integers(1, 17)))
    perm = with_(x, same_group=tuple(x.same_group[i] for i in rng.permutation(len(x.same_group))),
                 diff_group=tuple(x.diff_group[i] for i in rng.permutation(len(x.diff_group))))
    assert u_c(perm) == pytest.approx(u_c(x))
    assert u_p(perm) == pytest.approx(u_p(x))
    if sum(x.diff_group) <= x.n_core:
        assert u_c(x) == pytest.approx(u_c(with_(x, diff_group=())))


def prop_pcie_linear(rng):
    c, x = any_coeffs(rng), random_context(rng)
    a = rng.uniform(0, 5)
    scaled = with_(x, same_group=tuple((cc, p * a) for cc, p in x.same_group))
    offset = c.lambda2 + c.beta2 * x.subject_pcie
    assert pcie_slowdown(scaled, c) - offset == pytest.approx(
        a * (pcie_slowdown(x, c) - offset), abs=1e-9)


def prop_clamp_and_consistency(rng):
    c, x = any_coeffs(rng), random_context(rng)
    tot = total_slowdown(x, c)
    assert tot >= 0.0
    assert tot == pytest.approx(max(0.0, cpu_slowdown(x, c) + pcie_slowdown(x, c)))
    vec = predict_arrays(c, np.array([u_c(x)]), np.array([x.subject_cpu]),
                         np.array([u_p(x)]), np.array([x.subject_pcie]))
    assert vec[0] == pytest.approx(tot)


PROPERTIES = (prop_same_group_monotone, prop_diff_total_monotone,
              prop_u_c_permutation_and_threshold, prop_pcie_linear, prop_clamp_and_consistency)


def test_criterion_8_interference_properties():
    rng = np.random.default_rng(8)
    cases = 0
    with Budget(30):
        for _ in range(2000):
            for prop in PROPERTIES:
                prop(rng)
                cases += 1
    assert cases == 10_000
