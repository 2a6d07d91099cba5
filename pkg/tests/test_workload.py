import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from marlsched.workload import (
    CountsFile, JobOptions, JobSpec, Poisson, Uniform, WorkloadError, encode_job_demand,
    encode_job_onehot, generate_trace, load_profiles, read_counts_file,
)


def job(**kw):
    base = dict(job_id=0, model_type_id=0, num_workers=3, num_ps=2, worker_demand=(3.0, 1.0),
                ps_demand=(2.0, 0.0), max_epochs=30, arrival_interval=0, home_scheduler=0)
    base.update(kw)
    return JobSpec(**base)


def test_bundled_profiles():
    profiles = load_profiles()
    assert len(profiles) == 8
    assert [p.model_type_id for p in profiles] == list(range(8))
    assert profiles[1].name == "VGG-16"


def test_profiles_reject_duplicate_ids(tmp_path):
    rows = [dict(model_type_id=0, name="a", standalone_epoch_time=1, iterations_per_epoch=1,
                 gradient_size=1, cpu_util=1, pcie_util=1)] * 2
    with pytest.raises(WorkloadError):
        load_profiles(rows)


def test_profiles_reject_non_positive():
    rows = [dict(model_type_id=0, name="a", standalone_epoch_time=0, iterations_per_epoch=1,
                 gradient_size=1, cpu_util=1, pcie_util=1)]
    with pytest.raises(WorkloadError):
        load_profiles(rows)


def test_onehot_examples():
    assert encode_job_onehot(job(model_type_id=0), 3).tolist() == [1, 0, 0]
    assert encode_job_onehot(job(model_type_id=2), 3).tolist() == [0, 0, 1]
    assert encode_job_onehot(job(model_type_id=5), 8).tolist() == [0, 0, 0, 0, 0, 1, 0, 0]
    with pytest.raises(WorkloadError):
        encode_job_onehot(job(model_type_id=3), 3)


def test_demand_examples():
    assert encode_job_demand(job()).tolist() == [3, 3, 1, 2, 2, 0]
    allreduce = encode_job_demand(job(num_ps=0, ps_demand=(0.0, 0.0)))
    assert allreduce[3:].tolist() == [0, 0, 0]
    one = job(num_workers=1, num_ps=1, worker_demand=(6.0, 1.0), ps_demand=(4.0, 0.0))
    assert encode_job_demand(one).tolist() == [1, 6, 1, 1, 4, 0]


def test_jobspec_invariants():
    with pytest.raises(WorkloadError):
        job(num_workers=0)
    with pytest.raises(WorkloadError):
        job(max_epochs=0)
    with pytest.raises(WorkloadError):
        job(worker_demand=(-1.0, 1.0))


def test_uniform_paper_scale_count():
    trace = generate_trace(Uniform(15), 100, 20, seed=0)
    assert len(trace) == 30000
    counts = np.zeros((100, 20), dtype=int)
    for j in trace.jobs:
        counts[j.arrival_interval, j.home_scheduler] += 1
    assert (counts == 15).all()


def test_poisson_zero_is_empty():
    assert len(generate_trace(Poisson(0), 10, 3, seed=1)) == 0


def test_generation_is_deterministic():
    a = generate_trace(Poisson(15), 20, 4, seed=7)
    b = generate_trace(Poisson(15), 20, 4, seed=7)
    assert a == b
    assert a != generate_trace(Poisson(15), 20, 4, seed=8)


def test_poisson_mean_rate():
    trace = generate_trace(Poisson(3.0), 10_000, 1, seed=3)
    assert abs(len(trace) / 10_000 - 3.0) < 0.05 * 3.0


def test_generated_jobs_respect_ranges():
    opts = JobOptions()
    trace = generate_trace(Poisson(10), 10_000, 1, seed=11, options=opts)
    assert len(trace) > 90_000
    w = np.array([j.num_workers for j in trace.jobs])
    p = np.array([j.num_ps for j in trace.jobs])
    e = np.array([j.max_epochs for j in trace.jobs])
    t = np.array([j.model_type_id for j in trace.jobs])
    assert w.min() == 1 and w.max() == 4
    assert p.min() == 1 and p.max() == 4
    assert e.min() >= 20 and e.max() <= 60
    assert set(t.tolist()) == set(range(8))
    arrivals = [j.arrival_interval for j in trace.jobs]
    assert arrivals == sorted(arrivals)


def test_split_is_per_scheduler_and_rebased():
    trace = generate_trace(Uniform(4), 30, 2, seed=0)
    train, test = trace.split_train_test(0.9)
    for s in range(2):
        mine = [j for j in trace.jobs if j.home_scheduler == s]
        n_test = sum(1 for j in test.jobs if j.home_scheduler == s)
        assert n_test == len(mine) - round(0.9 * len(mine))
    assert min(j.arrival_interval for j in test.jobs) == 0
    assert min(j.arrival_interval for j in train.jobs) == 0
    assert {j.job_id for j in train.jobs}.isdisjoint({j.job_id for j in test.jobs})
    assert train.split == "train" and test.split == "test"


def test_counts_file(tmp_path):
    path = tmp_path / "counts.csv"
    path.write_text("s0,s1\n1,2\n0,3\n")
    assert read_counts_file(path, 2).tolist() == [[1, 2], [0, 3]]
    trace = generate_trace(CountsFile(str(path)), 5, 2, seed=0)
    assert len(trace) == 6
    with pytest.raises(WorkloadError):
        read_counts_file(path, 3)
    with pytest.raises(WorkloadError):
        read_counts_file(tmp_path / "missing.csv", 1)


def test_trace_csv(tmp_path):
    trace = generate_trace(Uniform(1), 2, 1, seed=0)
    trace.to_csv(tmp_path / "t.csv")
    lines = (tmp_path / "t.csv").read_text().splitlines()
    assert lines[0] == "job_id,scheduler,interval,type,workers,ps,epochs"
    assert len(lines) == 3


@settings(max_examples=100, deadline=None)
@given(st.floats(0, 20), st.integers(1, 30), st.integers(1, 5), st.integers(0, 2**31))
def test_trace_is_pure(rate, horizon, schedulers, seed):
    a = generate_trace(Uniform(rate), horizon, schedulers, seed)
    assert a == generate_trace(Uniform(rate), horizon, schedulers, seed)
    for j in a.jobs:
        assert 1 <= j.num_workers <= 4 and 0 <= j.num_ps <= 4 and j.max_epochs >= 1
