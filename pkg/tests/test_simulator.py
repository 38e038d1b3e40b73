import dataclasses

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from otoffload.model import ConfigurationError
from otoffload.simulator import (
    InvariantViolation,
    SimConfig,
    SimState,
    _stream,
    derive_seed,
    desk_scale,
    generate_arrivals,
    run,
    seed_means,
    step,
    sweep,
)
from otoffload.strategies import Assignment, make_policy, rate_matrix


def tiny(**kw):
    base = dict(num_devices=3, num_edges=2, num_slots=30, arrival_rate=0.5)
    base.update(kw)
    return SimConfig(**base)


def to_node(node_id):
    return lambda snap, rng: Assignment({t.id: node_id for t in snap.pending_tasks})


# config


@pytest.mark.parametrize(
    "field,value",
    [("num_slots", 0), ("arrival_rate", -0.1), ("data_size_max", 0), ("gamma1", 1.5),
     ("arrival_process", "bursty"), ("capacity_horizon", -1.0)],
)
def test_config_validation_names_the_key(field, value):
    with pytest.raises(ConfigurationError) as info:
        SimConfig(**{field: value})
    assert info.value.key == field


def test_desk_scale_defaults():
    cfg = desk_scale()
    assert (cfg.num_devices, cfg.num_edges, cfg.num_slots, cfg.slot_length) == (20, 3, 1000, 0.1)


# arrivals


def test_zero_rate_never_generates():
    cfg = tiny(arrival_rate=0.0)
    for slot in range(20):
        assert generate_arrivals(cfg, slot, _stream(0, 0, slot)) == []


def test_data_size_mean():
    cfg = SimConfig(num_devices=1000, arrival_rate=10.0)
    sizes = []
    for slot in range(10):
        sizes += [t.data_size for t in generate_arrivals(cfg, slot, _stream(1, 0, slot))]
    assert len(sizes) > 90_000
    assert abs(np.mean(sizes) - 250.5) < 5
    assert min(sizes) >= 1 and max(sizes) <= 500
    assert all(s == int(s) for s in sizes[:1000])


def test_arrival_count_mean_is_rate():
    cfg = SimConfig(num_devices=1000, arrival_rate=1.7)
    counts = [len(generate_arrivals(cfg, s, _stream(2, 0, s))) for s in range(20)]
    assert np.mean(counts) / 1000 == pytest.approx(1.7, rel=0.03)


def test_arrivals_deterministic():
    cfg = tiny(arrival_rate=2.0)
    a = generate_arrivals(cfg, 5, _stream(9, 0, 5))
    b = generate_arrivals(cfg, 5, _stream(9, 0, 5))
    assert a == b


def test_higher_rate_arrivals_are_a_superset():
    lo = generate_arrivals(tiny(arrival_rate=0.5, num_devices=50), 3, _stream(4, 0, 3))
    hi = generate_arrivals(tiny(arrival_rate=1.5, num_devices=50), 3, _stream(4, 0, 3))
    key = lambda t: (t.origin_device, t.data_size)
    hi_keys = [key(t) for t in hi]
    for t in lo:
        hi_keys.remove(key(t))


def test_periodic_arrivals():
    cfg = tiny(arrival_rate=0.5, arrival_process="periodic")
    counts = [len(generate_arrivals(cfg, s, _stream(0, 0, s))) for s in range(4)]
    assert counts == [0, 3, 0, 3]


# step


def test_idle_step_changes_nothing():
    cfg = tiny(arrival_rate=0.0)
    state = SimState.initial(cfg)
    state, rec = step(state, make_policy("local"), 0, _stream(0, 0, 0), _stream(0, 1, 0))
    assert rec.generated == rec.completed == 0 and rec.energy == 0.0
    assert all(n.backlog_cycles == 0 for n in state.nodes)


def test_task_filling_one_edge_slot_exactly():
    # 5000 kb at 200 cycles/bit is 1e9 cycles: one full slot of a 10 GHz edge
    cfg = tiny(num_devices=1, num_edges=1, data_size_min=5000, data_size_max=5000,
               arrival_rate=1.0, arrival_process="periodic")
    state = SimState.initial(cfg)
    state, rec = step(state, to_node(1), 0, _stream(0, 0, 0), _stream(0, 1, 0))
    rate = rate_matrix(state.scenario.channel, frozenset({0}))[0, 0]
    assert rec.completed == 1
    assert rec.delays[0] == pytest.approx(5e6 / rate + 0.1, rel=1e-12)
    assert state.nodes[1].backlog_cycles == 0.0
    assert rec.energy == pytest.approx(0.1 * (5e6 / rate + 0.1), rel=1e-12)


def test_single_local_task_of_1000kb():
    cfg = SimConfig(num_devices=1, num_edges=0, num_slots=12, data_size_min=1000,
                    data_size_max=1000, arrival_rate=1.0, arrival_process="periodic")
    state = SimState.initial(cfg)
    policy = make_policy("local")
    state, _ = step(state, policy, 0, _stream(0, 0, 0), _stream(0, 1, 0))
    state.config = cfg.replace(arrival_rate=0.0)  # no further arrivals
    delays = []
    for slot in range(1, 12):
        state, rec = step(state, policy, slot, _stream(0, 0, slot), _stream(0, 1, slot))
        delays += rec.delays
    assert delays == [pytest.approx(1.0, rel=1e-12)]
    assert state.energy == pytest.approx(0.5, rel=1e-12)
    assert state.successes == 1


def test_overload_grows_backlog_each_slot():
    cfg = tiny(num_devices=2, data_size_min=500, data_size_max=500, arrival_rate=1.0,
               arrival_process="periodic")
    state = SimState.initial(cfg)
    backlog = []
    for slot in range(3):
        state, _ = step(state, make_policy("local"), slot, _stream(0, 0, slot), _stream(0, 1, slot))
        backlog.append(state.nodes[0].backlog_cycles)
    # 5e8 cycles arrive, 1e8 drain per slot
    assert backlog == pytest.approx([4e8, 8e8, 12e8])


def test_work_conservation():
    cfg = tiny(arrival_rate=1.5, num_slots=40)
    state = SimState.initial(cfg)
    policy = make_policy("random")
    for slot in range(40):
        state, rec = step(state, policy, slot, _stream(3, 0, slot), _stream(3, 1, slot))
        for n in state.nodes:
            cap = n.profile.compute_capacity * cfg.slot_length
            served = n.served_log[-1]
            assert served <= cap * (1 + 1e-12)
            if n.backlog_cycles > 0:
                assert served == pytest.approx(cap, rel=1e-12)


def test_invariant_check_detects_corruption():
    state = SimState.initial(tiny())
    state.generated = 1
    with pytest.raises(InvariantViolation):
        state.check_invariants(0)
    state.generated = 0
    state.nodes[0].backlog_cycles = -1.0
    with pytest.raises(InvariantViolation):
        state.check_invariants(0)


def test_partial_assignment_is_rejected():
    cfg = tiny(arrival_rate=3.0)
    state = SimState.initial(cfg)
    with pytest.raises(InvariantViolation):
        step(state, lambda snap, rng: Assignment({}), 0, _stream(0, 0, 0), _stream(0, 1, 0))


def test_snapshot_uses_previous_slot_cloud_count():
    cfg = tiny(arrival_rate=2.0, num_devices=4)
    state = SimState.initial(cfg)
    cloud = state.scenario.cloud_id
    seen = []

    def spy(snap, rng):
        seen.append(snap.active_offloaders)
        return to_node(cloud)(snap, rng)

    counts = []
    for slot in range(4):
        state, rec = step(state, spy, slot, _stream(0, 0, slot), _stream(0, 1, slot))
        counts.append(rec.cloud_offloaders)
    assert seen[0] == 1
    assert seen[1:] == [max(c, 1) for c in counts[:-1]]


# run


def test_run_zero_rate():
    m = run(tiny(arrival_rate=0.0), "cloud-edge")
    assert m.avg_task_delay == 0.0 and m.final_blocking_queue == 0.0 and m.peak_blocking_queue == 0.0
    assert m.total_energy == 0.0 and m.offload_success_rate == 0.0 and m.generated_tasks == 0


@pytest.mark.parametrize("strategy", ["cloud-edge", "greedy", "local", "edge", "cloud", "random"])
def test_run_deterministic_and_consistent(strategy):
    cfg = tiny(arrival_rate=1.0, num_slots=40)
    a, b = run(cfg, strategy), run(cfg, strategy)
    assert a == b
    assert 0.0 <= a.offload_success_rate <= 1.0
    assert a.completed_tasks <= a.generated_tasks
    assert a.processing_rate == a.completed_tasks / 40
    assert a.peak_blocking_queue >= a.final_blocking_queue >= 0
    assert all(v >= 0 for v in dataclasses.astuple(a))


@settings(max_examples=15, deadline=None)
@given(
    st.integers(1, 6),
    st.integers(0, 3),
    st.floats(0.0, 3.0),
    st.sampled_from(["cloud-edge", "greedy", "local", "edge", "cloud", "random"]),
    st.integers(0, 2**32),
)
def test_conservation_holds_for_any_small_run(devices, edges, rate, strategy, seed):
    if strategy == "edge" and edges == 0:
        return
    records = []
    cfg = SimConfig(num_devices=devices, num_edges=edges, num_slots=25, arrival_rate=rate, seed=seed)
    m = run(cfg, strategy, records)  # raises InvariantViolation on any broken slot
    assert sum(r.generated for r in records) == m.generated_tasks
    assert sum(r.completed for r in records) == m.completed_tasks
    assert all(r.blocking_kb >= 0 for r in records)


# sweep


def test_sweep_single_row_matches_run():
    base = tiny()
    rows = sweep(base, [0.5], ["greedy"], [3])
    assert len(rows) == 1
    assert rows[0].metrics == run(base.replace(seed=derive_seed(base.seed, 3)), "greedy")


def test_sweep_cardinality_and_order():
    rows = sweep(tiny(num_slots=10), [0.1, 0.5], ["local", "cloud"], [0, 1])
    assert len(rows) == 8
    assert [(r.arrival_rate, r.strategy, r.seed) for r in rows][:4] == [
        (0.1, "local", 0), (0.1, "local", 1), (0.1, "cloud", 0), (0.1, "cloud", 1)]


def test_sweep_grid_extension_keeps_rows():
    base = tiny(num_slots=15)
    small = sweep(base, [0.5], ["random"], [1])
    big = sweep(base, [0.2, 0.5], ["local", "random"], [0, 1])
    match = [r for r in big if (r.arrival_rate, r.strategy, r.seed) == (0.5, "random", 1)]
    assert match[0].metrics == small[0].metrics


def test_sweep_rejects_empty_or_unknown():
    with pytest.raises(ConfigurationError):
        sweep(tiny(), [], ["local"], [0])
    with pytest.raises(ConfigurationError):
        sweep(tiny(), [0.5], ["nosuch"], [0])


def test_seed_means():
    rows = sweep(tiny(num_slots=10), [1.0], ["local"], [0, 1, 2])
    means = seed_means(rows)
    assert means[(1.0, "local")]["completed_tasks"] == pytest.approx(
        np.mean([r.metrics.completed_tasks for r in rows]))


def test_blocking_queue_monotone_for_fixed_strategies():
    base = desk_scale().replace(num_slots=200)
    rates = [0.5, 1.0, 1.5, 2.0]
    rows = sweep(base, rates, ["cloud", "local"], range(5))
    means = seed_means(rows)
    for s in ("cloud", "local"):
        q = [means[(r, s)]["final_blocking_queue"] for r in rates]
        assert all(b >= a for a, b in zip(q, q[1:])), (s, q)


def test_derive_seed_distinct():
    seeds = {derive_seed(0, k) for k in range(100)} | {derive_seed(1, k) for k in range(100)}
    assert len(seeds) == 200
    assert all(0 <= s < 2**63 for s in seeds)
