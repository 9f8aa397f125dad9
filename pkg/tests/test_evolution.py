import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from gocpt.baselines import fit_static
from gocpt.evolution import (
    EvolutionError,
    EvolutionStep,
    EvolvingState,
    apply_step,
    fill,
    gen_low_rank,
    gen_mask,
    gen_perturbation,
    growth,
    read_event_log,
    replay,
    stream_general,
    stream_slice_growth,
    update,
    write_event_log,
)
from gocpt.tensor import CooTensor, IndexSet, pof_factorization


def full_state(x):
    return EvolvingState.initial(CooTensor.from_dense(np.asarray(x, float)))


# apply_step -------------------------------------------------------------------


def test_empty_step_is_identity_with_empty_delta():
    s0 = full_state([[1.0, 2], [3, 4]])
    s1 = apply_step(s0, EvolutionStep(()))
    assert s1.shape == s0.shape
    assert len(s1.delta) == 0
    np.testing.assert_array_equal(s1.observed.values, s0.observed.values)


def test_growth_of_fully_observed_matrix():
    s0 = full_state([[1.0, 2], [3, 4]])
    s1 = apply_step(s0, EvolutionStep([growth(0, 1, [[2, 0], [2, 1]], [5.0, 6.0])]))
    assert s1.shape == (3, 2)
    assert len(s1.mask) == 6
    assert len(s1.delta) == 2
    assert s1.prev_shape == (2, 2)


def test_update_changes_one_cell():
    s0 = full_state([[1.0, 2], [3, 4]])
    s1 = apply_step(s0, EvolutionStep([update([[0, 1]], [9.0])]))
    assert s1.shape == s0.shape
    assert len(s1.delta) == 1
    expected_old = s0.mask - IndexSet.from_indices((2, 2), [[0, 1]])
    assert s1.old_mask == expected_old
    assert s1.observed.to_dense()[0, 1] == 9.0


@pytest.mark.parametrize(
    "events, needle",
    [
        ([fill([[0, 0]], [1.0])], r"\(0, 0\)"),  # already observed
        ([update([[2, 0]], [1.0])], r"\(2, 0\)"),  # out of bounds
        ([growth(0, 1, [[1, 0]], [1.0])], r"\(1, 0\)"),  # not in the new slice
        ([growth(0, 1, [[2, 0], [2, 0]], [1.0, 2.0])], r"\(2, 0\)"),  # duplicate
        ([growth(0, 1, [[2, 1]], [1.0]), update([[2, 1]], [2.0])], r"\(2, 1\)"),
    ],
)
def test_invalid_steps_name_the_offending_index(events, needle):
    s0 = full_state([[1.0, 2], [3, 4]])
    with pytest.raises(EvolutionError, match=needle):
        apply_step(s0, EvolutionStep(events))


def test_update_at_unobserved_cell_rejected():
    s0 = EvolvingState.initial(CooTensor((2, 2), [[0, 0]], [1.0]))
    with pytest.raises(EvolutionError, match=r"\(1, 1\)"):
        apply_step(s0, EvolutionStep([update([[1, 1]], [2.0])]))
    with pytest.raises(EvolutionError, match="twice"):
        apply_step(s0, EvolutionStep([growth(0, 1, [[2, 0]], [1.0]),
                                      growth(0, 1, [[3, 0]], [1.0])]))


def test_growth_then_fill_uses_post_growth_bounds():
    s0 = EvolvingState.initial(CooTensor((2, 2), [[0, 0]], [1.0]))
    step = EvolutionStep([growth(1, 1, [[0, 2]], [5.0]), fill([[1, 2], [1, 1]], [6.0, 7.0])])
    s1 = apply_step(s0, step)
    assert s1.shape == (2, 3)
    assert len(s1.delta) == 3


# generators -------------------------------------------------------------------


def test_gen_low_rank_deterministic_and_low_rank():
    m1, x1 = gen_low_rank((6, 5, 7), 3, 11)
    m2, x2 = gen_low_rank((6, 5, 7), 3, 11)
    assert m1 == m2
    np.testing.assert_array_equal(x1, x2)
    fitted = fit_static(CooTensor.from_dense(x1), 3, 200, 1e-9, seed=0)
    assert pof_factorization(x1, fitted) >= 0.999


def test_gen_low_rank_synthetic_configuration():
    model, x = gen_low_rank((50, 50, 500), 5, 1)
    assert x.shape == (50, 50, 500) and model.rank == 5
    assert all(((f >= 0) & (f <= 1)).all() for f in model.factors)


@pytest.mark.parametrize("seed", range(10))
def test_gen_mask_cardinality(seed):
    shape = (7, 9, 11)
    assert len(gen_mask(shape, 0.02, seed)) == round(0.02 * 7 * 9 * 11)
    assert len(gen_mask(shape, 0.37, seed)) == round(0.37 * 7 * 9 * 11)


def test_gen_mask_full_and_completion_scale():
    assert len(gen_mask((3, 4), 1.0, 0)) == 12
    m = gen_mask((145, 145, 200), 0.02, 0)
    assert len(m) == round(0.02 * 145 * 145 * 200)
    with pytest.raises(ValueError):
        gen_mask((3, 3), 0.001, 0)


def test_gen_perturbation_counts_and_magnitude():
    _, x = gen_low_rank((10, 10, 10), 2, 0)
    s = full_state(x)
    step = gen_perturbation(s, 0.02, 0.05, seed=4)
    (ev,) = step.events
    assert ev.kind == "update"
    assert ev.nnz == round(0.02 * 1000)
    base = x[tuple(ev.indices.T)]
    assert np.all(np.abs(ev.values / base - 1) <= 0.05)
    zero = gen_perturbation(s, 0.02, 0.0, seed=4).events[0]
    np.testing.assert_array_equal(zero.values, x[tuple(zero.indices.T)])


def test_stream_slice_growth_counts():
    _, x = gen_low_rank((3, 4, 200), 2, 0)
    s0, steps = stream_slice_growth(x, prep_fraction=0.10)
    assert s0.shape == (3, 4, 20) and len(steps) == 180
    assert all(st.nnz == 12 for st in steps)
    s0, steps = stream_slice_growth(x[:, :, :10], prep_fraction=0.9)
    assert len(steps) == 1


def test_stream_general_lag_one_without_perturbation_is_slice_growth():
    _, x = gen_low_rank((3, 4, 12), 2, 0)
    a0, a = stream_general(x, lag=1, perturb=None, prep_fraction=0.5, seed=3)
    b0, b = stream_slice_growth(x, prep_fraction=0.5)
    assert replay(a0, a)[-1] == replay(b0, b)[-1]


def test_stream_general_lag_three_completes_in_two_steps():
    _, x = gen_low_rank((4, 3, 20), 2, 0)
    s0, steps = stream_general(x, lag=3, perturb=None, prep_fraction=0.5, seed=1)
    states = replay(s0, steps)
    # 12 cells per slice split into three portions of 4
    for t, st_ in enumerate(states, start=1):
        newest = 10 - 1 + t
        counts = np.bincount(st_.observed.indices[:, 2], minlength=st_.shape[2])
        assert counts[newest] == 4
        assert counts[newest - 1] == 8
        assert counts[newest - 2] == 12
        assert (counts[: newest - 1] == 12).all()


def test_stream_general_delta_components_disjoint():
    _, x = gen_low_rank((5, 5, 16), 2, 0)
    s0, steps = stream_general(x, lag=3, perturb=(0.02, 0.05), prep_fraction=0.5, seed=2)
    for step in steps:
        kinds = [e.kind for e in step.events]
        assert kinds == ["grow", "fill", "update"]
        keys = [set(map(tuple, e.indices.tolist())) for e in step.events]
        assert not (keys[0] & keys[1] or keys[0] & keys[2] or keys[1] & keys[2])


def test_stream_general_rejects_bad_lag():
    with pytest.raises(ValueError):
        stream_general(np.ones((2, 2, 4)), lag=0)


# invariants over random streams ----------------------------------------------------


@given(
    st.tuples(st.integers(2, 4), st.integers(2, 4), st.integers(4, 9)),
    st.integers(1, 4),
    st.booleans(),
    st.integers(0, 10**6),
)
def test_stream_invariants(shape, lag, perturb, seed):
    _, x = gen_low_rank(shape, 2, seed)
    s0, steps = stream_general(
        x, lag=lag, perturb=(0.2, 0.05) if perturb else None, prep_fraction=0.5, seed=seed
    )
    prev = s0
    for step, state in zip(steps, replay(s0, steps)):
        assert (state.delta | state.old_mask) == state.mask
        assert len(state.delta & state.old_mask) == 0
        assert all(b >= a for a, b in zip(prev.shape, state.shape))
        updated = {tuple(i) for e in step.events if e.kind == "update"
                   for i in e.indices.tolist()}
        before = prev.observed.to_dense()
        after = state.observed.to_dense()
        for idx in map(tuple, prev.observed.indices.tolist()):
            if idx not in updated:
                assert after[idx] == before[idx]
        prev = state


def test_event_log_round_trip(tmp_path):
    _, x = gen_low_rank((3, 4, 10), 2, 0)
    s0, steps = stream_general(x, lag=3, perturb=(0.1, 0.05), prep_fraction=0.5, seed=9)
    write_event_log(tmp_path / "ev.jsonl", s0, steps)
    r0, rsteps = read_event_log(tmp_path / "ev.jsonl")
    assert r0 == s0
    assert replay(r0, rsteps) == replay(s0, steps)
    write_event_log(tmp_path / "again.jsonl", r0, rsteps)
    assert (tmp_path / "ev.jsonl").read_bytes() == (tmp_path / "again.jsonl").read_bytes()


def test_event_log_errors_carry_line_numbers(tmp_path):
    p = tmp_path / "bad.jsonl"
    p.write_text('{"t": 0, "shape": [2, 2], "events": []}\n'
                 '{"t": 1, "events": [{"type": "shrink", "entries": []}]}\n')
    with pytest.raises(EvolutionError, match="line 2"):
        read_event_log(p)
