import threading

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from asynchzp.collectives import (
    CollectiveError,
    CostModel,
    DTypeUnsupported,
    RankTensor,
    Rendezvous,
    RendezvousBroken,
    ShapeMismatch,
    all_gather,
    all_reduce,
    collective_cost,
    is_bf16_exact,
    reduce_scatter,
    shard,
    to_bf16,
)
from asynchzp.config import ProcessGroup, Topology


def group(g, first=0, spans=False):
    return ProcessGroup("Z3", tuple(range(first, first + g)), spans)


def per_rank(grp, arrays, dtype="fp64"):
    return [RankTensor(r, a, dtype) for r, a in zip(grp.ranks, arrays)]


@settings(max_examples=100, deadline=None)
@given(g=st.integers(1, 16), k=st.integers(1, 8), seed=st.integers(0, 2**31))
def test_shard_then_gather_is_identity(g, k, seed):
    grp = group(g, first=3)
    full = RankTensor(3, np.random.default_rng(seed).standard_normal(g * k))
    out = all_gather(grp, shard(full, grp))
    for t in out:
        assert t.shard_index is None
        assert t.elems.tobytes() == full.elems.tobytes()


@settings(max_examples=100, deadline=None)
@given(g=st.integers(1, 16), k=st.integers(1, 8), seed=st.integers(0, 2**31))
def test_gather_of_reduce_scatter_equals_all_reduce(g, k, seed):
    rng = np.random.default_rng(seed)
    grp = group(g)
    arrays = [rng.standard_normal(g * k) for _ in range(g)]
    scattered = reduce_scatter(grp, per_rank(grp, arrays))
    gathered = all_gather(grp, scattered)
    reduced = all_reduce(grp, per_rank(grp, arrays))
    for a, b in zip(gathered, reduced):
        assert np.array_equal(a.elems, b.elems)


def test_collective_identities_500_cases_fast():
    import time

    rng = np.random.default_rng(5)
    t0 = time.perf_counter()
    for _ in range(500):
        g = int(rng.integers(1, 17))
        grp = group(g)
        n = g * int(rng.integers(1, 33))
        full = RankTensor(0, rng.standard_normal(n))
        assert all(t.elems.tobytes() == full.elems.tobytes() for t in all_gather(grp, shard(full, grp)))
        arrays = [rng.standard_normal(n) for _ in range(g)]
        ga = all_gather(grp, reduce_scatter(grp, per_rank(grp, arrays)))
        ar = all_reduce(grp, per_rank(grp, arrays))
        assert all(np.array_equal(a.elems, b.elems) for a, b in zip(ga, ar))
    assert time.perf_counter() - t0 < 10


def test_reduction_order_is_fixed_by_rank_not_argument_order():
    grp = group(4)
    arrays = [np.array([1e16]), np.array([1.0]), np.array([-1e16]), np.array([1.0])]
    fwd = all_reduce(grp, per_rank(grp, arrays))
    shuffled = all_reduce(grp, per_rank(grp, arrays)[::-1])
    assert fwd[0].elems[0] == shuffled[0].elems[0] == 1.0
    rev = all_reduce(grp, per_rank(grp, arrays), order="reversed")
    assert rev[0].elems[0] == 0.0


def test_size_one_group_is_noop():
    grp = group(1)
    t = RankTensor(0, np.arange(3.0), "fp64", 0)
    assert np.array_equal(all_gather(grp, [t])[0].elems, t.elems)
    assert np.array_equal(reduce_scatter(grp, [t])[0].elems, t.elems)
    assert collective_cost("AR", grp, 1e9, CostModel(Topology(1, 1, 1e9, 1e9))) == 0.0


def test_shape_and_dtype_errors():
    grp = group(2)
    with pytest.raises(ShapeMismatch):
        reduce_scatter(grp, [RankTensor(0, np.ones(4)), RankTensor(1, np.ones(6))])
    with pytest.raises(ShapeMismatch):
        reduce_scatter(grp, [RankTensor(0, np.ones(3)), RankTensor(1, np.ones(3))])
    with pytest.raises(ShapeMismatch):
        all_reduce(grp, [RankTensor(0, np.ones(2)), RankTensor(5, np.ones(2))])
    with pytest.raises(ShapeMismatch):
        all_reduce(grp, [RankTensor(0, np.ones(2), "fp32"), RankTensor(1, np.ones(2), "fp64")])
    with pytest.raises(DTypeUnsupported):
        all_reduce(grp, [RankTensor(0, np.ones(2), "bf16"), RankTensor(1, np.ones(2), "bf16")])
    with pytest.raises(DTypeUnsupported):
        RankTensor(0, np.ones(2), "fp8")
    with pytest.raises(ShapeMismatch):
        all_gather(grp, [RankTensor(0, np.ones(2), shard_index=0), RankTensor(1, np.ones(2), shard_index=0)])


def test_gather_allows_short_trailing_shard_only():
    grp = group(3)
    ok = [RankTensor(r, np.ones(n), shard_index=r) for r, n in zip(range(3), (3, 3, 2))]
    assert len(all_gather(grp, ok)[0]) == 8
    bad = [RankTensor(r, np.ones(n), shard_index=r) for r, n in zip(range(3), (3, 2, 3))]
    with pytest.raises(ShapeMismatch):
        all_gather(grp, bad)


def test_bf16_rounding():
    x = np.array([1.0, 1.0 + 2**-8, 1.0 + 3 * 2**-8, 1.0 + 2**-9, -2.5, 3.0e38], np.float32)
    y = to_bf16(x)
    assert is_bf16_exact(y)
    # ties go to even mantissa
    assert y[1] == 1.0 and y[2] == np.float32(1.0 + 4 * 2**-8)
    assert y[3] == 1.0 and y[4] == -2.5
    assert np.isnan(to_bf16(np.array([np.nan], np.float32)))[0]


@given(st.lists(st.floats(-(2.0**100), 2.0**100, width=32), min_size=1, max_size=32))
def test_bf16_idempotent_and_close(vals):
    x = np.array(vals, np.float32)
    y = to_bf16(x)
    assert np.array_equal(to_bf16(y), y)
    assert np.all(np.abs(y - x) <= np.abs(x) * 2.0**-8 + 2.0**-126)


def test_cost_model_formula():
    topo = Topology(2, 4, intra_bw=100.0, inter_bw=10.0, intra_latency=0.5, inter_latency=2.0)
    model = CostModel(topo)
    intra = ProcessGroup("Z2", (0, 1, 2, 3), False)
    inter = ProcessGroup("Z1", tuple(range(8)), True)
    assert collective_cost("AG", intra, 400.0, model) == pytest.approx(3 * 100 / 100 + 3 * 0.5)
    assert collective_cost("RS", inter, 800.0, model) == pytest.approx(7 * 100 / 10 + 7 * 2.0)
    assert collective_cost("AR", intra, 400.0, model) == 2 * collective_cost("RS", intra, 400.0, model)
    with pytest.raises(ValueError):
        collective_cost("XX", intra, 1.0, model)
    with pytest.raises(ValueError):
        CostModel(topo, algorithm="tree")


def _threaded(grp, fn):
    out, errs = {}, []

    def run(r):
        try:
            out[r] = fn(r)
        except BaseException as exc:
            errs.append(exc)

    threads = [threading.Thread(target=run, args=(r,)) for r in grp.ranks]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    return out, errs


def test_rendezvous_matches_functional_collectives():
    grp = group(4)
    rv = Rendezvous(grp, timeout=5)
    rng = np.random.default_rng(0)
    data = {r: rng.standard_normal(8) for r in grp.ranks}
    out, errs = _threaded(grp, lambda r: [rv.all_reduce(RankTensor(r, data[r], "fp64")) for _ in range(3)])
    assert not errs
    ref = all_reduce(grp, per_rank(grp, [data[r] for r in grp.ranks]))[0].elems
    for r in grp.ranks:
        assert all(np.array_equal(t.elems, ref) for t in out[r])


def test_rendezvous_mismatched_ops_break():
    grp = group(2)
    rv = Rendezvous(grp, timeout=2)

    def fn(r):
        t = RankTensor(r, np.ones(2), "fp64", r)
        return rv.all_gather(t) if r == 0 else rv.all_reduce(t)

    _, errs = _threaded(grp, fn)
    assert errs and all(isinstance(e, CollectiveError) for e in errs)


def test_rendezvous_times_out():
    grp = group(2)
    rv = Rendezvous(grp, timeout=0.05)
    with pytest.raises(RendezvousBroken):
        rv.all_reduce(RankTensor(0, np.ones(2), "fp64"))
