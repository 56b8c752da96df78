import pytest
from hypothesis import given
from hypothesis import strategies as st

from asynchzp.compare import (
    cp_group_interaction,
    graph_comm_volume,
    hzp_comm_volume,
    hzp_microbatch_volume,
    sweep_rows,
    tp_comm_volume,
)
from asynchzp.config import ModelSpec, ParallelConfig, Topology
from asynchzp.sched import GraphPolicy

from _graphs import graph_for

SPEC = ModelSpec("d", num_layers=8, params_per_layer=1_000_000, hidden_size=1024,
                 seq_len=8192, micro_batch_size=1, num_microbatches=4)


def test_tp_volume_formula():
    # 8 collectives, each moving (tp-1)/tp of seq*hidden*2 bytes
    assert tp_comm_volume(SPEC, 4) == 8 * 8192 * 1024 * 2 * 3 / 4
    assert tp_comm_volume(SPEC, 1) == 0.0
    assert tp_comm_volume(SPEC, 4, cp=2) == tp_comm_volume(SPEC, 4) / 2
    with pytest.raises(ValueError):
        tp_comm_volume(SPEC, 0)


def test_recompute_adds_forward_share():
    base = tp_comm_volume(SPEC, 8)
    rc = tp_comm_volume(SPEC, 8, recompute=True)
    assert rc == pytest.approx(base * 1.5)
    assert rc - base == pytest.approx(base * 4 / 8)


@given(s=st.sampled_from([1024, 4096, 8192, 32768, 131072]), k=st.integers(2, 8))
def test_tp_linear_and_hzp_constant_in_seq_len(s, k):
    from dataclasses import replace

    cfg = ParallelConfig(8, 8, 4, 4)
    a, b = replace(SPEC, seq_len=s), replace(SPEC, seq_len=s * k)
    assert tp_comm_volume(b, 8) == k * tp_comm_volume(a, 8)
    assert hzp_comm_volume(a, cfg) == hzp_comm_volume(b, cfg)


def test_sweep_ratios():
    rows = sweep_rows(SPEC, ParallelConfig(8, 8, 4, 4, tp=1), [8192, 32768, 131072])
    assert {r["hzp_bytes"] for r in rows} == {rows[0]["hzp_bytes"]}
    assert all(r["tp_bytes"] == 0 for r in rows)
    rows = sweep_rows(SPEC, ParallelConfig(2, 2, 2, 2, tp=4), [8192, 32768, 131072])
    tp = [r["tp_bytes"] for r in rows]
    assert tp[1] == 4 * tp[0] and tp[2] == 16 * tp[0]


def test_hzp_volume_matches_graph():
    cfg = ParallelConfig(8, 8, 4, 4)
    g = graph_for(8, 4)
    sizes = {"AG-param": 4, "RS-grad": 4, "AR-dzp": 2, "AG-post-step": 8}
    assert graph_comm_volume(g, sizes) == pytest.approx(hzp_comm_volume(SPEC, cfg))
    assert hzp_microbatch_volume(SPEC, cfg) * 4 < hzp_comm_volume(SPEC, cfg)


def test_hzp_volume_with_reuse_matches_graph():
    spec = ModelSpec("d", 8, 1_000_000, num_microbatches=8, seq_len=2048)
    cfg = ParallelConfig(4, 4, 2, 2, pp=2)
    g = graph_for(8, 8, dp=4, z=(4, 2, 2), pp=2, policy=GraphPolicy(reuse=True))
    sizes = {"AG-param": 2, "RS-grad": 2, "AR-dzp": 2, "AG-post-step": 4}
    expect = hzp_comm_volume(spec, cfg, reuse_savings=g.meta["reuse"])
    assert graph_comm_volume(g, sizes) == pytest.approx(expect)
    assert expect < hzp_comm_volume(spec, cfg)


def test_cp_interaction_flags():
    topo = Topology(4, 8, 400e9, 25e9)
    r = cp_group_interaction(ParallelConfig(4, 4, 8, 8, cp=8), topo)
    assert r.cp_intra_node and r.z3_intra_node and r.shares_group_with_cp
    assert not r.tp_cp_conflict and not r.sharding_only
    r = cp_group_interaction(ParallelConfig(8, 8, 8, 16, tp=2, cp=8), Topology(64, 2, 400e9, 25e9))
    assert r.tp_cp_conflict and not r.cp_intra_node and not r.z3_intra_node
    assert cp_group_interaction(ParallelConfig(8, 8, 8, 8), topo).sharding_only
    assert set(r.as_dict()) >= {"cp", "z2", "z3", "tp_cp_conflict"}
