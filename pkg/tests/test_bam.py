import pytest

from psiot_orch import bam
from psiot_orch.bam import (
    BandwidthConstraints,
    DuplicateLspId,
    LinkState,
    Lsp,
    Model,
    Outcome,
    UnknownLsp,
    Violation,
    admit,
    allocate_path,
    check_link,
    release,
)

import bam_oracle


def link(model, bc=(30, 30, 40), capacity=100, lid="l1"):
    return LinkState(lid, capacity, BandwidthConstraints(Model(model), bc))


def as_oracle(l: LinkState):
    return [{"id": x.lsp_id, "tc": x.tc, "bw": x.bw, "draw": dict(x.draw), "seq": x.seq} for x in l.lsps.values()]


def test_atcs_fits_own_pool():
    l = link("ATCS")
    assert admit(l, 0, 30, "a").outcome is Outcome.GRANTED
    assert l.lsps["a"].draw == {0: 30}


def test_atcs_borrows_from_higher_pool_when_own_and_lower_are_full():
    l = link("ATCS")
    l.lsps["A"] = Lsp("A", 2, 40, {2: 40}, seq=0)
    l.lsps["B"] = Lsp("B", 2, 30, {1: 30}, seq=1)
    l.next_seq = 2
    assert bam_oracle.decide(l.bc, as_oracle(l), 1, 30) == ("granted", (), {0: 30})
    assert admit(l, 1, 30, "C").outcome is Outcome.GRANTED
    assert l.lsps["C"].draw == {0: 30}

    # owner of pool 0 reclaims it
    assert bam_oracle.decide(l.bc, as_oracle(l), 0, 30) == ("preempted", ("C",), {0: 30})
    d = admit(l, 0, 30, "D")
    assert d.outcome is Outcome.PREEMPTED
    assert d.preempted == ("C",)
    assert "C" not in l.lsps
    assert l.lsps["D"].draw == {0: 30}
    assert check_link(l) == []


def test_mam_class_cap():
    l = link("MAM")
    before = l.serialize()
    d = admit(l, 0, 31, "x")
    assert d.outcome is Outcome.DENIED and d.reason == "InsufficientBandwidth"
    assert l.serialize() == before


def test_rdm_nested_sums():
    l = link("RDM")
    assert admit(l, 0, 100, "x").granted
    assert not admit(l, 2, 1, "y").granted
    # the lowest class is capped at its own constraint
    l2 = link("RDM")
    assert admit(l2, 2, 40, "a").granted
    assert not admit(l2, 2, 1, "b").granted
    assert not admit(l2, 1, 31, "c").granted  # classes 1 and 2 share 30 + 40
    assert admit(l2, 1, 30, "c").granted
    assert admit(l2, 0, 30, "d").granted


def test_duplicate_and_invalid_requests():
    l = link("ATCS")
    admit(l, 0, 10, "a")
    with pytest.raises(DuplicateLspId):
        admit(l, 1, 10, "a")
    with pytest.raises(ValueError):
        admit(l, 1, 0, "b")


def test_release_roundtrip():
    l = link("ATCS")
    empty = l.to_dict()["lsps"]
    admit(l, 1, 30, "a")
    assert release(l, "a") == 30
    assert l.to_dict()["lsps"] == empty
    assert l.pool_free() == [30, 30, 40]
    with pytest.raises(UnknownLsp):
        release(l, "nope")


def test_release_leaves_loans_in_place():
    l = link("ATCS")
    admit(l, 0, 30, "native0")
    admit(l, 1, 30, "native1")
    admit(l, 2, 40, "native2")
    release(l, "native1")
    admit(l, 2, 20, "loan")  # pool 2 full, lower pools none, borrows pool 1
    assert l.lsps["loan"].draw == {1: 20}
    assert release(l, "native0") == 30
    assert l.lsps["loan"].draw == {1: 20}
    assert bam_oracle.free_pools(l.bc, as_oracle(l)) == [30, 10, 0] == l.pool_free()
    assert check_link(l) == []


def test_check_link_flags_hand_built_violations():
    l = link("ATCS")
    l.lsps["a"] = Lsp("a", 0, 60, {0: 30, 1: 30})
    l.lsps["b"] = Lsp("b", 1, 30, {1: 30})
    assert check_link(l) == [Violation("PoolOverflow", 1)]
    l.lsps["c"] = Lsp("c", 2, 40, {2: 40})
    assert Violation("CapacityExceeded") in check_link(l)
    m = link("MAM")
    m.lsps["a"] = Lsp("a", 0, 10, {1: 10})
    assert Violation("ForeignDraw", "a") in check_link(m)
    r = link("RDM")
    r.lsps["a"] = Lsp("a", 2, 41, {2: 41})
    assert Violation("NestedCapExceeded", 2) in check_link(r)
    bad = link("ATCS")
    bad.lsps["a"] = Lsp("a", 0, 10, {0: 5})
    assert Violation("DrawMismatch", "a") in check_link(bad)
    assert str(Violation("PoolOverflow", 1)) == "PoolOverflow(1)"


def test_constraint_validation():
    with pytest.raises(ValueError):
        link("ATCS", bc=(30, 30, 30))
    with pytest.raises(ValueError):
        link("MAM", bc=(30, 30, 101))
    link("MAM", bc=(60, 60, 60))  # oversubscribed MAM is allowed
    with pytest.raises(ValueError):
        LinkState("x", 100, BandwidthConstraints(Model.ATCS, (30, 30, 40), devolution=True))


def test_proportional_bc_sums_to_capacity():
    assert bam.proportional_bc(1_000_000, (0.45, 0.35, 0.25)) == (428_572, 333_333, 238_095)
    assert sum(bam.proportional_bc(7, (1, 1, 1))) == 7


def test_max_admissible_matches_admission_boundary():
    for model in ("MAM", "RDM", "ATCS"):
        l = link(model)
        admit(l, 1, 20, "a")
        admit(l, 2, 25, "b")
        for tc in range(3):
            room = bam.max_admissible(l, tc)
            if room:
                snap = l.snapshot()
                assert admit(l, tc, room, "probe").outcome is Outcome.GRANTED
                l.restore(snap)
            before = l.serialize()
            d = admit(l, tc, room + 1, "probe")
            if d.outcome is Outcome.DENIED:
                assert l.serialize() == before
            else:
                assert model == "ATCS" and d.outcome is Outcome.PREEMPTED


# -- paths ---------------------------------------------------------------------


def path_net(bc=(250_000, 350_000, 400_000)):
    return {lid: link("ATCS", bc, 1_000_000, lid) for lid in ("l1", "l2", "l3")}


def test_allocate_path_on_empty_links():
    net = path_net()
    d = allocate_path(net, ["l1", "l2"], 0, 135_000, "x")
    assert d.outcome is Outcome.GRANTED
    assert "x" in net["l1"].lsps and "x" in net["l2"].lsps and "x" not in net["l3"].lsps


def test_allocate_path_rolls_back_on_saturated_hop():
    net = path_net()
    assert allocate_path(net, ["l2"], 2, 1_000_000, "fill").granted
    before = {k: v.serialize() for k, v in net.items()}
    d = allocate_path(net, ["l1", "l2"], 2, 10, "x")
    assert d.outcome is Outcome.DENIED and d.link_id == "l2"
    assert {k: v.serialize() for k, v in net.items()} == before


def test_preemption_propagates_across_links():
    bc = (10, 10, 80)
    net = {lid: link("ATCS", bc, 100, lid) for lid in ("l1", "l2", "l3")}
    assert allocate_path(net, ["l1", "l2"], 2, 100, "borrower").granted
    assert net["l1"].lsps["borrower"].draw == {2: 80, 1: 10, 0: 10}
    assert allocate_path(net, ["l1"], 1, 10, "owner").outcome is Outcome.PREEMPTED
    assert all("borrower" not in l.lsps for l in net.values())
    # independent check: pool sums recomputed over every link from scratch
    for l in net.values():
        assert bam_oracle.free_pools(bc, as_oracle(l)) == l.pool_free()
        assert check_link(l) == []
    assert net["l2"].pool_free() == [10, 10, 80]


def test_preemption_rollback_restores_victims_everywhere():
    bc = (10, 10, 80)
    net = {lid: link("ATCS", bc, 100, lid) for lid in ("l1", "l2")}
    assert allocate_path(net, ["l1"], 2, 100, "v1").granted  # l1 full, v1 borrows pools 1 and 0
    assert allocate_path(net, ["l2"], 1, 100, "own").granted  # l2 full, pool 1 held natively
    solo = {"l1": link("ATCS", bc, 100, "l1")}
    solo["l1"].restore(net["l1"].snapshot())
    assert allocate_path(solo, ["l1"], 1, 10, "probe").preempted == ("v1",)
    before = {k: v.serialize() for k, v in net.items()}
    d = allocate_path(net, ["l1", "l2"], 1, 10, "x")
    assert d.outcome is Outcome.DENIED and d.link_id == "l2"
    assert {k: v.serialize() for k, v in net.items()} == before


def test_path_headroom_counts_own_reservation():
    net = path_net()
    allocate_path(net, ["l1", "l2"], 0, 135_000, "mine")
    allocate_path(net, ["l2"], 0, 800_000, "other")
    assert bam.path_headroom(net, ["l1", "l2"], 0) == 65_000
    assert bam.path_headroom(net, ["l1", "l2"], 0, own="mine") == 200_000
