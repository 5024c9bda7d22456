import random

import pytest

from skybridge.choreographer import (Choreographer, InsufficientResources, Node,
                                     NodePool, SlaDictionary, SlaEntry,
                                     UnknownServant, UnknownService,
                                     resolve_resources, schedule)
from skybridge.manifest import ResourceQuota
from skybridge.protocol import SlaDeclaration, SlaTimes

from conftest import make_pool


def times(t_desire, t_max=None):
    return SlaDeclaration(times=SlaTimes(t_desire, t_max or t_desire * 3))


DEFAULT = ResourceQuota(1000, 128)


class TestResolveResources:
    def setup_method(self):
        self.dictionary = SlaDictionary([
            SlaEntry("detect", 100, ResourceQuota(4000, 1024)),
            SlaEntry("detect", 500, ResourceQuota(1000, 256)),
        ])

    def test_explicit_resources_pass_through(self):
        sla = SlaDeclaration(resources=ResourceQuota(2000, 512))
        assert resolve_resources("detect", sla, self.dictionary, DEFAULT) \
            == ResourceQuota(2000, 512)

    def test_smallest_qualifying_entry(self):
        assert resolve_resources("detect", times(80), self.dictionary, DEFAULT) \
            == ResourceQuota(4000, 1024)
        assert resolve_resources("detect", times(100), self.dictionary, DEFAULT) \
            == ResourceQuota(4000, 1024)
        assert resolve_resources("detect", times(101), self.dictionary, DEFAULT) \
            == ResourceQuota(1000, 256)

    def test_largest_capability_fallback(self):
        # no entry with t_desire_ms_max >= 50 would exist if both maxima were
        # below; here 50 qualifies, so push below the smallest maximum
        dictionary = SlaDictionary([
            SlaEntry("detect", 100, ResourceQuota(4000, 1024)),
            SlaEntry("detect", 500, ResourceQuota(1000, 256)),
        ])
        sla = times(600, 1200)  # larger than every t_desire_ms_max
        assert resolve_resources("detect", sla, dictionary, DEFAULT) \
            == ResourceQuota(1000, 256)
        # and for an unreachable small t_desire the rule still qualifies the
        # 100 entry; totality check for a service with no entries at all:
        assert resolve_resources("mapper", times(50), dictionary, DEFAULT) == DEFAULT

    def test_unsatisfiable_t_desire_uses_largest_capability(self):
        dictionary = SlaDictionary([
            SlaEntry("detect", 100, ResourceQuota(4000, 1024)),
            SlaEntry("detect", 50, ResourceQuota(8000, 2048)),
        ])
        sla = times(20, 40)  # below every maximum? no: 50 and 100 both >= 20
        assert resolve_resources("detect", sla, dictionary, DEFAULT) \
            == ResourceQuota(8000, 2048)
        sla = times(200, 600)  # nothing qualifies -> largest t_desire_ms_max
        assert resolve_resources("detect", sla, dictionary, DEFAULT) \
            == ResourceQuota(4000, 1024)

    def test_duplicate_entries_rejected(self):
        with pytest.raises(ValueError):
            SlaDictionary([
                SlaEntry("detect", 100, ResourceQuota(4000, 1024)),
                SlaEntry("detect", 100, ResourceQuota(1000, 256)),
            ])


class TestSchedule:
    def test_deterministic_tie_break(self):
        pool = make_pool(2, cpu=4000, mem=4096)
        assert schedule(ResourceQuota(1000, 1024), pool, "s1") == "node-a"

    def test_too_large_quota_rejected_without_allocation(self):
        pool = make_pool(2, cpu=4000, mem=4096)
        with pytest.raises(InsufficientResources):
            schedule(ResourceQuota(8000, 1024), pool, "s1")
        assert pool.snapshot()["node-a"]["allocated"] == []

    def test_best_fit_on_memory(self):
        pool = NodePool([Node("node-a", 8000, 8192), Node("node-b", 8000, 2048)])
        # node-b has less free memory and still fits: best fit picks it
        assert pool.allocate("s1", ResourceQuota(1000, 1024)) == "node-b"

    def test_exact_fill_then_reject(self):
        pool = make_pool(2, cpu=2000, mem=2048)
        quota = ResourceQuota(1000, 1024)
        placed = [pool.allocate(f"s{i}", quota) for i in range(4)]
        assert placed == ["node-a", "node-a", "node-b", "node-b"]
        with pytest.raises(InsufficientResources):
            pool.allocate("s5", quota)
        pool.free("s0")
        assert pool.allocate("s5", quota) == "node-a"


class TestServantLifecycle:
    def test_stateful_sessions_get_distinct_exclusive_servants(self, choreographer):
        a = choreographer.instantiate("mapper", "sessA", times(400, 800))
        b = choreographer.instantiate("mapper", "sessB", times(400, 800))
        assert a.servant_id != b.servant_id
        assert a.owner_session == "sessA" and b.owner_session == "sessB"

    def test_stateless_sessions_share(self, choreographer):
        a = choreographer.instantiate("detect", "sessA", times(80))
        b = choreographer.instantiate("detect", "sessB", times(80))
        assert a.servant_id == b.servant_id
        assert a.owner_session == ""

    def test_larger_sla_creates_second_shared_servant(self, choreographer):
        small = choreographer.instantiate("detect", "sessA", times(200))   # 1000 mc
        big = choreographer.instantiate("detect", "sessB", times(50))      # 4000 mc
        assert small.servant_id != big.servant_id
        # a third small request reuses the first servant (creation order scan)
        again = choreographer.instantiate("detect", "sessC", times(200))
        assert again.servant_id == small.servant_id

    def test_unknown_service(self, choreographer):
        with pytest.raises(UnknownService):
            choreographer.instantiate("nope", "sessA", times(100))

    def test_release_exclusive_restores_capacity(self, choreographer):
        free0 = choreographer.pool.snapshot()
        rec = choreographer.instantiate("mapper", "sessA", times(400, 800))
        assert choreographer.release(rec.servant_id, "sessA") is True
        assert choreographer.record(rec.servant_id).state == "terminated"
        assert choreographer.pool.snapshot() == free0

    def test_shared_release_is_reference_counted(self, choreographer):
        a = choreographer.instantiate("detect", "sessA", times(80))
        choreographer.instantiate("detect", "sessB", times(80))
        assert choreographer.release(a.servant_id, "sessA") is False
        assert choreographer.record(a.servant_id).state != "terminated"
        assert choreographer.release(a.servant_id, "sessB") is True

    def test_double_release(self, choreographer):
        rec = choreographer.instantiate("mapper", "sessA", times(400, 800))
        choreographer.release(rec.servant_id, "sessA")
        with pytest.raises(UnknownServant):
            choreographer.release(rec.servant_id, "sessA")

    def test_state_transitions_forward_only(self, choreographer):
        rec = choreographer.instantiate("mapper", "sessA", times(400, 800))
        rec.advance("running")
        choreographer.terminate(rec.servant_id)
        with pytest.raises(ValueError):
            rec.advance("running")


def test_conservation_random_sequences(choreographer):
    """Short randomized soak of allocate/release against an independent ledger;
    the acceptance suite runs the full-size version."""
    _run_conservation_sequences(n_sequences=200, seed0=7)


def _run_conservation_sequences(n_sequences, seed0, ops_per_seq=12):
    from skybridge.manifest import parse_manifest
    from skybridge import demo

    for k in range(n_sequences):
        rng = random.Random(seed0 + k)
        pool = NodePool([Node("node-a", 6000, 4096), Node("node-b", 4000, 6144)])
        ch = Choreographer(SlaDictionary([]), pool)
        ch.register_service(parse_manifest(demo.detector_manifest_bytes()))
        ch.register_service(parse_manifest(demo.mapper_manifest_bytes()))
        ledger = {}  # servant_id -> (node_id, quota)
        live_holders = {}  # servant_id -> set of sessions

        totals = {n.node_id: (n.cpu_millicores_total, n.memory_mb_total)
                  for n in pool.nodes}

        def assert_conserved():
            used = {nid: [0, 0] for nid in totals}
            for node_id, quota in ledger.values():
                used[node_id][0] += quota.cpu_millicores
                used[node_id][1] += quota.memory_mb
            for nid, (cpu_t, mem_t) in totals.items():
                assert used[nid][0] <= cpu_t and used[nid][1] <= mem_t

        for _ in range(ops_per_seq):
            if ledger and rng.random() < 0.4:
                servant_id = rng.choice(sorted(ledger))
                session = rng.choice(sorted(live_holders[servant_id]))
                terminated = ch.release(servant_id, session)
                if terminated:
                    del ledger[servant_id]
                    del live_holders[servant_id]
                else:
                    live_holders[servant_id].discard(session)
            else:
                service = rng.choice(["detect", "mapper"])
                session = f"sess{rng.randrange(6)}"
                quota = ResourceQuota(rng.choice([500, 1000, 2000, 3000]),
                                      rng.choice([256, 512, 1024, 2048]))
                try:
                    rec = ch.instantiate(service, session,
                                         SlaDeclaration(resources=quota))
                except InsufficientResources:
                    assert_conserved()
                    continue
                ledger[rec.servant_id] = (rec.node_id, rec.quota)
                live_holders.setdefault(rec.servant_id, set()).add(session)
            assert_conserved()
