import asyncio
import json
import random

import pytest
from hypothesis import given, settings, strategies as st

from skybridge import demo
from skybridge.choreographer import SlaDictionary
from skybridge.harness.network import NetworkModel, NetworkSegment
from skybridge.harness.scenario import SimCloud, build_payload
from skybridge.harness.vtime import run_virtual
from skybridge.manifest import parse_manifest
from skybridge.stub import (KeepaliveMonitor, SatisfactionState, ServiceDown,
                            ServiceStub, local_result_equivalence,
                            timeout_marker_ms, update_satisfaction)
from skybridge.stubgen import generate_stub

from reference_policy import policy_trace


def state(q=10.0, qt=10, t_desire=100, t_max=300, local=False, cap=None):
    return SatisfactionState(q=q, q_threshold=qt, t_desire_ms=t_desire,
                             t_max_ms=t_max, local_running=local,
                             q_cap=cap if cap is not None else 4.0 * qt)


class TestUpdateSatisfaction:
    def test_fast_response_plus_two(self):
        s, action = update_satisfaction(state(q=10), 80)
        assert s.q == 12 and action is None

    def test_halving_starts_local(self):
        s, action = update_satisfaction(state(q=16), 400)
        assert s.q == 8 and action == "start_local" and s.local_running

    def test_recovery_stops_local(self):
        s, action = update_satisfaction(state(q=9, local=True), 90)
        assert s.q == 11 and action == "stop_local" and not s.local_running

    def test_middle_band_plus_one(self):
        s, action = update_satisfaction(state(q=10), 200)
        assert s.q == 11 and action is None

    def test_boundaries_are_inclusive(self):
        assert update_satisfaction(state(q=10), 100)[0].q == 12   # t == t_desire
        assert update_satisfaction(state(q=10), 300)[0].q == 11   # t == t_max
        assert update_satisfaction(state(q=10), 301)[0].q == 5    # just above

    def test_exact_threshold_is_actionless(self):
        # q' == threshold must not start nor stop (strict inequalities)
        s, action = update_satisfaction(state(q=9, local=False), 200)  # 9+1 == 10
        assert s.q == 10 and action is None
        s, action = update_satisfaction(state(q=9, local=True), 200)
        assert s.q == 10 and action is None
        s, action = update_satisfaction(state(q=20, local=True), 400)  # 20/2 == 10
        assert s.q == 10 and action is None

    def test_q_cap_clamps_growth(self):
        s, _ = update_satisfaction(state(q=39.5), 50)
        assert s.q == 40.0
        s, _ = update_satisfaction(state(q=40.0), 250)
        assert s.q == 40.0

    def test_hand_trace_from_module_example(self):
        s = state(q=10, cap=1000.0)
        expected_q = [5, 2.5, 4.5, 6.5, 8.5, 10.5]
        expected_action = ["start_local", None, None, None, None, "stop_local"]
        for t, eq, ea in zip([400, 400, 90, 90, 90, 90], expected_q, expected_action):
            s, action = update_satisfaction(s, t)
            assert s.q == eq
            assert action == ea

    @settings(max_examples=200)
    @given(st.floats(min_value=0, max_value=40), st.lists(
        st.floats(min_value=0, max_value=1200), min_size=1, max_size=50))
    def test_matches_reference_interpreter(self, q0, ts):
        s = state(q=q0)
        got_q, got_actions = [], []
        for t in ts:
            s, action = update_satisfaction(s, t)
            got_q.append(s.q)
            got_actions.append(action)
        exp_q, exp_actions = policy_trace(ts, 100, 300, 10, q0, 40.0)
        assert got_q == exp_q
        assert got_actions == exp_actions

    @given(st.floats(min_value=0, max_value=2000),
           st.floats(min_value=0, max_value=160))
    def test_monotone_regions(self, t, q0):
        s0 = state(q=min(q0, 40.0))
        s1, _ = update_satisfaction(s0, t)
        if t <= 100:
            assert s1.q >= s0.q
        if t > 300:
            assert s1.q <= s0.q


class TestKeepaliveMonitor:
    def test_three_misses_not_two(self):
        m = KeepaliveMonitor(miss_limit=3)
        assert m.tick() is None          # first ping sent
        assert m.tick() is None          # miss 1
        assert m.tick() is None          # miss 2
        assert m.tick() == "link_down"   # miss 3
        assert m.tick() is None          # stays down, no repeat event
        assert m.pong() == "link_up"
        assert m.pong() is None

    def test_pong_between_ticks_resets(self):
        m = KeepaliveMonitor(miss_limit=3)
        for _ in range(10):
            assert m.tick() is None
            assert m.pong() is None
        assert not m.down


# -- live behavior in virtual time (racing / failover / purity) ---------------


def make_cloud():
    dictionary = SlaDictionary.from_json(json.dumps(demo.default_sla_dictionary_doc()))
    return SimCloud([demo.detector_manifest_bytes(), demo.mapper_manifest_bytes()],
                    dictionary=dictionary)


def img(i=0):
    return build_payload({"schema": "image_rgb", "width": 32, "height": 32}, i, 7, "t")


def test_remote_wins_when_local_not_running():
    async def main():
        cloud = make_cloud()
        net = NetworkModel.flat(base_latency_ms=10, rng=random.Random(1))
        stub, link = cloud.stub("detect", network=net, t_desire_ms=100, t_max_ms=300,
                                enable_keepalive=False)
        await stub.start()
        out = await stub.call("detect", img())
        await out.accounted
        assert out.winner == "remote"
        assert out.t_local_ms is None
        assert out.t_remote_ms == pytest.approx(out.serving_ms)
        assert 60 < out.serving_ms < 100
        await stub.close(); await link.close(); await cloud.shutdown()
    run_virtual(main())


def test_local_wins_race_when_remote_stalls_and_marker_feeds_q():
    async def main():
        cloud = make_cloud()
        # grant is fast (segment 0); calls crawl (segment 1): remote always late
        slow = NetworkModel([NetworkSegment(0, 0, base_latency_ms=5),
                             NetworkSegment(1, 2**31, base_latency_ms=5000)],
                            random.Random(2))
        stub, link = cloud.stub("detect", network=slow, t_desire_ms=100, t_max_ms=300,
                                enable_keepalive=False)
        await stub.start()
        slow.note_issue(1)
        # force the local copy on by policy: seed q below threshold
        stub.state = stub.state.__class__(q=4.0, q_threshold=10, t_desire_ms=100,
                                          t_max_ms=300, local_running=True, q_cap=40.0)
        out = await stub.call("detect", img())
        await out.accounted
        assert out.winner == "local"
        assert out.t_local_ms is not None
        # satisfaction was fed the timeout marker, never the local time
        assert out.t_remote_ms == timeout_marker_ms(300)
        assert out.q_after == 2.0
        # the caller saw the local result, not the 2*t_max stall
        assert out.serving_ms < 2 * 300
        await stub.close(); await link.close(); await cloud.shutdown()
    run_virtual(main())


def test_remote_beats_slower_local():
    async def main():
        cloud = make_cloud()
        net = NetworkModel.flat(base_latency_ms=5, rng=random.Random(3))
        stub, link = cloud.stub("detect", network=net, t_desire_ms=100, t_max_ms=300,
                                enable_keepalive=False, local_cpu_millicores=500)
        await stub.start()
        stub.state = stub.state.__class__(q=4.0, q_threshold=10, t_desire_ms=100,
                                          t_max_ms=300, local_running=True, q_cap=40.0)
        out = await stub.call("detect", img())
        await out.accounted
        # remote ~62ms (4000 mc + net) vs local 412ms at 500 mc
        assert out.winner == "remote"
        assert out.serving_ms < 120
        await stub.close(); await link.close(); await cloud.shutdown()
    run_virtual(main())


def test_timeout_one_shot_fallback_bounds_latency():
    async def main():
        cloud = make_cloud()
        down = NetworkModel([NetworkSegment(0, 2**31, up=False)], random.Random(4))
        stub, link = cloud.stub("detect", network=down, t_desire_ms=100, t_max_ms=300,
                                enable_keepalive=False)
        # no grant possible; the stub must still serve via the local fallback
        await stub.start()
        assert stub.link_down
        loop = asyncio.get_running_loop()
        t0 = loop.time()
        out = await stub.call("detect", img())
        elapsed_ms = (loop.time() - t0) * 1000
        assert out.winner == "local"
        assert elapsed_ms <= 2 * 300 + 250  # 2*t_max + local service time
        await stub.close(); await link.close(); await cloud.shutdown()
    run_virtual(main())


def test_no_fallback_raises_service_down():
    async def main():
        cloud = make_cloud()
        down = NetworkModel([NetworkSegment(0, 2**31, up=False)], random.Random(5))
        stub, link = cloud.stub("detect", network=down, with_local_fallback=False,
                                t_desire_ms=100, t_max_ms=300, enable_keepalive=False)
        with pytest.raises(ServiceDown):
            await stub.start()
        with pytest.raises(ServiceDown):
            await stub.call("detect", img())
        await stub.close(); await link.close(); await cloud.shutdown()
    run_virtual(main())


def test_keepalive_detects_outage_and_recovery_stateless():
    async def main():
        cloud = make_cloud()
        # segment switching is request-indexed: index 1+ is down, then up at 3
        net = NetworkModel([
            NetworkSegment(0, 0, base_latency_ms=5),
            NetworkSegment(1, 2, up=False),
            NetworkSegment(3, 2**31, base_latency_ms=5),
        ], random.Random(6))
        stub, link = cloud.stub("detect", network=net, t_desire_ms=100, t_max_ms=300,
                                keepalive_interval_ms=500)
        await stub.start()
        net.note_issue(0)
        out0 = await stub.call("detect", img(0))
        assert out0.winner == "remote"
        net.note_issue(1)  # link drops; pings start missing
        await asyncio.sleep(2.0)  # 4 intervals -> down after 3 misses
        assert stub.link_down
        out1 = await stub.call("detect", img(1))
        assert out1.winner == "local"
        kinds = [k.split(":")[0] for _, k in stub.events]
        assert "link_down" in kinds
        net.note_issue(3)  # restore
        await asyncio.sleep(1.0)  # next ping gets its pong
        assert not stub.link_down
        out2 = await stub.call("detect", img(2))
        await out2.accounted
        assert out2.winner in ("remote", "local")  # racing again; remote healthy
        assert out2.t_remote_ms < 100
        await stub.close(); await link.close(); await cloud.shutdown()
    run_virtual(main())


def test_stateful_regrants_fresh_servant_after_restore():
    async def main():
        cloud = make_cloud()
        net = NetworkModel([
            NetworkSegment(0, 0, base_latency_ms=5),
            NetworkSegment(1, 1, up=False),
            NetworkSegment(2, 2**31, base_latency_ms=5),
        ], random.Random(7))
        stub, link = cloud.stub("mapper", network=net, t_desire_ms=400, t_max_ms=800,
                                keepalive_interval_ms=500)
        await stub.start()
        first_servant = stub._granted_servant
        net.note_issue(0)
        out0 = await stub.call("add_frame", build_payload(
            {"schema": "grid_map", "width": 8, "height": 8}, 0, 7, "m"))
        assert json.loads(out0.result)["frames"] == 1
        net.note_issue(1)
        await asyncio.sleep(2.5)
        assert stub.link_down
        # failover serves locally for stateful services too
        out1 = await stub.call("add_frame", build_payload(
            {"schema": "grid_map", "width": 8, "height": 8}, 1, 7, "m"))
        assert out1.winner == "local"
        net.note_issue(2)
        await asyncio.sleep(1.0)
        assert not stub.link_down
        out2 = await stub.call("add_frame", build_payload(
            {"schema": "grid_map", "width": 8, "height": 8}, 2, 7, "m"))
        await out2.accounted
        assert out2.winner == "remote"
        # fresh servant, fresh state: first frame on the new servant
        assert json.loads(out2.result)["frames"] == 1
        assert stub._granted_servant != first_servant
        await stub.close(); await link.close(); await cloud.shutdown()
    run_virtual(main())


def test_satisfaction_updates_only_from_remote_times():
    async def main():
        cloud = make_cloud()
        net = NetworkModel.flat(base_latency_ms=5, rng=random.Random(8))
        stub, link = cloud.stub("detect", network=net, t_desire_ms=100, t_max_ms=300,
                                enable_keepalive=False, local_cpu_millicores=64000)
        await stub.start()
        stub.state = stub.state.__class__(q=4.0, q_threshold=10, t_desire_ms=100,
                                          t_max_ms=300, local_running=True, q_cap=40.0)
        out = await stub.call("detect", img())
        await out.accounted
        # local (64 cores -> ~3ms) wins the race, but q moves on the remote time
        assert out.winner == "local"
        assert out.t_remote_ms > out.t_local_ms
        assert out.q_after == 6.0  # 4 + 2: remote completed within t_desire
        await stub.close(); await link.close(); await cloud.shutdown()
    run_virtual(main())


def test_local_result_equivalence_detector_and_empty():
    m = parse_manifest(demo.detector_manifest_bytes())
    d = generate_stub(m, "ws://x/ws")
    assert local_result_equivalence(d, "detect", img(3))
    assert local_result_equivalence(d, "detect", img(0))


def test_mapper_streams_equal_checksums_local_vs_remote():
    async def main():
        cloud = make_cloud()
        net = NetworkModel.flat(rng=random.Random(9))
        stub, link = cloud.stub("mapper", network=net, t_desire_ms=400, t_max_ms=800,
                                enable_keepalive=False)
        await stub.start()
        frames = [build_payload({"schema": "grid_map", "width": 8, "height": 8},
                                i, 7, "eq") for i in range(5)]
        remote = []
        for f in frames:
            out = await stub.call("add_frame", f)
            remote.append(out.result)
        await stub.close(); await link.close(); await cloud.shutdown()

        from skybridge.manifest import ResourceQuota
        from skybridge.protocol import Envelope, compress_payload
        from skybridge.servant import BuiltinSandbox
        m = parse_manifest(demo.mapper_manifest_bytes())
        local = BuiltinSandbox("l", m.interface, m.stateful, m.workload,
                               ResourceQuota(1000, 256))
        local_results = []
        for i, f in enumerate(frames):
            env = Envelope(op="call", id=str(i), target="add_frame",
                           payload=compress_payload("grid_map", f, "zlib"))
            reply = local.execute(env)[0]
            from skybridge.protocol import payload_data
            local_results.append(payload_data(reply.payload))
        assert remote == local_results
    run_virtual(main())


def test_subscribe_and_publish_topics_through_stub():
    async def main():
        cloud = make_cloud()
        net = NetworkModel.flat(base_latency_ms=5, rng=random.Random(10))
        stub, link = cloud.stub("mapper", network=net, t_desire_ms=400, t_max_ms=800,
                                enable_keepalive=False)
        await stub.start()
        seen = []
        stub.subscribe("map_updates", lambda topic, data: seen.append((topic, data)))
        frame = build_payload({"schema": "grid_map", "width": 8, "height": 8}, 0, 7, "ps")
        await stub.publish("frames", frame)   # inbound topic: no response expected
        out = await stub.call("add_frame", build_payload(
            {"schema": "grid_map", "width": 8, "height": 8}, 1, 7, "ps"))
        # the published frame counted: this call is frame number 2
        assert json.loads(out.result)["frames"] == 2
        await asyncio.sleep(0.1)
        assert len(seen) == 2  # one map update per inbound frame
        assert all(topic == "map_updates" for topic, _ in seen)
        assert all(data[:8] == bytes([0, 0, 0, 16, 0, 0, 0, 16]) for _, data in seen)
        with pytest.raises(KeyError):
            stub.subscribe("frames", lambda t, d: None)  # inbound, not subscribable
        with pytest.raises(KeyError):
            await stub.publish("map_updates", frame)     # outbound, not publishable
        await stub.close(); await link.close(); await cloud.shutdown()
    run_virtual(main())


def test_insufficient_resources_rejection_triggers_failover():
    async def main():
        from skybridge.choreographer import Node, NodePool
        dictionary = SlaDictionary.from_json(
            json.dumps(demo.default_sla_dictionary_doc()))
        cloud = SimCloud([demo.detector_manifest_bytes()], dictionary=dictionary,
                         pool=NodePool([Node("tiny", 500, 64)]))
        stub, link = cloud.stub("detect", network=NetworkModel.flat(),
                                t_desire_ms=100, t_max_ms=300,
                                enable_keepalive=False)
        # the dictionary wants 4000 millicores; the pool cannot fit any servant
        await stub.start()
        assert not stub.link_down  # rejection is not an outage
        out = await stub.call("detect", img())
        assert out.winner == "local"  # hard rejection, local copy serves
        await stub.close(); await link.close(); await cloud.shutdown()
    run_virtual(main())
