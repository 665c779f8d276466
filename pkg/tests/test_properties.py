from hypothesis import HealthCheck, given, settings
from hypothesis import strategies as st

from acst.content_store import BlockStore, DagNode, Kind, MissingBlock, assemble, build_dag, chunk
from acst.harness import canonical_scenario, run_scenario
from acst.netsim import LinkParams, Message, Simulator

SMALL_CHUNK = 1024


@settings(max_examples=200, deadline=None)
@given(st.binary(max_size=20 * SMALL_CHUNK), st.integers(2, 6))
def test_round_trip_any_bytes(data, fanout):
    store = BlockStore()
    root, _ = store.add_bytes(data, SMALL_CHUNK, fanout)
    assert assemble(store, root) == data


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 40 * SMALL_CHUNK), st.integers(2, 5))
def test_dag_node_sizes_sum_to_file_length(length, fanout):
    leaves = chunk(bytes(length), SMALL_CHUNK)
    root, blocks = build_dag(leaves, fanout)
    by_cid = {b.cid: b for b in blocks}
    if root.kind is Kind.NODE:
        assert DagNode.decode(by_cid[root].data).size == length
    assert sum(1 for b in blocks if b.cid.kind is Kind.LEAF) == len(set(b.cid for b in leaves))


ops = st.lists(st.tuples(st.sampled_from(["add", "pin", "unpin", "gc", "delete"]),
                         st.integers(0, 2**16)), min_size=1, max_size=60)


@settings(max_examples=60, deadline=None, suppress_health_check=[HealthCheck.too_slow])
@given(ops)
def test_gc_never_loses_pinned_data(sequence):
    store = BlockStore()
    files, pinned = {}, set()
    for action, arg in sequence:
        if action == "add":
            data = arg.to_bytes(3, "big") * (arg % 5000)
            root, _ = store.add_bytes(data, 512, fanout=3)
            files[root] = data
        elif action == "pin" and files:
            root = sorted(files)[arg % len(files)]
            try:
                store.pin(root)
                pinned.add(root)
            except MissingBlock:
                pass
        elif action == "unpin" and pinned:
            root = sorted(pinned)[arg % len(pinned)]
            store.unpin(root)
            pinned.discard(root)
        elif action == "delete" and len(store):
            victim = sorted(store.blocks)[arg % len(store)]
            if not any(victim in store.walk(r) for r in pinned):
                store.delete_block(victim)
        elif action == "gc":
            store.gc()
        for root in pinned:
            assert assemble(store, root) == files[root]


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 2), st.integers(0, 2), st.integers(1, 5000),
                          st.integers(0, 20_000)), max_size=40),
       st.integers(1, 5000), st.integers(0, 50))
def test_netsim_causality_and_fifo(sends, bandwidth, delay):
    sim = Simulator()
    log = []

    class Sink:
        def __init__(self, peer):
            self.peer = peer

        def on_message(self, msg):
            log.append((sim.now, msg))

        def on_timer(self, tag):
            src, dst, size = tag
            sent = sim.transmit(Message("x", src, dst, size, body=(sim.now, len(log))))
            assert sent.arrive_us >= sim.now + delay * 1000

    for peer in range(3):
        sim.add_peer(peer, Sink(peer))
    for a in range(3):
        for b in range(3):
            if a != b:
                sim.set_link(a, b, LinkParams(bandwidth, delay))
    for src, dst, size, at in sends:
        if src != dst:
            sim.schedule(at, src, (src, dst, size))
    sim.run()
    times = [t for t, _ in log]
    assert times == sorted(times)
    for a in range(3):
        for b in range(3):
            order = [m.body[0] for _, m in log if m.src == a and m.dst == b]
            assert order == sorted(order)
    sent, received = sim.totals()
    assert sent == received


@settings(max_examples=8, deadline=None)
@given(st.integers(0, 1000), st.sampled_from([10, 250, 1500]), st.sampled_from([300, 1000, 5000]))
def test_conservation_on_random_runs(seed, delay, bandwidth):
    scenario = canonical_scenario(file={"size": 600_000, "seed": seed},
                                  links={"bandwidth_kbps": bandwidth, "delay_ms": delay})
    report = run_scenario(scenario, seed)
    assert report["ok"]
    assert report["conservation"]["ok"]
