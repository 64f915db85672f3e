import random

import pytest

from satchain.node import (
    BroadcastDelivery,
    CancelTimer,
    ClientReject,
    ClientSubmit,
    Commit,
    InternetDelivery,
    InternetSend,
    Node,
    NodeConfig,
    SetTimer,
    TimerFired,
    UplinkBroadcast,
)
from satchain.proto import (
    AskMessage,
    Block,
    BlockReply,
    BlockRequest,
    ClientMessage,
    DataMessage,
    KeyTable,
    RestartMessage,
    SyncMessage,
    ZERO_HASH,
    genesis_block,
)

M = 2
KEYS = {n: KeyTable.from_seed(n, 7) for n in (3, 5)}


def make(node_id=0, n=3, m=M, **kw):
    return Node(NodeConfig(node_id, n, m, KEYS[n], payload_budget=16, **kw))


def data(seq, origin=0, client=9):
    return DataMessage.create(origin, client, seq, b"p%d" % seq)


def batch(start=1, m=M):
    return [data(s) for s in range(start, start + m)]


def sync(index, digest, node, epoch=0, n=3):
    return KEYS[n].sign_sync(SyncMessage(index, epoch, digest, node))


def restart(last, node, epoch=0, n=3):
    return KEYS[n].sign_restart(RestartMessage(last, epoch, node))


def feed(node, envelopes):
    effects = []
    for env in envelopes:
        effects += node.on_broadcast(env)
    return effects


def fire(node, kind):
    ids = [tid for tid, k in node.active_timers.items() if k == kind]
    assert ids, f"no {kind} timer armed"
    return node.on_timer(ids[0])


def kinds(effects):
    return [type(e).__name__ for e in effects]


def sends(effects, env_type=None):
    return [e for e in effects if isinstance(e, InternetSend)
            and (env_type is None or isinstance(e.envelope, env_type))]


def broadcasts(effects, env_type=None):
    return [e.envelope for e in effects if isinstance(e, UplinkBroadcast)
            and (env_type is None or isinstance(e.envelope, env_type))]


def commits(effects):
    return [e.block for e in effects if isinstance(e, Commit)]


def block1(start=1):
    return Block.build(1, genesis_block().hash, batch(start))


def producing_node(node_id=0, n=3):
    """Node that has proposed block 1 and voted for it."""
    node = make(node_id, n)
    feed(node, batch())
    assert node.is_syncing and node.current_block is not None
    return node


# -- client messages ---------------------------------------------------------

def case_client_valid():
    node = make()
    eff = node.on_client_message(ClientMessage(9, 1, b"hi"))
    assert kinds(eff) == ["UplinkBroadcast"]
    msg = eff[0].envelope
    assert isinstance(msg, DataMessage) and msg.origin_node == 0 and msg.checksum_ok()
    assert len(node.pending) == 0


def case_client_oversized():
    node = make()
    eff = node.on_client_message(ClientMessage(9, 1, b"x" * 17))
    assert eff == [ClientReject((9, 1))]


def case_client_two_in_order():
    node = make()
    eff = node.on_client_message(ClientMessage(9, 1, b"a")) + node.on_client_message(ClientMessage(9, 2, b"b"))
    assert [m.client_seq for m in broadcasts(eff)] == [1, 2]


# -- data messages -----------------------------------------------------------

def case_data_fills_block():
    node = make()
    assert feed(node, batch()[:1]) == []
    eff = feed(node, batch()[1:])
    assert node.is_syncing
    assert node.current_block == block1()
    votes = broadcasts(eff, SyncMessage)
    assert len(votes) == 1 and votes[0].block_hash == block1().hash and votes[0].round_index == 1
    assert any(isinstance(e, SetTimer) for e in eff)


def case_data_buffered_while_syncing():
    node = producing_node()
    eff = feed(node, [data(10)])
    assert eff == []
    assert [m.client_seq for m in node.pending] == [10]


def case_data_duplicate_ignored():
    node = make()
    feed(node, [data(1)])
    assert feed(node, [data(1)]) == []
    assert len(node.pending) == 1


# -- sync messages -----------------------------------------------------------

def case_sync_idle_non_producer_fetches():
    node = make(2)
    eff = node.on_sync_message(sync(1, block1().hash, 0))
    assert node.is_syncing and node.current_block is None
    assert set(node.sync_pool) == {0}
    assert sends(eff) == []
    eff = node.on_sync_message(sync(1, block1().hash, 1))
    reqs = sends(eff, BlockRequest)
    assert [(r.to, r.envelope.round_index) for r in reqs] == [(0, 1)]
    eff = node.on_internet(0, BlockReply(block1()))
    assert commits(eff) == [block1()]
    assert node.next_index == 2 and not node.is_syncing


def case_sync_future_deferred_while_syncing():
    node = producing_node()
    pool = dict(node.sync_pool)
    assert node.on_sync_message(sync(2, b"\x07" * 32, 1)) == []
    assert node.sync_pool == pool
    assert [s.round_index for s in node.deferred_syncs] == [2]


def case_sync_closed_round_discarded():
    node = producing_node()
    node.on_sync_message(sync(1, block1().hash, 1))
    assert node.next_index == 2
    assert node.on_sync_message(sync(1, block1().hash, 2)) == []
    assert node.sync_pool == {}


def case_sync_bad_signature_dropped():
    node = producing_node()
    forged = SyncMessage(1, 0, block1().hash, 1, bytes(64))
    assert node.on_sync_message(forged) == []
    assert set(node.sync_pool) == {0}


# -- round evaluation ---------------------------------------------------------

def case_outcome_a_commit_own_block():
    node = producing_node(2)
    eff = node.on_sync_message(sync(1, block1().hash, 0))
    assert commits(eff) == [block1()]
    assert sends(eff, BlockRequest) == []
    assert node.next_index == 2 and node.sync_pool == {}


def case_outcome_b_failure_restart():
    node = producing_node()
    node.on_sync_message(sync(1, b"\x01" * 32, 1))
    eff = node.on_sync_message(sync(1, b"\x02" * 32, 2))
    restarts = broadcasts(eff, RestartMessage)
    assert len(restarts) == 1 and restarts[0].last_committed_index == 0
    assert node.error_flag and not node.is_syncing
    assert [m.client_seq for m in node.pending] == [1, 2]


def case_outcome_b_early_failure():
    node = make(0, 5)
    feed(node, batch())
    node.on_sync_message(sync(1, b"\x01" * 32, 1, n=5))
    assert not node.error_flag
    node.on_sync_message(sync(1, b"\x02" * 32, 2, n=5))
    assert not node.error_flag  # best 1 plus 2 outstanding could still reach 3
    eff = node.on_sync_message(sync(1, b"\x03" * 32, 3, n=5))
    # four distinct votes: best 1 plus 1 outstanding cannot exceed 5/2
    assert broadcasts(eff, RestartMessage) and node.error_flag


def case_outcome_c_timeout_asks():
    node = producing_node()
    eff = fire(node, "round")
    asks = sends(eff, AskMessage)
    assert [(a.to, a.envelope.round_index) for a in asks] == [(1, 1)]


# -- asks ----------------------------------------------------------------------

def case_ask_current_round():
    node = producing_node()
    eff = node.on_internet(1, AskMessage(1, 1))
    assert [(e.to, e.envelope) for e in eff] == [(1, node.sync_pool[0])]


def case_ask_committed_round():
    node = producing_node()
    mine = node.sync_pool[0]
    node.on_sync_message(sync(1, block1().hash, 1))
    assert node.next_index == 2
    eff = node.on_internet(2, AskMessage(1, 2))
    assert [(e.to, e.envelope) for e in eff] == [(2, mine)]


def case_ask_future_round():
    node = producing_node()
    assert node.on_internet(1, AskMessage(5, 1)) == []


# -- block fetch ---------------------------------------------------------------

def case_block_reply_match_commits():
    node = make(2)
    node.on_sync_message(sync(1, block1().hash, 0))
    node.on_sync_message(sync(1, block1().hash, 1))
    eff = node.on_block_reply(BlockReply(block1()))
    assert commits(eff) == [block1()]


def case_block_reply_mismatch_next_voter():
    node = make(2)
    node.on_sync_message(sync(1, block1().hash, 0))
    node.on_sync_message(sync(1, block1().hash, 1))
    wrong = block1(start=50)
    eff = node.on_internet(0, BlockReply(wrong))
    assert commits(eff) == []
    assert [(r.to, r.envelope.round_index) for r in sends(eff, BlockRequest)] == [(1, 1)]


def case_block_request_beyond_head():
    node = make()
    assert node.on_internet(1, BlockRequest(3, 1)) == []


def case_block_request_served():
    node = producing_node()
    node.on_sync_message(sync(1, block1().hash, 1))
    eff = node.on_internet(2, BlockRequest(1, 2))
    assert [(e.to, e.envelope.block) for e in eff] == [(2, block1())]


# -- restart -------------------------------------------------------------------

def failed_node():
    node = make()
    for m in batch():
        node.on_client_message(ClientMessage(m.client_id, m.client_seq, m.payload))
    feed(node, batch())
    node.on_sync_message(sync(1, b"\x01" * 32, 1))
    node.on_sync_message(sync(1, b"\x02" * 32, 2))
    assert node.error_flag
    return node


def case_restart_with_error_flag_resets():
    node = failed_node()
    eff = node.on_broadcast(restart(0, 1))
    assert not node.error_flag and not node.is_syncing
    assert len(node.pending) == 0 and node.sync_pool == {}
    assert node.next_index == 1 and node.epoch == 1
    assert sorted(e.msg_id for e in eff if isinstance(e, ClientReject)) == [(9, 1), (9, 2)]
    assert not any(isinstance(e, SetTimer) for e in eff)


def case_second_restart_ignored():
    node = failed_node()
    node.on_broadcast(restart(0, 1))
    before = (node.epoch, node.next_index, node.error_flag, list(node.pending), dict(node.sync_pool))
    assert node.on_broadcast(restart(0, 2)) == []
    assert (node.epoch, node.next_index, node.error_flag, list(node.pending), dict(node.sync_pool)) == before


def case_restart_while_healthy_ignored():
    node = producing_node()
    assert node.on_broadcast(restart(0, 1)) == []
    assert node.is_syncing and node.current_block == block1()


def case_restart_bad_signature_dropped():
    node = failed_node()
    assert node.on_broadcast(RestartMessage(0, 0, 1, bytes(64))) == []
    assert node.error_flag


# -- timers ---------------------------------------------------------------------

def case_round_timeout_with_majority_no_ask():
    node = make(2)
    node.on_sync_message(sync(1, block1().hash, 0))
    node.on_sync_message(sync(1, block1().hash, 1))
    eff = fire(node, "round")
    assert sends(eff, AskMessage) == []


def case_ask_timeout_next_target():
    node = producing_node()
    fire(node, "round")
    eff = fire(node, "ask")
    assert [a.to for a in sends(eff, AskMessage)] == [2]


def case_ask_targets_cycle():
    node = make(0, 5)
    feed(node, batch())
    targets = [a.to for a in sends(fire(node, "round"), AskMessage)]
    for _ in range(5):
        targets += [a.to for a in sends(fire(node, "ask"), AskMessage)]
    assert targets == [1, 2, 3, 4, 1, 2]


def case_ask_skips_present_voters():
    node = make(0, 5)
    feed(node, batch())
    node.on_sync_message(sync(1, block1().hash, 1, n=5))
    node.on_sync_message(sync(1, b"\x03" * 32, 3, n=5))
    targets = [a.to for a in sends(fire(node, "round"), AskMessage)]
    targets += [a.to for a in sends(fire(node, "ask"), AskMessage)]
    targets += [a.to for a in sends(fire(node, "ask"), AskMessage)]
    assert targets == [2, 4, 2]


def case_fetch_timeout_next_target():
    node = make(2)
    node.on_sync_message(sync(1, block1().hash, 0))
    node.on_sync_message(sync(1, block1().hash, 1))
    eff = fire(node, "fetch")
    assert [r.to for r in sends(eff, BlockRequest)] == [1]
    eff = fire(node, "fetch")
    assert [r.to for r in sends(eff, BlockRequest)] == [0]


def case_stall_rebroadcasts_restart():
    node = failed_node()
    eff = fire(node, "stall")
    assert [r.last_committed_index for r in broadcasts(eff, RestartMessage)] == [0]


def case_stale_timer_ignored():
    node = producing_node()
    old = [tid for tid, k in node.active_timers.items() if k == "round"][0]
    eff = node.on_sync_message(sync(1, block1().hash, 1))
    assert CancelTimer(old) in eff
    assert node.on_timer(old) == []


# -- deferred syncs and catch-up --------------------------------------------------

def case_deferred_replayed_after_commit():
    node = producing_node()
    later = sync(2, b"\x09" * 32, 1)
    node.on_sync_message(later)
    node.on_sync_message(sync(1, block1().hash, 1))
    assert node.next_index == 2
    assert node.sync_pool == {1: later} and node.is_syncing
    assert node.deferred_syncs == []


def case_idle_adopts_future_index():
    node = make(2)
    eff = node.on_sync_message(sync(3, b"\x09" * 32, 0))
    reqs = sends(eff, BlockRequest)
    assert [(r.to, r.envelope.round_index) for r in reqs] == [(0, 1)]
    b1 = block1()
    b2 = Block.build(2, b1.hash, batch(3))
    eff = node.on_internet(0, BlockReply(b1))
    assert commits(eff) == [b1]
    assert [r.envelope.round_index for r in sends(eff, BlockRequest)] == [2]
    eff = node.on_internet(0, BlockReply(b2))
    assert commits(eff) == [b2]
    assert node.next_index == 3 and set(node.sync_pool) == {0}


# -- epochs and abstention ------------------------------------------------------

def case_stale_epoch_vote_ignored():
    node = failed_node()
    node.on_broadcast(restart(0, 1))
    assert node.epoch == 1
    node.on_sync_message(sync(1, block1().hash, 1, epoch=0))
    assert node.sync_pool == {}


def case_newer_epoch_sync_resets():
    node = producing_node()
    eff = node.on_sync_message(sync(1, b"\x04" * 32, 1, epoch=2))
    assert node.epoch == 2 and node.current_block is None
    assert set(node.sync_pool) == {1}
    assert not broadcasts(eff, SyncMessage)


def case_gap_abstains():
    node = make()
    node.on_broadcast(data(1), port_seq=0)
    eff = node.on_broadcast(data(2), port_seq=2)
    votes = broadcasts(eff, SyncMessage)
    assert len(votes) == 1 and votes[0].block_hash == ZERO_HASH
    assert node.stats.abstentions == 1


def case_abstention_never_counts():
    node = make(0, 3, abstain_on_gap=False)
    feed(node, batch())
    node.on_sync_message(sync(1, ZERO_HASH, 1))
    eff = node.on_sync_message(sync(1, ZERO_HASH, 2))
    assert broadcasts(eff, RestartMessage) and not commits(eff)


CASES = {name[5:]: fn for name, fn in list(globals().items()) if name.startswith("case_")}


@pytest.mark.parametrize("name", sorted(CASES))
def test_node_example(name):
    CASES[name]()


def random_events(seed, count=300):
    rng = random.Random(seed)
    events, t, seq = [], 0.0, 0
    for _ in range(count):
        t += rng.random() * 0.01
        r = rng.random()
        if r < 0.5:
            seq += 1
            events.append(BroadcastDelivery(data(seq, origin=rng.randrange(3)), seq - 1, t))
        elif r < 0.7:
            events.append(BroadcastDelivery(sync(rng.randrange(1, 4), bytes([rng.randrange(3)]) * 32,
                                                 rng.randrange(3), epoch=rng.randrange(2)), None, t))
        elif r < 0.75:
            events.append(BroadcastDelivery(restart(rng.randrange(2), rng.randrange(3)), seq, t))
        elif r < 0.85:
            events.append(ClientSubmit(ClientMessage(1, seq + 1000, b"c"), t))
        elif r < 0.9:
            events.append(InternetDelivery(1, AskMessage(rng.randrange(1, 3), 1), t))
        else:
            events.append(TimerFired(rng.randrange(1, 20), t))
    return events


@pytest.mark.parametrize("seed", range(5))
def test_replay_determinism(seed):
    events = random_events(seed)
    a, b = make(), make()
    for ev in events:
        assert a.handle(ev) == b.handle(ev)
    assert a.ledger.hashes() == b.ledger.hashes()


def test_time_must_not_go_backwards():
    node = make()
    node.handle(TimerFired(1, 1.0))
    with pytest.raises(ValueError):
        node.handle(TimerFired(1, 0.5))


def test_next_index_non_decreasing_under_random_events():
    for seed in range(5):
        node = make()
        last = node.next_index
        for ev in random_events(seed + 10):
            node.handle(ev)
            assert node.next_index >= last or node.next_index == node.ledger.head.index + 1
            assert node.next_index <= node.ledger.head.index + 1 or node._catchup_to is not None
            last = node.next_index
