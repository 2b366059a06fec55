import random

import pytest
from hypothesis import given
from hypothesis import strategies as st

from helpers import cluster, qc_pool, signed
from vbft.certificates import (
    beta_entries,
    create_agg_qc,
    create_new_view,
    generate_qc,
    generate_qc_nr,
    generate_qc_ready,
    genesis_block,
    high_qc_and_betas,
)
from vbft.core import QC_BLOCK_VOTE, QC_NEGATIVE, QC_READY, ZERO_DIGEST, NegativeResponse, ReadyMsg, canonical_sign_bytes
from vbft.crypto import verify_new_view_full
from vbft.errors import DuplicateSender, DuplicateVoter, Mixed, MixedView, MixedVotes, TooFew

C = cluster(f=2, seed="certs")
POOL = qc_pool(C, 8)


def test_genesis_is_fixed_and_fully_signed():
    assert genesis_block() == C.gen[0]
    assert C.gen[1].signers == frozenset(range(C.n))
    assert C.keyring.verify_qc(C.gen[1], C.n)


def test_generate_qc():
    b = C.block(0, 1, C.gen[0].hash)
    qc = C.qc(0, b)
    assert (qc.kind, qc.view, qc.seq, qc.block_hash, qc.parent) == (QC_BLOCK_VOTE, 0, 1, b.hash, b.header.parent)
    assert qc.signers == frozenset(range(C.config.quorum))
    assert C.keyring.verify_qc(qc, C.config.quorum)


def test_generate_qc_errors():
    b = C.block(0, 1, C.gen[0].hash)
    other = C.block(0, 1, C.gen[0].hash, [C.request(1)])
    votes = [C.vote(0, b, v) for v in range(5)]
    with pytest.raises(TooFew):
        generate_qc(votes[:4], C.keyring, C.config)
    with pytest.raises(DuplicateVoter):
        generate_qc(votes[:4] + votes[:1], C.keyring, C.config)
    with pytest.raises(MixedVotes):
        generate_qc(votes[:4] + [C.vote(0, other, 4)], C.keyring, C.config)
    with pytest.raises(MixedVotes):
        generate_qc(votes[:4] + [C.vote(1, b, 4)], C.keyring, C.config)


@given(st.sets(st.integers(0, 6), min_size=5))
def test_any_quorum_of_votes_verifies(voters):
    b = POOL[3][0]
    qc = C.qc(2, b, voters=sorted(voters))
    assert C.keyring.verify_qc(qc, C.config.quorum)


def _nr(beta_hash, view, sender):
    return signed(NegativeResponse(beta_hash, view, sender), C.keys[sender])


def test_generate_qc_nr():
    h = POOL[4][0].hash
    qc = generate_qc_nr([_nr(h, 6, s) for s in range(5)], C.keyring, C.config)
    assert (qc.kind, qc.view, qc.block_hash) == (QC_NEGATIVE, 6, h)
    assert C.keyring.verify_qc(qc, C.config.quorum)
    with pytest.raises(Mixed):
        generate_qc_nr([_nr(h, 6, s) for s in range(4)] + [_nr(ZERO_DIGEST, 6, 4)], C.keyring, C.config)
    with pytest.raises(DuplicateSender):
        generate_qc_nr([_nr(h, 6, s) for s in [0, 1, 2, 3, 3]], C.keyring, C.config)
    with pytest.raises(TooFew):
        generate_qc_nr([], C.keyring, C.config)


def test_generate_qc_ready_binds_new_view_digest():
    d = b"\x07" * 32
    readies = [signed(ReadyMsg(3, s, d), C.keys[s]) for s in range(5)]
    qc = generate_qc_ready(readies, C.keyring, C.config)
    assert (qc.kind, qc.view, qc.block_hash) == (QC_READY, 3, d)
    assert C.keyring.verify_qc(qc, C.config.quorum)
    with pytest.raises(Mixed):
        generate_qc_ready(readies[:4] + [signed(ReadyMsg(3, 4, ZERO_DIGEST), C.keys[4])], C.keyring, C.config)


def _vcs(view, picks, betas=()):
    out = []
    for sender, i in picks:
        beta = POOL[i + 1][0] if sender in betas else None
        out.append(C.view_change(view, POOL[i][1], sender, beta))
    return out


def test_create_agg_qc_errors():
    with pytest.raises(TooFew):
        create_agg_qc(_vcs(9, [(0, 1), (1, 1)]), C.keyring, C.config)
    with pytest.raises(DuplicateSender):
        create_agg_qc(_vcs(9, [(0, 1), (0, 2), (1, 1), (2, 1), (3, 1)]), C.keyring, C.config)
    mixed = _vcs(9, [(0, 1), (1, 1), (2, 1), (3, 1)]) + _vcs(10, [(4, 1)])
    with pytest.raises(MixedView):
        create_agg_qc(mixed, C.keyring, C.config)


def test_create_agg_qc_keeps_first_quorum():
    vcs = _vcs(9, [(s, 1) for s in range(7)])
    agg = create_agg_qc(vcs, C.keyring, C.config)
    assert agg.view_change_msgs == tuple(vcs[:5])


def test_create_new_view_rejects_mismatched_view():
    agg = create_agg_qc(_vcs(9, [(s, 1) for s in range(5)]), C.keyring, C.config)
    with pytest.raises(MixedView):
        create_new_view(agg, 10, C.keys[0])
    nv = create_new_view(agg, 9, C.keys[2])
    assert nv.sender == 2 and C.keyring.verify_msg(nv, 2)
    assert verify_new_view_full(nv, C.keyring, C.config)


def test_high_qc_is_highest_seq():
    agg = create_agg_qc(_vcs(9, [(0, 1), (1, 5), (2, 3), (3, 2), (4, 0)]), C.keyring, C.config)
    high, betas = high_qc_and_betas(agg)
    assert high == POOL[5][1]
    assert betas == []


def test_betas_at_high_seq_plus_one_only():
    # sender 1 holds the high QC and a beta above it; sender 2's beta is stale
    agg = create_agg_qc(_vcs(9, [(0, 5), (1, 5), (2, 3), (3, 1), (4, 1)], betas={1, 2}), C.keyring, C.config)
    high, betas = high_qc_and_betas(agg)
    assert high.seq == 5
    assert betas == [POOL[6][0].header]


def test_two_distinct_betas_sorted_by_hash():
    parent = POOL[5][0].hash
    a = C.block(5, 6, parent, [C.request(1)], proposer=5)
    b = C.block(5, 6, parent, [C.request(2)], proposer=5)
    vcs = [C.view_change(9, POOL[5][1], s, beta) for s, beta in [(0, a), (1, b), (2, a), (3, None), (4, b)]]
    agg = create_agg_qc(vcs, C.keyring, C.config)
    high, entries = beta_entries(agg)
    assert [h.hash for h, _ in entries] == sorted([a.hash, b.hash])
    for h, sig in entries:
        assert C.keyring.verify(5, canonical_sign_bytes(h), sig)


@given(st.lists(st.integers(0, 7), min_size=5, max_size=5), st.randoms(use_true_random=False))
def test_high_qc_dominates_every_entry(idx, rng):
    senders = rng.sample(range(7), 5)
    agg = create_agg_qc(_vcs(9, list(zip(senders, idx))), C.keyring, C.config)
    high, betas = high_qc_and_betas(agg)
    assert high.seq == max(idx)
    assert all(vc.latest_qc.seq <= high.seq for vc in agg.view_change_msgs)
    assert all(b.seq == high.seq + 1 for b in betas)


@given(st.integers(0, 10**6))
def test_qc_ready_rejects_any_mixed_quorum(seed):
    rng = random.Random(seed)
    digests = [bytes([rng.randrange(2)]) * 32 for _ in range(5)]
    readies = [signed(ReadyMsg(1, s, d), C.keys[s]) for s, d in enumerate(digests)]
    if len(set(digests)) == 1:
        assert generate_qc_ready(readies, C.keyring, C.config).block_hash == digests[0]
    else:
        with pytest.raises(Mixed):
            generate_qc_ready(readies, C.keyring, C.config)
