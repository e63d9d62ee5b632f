import binascii
import struct

import numpy as np
import pytest
from hypothesis import given, strategies as st

from csifb import models as md
from csifb import protocol as pr
from csifb.channel import ScenarioConfig, generate_dataset


@pytest.fixture(scope="module")
def params():
    return md.init_params(8, 8, 32, 8, np.random.default_rng(0))


@pytest.fixture(scope="module")
def groups():
    return np.random.default_rng(1).random((6, 4, 2, 8, 8))


def frame(m=8, seed=0, **kw):
    payload = np.random.default_rng(seed).standard_normal(m).astype(np.float32)
    args = dict(group_id=7, t=2, cr_id=pr.LOW)
    args.update(kw)
    return pr.FeedbackFrame(payload=payload, **args)


class TestWire:
    def test_hand_packed_layout(self):
        f = pr.FeedbackFrame(0x01020304, 3, pr.LOW, np.array([1.0, -2.5], np.float32))
        body = (b"CSIF" + bytes([1]) + bytes([4, 3, 2, 1]) + bytes([3, 0]) + bytes([1])
                + bytes([8, 0, 0, 0]) + struct.pack("<2f", 1.0, -2.5))
        expect = body + struct.pack("<I", binascii.crc32(body))
        assert pr.serialize(f) == expect

    @given(st.integers(0, 2**32 - 1), st.integers(1, 2**16 - 1), st.sampled_from([0, 1]),
           st.lists(st.floats(allow_nan=False, width=32), max_size=64))
    def test_round_trip(self, gid, t, cr, vals):
        f = pr.FeedbackFrame(gid, t, cr, np.array(vals, np.float32))
        back = pr.deserialize(pr.serialize(f))
        assert back == f and pr.serialize(back) == pr.serialize(f)

    def test_nan_payload_bit_exact(self):
        f = pr.FeedbackFrame(1, 1, pr.HIGH, np.array([np.nan, -0.0, np.inf], np.float32))
        assert pr.serialize(pr.deserialize(pr.serialize(f))) == pr.serialize(f)

    def test_payload_len(self):
        f = frame(m=128)
        assert f.payload_len == 512
        assert len(pr.serialize(f)) == 512 + pr.OVERHEAD_BYTES

    def test_truncated(self):
        data = pr.serialize(frame())
        for n in (0, 5, 19, len(data) - 1):
            with pytest.raises(pr.LengthError):
                pr.deserialize(data[:n])

    def test_typed_errors(self):
        data = bytearray(pr.serialize(frame()))
        bad = bytearray(data)
        bad[0:4] = b"XSIF"
        with pytest.raises(pr.MagicError):
            pr.deserialize(bytes(bad))
        bad = bytearray(data)
        bad[4] = 9
        with pytest.raises(pr.VersionError):
            pr.deserialize(bytes(bad))
        bad = bytearray(data)
        bad[-1] ^= 0xFF
        with pytest.raises(pr.ChecksumError):
            pr.deserialize(bytes(bad))

    def test_exhaustive_single_byte_mutation(self):
        data = pr.serialize(frame(m=8))
        for pos in range(len(data)):
            for v in range(256):
                if v == data[pos]:
                    continue
                mutated = data[:pos] + bytes([v]) + data[pos + 1:]
                with pytest.raises(pr.FrameError):
                    pr.deserialize(mutated)

    def test_capture_round_trip(self):
        frames = [pr.serialize(frame(seed=k, t=k + 1)) for k in range(5)]
        assert pr.read_capture(pr.write_capture(frames)) == frames
        with pytest.raises(pr.LengthError):
            pr.read_capture(pr.write_capture(frames)[:-3])


class TestUe:
    def test_counter_and_cr(self, params, groups):
        ue = pr.UeSession(params, 4)
        out = [ue.step(groups[0, t]) for t in range(4)] + [ue.step(groups[1, 0])]
        assert [(f.group_id, f.t, f.cr_id) for f in out] == [
            (0, 1, pr.HIGH), (0, 2, pr.LOW), (0, 3, pr.LOW), (0, 4, pr.LOW), (1, 1, pr.HIGH)]
        assert out[0].payload.size == 32 and out[1].payload.size == 8
        assert out[0].payload.dtype == np.float32

    def test_bad_shape_no_advance(self, params):
        ue = pr.UeSession(params, 4)
        with pytest.raises(ValueError):
            pr.ue_step(ue, np.zeros((2, 8, 4)))
        assert (ue.t, ue.group_id) == (1, 0)


class TestBs:
    def test_equivalence(self, params, groups):
        ue, bs = pr.UeSession(params, 4), pr.BsSession(params, 4)
        for g in groups:
            out = np.stack([pr.bs_step(bs, pr.serialize(pr.ue_step(ue, f))) for f in g])
            ref = md.csinet_lstm_forward(g, params, wire_dtype=np.float32)
            assert np.array_equal(out, ref)

    def test_state_reset_after_group(self, params, groups):
        bs, ue = pr.BsSession(params, 4), pr.UeSession(params, 4)
        for t in range(3):
            bs.step(pr.serialize(ue.step(groups[0, t])))
            assert not bs.state_is_zero() and bs.s1 is not None
        bs.step(pr.serialize(ue.step(groups[0, 3])))
        assert bs.state_is_zero() and bs.s1 is None and bs.t == 1

    def test_corrupt_then_retransmit(self, params, groups):
        ue, bs = pr.UeSession(params, 4), pr.BsSession(params, 4)
        wires = [pr.serialize(ue.step(f)) for f in groups[0]]
        bs.step(wires[0])
        snap = (bs.t, bs.group_id, bs.s1.copy(), [(h.data.copy(), c.data.copy()) for h, c in bs.state])
        bad = bytearray(wires[1])
        bad[20] ^= 0x10
        with pytest.raises(pr.ChecksumError):
            bs.step(bytes(bad))
        assert bs.rejected == 1 and bs.t == snap[0] and bs.group_id == snap[1]
        assert np.array_equal(bs.s1, snap[2])
        assert all(np.array_equal(h.data, a) and np.array_equal(c.data, b)
                   for (h, c), (a, b) in zip(bs.state, snap[3]))
        out = [bs.step(w) for w in wires[1:]]
        ref = md.csinet_lstm_forward(groups[0], params, wire_dtype=np.float32)
        assert np.array_equal(np.stack(out), ref[1:])

    @pytest.mark.parametrize("order", [[0, 2], [0, 1, 1], [1], [0, 1, 3]])
    def test_out_of_order_aborts(self, params, groups, order):
        ue, bs = pr.UeSession(params, 4), pr.BsSession(params, 4)
        wires = [pr.serialize(ue.step(f)) for f in groups[0]]
        with pytest.raises(pr.SequenceError):
            for k in order:
                bs.step(wires[k])
        assert bs.aborted == 1 and bs.t == 1 and bs.state_is_zero()
        # the next group starts cleanly
        nxt = [pr.serialize(ue.step(f)) for f in groups[1]]
        out = np.stack([bs.step(w) for w in nxt])
        assert np.array_equal(out, md.csinet_lstm_forward(groups[1], params, wire_dtype=np.float32))

    def test_group_mismatch_aborts(self, params, groups):
        ue, bs = pr.UeSession(params, 4), pr.BsSession(params, 4)
        w = [ue.step(f) for f in groups[0]]
        bs.step(w[0])
        stray = pr.FeedbackFrame(99, 2, pr.LOW, w[1].payload)
        with pytest.raises(pr.SequenceError):
            bs.step(stray)

    def test_wrong_cr_for_position(self, params, groups):
        bs = pr.BsSession(params, 4)
        with pytest.raises(pr.SequenceError):
            bs.step(pr.FeedbackFrame(0, 1, pr.LOW, np.zeros(8, np.float32)))

    def test_group_isolation(self, params, groups):
        order = np.random.default_rng(3).permutation(len(groups) - 1)
        a = pr.simulate_session(groups, params).recon
        b = pr.simulate_session(np.concatenate([groups[:-1][order], groups[-1:]]), params).recon
        assert np.array_equal(a[-1], b[-1])


class TestSimulate:
    def test_paper_accounting(self):
        payload, total = pr.bytes_per_group(512, 128, 10)
        assert payload == 6656 and total == 6656 + 10 * pr.OVERHEAD_BYTES

    def test_empty(self, params, groups):
        rep = pr.simulate_session(groups, params, n_groups=0)
        assert rep.recon.shape[0] == 0 and rep.wire == [] and rep.results == []

    def test_report(self, params):
        ds = generate_dataset(ScenarioConfig(), (1, 1, 5))
        test = ds.normalized("test")
        rep = pr.simulate_session(test, params, stats=ds.stats, n_subcarriers=64)
        assert len(rep.results) == 5 and len(rep.wire) == 20
        assert rep.payload_bytes_per_group == 4 * (32 + 3 * 8)
        assert sum(len(w) for w in rep.wire[:4]) == rep.total_bytes_per_group
        assert rep.bs_step_s_max < 0.04 and rep.realtime_ok
        assert np.array_equal(pr.replay(rep.wire, params, 4).reshape(rep.recon.shape), rep.recon)
