"""One UE and one BS exchanging feedback frames for a few channel groups.

Shows the wire layout of a frame, the per-group byte count, a corrupted frame
being rejected without touching BS state, an out-of-order frame aborting the
group, and that the BS output matches the offline forward pass bit for bit.
The model is untrained; only the protocol is on display.

    python3 demos/protocol_walkthrough.py
"""
import numpy as np

from csifb import models as md
from csifb import protocol as pr
from csifb.channel import ScenarioConfig, generate_dataset


def main():
    ds = generate_dataset(ScenarioConfig(), (1, 1, 4))
    groups = ds.normalized("test")
    params = md.init_params(8, 8, 32, 8, np.random.default_rng(0))

    ue, bs = pr.UeSession(params, 4), pr.BsSession(params, 4)
    wires = [pr.serialize(ue.step(f)) for f in groups[0]]
    print("first frame:", wires[0][:16].hex(" "), "...", wires[0][-4:].hex(" "))
    print("frame sizes:", [len(w) for w in wires])
    payload, total = pr.bytes_per_group(32, 8, 4)
    print(f"bytes per group: payload {payload}, with headers and CRC {total}")

    bs.step(wires[0])
    bad = bytearray(wires[1])
    bad[20] ^= 0x01
    try:
        bs.step(bytes(bad))
    except pr.ChecksumError as e:
        print(f"corrupt frame rejected ({e}); BS still expects t={bs.t}")
    out = [bs.step(w) for w in wires[1:]]
    ref = md.csinet_lstm_forward(groups[0], params, wire_dtype=np.float32)
    print("retransmitted group equals offline forward:", np.array_equal(np.stack(out), ref[1:]))

    wires = [pr.serialize(ue.step(f)) for f in groups[1]]
    bs.step(wires[0])
    try:
        bs.step(wires[2])
    except pr.SequenceError as e:
        print(f"out-of-order frame: {e}; aborted groups {bs.aborted}")

    rep = pr.simulate_session(groups, params, stats=ds.stats, n_subcarriers=64)
    print(f"{len(groups)} groups: BS step max {rep.bs_step_s_max * 1e3:.2f} ms "
          f"(budget 40 ms), real time: {rep.realtime_ok}")
    print("replay of the capture matches:",
          np.array_equal(pr.replay(pr.read_capture(pr.write_capture(rep.wire)), params, 4)
                         .reshape(rep.recon.shape), rep.recon))


if __name__ == "__main__":
    main()
