"""UE and BS state machines for grouped codeword feedback, plus the wire format.

Frame layout (little-endian)::

    magic     4 bytes  b"CSIF"
    version   u8
    group_id  u32
    t         u16      1-based position in the group
    cr_id     u8       0 = high CR (first frame), 1 = low CR
    length    u32      payload bytes (4 * M)
    payload   f32[M]   codeword
    crc       u32      CRC-32 of every preceding byte
"""
from __future__ import annotations

import struct
import time
import zlib
from dataclasses import dataclass, field

import numpy as np

from .channel import NormStats, denormalize
from .metrics import EvalResult, evaluate
from .models import CsiNetLstmParams, decode_step, encode_frame, lstm_step, zero_state

MAGIC = b"CSIF"
VERSION = 1
HIGH, LOW = 0, 1
_HEAD = struct.Struct("<4sBIHBI")
HEADER_BYTES = _HEAD.size          # 16
CRC_BYTES = 4
OVERHEAD_BYTES = HEADER_BYTES + CRC_BYTES


class FrameError(ValueError):
    """A byte string is not a valid feedback frame."""


class MagicError(FrameError):
    pass


class VersionError(FrameError):
    pass


class LengthError(FrameError):
    pass


class ChecksumError(FrameError):
    pass


class SequenceError(RuntimeError):
    """A frame arrived out of order; the BS dropped the current group."""


@dataclass(frozen=True)
class FeedbackFrame:
    group_id: int
    t: int
    cr_id: int
    payload: np.ndarray        # float32 codeword
    version: int = VERSION

    def __eq__(self, other):
        if not isinstance(other, FeedbackFrame):
            return NotImplemented
        return ((self.group_id, self.t, self.cr_id, self.version)
                == (other.group_id, other.t, other.cr_id, other.version)
                and self.payload.dtype == other.payload.dtype
                and self.payload.tobytes() == other.payload.tobytes())

    @property
    def payload_len(self) -> int:
        return 4 * self.payload.size


def serialize(frame: FeedbackFrame) -> bytes:
    payload = np.ascontiguousarray(frame.payload, dtype="<f4").tobytes()
    body = _HEAD.pack(MAGIC, frame.version, frame.group_id, frame.t, frame.cr_id,
                      len(payload)) + payload
    return body + struct.pack("<I", zlib.crc32(body))


def deserialize(data: bytes) -> FeedbackFrame:
    if len(data) < OVERHEAD_BYTES:
        raise LengthError(f"{len(data)} bytes is shorter than a frame header")
    magic, version, group_id, t, cr_id, n = _HEAD.unpack_from(data)
    if magic != MAGIC:
        raise MagicError(f"bad magic {magic!r}")
    if version != VERSION:
        raise VersionError(f"unsupported version {version}")
    if n % 4 or len(data) != HEADER_BYTES + n + CRC_BYTES:
        raise LengthError(f"payload length {n} does not fit a {len(data)}-byte frame")
    (crc,) = struct.unpack_from("<I", data, HEADER_BYTES + n)
    if crc != zlib.crc32(data[:HEADER_BYTES + n]):
        raise ChecksumError("CRC-32 mismatch")
    if cr_id not in (HIGH, LOW):
        raise FrameError(f"unknown cr_id {cr_id}")
    payload = np.frombuffer(data, dtype="<f4", count=n // 4, offset=HEADER_BYTES).astype(np.float32)
    return FeedbackFrame(group_id, t, cr_id, payload, version)


def write_capture(frames: list[bytes]) -> bytes:
    """Length-prefixed stream of serialised frames."""
    return b"".join(struct.pack("<I", len(f)) + f for f in frames)


def read_capture(blob: bytes) -> list[bytes]:
    out, pos = [], 0
    while pos < len(blob):
        if pos + 4 > len(blob):
            raise LengthError("truncated capture length prefix")
        (n,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        if pos + n > len(blob):
            raise LengthError("truncated capture frame")
        out.append(blob[pos:pos + n])
        pos += n
    return out


@dataclass
class UeSession:
    params: CsiNetLstmParams
    group_len: int
    t: int = 1
    group_id: int = 0

    def step(self, frame: np.ndarray) -> FeedbackFrame:
        expect = (2, self.params.n_delay, self.params.n_antennas)
        if frame.shape != expect:
            raise ValueError(f"frame shape {frame.shape} != {expect}")
        first = self.t == 1
        s = encode_frame(frame, self.params, first=first).astype(np.float32)
        out = FeedbackFrame(self.group_id, self.t, HIGH if first else LOW, s)
        self.t += 1
        if self.t > self.group_len:
            self.t = 1
            self.group_id += 1
        return out


def ue_step(session: UeSession, frame: np.ndarray) -> FeedbackFrame:
    return session.step(frame)


@dataclass
class BsSession:
    params: CsiNetLstmParams
    group_len: int
    t: int = 1                     # next expected position
    group_id: int | None = None
    s1: np.ndarray | None = None
    state: list = field(default=None, repr=False)
    rejected: int = 0
    aborted: int = 0

    def __post_init__(self):
        if self.state is None:
            self.state = zero_state(self.params.lstm, (1,))

    def reset(self) -> None:
        self.t = 1
        self.s1 = None
        self.state = zero_state(self.params.lstm, (1,))

    def state_is_zero(self) -> bool:
        return all(not h.data.any() and not c.data.any() for h, c in self.state)

    def step(self, wire: bytes | FeedbackFrame) -> np.ndarray:
        """Consume one frame and return the ``(2, R, C)`` reconstruction.

        Corrupt frames raise a :class:`FrameError` and leave the session as it
        was; out-of-order frames abort the group and raise :class:`SequenceError`.
        """
        if isinstance(wire, (bytes, bytearray)):
            try:
                frame = deserialize(bytes(wire))
            except FrameError:
                self.rejected += 1
                raise
        else:
            frame = wire
        in_group = self.t > 1
        if frame.t != self.t or (in_group and frame.group_id != self.group_id) \
                or frame.cr_id != (HIGH if frame.t == 1 else LOW):
            expected = (self.group_id, self.t)
            self.reset()
            self.aborted += 1
            raise SequenceError(f"expected (group, t) = {expected}, got ({frame.group_id}, {frame.t}); "
                                "group dropped")
        s = frame.payload.astype(np.float64)
        if frame.t == 1:
            self.group_id = frame.group_id
            self.s1 = s
            init = decode_step(s, None, self.params)
        else:
            init = decode_step(self.s1, s, self.params)
        y, self.state = lstm_step(init, self.state, self.params.lstm)
        out = y.data.reshape(2, self.params.n_delay, self.params.n_antennas)
        self.t += 1
        if self.t > self.group_len:
            self.reset()
        return out


def bs_step(session: BsSession, wire: bytes | FeedbackFrame) -> np.ndarray:
    return session.step(wire)


def bytes_per_group(m_high: int, m_low: int, group_len: int,
                    overhead: int = OVERHEAD_BYTES) -> tuple[int, int]:
    """``(codeword payload bytes, total bytes with per-frame overhead)`` for one group."""
    payload = 4 * (m_high + (group_len - 1) * m_low)
    return payload, payload + group_len * overhead


@dataclass
class SessionReport:
    recon: np.ndarray                 # (G, T, 2, R, C) normalised reconstructions
    wire: list[bytes]
    payload_bytes_per_group: int
    total_bytes_per_group: int
    bs_step_s_max: float
    bs_step_s_median: float
    realtime_ok: bool
    results: list[EvalResult] = field(default_factory=list)


def simulate_session(groups: np.ndarray, params: CsiNetLstmParams, n_groups: int | None = None,
                     feedback_interval_s: float = 0.04, stats: NormStats | None = None,
                     n_subcarriers: int | None = None) -> SessionReport:
    """Stream normalised ``(G, T, 2, R, C)`` groups through a UE and a BS session pair.

    With ``stats`` and ``n_subcarriers`` each group is also scored against its
    own denormalised truth.
    """
    groups = np.asarray(groups, dtype=np.float64)
    if n_groups is not None:
        groups = groups[:n_groups]
    G, T = groups.shape[:2]
    ue, bs = UeSession(params, T), BsSession(params, T)
    recon = np.empty_like(groups)
    wire: list[bytes] = []
    times: list[float] = []
    for g in range(G):
        for t in range(T):
            data = serialize(ue.step(groups[g, t]))
            wire.append(data)
            t0 = time.perf_counter()
            recon[g, t] = bs.step(data)
            times.append(time.perf_counter() - t0)
    payload, total = bytes_per_group(params.high.codeword_len, params.low.codeword_len, T)
    tmax = max(times, default=0.0)
    tmed = float(np.median(times)) if times else 0.0
    results = []
    if stats is not None and n_subcarriers is not None:
        cr = params.low.codeword_len / params.n_real
        for g in range(G):
            results.append(evaluate("csinet-lstm/protocol", cr, denormalize(groups[g], stats),
                                    denormalize(recon[g], stats), n_subcarriers, tmed, group=g))
    return SessionReport(recon, wire, payload, total, tmax, tmed, tmax < feedback_interval_s,
                         results)


def replay(wire: list[bytes], params: CsiNetLstmParams, group_len: int) -> np.ndarray:
    """Feed a recorded capture to a fresh BS session; returns ``(n_frames, 2, R, C)``."""
    bs = BsSession(params, group_len)
    return np.stack([bs.step(w) for w in wire]) if wire else np.empty((0,))
