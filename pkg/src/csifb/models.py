"""CsiNet encoder/decoder, RefineNet, the LSTM stack and the CsiNet-LSTM composite.

Parameters are plain ``dict[str, Tensor]`` collections wrapped in small
dataclasses carrying the dimensions. Two forward paths exist:

* :func:`forward_batch` runs a batch of groups through one graph and is what
  training differentiates;
* :func:`csinet_lstm_forward` walks one group step by step through
  :func:`encode_frame`, :func:`decode_step` and :func:`lstm_step`, the same
  calls the base-station session makes, so protocol and offline outputs agree
  bit for bit.
"""
from __future__ import annotations

import hashlib
import io
import json
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

CHECKPOINT_MAGIC = "CSIFB-CKPT"
CHECKPOINT_VERSION = 1
REFINE_CHANNELS = (2, 8, 16, 8, 2)
FORGET_BIAS = 1.0
N_LSTM_LAYERS = 3


class DimensionError(ValueError):
    """Parameter or input dimensions do not fit together."""


def codeword_len(n_real: int, cr: float) -> int:
    """Codeword length for compression ratio ``cr = M / n_real``."""
    m = int(round(n_real * cr))
    if not 1 <= m < n_real:
        raise DimensionError(f"CR {cr:g} gives codeword length {m}, need 1 <= M < {n_real}")
    return m


def _glorot(rng, shape, fan_in, fan_out):
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)


def _conv_params(rng, c_in, c_out, name):
    w = _glorot(rng, (c_out, c_in, 3, 3), 9 * c_in, 9 * c_out)
    return {f"{name}.w": Tensor(w, True, f"{name}.w"),
            f"{name}.b": Tensor(np.zeros(c_out), True, f"{name}.b")}


def _dense_params(rng, n_in, n_out, name):
    return {f"{name}.w": Tensor(_glorot(rng, (n_out, n_in), n_in, n_out), True, f"{name}.w"),
            f"{name}.b": Tensor(np.zeros(n_out), True, f"{name}.b")}


@dataclass
class CsiNetParams:
    n_delay: int
    n_antennas: int
    codeword_len: int
    decoder_input_len: int
    tensors: dict[str, Tensor] = field(repr=False)

    @property
    def n_real(self) -> int:
        return 2 * self.n_delay * self.n_antennas

    def parameters(self) -> list[Tensor]:
        return list(self.tensors.values())

    def __getitem__(self, key) -> Tensor:
        return self.tensors[key]


def init_csinet(n_delay: int, n_antennas: int, codeword_len: int, rng: np.random.Generator,
                decoder_input_len: int | None = None) -> CsiNetParams:
    n = 2 * n_delay * n_antennas
    m_in = codeword_len if decoder_input_len is None else decoder_input_len
    t: dict[str, Tensor] = {}
    t.update(_conv_params(rng, 2, 2, "enc.conv"))
    t.update(_dense_params(rng, n, codeword_len, "enc.dense"))
    t.update(_dense_params(rng, m_in, n, "dec.dense"))
    for blk in (1, 2):
        for k in range(4):
            t.update(_conv_params(rng, REFINE_CHANNELS[k], REFINE_CHANNELS[k + 1],
                                  f"dec.refine{blk}.conv{k + 1}"))
    t.update(_conv_params(rng, 2, 2, "dec.out"))
    return CsiNetParams(n_delay, n_antennas, codeword_len, m_in, t)


def csinet_encode(frames, p: CsiNetParams) -> Tensor:
    """Normalised frames ``(B, 2, R, C)`` or ``(2, R, C)`` to codewords ``(B, M)`` / ``(M,)``."""
    x = ad.as_tensor(frames)
    expect = (2, p.n_delay, p.n_antennas)
    if x.shape[-3:] != expect:
        raise DimensionError(f"frame shape {x.shape} does not match encoder input {expect}")
    a = ad.leaky_relu(ad.conv2d(x, p["enc.conv.w"], p["enc.conv.b"]))
    flat = ad.reshape(a, a.shape[:-3] + (p.n_real,))
    return ad.dense(flat, p["enc.dense.w"], p["enc.dense.b"])


def refine_block(x: Tensor, p: CsiNetParams, blk: int) -> Tensor:
    a = x
    for k in range(1, 5):
        a = ad.conv2d(a, p[f"dec.refine{blk}.conv{k}.w"], p[f"dec.refine{blk}.conv{k}.b"])
        if k < 4:
            a = ad.leaky_relu(a)
    return ad.add(x, a)


def csinet_decode(s, p: CsiNetParams) -> Tensor:
    """Decoder input ``(B, M_in)`` or ``(M_in,)`` to frames in (0, 1)."""
    s = ad.as_tensor(s)
    if s.shape[-1] != p.decoder_input_len:
        raise DimensionError(f"decoder expects input length {p.decoder_input_len}, got {s.shape[-1]}")
    a = ad.dense(s, p["dec.dense.w"], p["dec.dense.b"])
    a = ad.reshape(a, s.shape[:-1] + (2, p.n_delay, p.n_antennas))
    a = refine_block(a, p, 1)
    a = refine_block(a, p, 2)
    return ad.sigmoid(ad.conv2d(a, p["dec.out.w"], p["dec.out.b"]))


def csinet_forward(frames, p: CsiNetParams) -> Tensor:
    return csinet_decode(csinet_encode(frames, p), p)


# --- LSTM stack ------------------------------------------------------------------

@dataclass
class LstmStackParams:
    dim: int
    layers: list[tuple[Tensor, Tensor]] = field(repr=False)

    def parameters(self) -> list[Tensor]:
        return [t for layer in self.layers for t in layer]


def init_lstm_stack(dim: int, rng: np.random.Generator, n_layers: int = N_LSTM_LAYERS) -> LstmStackParams:
    layers = []
    for k in range(n_layers):
        W = np.concatenate([_glorot(rng, (dim, 2 * dim), 2 * dim, dim) for _ in range(4)])
        b = np.zeros(4 * dim)
        b[dim:2 * dim] = FORGET_BIAS
        layers.append((Tensor(W, True, f"lstm{k}.w"), Tensor(b, True, f"lstm{k}.b")))
    return LstmStackParams(dim, layers)


LstmState = list  # [(h, c) per layer]


def zero_state(p: LstmStackParams, batch: tuple[int, ...] = ()) -> LstmState:
    z = np.zeros(batch + (p.dim,))
    return [(Tensor(z), Tensor(z)) for _ in p.layers]


def lstm_step(x, state: LstmState, p: LstmStackParams) -> tuple[Tensor, LstmState]:
    """One time step through every layer; returns the sigmoid top output and new state."""
    a = ad.as_tensor(x)
    new_state = []
    for (W, b), (h, c) in zip(p.layers, state):
        h, c = ad.lstm_cell(a, h, c, W, b)
        new_state.append((h, c))
        a = h
    return ad.sigmoid(a), new_state


def lstm_stack_forward(seq, p: LstmStackParams, state: LstmState | None = None):
    """Run a ``(T, D)`` / ``(B, T, D)`` sequence; returns ``(outputs, final_state)``.

    Outputs are stacked along the time axis with the same layout as ``seq``.
    """
    seq = ad.as_tensor(seq)
    if seq.shape[-1] != p.dim:
        raise DimensionError(f"LSTM input width {seq.shape[-1]} != {p.dim}")
    batched = seq.data.ndim == 3
    T = seq.shape[1] if batched else seq.shape[0]
    if state is None:
        state = zero_state(p, seq.shape[:1] if batched else ())
    outs = []
    for t in range(T):
        x = ad.index(seq, (slice(None), t) if batched else t)
        y, state = lstm_step(x, state, p)
        outs.append(y)
    return ad.stack(outs, axis=1 if batched else 0), state


# --- composite -------------------------------------------------------------------

@dataclass
class CsiNetLstmParams:
    high: CsiNetParams
    low: CsiNetParams
    lstm: LstmStackParams

    @property
    def n_delay(self) -> int:
        return self.high.n_delay

    @property
    def n_antennas(self) -> int:
        return self.high.n_antennas

    @property
    def n_real(self) -> int:
        return self.high.n_real

    def named(self) -> dict[str, Tensor]:
        out = {f"high.{k}": v for k, v in self.high.tensors.items()}
        out.update({f"low.{k}": v for k, v in self.low.tensors.items()})
        for k, (W, b) in enumerate(self.lstm.layers):
            out[f"lstm{k}.w"] = W
            out[f"lstm{k}.b"] = b
        return out

    def parameters(self) -> list[Tensor]:
        return list(self.named().values())

    def n_parameters(self) -> int:
        return sum(t.size for t in self.parameters())


def init_params(n_delay: int, n_antennas: int, m_high: int, m_low: int,
                rng: np.random.Generator) -> CsiNetLstmParams:
    high = init_csinet(n_delay, n_antennas, m_high, rng)
    low = init_csinet(n_delay, n_antennas, m_low, rng, decoder_input_len=m_high + m_low)
    lstm = init_lstm_stack(2 * n_delay * n_antennas, rng)
    return CsiNetLstmParams(high, low, lstm)


def forward_batch(groups, p: CsiNetLstmParams) -> Tensor:
    """Batched composite forward, ``(B, T, 2, R, C)`` -> same shape in (0, 1)."""
    g = ad.as_tensor(groups)
    if g.data.ndim != 5 or g.shape[1] < 1:
        raise DimensionError(f"expected (B, T, 2, R, C) groups, got {g.shape}")
    B, T = g.shape[:2]
    frame_shape = g.shape[2:]
    s1 = csinet_encode(ad.index(g, (slice(None), 0)), p.high)
    decoded = [ad.reshape(csinet_decode(s1, p.high), (B, 1, p.n_real))]
    if T > 1:
        rest = ad.reshape(ad.index(g, (slice(None), slice(1, None))), (B * (T - 1),) + frame_shape)
        st = csinet_encode(rest, p.low)
        s1_rep = ad.reshape(ad.stack([s1] * (T - 1), axis=1), (B * (T - 1), p.high.codeword_len))
        dec = csinet_decode(ad.concat([s1_rep, st], axis=-1), p.low)
        decoded.append(ad.reshape(dec, (B, T - 1, p.n_real)))
    seq = ad.concat(decoded, axis=1)
    out, _ = lstm_stack_forward(seq, p.lstm)
    return ad.reshape(out, g.shape)


def encode_frame(frame: np.ndarray, p: CsiNetLstmParams, first: bool) -> np.ndarray:
    """UE-side codeword for one ``(2, R, C)`` frame."""
    net = p.high if first else p.low
    return csinet_encode(frame[None], net).data[0]


def decode_step(s1: np.ndarray, st: np.ndarray | None, p: CsiNetLstmParams) -> np.ndarray:
    """Initial reconstruction, flattened; ``st is None`` selects the high-CR decoder."""
    if st is None:
        out = csinet_decode(s1[None], p.high)
    else:
        out = csinet_decode(np.concatenate([s1, st])[None], p.low)
    return out.data.reshape(1, p.n_real)


def csinet_lstm_forward(group: np.ndarray, p: CsiNetLstmParams,
                        wire_dtype=None) -> np.ndarray:
    """Reference single-group recovery, ``(T, 2, R, C)`` -> ``(T, 2, R, C)``.

    ``wire_dtype`` (e.g. ``np.float32``) rounds codewords as a feedback link would.
    """
    group = np.asarray(group, dtype=np.float64)
    if group.ndim != 4 or group.shape[0] == 0:
        raise DimensionError("csinet_lstm_forward needs a non-empty (T, 2, R, C) group")

    def wire(s):
        return s if wire_dtype is None else s.astype(wire_dtype).astype(np.float64)

    s1 = wire(encode_frame(group[0], p, first=True))
    state = zero_state(p.lstm, (1,))
    outs = []
    for t in range(group.shape[0]):
        st = None if t == 0 else wire(encode_frame(group[t], p, first=False))
        y, state = lstm_step(decode_step(s1, st, p), state, p.lstm)
        outs.append(y.data.reshape(group.shape[1:]))
    return np.stack(outs)


# --- persistence -----------------------------------------------------------------

def _net_dims(net: CsiNetParams) -> dict:
    return {"n_delay": net.n_delay, "n_antennas": net.n_antennas,
            "codeword_len": net.codeword_len, "decoder_input_len": net.decoder_input_len}


def _write_blocks(kind: str, dims: dict, named: dict[str, Tensor], meta: dict | None) -> bytes:
    blocks = [[k, list(v.shape)] for k, v in named.items()]
    head = {"format": CHECKPOINT_MAGIC, "version": CHECKPOINT_VERSION, "kind": kind,
            "dims": dims, "blocks": blocks, "meta": meta or {}}
    if "config_hash" not in head["meta"]:
        head["meta"]["config_hash"] = hashlib.sha256(
            json.dumps(dims, sort_keys=True).encode()).hexdigest()[:16]
    text = json.dumps(head, sort_keys=True, indent=1).encode()
    buf = io.BytesIO()
    buf.write(f"{CHECKPOINT_MAGIC} {len(text)}\n".encode())
    buf.write(text)
    for v in named.values():
        buf.write(np.ascontiguousarray(v.data, dtype="<f8").tobytes())
    return buf.getvalue()


def _read_blocks(blob: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    nl = blob.index(b"\n")
    magic, n = blob[:nl].decode().split()
    if magic != CHECKPOINT_MAGIC:
        raise ValueError(f"not a checkpoint (magic {magic!r})")
    head = json.loads(blob[nl + 1:nl + 1 + int(n)])
    if head["version"] != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {head['version']}")
    pos = nl + 1 + int(n)
    arrays = {}
    for name, shape in head["blocks"]:
        count = int(np.prod(shape))
        arrays[name] = np.frombuffer(blob, "<f8", count, pos).astype(np.float64).reshape(shape)
        pos += 8 * count
    if pos != len(blob):
        raise ValueError("checkpoint length does not match its header")
    return head, arrays


def params_to_bytes(p: CsiNetParams | CsiNetLstmParams, meta: dict | None = None) -> bytes:
    if isinstance(p, CsiNetParams):
        return _write_blocks("csinet", _net_dims(p), p.tensors, meta)
    dims = {"high": _net_dims(p.high), "low": _net_dims(p.low), "lstm_dim": p.lstm.dim,
            "lstm_layers": len(p.lstm.layers)}
    return _write_blocks("csinet-lstm", dims, p.named(), meta)


def _net_from(dims: dict, arrays: dict[str, np.ndarray], prefix: str = "") -> CsiNetParams:
    tensors = {k[len(prefix):]: Tensor(v, True, k[len(prefix):])
               for k, v in arrays.items() if k.startswith(prefix) and (prefix or "." in k)}
    return CsiNetParams(dims["n_delay"], dims["n_antennas"], dims["codeword_len"],
                        dims["decoder_input_len"], tensors)


def params_from_bytes(blob: bytes):
    head, arrays = _read_blocks(blob)
    dims = head["dims"]
    if head["kind"] == "csinet":
        return _net_from(dims, arrays)
    high = _net_from(dims["high"], arrays, "high.")
    low = _net_from(dims["low"], arrays, "low.")
    layers = [(Tensor(arrays[f"lstm{k}.w"], True, f"lstm{k}.w"),
               Tensor(arrays[f"lstm{k}.b"], True, f"lstm{k}.b"))
              for k in range(dims["lstm_layers"])]
    return CsiNetLstmParams(high, low, LstmStackParams(dims["lstm_dim"], layers))


def checkpoint_meta(blob: bytes) -> dict:
    return _read_blocks(blob)[0]


def save_params(p, path, meta: dict | None = None) -> None:
    with open(path, "wb") as fh:
        fh.write(params_to_bytes(p, meta))


def load_params(path):
    with open(path, "rb") as fh:
        return params_from_bytes(fh.read())


def copy_params(p):
    return params_from_bytes(params_to_bytes(p))


def preload_from_csinet(p: CsiNetLstmParams, high: CsiNetParams, low: CsiNetParams) -> None:
    """Copy standalone CsiNet weights into the composite in place.

    The low-CR standalone decoder reads only its own codeword, so its input
    weights fill the columns that act on ``s_t``; columns acting on the
    concatenated first codeword start at zero. LSTM weights are untouched.
    """
    def copy(dst: CsiNetParams, src: CsiNetParams, label: str):
        for name, t in dst.tensors.items():
            if name not in src.tensors:
                raise DimensionError(f"preload {label}: block {name} missing from checkpoint")
            s = src.tensors[name].data
            if name == "dec.dense.w" and s.shape != t.shape:
                m_hi = t.shape[1] - s.shape[1]
                if s.shape[0] != t.shape[0] or m_hi != p.high.codeword_len:
                    raise DimensionError(f"preload {label}: block {name} has shape {s.shape}, "
                                         f"composite needs {t.shape}")
                t.data[...] = 0.0
                t.data[:, m_hi:] = s
            elif s.shape != t.shape:
                raise DimensionError(f"preload {label}: block {name} has shape {s.shape}, "
                                     f"composite needs {t.shape}")
            else:
                t.data[...] = s
    copy(p.high, high, "high")
    copy(p.low, low, "low")
