"""The six protocol messages and their binary framing.

Frame layout::

    u32 (big-endian) payload length | u8 version (0x01) | u8 tag | payload

Inside payloads integers are little-endian, ciphertexts use the torus
module's layout, and vectors carry a u32 count. Accuracies travel as signed
8-byte integers at scale 10**6. Features travel as IEEE-754 doubles so that
P1 sees exactly the values P2 holds.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from ..torus import TlweParams, ct_vector_from_bytes, ct_vector_to_bytes

VERSION = 0x01
HEADER = struct.Struct(">IBB")
ACC_SCALE = 10**6


class FrameError(ValueError):
    pass


@dataclass
class EncDataset:
    features: np.ndarray  # (m, d) float64
    label_cts: np.ndarray  # (m, K, n + 1) uint64

    tag = 0x01


@dataclass
class NoiseRequest:
    epoch: int
    batch: int
    r: int

    tag = 0x02


@dataclass
class EncNoise:
    cts: np.ndarray  # (R, n + 1), or (R, 2, n + 1) for (eta + |eta|, |eta|) pairs

    tag = 0x03

    @property
    def pairs(self) -> bool:
        return self.cts.ndim == 3


@dataclass
class BlindedNoisyYTerm:
    cts: np.ndarray  # (R, n + 1)

    tag = 0x04


@dataclass
class DecryptedBlinded:
    values: np.ndarray  # (R,) int64, signed decoding of the blinded slots

    tag = 0x05


@dataclass
class Verdict:
    improved: bool
    acc_m1: float | None = None
    acc_m2: float | None = None

    tag = 0x06


MESSAGE_TYPES = {cls.tag: cls for cls in (EncDataset, NoiseRequest, EncNoise, BlindedNoisyYTerm,
                                          DecryptedBlinded, Verdict)}


def _encode_payload(msg) -> bytes:
    if isinstance(msg, EncDataset):
        m, d = msg.features.shape
        k = msg.label_cts.shape[1]
        head = struct.pack("<III", m, d, k)
        feats = np.ascontiguousarray(msg.features, dtype="<f8").tobytes()
        return head + feats + ct_vector_to_bytes(msg.label_cts.reshape(m * k, -1))
    if isinstance(msg, NoiseRequest):
        return struct.pack("<III", msg.epoch, msg.batch, msg.r)
    if isinstance(msg, EncNoise):
        mode = 2 if msg.pairs else 1
        return struct.pack("<B", mode) + ct_vector_to_bytes(msg.cts.reshape(-1, msg.cts.shape[-1]))
    if isinstance(msg, BlindedNoisyYTerm):
        return ct_vector_to_bytes(msg.cts)
    if isinstance(msg, DecryptedBlinded):
        vals = np.asarray(msg.values, dtype="<i8")
        return struct.pack("<I", vals.shape[0]) + vals.tobytes()
    if isinstance(msg, Verdict):
        if msg.acc_m1 is None:
            return struct.pack("<BB", int(msg.improved), 0)
        return struct.pack("<BBqq", int(msg.improved), 1, round(msg.acc_m1 * ACC_SCALE),
                           round(msg.acc_m2 * ACC_SCALE))
    raise TypeError(f"not a protocol message: {type(msg).__name__}")


def frame_encode(msg) -> bytes:
    payload = _encode_payload(msg)
    return HEADER.pack(len(payload), VERSION, msg.tag) + payload


def _need(buf, offset, size, what):
    if len(buf) < offset + size:
        raise FrameError(f"truncated {what}")


def _decode_payload(tag: int, buf: bytes, params: TlweParams):
    try:
        if tag == EncDataset.tag:
            _need(buf, 0, 12, "dataset header")
            m, d, k = struct.unpack_from("<III", buf, 0)
            _need(buf, 12, 8 * m * d, "features")
            feats = np.frombuffer(buf, dtype="<f8", count=m * d, offset=12).astype(float).reshape(m, d)
            cts, end = ct_vector_from_bytes(buf, 12 + 8 * m * d, params)
            if cts.shape[0] != m * k:
                raise FrameError("label ciphertext count does not match rows x classes")
            return EncDataset(feats, cts.reshape(m, k, -1)), end
        if tag == NoiseRequest.tag:
            _need(buf, 0, 12, "noise request")
            return NoiseRequest(*struct.unpack_from("<III", buf, 0)), 12
        if tag == EncNoise.tag:
            _need(buf, 0, 1, "noise mode")
            mode = buf[0]
            if mode not in (1, 2):
                raise FrameError(f"bad noise mode {mode}")
            cts, end = ct_vector_from_bytes(buf, 1, params)
            if mode == 2:
                if cts.shape[0] % 2:
                    raise FrameError("odd ciphertext count in paired noise")
                cts = cts.reshape(-1, 2, cts.shape[-1])
            return EncNoise(cts), end
        if tag == BlindedNoisyYTerm.tag:
            cts, end = ct_vector_from_bytes(buf, 0, params)
            return BlindedNoisyYTerm(cts), end
        if tag == DecryptedBlinded.tag:
            _need(buf, 0, 4, "value count")
            (r,) = struct.unpack_from("<I", buf, 0)
            _need(buf, 4, 8 * r, "values")
            vals = np.frombuffer(buf, dtype="<i8", count=r, offset=4).astype(np.int64)
            return DecryptedBlinded(vals), 4 + 8 * r
        if tag == Verdict.tag:
            _need(buf, 0, 2, "verdict")
            improved, has_acc = struct.unpack_from("<BB", buf, 0)
            if not has_acc:
                return Verdict(bool(improved)), 2
            _need(buf, 0, 18, "verdict accuracies")
            _, _, a1, a2 = struct.unpack_from("<BBqq", buf, 0)
            return Verdict(bool(improved), a1 / ACC_SCALE, a2 / ACC_SCALE), 18
    except FrameError:
        raise
    except ValueError as exc:
        raise FrameError(str(exc)) from exc
    raise FrameError(f"unknown message tag 0x{tag:02x}")


def frame_decode(frame: bytes, params: TlweParams):
    if len(frame) < HEADER.size:
        raise FrameError("truncated frame header")
    length, version, tag = HEADER.unpack_from(frame, 0)
    if version != VERSION:
        raise FrameError(f"bad version byte 0x{version:02x}")
    payload = frame[HEADER.size:]
    if len(payload) != length:
        raise FrameError(f"frame declares {length} payload bytes, has {len(payload)}")
    msg, end = _decode_payload(tag, payload, params)
    if end != length:
        raise FrameError("trailing bytes in payload")
    return msg
