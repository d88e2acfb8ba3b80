"""TLWE encryption over the discretized torus.

Torus elements are stored as their integer numerators modulo ``q`` in
``uint64`` arrays. ``q`` is restricted to a power of two no larger than
2**64, so numpy's wrap-around arithmetic on ``uint64`` followed by a mask
gives exact reduction modulo ``q``. Nothing in here touches floating point
except drawing the Gaussian encryption noise.

These parameters are demonstrative. No claim about a concrete LWE security
level is made.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "TlweParams",
    "SecretKey",
    "TlweCiphertext",
    "NoiseBudgetReport",
    "InvalidParams",
    "PlaintextRangeError",
    "ScalarRangeError",
    "ParamsMismatch",
    "DEFAULT_Z_MAX",
    "keygen",
    "encode_signed",
    "decode_signed",
    "encrypt",
    "encrypt_many",
    "decrypt",
    "decrypt_many",
    "ct_add",
    "ct_sub",
    "ct_scalar_mul",
    "ct_add_plain",
    "validate_noise_budget",
    "ct_to_bytes",
    "ct_from_bytes",
    "ct_vector_to_bytes",
    "ct_vector_from_bytes",
]

DEFAULT_Z_MAX = 10**6
_U64 = np.uint64


class InvalidParams(ValueError):
    pass


class PlaintextRangeError(ValueError):
    pass


class ScalarRangeError(ValueError):
    pass


class ParamsMismatch(ValueError):
    pass


def _is_pow2(x: int) -> bool:
    return x > 0 and x & (x - 1) == 0


@dataclass(frozen=True)
class TlweParams:
    q: int = 2**64
    p: int = 2**32
    n: int = 1024
    sigma_lwe: float = 2.0**-62

    def __post_init__(self):
        if not _is_pow2(self.q) or self.q > 2**64 or self.q < 2:
            raise InvalidParams(f"q must be a power of two in [2, 2**64], got {self.q}")
        if self.p < 2 or not _is_pow2(self.p) or self.q % self.p:
            raise InvalidParams(f"p must be a power of two >= 2 dividing q, got {self.p}")
        if self.n < 1:
            raise InvalidParams(f"n must be >= 1, got {self.n}")
        if not self.sigma_lwe >= 0:
            raise InvalidParams(f"sigma_lwe must be non-negative, got {self.sigma_lwe}")

    @property
    def delta(self) -> int:
        """Torus numerator of one plaintext step, ``q / p``."""
        return self.q // self.p

    @property
    def mask(self) -> np.uint64:
        return _U64(self.q - 1)


@dataclass(frozen=True)
class SecretKey:
    bits: np.ndarray  # uint64 0/1 vector of length n
    params: TlweParams

    def __eq__(self, other):
        if not isinstance(other, SecretKey):
            return NotImplemented
        return self.params == other.params and np.array_equal(self.bits, other.bits)

    __hash__ = None


@dataclass(frozen=True)
class TlweCiphertext:
    """A TLWE sample ``(a, b)``; ``data`` holds the mask followed by the body."""

    data: np.ndarray
    params: TlweParams = field(default_factory=TlweParams)

    @property
    def mask(self) -> np.ndarray:
        return self.data[:-1]

    @property
    def body(self) -> int:
        return int(self.data[-1])

    def __eq__(self, other):
        if not isinstance(other, TlweCiphertext):
            return NotImplemented
        return self.params == other.params and np.array_equal(self.data, other.data)

    __hash__ = None


def keygen(params: TlweParams, seed: int) -> SecretKey:
    rng = np.random.default_rng(seed)
    bits = rng.integers(0, 2, size=params.n, dtype=_U64)
    return SecretKey(bits, params)


def encode_signed(value: int, params: TlweParams) -> int:
    """Embed a signed integer into a plaintext slot (two's-complement style)."""
    half = params.p // 2
    value = int(value)
    if not -half <= value < half:
        raise PlaintextRangeError(f"{value} outside [{-half}, {half})")
    return value % params.p


def decode_signed(slot: int, params: TlweParams) -> int:
    slot = int(slot) % params.p
    return slot - params.p if slot >= params.p // 2 else slot


def _noise(rng: np.random.Generator, params: TlweParams, size) -> np.ndarray:
    if params.sigma_lwe == 0:
        return np.zeros(size, dtype=_U64)
    e0 = rng.normal(0.0, params.sigma_lwe, size=size)
    # round(q * e0) as a signed integer, then reduced mod q
    e = np.rint(np.ldexp(e0, int(math.log2(params.q)))).astype(np.int64)
    return e.astype(_U64) & params.mask


def encrypt_many(slots, key: SecretKey, params: TlweParams, rng: np.random.Generator) -> np.ndarray:
    """Encrypt a vector of plaintext slots; returns an ``(m, n + 1)`` uint64 array."""
    slots = np.asarray(slots, dtype=np.int64).reshape(-1)
    if np.any(slots < 0) or np.any(slots >= params.p):
        raise PlaintextRangeError("plaintext slots must lie in [0, p)")
    if key.bits.shape[0] != params.n:
        raise InvalidParams("key length does not match params.n")
    m = slots.shape[0]
    out = np.empty((m, params.n + 1), dtype=_U64)
    out[:, :-1] = rng.integers(0, params.q, size=(m, params.n), dtype=_U64, endpoint=False)
    body = out[:, :-1] @ key.bits
    body += slots.astype(_U64) * _U64(params.delta)
    body += _noise(rng, params, m)
    out[:, -1] = body & params.mask
    return out


def encrypt(slot: int, key: SecretKey, params: TlweParams, rng: np.random.Generator) -> TlweCiphertext:
    return TlweCiphertext(encrypt_many([slot], key, params, rng)[0], params)


def phase_many(cts: np.ndarray, key: SecretKey, params: TlweParams) -> np.ndarray:
    """``b - <s, a>`` mod q for each row."""
    cts = np.atleast_2d(cts)
    return (cts[:, -1] - cts[:, :-1] @ key.bits) & params.mask


def decrypt_many(cts: np.ndarray, key: SecretKey, params: TlweParams) -> np.ndarray:
    """Round each phase to the nearest multiple of ``q/p``; exact halves go down."""
    phase = phase_many(cts, key, params)
    delta = params.delta
    if delta == 1:
        return phase.astype(np.int64) if params.p <= 2**63 else phase
    shift = _U64(delta.bit_length() - 1)
    rem = phase & _U64(delta - 1)
    up = (rem > _U64(delta // 2)).astype(_U64)
    slots = ((phase >> shift) + up) & _U64(params.p - 1)
    return slots.astype(np.int64)


def decrypt(ct: TlweCiphertext, key: SecretKey, params: TlweParams | None = None) -> int:
    params = params or ct.params
    return int(decrypt_many(ct.data[None, :], key, params)[0])


def _check_same(c1: TlweCiphertext, c2: TlweCiphertext):
    if c1.params != c2.params or c1.data.shape != c2.data.shape:
        raise ParamsMismatch("ciphertexts were formed under different parameters")


def ct_add(c1: TlweCiphertext, c2: TlweCiphertext) -> TlweCiphertext:
    _check_same(c1, c2)
    return TlweCiphertext((c1.data + c2.data) & c1.params.mask, c1.params)


def ct_sub(c1: TlweCiphertext, c2: TlweCiphertext) -> TlweCiphertext:
    _check_same(c1, c2)
    return TlweCiphertext((c1.data - c2.data) & c1.params.mask, c1.params)


def ct_scalar_mul(z: int, ct: TlweCiphertext, z_max: int = DEFAULT_Z_MAX) -> TlweCiphertext:
    z = int(z)
    if abs(z) > z_max:
        raise ScalarRangeError(f"|{z}| exceeds the session scalar bound {z_max}")
    zz = _U64(z % 2**64)
    return TlweCiphertext((ct.data * zz) & ct.params.mask, ct.params)


def ct_add_plain(ct: TlweCiphertext, mu: int) -> TlweCiphertext:
    """Shift the body by plaintext slot ``mu`` (the blinding pad)."""
    params = ct.params
    data = ct.data.copy()
    data[-1:] = (data[-1:] + _U64((int(mu) % params.p) * params.delta)) & params.mask
    return TlweCiphertext(data, params)


@dataclass(frozen=True)
class NoiseBudgetReport:
    passed: bool
    bound: float  # 6 * sigma * z_max * sqrt(fan_in), torus units
    limit: float  # 1 / (2p)
    slack: float  # limit / bound

    @property
    def log2_slack(self) -> float:
        return math.log2(self.slack) if self.slack not in (0.0, math.inf) else self.slack


def validate_noise_budget(params: TlweParams, z_max: int, fan_in: int) -> NoiseBudgetReport:
    limit = 1.0 / (2 * params.p)
    bound = params.sigma_lwe * z_max * math.sqrt(fan_in) * 6
    slack = math.inf if bound == 0 else limit / bound
    return NoiseBudgetReport(bound < limit, bound, limit, slack)


# wire layout: u32 count (n) | n x u64 mask | u64 body, all little-endian

def ct_to_bytes(ct: TlweCiphertext) -> bytes:
    mask = ct.mask
    return struct.pack("<I", mask.shape[0]) + mask.astype("<u8").tobytes() + struct.pack("<Q", ct.body)


def _read_ct(buf: bytes, offset: int, params: TlweParams) -> tuple[TlweCiphertext, int]:
    if len(buf) < offset + 4:
        raise ValueError("truncated ciphertext header")
    (n,) = struct.unpack_from("<I", buf, offset)
    offset += 4
    end = offset + 8 * (n + 1)
    if len(buf) < end:
        raise ValueError("truncated ciphertext")
    if n != params.n:
        raise ValueError(f"ciphertext dimension {n} does not match params.n={params.n}")
    data = np.frombuffer(buf, dtype="<u8", count=n + 1, offset=offset).astype(_U64)
    return TlweCiphertext(data, params), end


def ct_from_bytes(buf: bytes, params: TlweParams) -> TlweCiphertext:
    ct, end = _read_ct(buf, 0, params)
    if end != len(buf):
        raise ValueError("trailing bytes after ciphertext")
    return ct


def _record_dtype(n: int) -> np.dtype:
    return np.dtype([("n", "<u4"), ("data", "<u8", (n + 1,))])


def ct_vector_to_bytes(cts: np.ndarray) -> bytes:
    """Serialize an ``(m, n + 1)`` ciphertext array: u32 count, then each ciphertext."""
    cts = np.atleast_2d(cts)
    m, width = cts.shape
    rec = np.empty(m, dtype=_record_dtype(width - 1))
    rec["n"] = width - 1
    rec["data"] = cts
    return struct.pack("<I", m) + rec.tobytes()


def ct_vector_from_bytes(buf: bytes, offset: int, params: TlweParams) -> tuple[np.ndarray, int]:
    if len(buf) < offset + 4:
        raise ValueError("truncated ciphertext vector header")
    (m,) = struct.unpack_from("<I", buf, offset)
    offset += 4
    dt = _record_dtype(params.n)
    end = offset + m * dt.itemsize
    if len(buf) < end:
        raise ValueError("truncated ciphertext vector")
    rec = np.frombuffer(buf, dtype=dt, count=m, offset=offset)
    if m and np.any(rec["n"] != params.n):
        raise ValueError(f"ciphertext dimension does not match params.n={params.n}")
    return rec["data"].astype(_U64).reshape(m, params.n + 1), end
