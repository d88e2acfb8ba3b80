"""Two-party value-assessment session.

P2 encrypts its one-hot labels under its own TLWE key and sends them with the
(public) features. P1 then trains on ``D1 + D2``. For each batch, P1 computes
the label-free half of the gradient in the clear. It computes the label half
over P2's rows homomorphically, adds P2's encrypted noise scaled by the
batch sensitivity, and blinds the result with a fresh uniform pad before P2
decrypts it. At the end P1 compares the new model with its own model ``M1``
on its holdout set, and both parties learn the one-bit verdict.

Fixed-point: logit gradients and the pad are carried at ``scale_z`` (10**6).
Sensitivity and noise are each carried at ``scale_noise`` (10**3), so their
product also lands on the ``scale_z`` grid.
"""

from __future__ import annotations

import enum
import math
import threading
from dataclasses import dataclass, field

import numpy as np

from .. import nn
from .. import rng as rngs
from ..privacy import BudgetExhausted, PrivacyAccountant, batch_sensitivity, nonneg_split, per_epoch_budget, sample_noise
from ..torus import (
    DEFAULT_Z_MAX,
    SecretKey,
    TlweParams,
    decode_signed,
    decrypt_many,
    encode_signed,
    encrypt_many,
    keygen,
    validate_noise_budget,
)
from .messages import (
    BlindedNoisyYTerm,
    DecryptedBlinded,
    EncDataset,
    EncNoise,
    FrameError,
    NoiseRequest,
    Verdict,
    frame_decode,
    frame_encode,
)
from .transport import Channel, Listener, TransportError, inproc_pair, tcp_connect


class AbortCode(enum.IntEnum):
    TRANSPORT = 1
    ORDER = 2
    BUDGET = 3
    NOISE_BUDGET = 4
    OVERFLOW = 5
    INPUT = 6


class SessionAbort(RuntimeError):
    def __init__(self, code: AbortCode, message: str):
        super().__init__(f"[{code.name}] {message}")
        self.code = code


@dataclass(frozen=True)
class SessionConfig:
    spec: nn.LayerSpec
    tlwe: TlweParams = field(default_factory=TlweParams)
    epsilon_total: float = 10.0  # math.inf disables the DP noise
    epochs: int = 50
    batch_size: int = 256
    learning_rate: float = 0.1
    l2: float = 0.01
    seed: int = 0
    scale_z: int = 10**6
    scale_noise: int = 10**3
    z_max: int = DEFAULT_Z_MAX
    compat_nonneg: bool = False
    verdict_detail: str = "bit"  # or "with-accuracy"
    # "sum": noise multiplier is the sensitivity of the summed label term N_B
    # (|B| * dS_B), which is what gets released. "literal": multiplier dS_B.
    noise_calibration: str = "sum"

    def __post_init__(self):
        if self.scale_z != self.scale_noise**2:
            raise ValueError("scale_z must equal scale_noise**2")
        if self.verdict_detail not in ("bit", "with-accuracy"):
            raise ValueError(f"unknown verdict_detail {self.verdict_detail!r}")
        if self.noise_calibration not in ("sum", "literal"):
            raise ValueError(f"unknown noise_calibration {self.noise_calibration!r}")
        if not self.epsilon_total > 0:
            raise ValueError("epsilon_total must be positive")

    @property
    def train_config(self) -> nn.TrainConfig:
        return nn.TrainConfig(self.epochs, self.batch_size, self.learning_rate, self.l2)

    @property
    def epsilon_batch(self) -> float:
        return per_epoch_budget(self.epsilon_total, self.epochs)

    def noise_budget(self):
        return validate_noise_budget(self.tlwe, self.z_max, self.spec.n_classes * self.batch_size)


def fixed_point(x, scale: int) -> np.ndarray:
    """Round ``x * scale`` half-to-even to int64."""
    return np.rint(np.asarray(x, dtype=float) * scale).astype(np.int64)


def _check_scalars(z: np.ndarray, z_max: int, what: str):
    if z.size and int(np.abs(z).max()) > z_max:
        raise SessionAbort(AbortCode.OVERFLOW,
                           f"{what} scalar {int(np.abs(z).max())} exceeds Z_max={z_max}")


# --- single protocol steps -------------------------------------------------

def p2_prepare_encrypted_dataset(features, labels, key: SecretKey, config: SessionConfig,
                                 rng: np.random.Generator) -> EncDataset:
    features = np.asarray(features, dtype=float)
    labels = np.asarray(labels, dtype=int)
    if features.shape[0] == 0:
        raise SessionAbort(AbortCode.INPUT, "D2 is empty; nothing to assess")
    k = config.spec.n_classes
    if labels.min() < 0 or labels.max() >= k:
        raise SessionAbort(AbortCode.INPUT, f"labels do not fit K={k} classes")
    if features.shape[1] != config.spec.d_in:
        raise SessionAbort(AbortCode.INPUT, "feature width does not match the network input")
    onehot = nn.one_hot(labels, k).astype(np.int64)
    cts = encrypt_many(onehot.ravel(), key, config.tlwe, rng)
    return EncDataset(features.copy(), cts.reshape(labels.shape[0], k, -1))


def p1_homomorphic_y_term(z_grads, enc_labels, config: SessionConfig) -> np.ndarray:
    """Encrypted ``sum_s sum_i y_i(s) * round(scale_z * dz_i(s)/dw)`` for each coordinate.

    ``z_grads`` is ``(m, K, R)`` over P2's rows in the batch and ``enc_labels``
    the matching ``(m, K, n + 1)`` label ciphertexts. The scalar products and
    sums are one modular matrix product.
    """
    zhat = fixed_point(z_grads, config.scale_z)
    m, k, r = zhat.shape
    # Noise on coordinate r grows with the L2 norm of its scalars; the session
    # budget allows z_max * sqrt(K * batch_size) there.
    limit = config.z_max * math.sqrt(k * config.batch_size)
    norms = np.sqrt(np.square(zhat.reshape(m * k, r).astype(float)).sum(axis=0))
    if m * k > k * config.batch_size or norms.max(initial=0.0) > limit:
        raise SessionAbort(AbortCode.OVERFLOW,
                           f"logit-gradient scalars (L2 {norms.max():.4g}) exceed the noise budget {limit:.4g}")
    scal = zhat.reshape(m * k, r).T.astype(np.uint64)
    cts = enc_labels.reshape(m * k, -1)
    return (scal @ cts) & config.tlwe.mask


def p1_scale_and_blind(enc_y_term, enc_noise: EncNoise | None, multiplier: float, mu,
                       config: SessionConfig) -> BlindedNoisyYTerm:
    if enc_noise is None:
        raise SessionAbort(AbortCode.ORDER, "no encrypted noise received for this batch")
    params = config.tlwe
    noise = enc_noise.cts
    if enc_noise.pairs:
        noise = (noise[:, 0, :] - noise[:, 1, :]) & params.mask
    if noise.shape != enc_y_term.shape:
        raise SessionAbort(AbortCode.ORDER, f"noise has shape {noise.shape}, expected {enc_y_term.shape}")
    m_hat = int(fixed_point(multiplier, config.scale_noise))
    _check_scalars(np.array([m_hat]), config.z_max, "sensitivity")
    out = (enc_y_term + noise * np.uint64(m_hat % 2**64)) & params.mask
    mu = np.asarray(mu, dtype=np.uint64)
    out[:, -1] = (out[:, -1] + mu * np.uint64(params.delta)) & params.mask
    return BlindedNoisyYTerm(out)


def p2_decrypt_blinded(msg: BlindedNoisyYTerm, key: SecretKey, config: SessionConfig) -> DecryptedBlinded:
    slots = decrypt_many(msg.cts, key, config.tlwe)
    return DecryptedBlinded(np.array([decode_signed(s, config.tlwe) for s in slots], dtype=np.int64))


def p2_noise(r: int, config: SessionConfig, rng: np.random.Generator) -> np.ndarray:
    """Per-batch DP noise already quantized at ``scale_noise``."""
    if math.isinf(config.epsilon_total):
        return np.zeros(r, dtype=np.int64)
    return fixed_point(sample_noise(r, config.epsilon_batch, rng), config.scale_noise)


def p2_encrypt_noise(eta_hat, key: SecretKey, config: SessionConfig, rng) -> EncNoise:
    params = config.tlwe
    if config.compat_nonneg:
        shifted, mag = nonneg_split(eta_hat)
        slots = np.stack([shifted, mag], axis=1).astype(np.int64).ravel()
        if slots.max(initial=0) >= params.p // 2:
            raise SessionAbort(AbortCode.OVERFLOW, "noise does not fit the plaintext space")
        return EncNoise(encrypt_many(slots, key, params, rng).reshape(len(eta_hat), 2, -1))
    slots = [encode_signed(v, params) for v in eta_hat]
    return EncNoise(encrypt_many(slots, key, params, rng))


def unblind(values, mu, config: SessionConfig) -> np.ndarray:
    """Remove the pad and return the signed integers at ``scale_z``."""
    p = config.tlwe.p
    return np.array([decode_signed((int(v) - int(m)) % p, config.tlwe) for v, m in zip(values, mu)],
                    dtype=np.int64)


def p1_unblind_and_step(decrypted: DecryptedBlinded | None, mu, p_part, clear_y_sum, batch_size: int,
                        params: nn.NetworkParams, accountant: PrivacyAccountant | None,
                        config: SessionConfig, epoch: int = 0, batch: int = 0,
                        sensitivity: float = 0.0) -> nn.NetworkParams:
    """Finish one batch: merge the decrypted label term with P1's clear rows and take an SGD step.

    ``clear_y_sum`` is the unnormalized label term over P1's own rows. With
    ``decrypted`` set to None (a batch with no P2 rows) nothing is charged.
    """
    y_sum = np.array(clear_y_sum, dtype=float)
    if decrypted is not None:
        if accountant is not None:
            try:
                accountant.charge(epoch, batch, sensitivity)
            except BudgetExhausted as exc:
                raise SessionAbort(AbortCode.BUDGET, str(exc)) from exc
        y_sum = y_sum + unblind(decrypted.values, mu, config) / config.scale_z
    grad = nn.assemble_gradient(p_part, y_sum / batch_size)
    return nn.sgd_step(params, grad, config.learning_rate, config.l2)


# --- role state machines ---------------------------------------------------

class _Endpoint:
    """Typed send/receive over a channel with an explicit allowed-next-message check."""

    def __init__(self, channel: Channel, params: TlweParams):
        self.channel, self.params = channel, params

    def send(self, msg):
        try:
            self.channel.send(frame_encode(msg))
        except TransportError as exc:
            raise SessionAbort(AbortCode.TRANSPORT, str(exc)) from exc

    def expect(self, *types):
        try:
            msg = frame_decode(self.channel.recv(), self.params)
        except TransportError as exc:
            raise SessionAbort(AbortCode.TRANSPORT, str(exc)) from exc
        except FrameError as exc:
            raise SessionAbort(AbortCode.TRANSPORT, f"malformed frame: {exc}") from exc
        if not isinstance(msg, types):
            want = " or ".join(t.__name__ for t in types)
            raise SessionAbort(AbortCode.ORDER, f"expected {want}, got {type(msg).__name__}")
        return msg


@dataclass
class P1Result:
    verdict: Verdict
    params: nn.NetworkParams  # the jointly trained model; never leaves P1
    m1: nn.NetworkParams
    acc_m1: float
    acc_m2: float
    accountant: PrivacyAccountant
    exchanges: int


def run_p1(channel: Channel, config: SessionConfig, d1, hold, m1: nn.NetworkParams | None = None) -> P1Result:
    """P1's side. ``d1`` and ``hold`` are ``(features, labels)`` pairs."""
    ep = _Endpoint(channel, config.tlwe)
    try:
        return _run_p1(ep, config, d1, hold, m1)
    finally:
        channel.close()


def _run_p1(ep, config, d1, hold, m1):
    report = config.noise_budget()
    if not report.passed:
        raise SessionAbort(AbortCode.NOISE_BUDGET,
                           f"noise bound {report.bound:.3g} >= 1/(2p) = {report.limit:.3g}")
    x1, y1 = np.asarray(d1[0], dtype=float), np.asarray(d1[1], dtype=int)
    spec, k = config.spec, config.spec.n_classes

    enc = ep.expect(EncDataset)
    if enc.label_cts.shape[1] != k:
        raise SessionAbort(AbortCode.INPUT, "P2's label vectors do not have K entries")
    if m1 is None:
        m1 = nn.train_plaintext(x1, y1, spec, config.train_config, config.seed)

    x = np.vstack([x1.reshape(-1, spec.d_in), enc.features])
    n1 = x1.shape[0]
    y_clear = nn.one_hot(y1, k)
    params = nn.init_params(spec, config.seed)
    accountant = PrivacyAccountant(config.epsilon_total, config.epochs)
    blind_rng = rngs.stream(config.seed, rngs.BLIND)
    exchanges = 0

    for epoch, b, idx in nn.batch_schedule(x.shape[0], config.batch_size, config.epochs, config.seed):
        trace = nn.forward(params, x[idx])
        jac = nn.z_jacobian(params, trace)
        p_part = nn.p_term(trace.p, jac)
        mine = idx < n1
        clear_sum = np.einsum("si,sir->r", y_clear[idx[mine]], jac[mine])
        theirs = np.flatnonzero(~mine)
        if theirs.size == 0:
            params = p1_unblind_and_step(None, None, p_part, clear_sum, len(idx), params, accountant, config)
            continue

        r = jac.shape[2]
        ep.send(NoiseRequest(epoch, b, r))
        jac2 = jac[theirs]
        enc_y = p1_homomorphic_y_term(jac2, enc.label_cts[idx[theirs] - n1], config)
        sens = batch_sensitivity(jac2)
        multiplier = sens * theirs.size if config.noise_calibration == "sum" else sens
        noise = ep.expect(EncNoise)
        mu = blind_rng.integers(0, config.tlwe.p, size=r, dtype=np.uint64)
        ep.send(p1_scale_and_blind(enc_y, noise, multiplier, mu, config))
        dec = ep.expect(DecryptedBlinded)
        if dec.values.shape != (r,):
            raise SessionAbort(AbortCode.ORDER, "decrypted vector has the wrong length")
        params = p1_unblind_and_step(dec, mu, p_part, clear_sum, len(idx), params, accountant, config,
                                     epoch, b, sens)
        exchanges += 1

    xh, yh = hold
    acc1 = nn.evaluate(m1, xh, yh)
    acc2 = nn.evaluate(params, xh, yh)
    verdict = Verdict(acc2 > acc1)
    if config.verdict_detail == "with-accuracy":
        verdict = Verdict(acc2 > acc1, acc1, acc2)
    ep.send(verdict)
    return P1Result(verdict, params, m1, acc1, acc2, accountant, exchanges)


def run_p2(channel: Channel, config: SessionConfig, d2) -> Verdict:
    """P2's side. ``d2`` is ``(features, labels)``; the key never leaves this function."""
    ep = _Endpoint(channel, config.tlwe)
    try:
        return _run_p2(ep, config, d2)
    finally:
        channel.close()


def _run_p2(ep, config, d2):
    report = config.noise_budget()
    if not report.passed:
        raise SessionAbort(AbortCode.NOISE_BUDGET,
                           f"noise bound {report.bound:.3g} >= 1/(2p) = {report.limit:.3g}")
    key = keygen(config.tlwe, int(rngs.stream(config.seed, rngs.KEY).integers(2**63)))
    enc_rng = rngs.stream(config.seed, rngs.ENCRYPT)
    noise_rng = rngs.stream(config.seed, rngs.DP_NOISE)
    ep.send(p2_prepare_encrypted_dataset(d2[0], d2[1], key, config, enc_rng))
    while True:
        msg = ep.expect(NoiseRequest, Verdict)
        if isinstance(msg, Verdict):
            return msg
        eta_hat = p2_noise(msg.r, config, noise_rng)
        ep.send(p2_encrypt_noise(eta_hat, key, config, enc_rng))
        blinded = ep.expect(BlindedNoisyYTerm)
        if blinded.cts.shape[0] != msg.r:
            raise SessionAbort(AbortCode.ORDER, "blinded vector length differs from the request")
        ep.send(p2_decrypt_blinded(blinded, key, config))


@dataclass
class SessionResult:
    p1: P1Result
    p2_verdict: Verdict
    p1_transcript: list
    p2_transcript: list


def run_session(config: SessionConfig, d1, d2, hold, transport: str = "inproc",
                m1: nn.NetworkParams | None = None) -> SessionResult:
    """Run both roles locally, P2 in a worker thread, over ``inproc`` queues or loopback ``tcp``."""
    box = {}

    if transport == "inproc":
        c1, c2 = inproc_pair()
        connect = lambda: c2  # noqa: E731
    elif transport == "tcp":
        listener = Listener("127.0.0.1", 0)
        host, port = listener.address
        connect = lambda: tcp_connect(host, port)  # noqa: E731
    else:
        raise ValueError(f"unknown transport {transport!r}")

    def p2_main():
        try:
            ch = connect()
            box["p2_channel"] = ch
            box["p2"] = run_p2(ch, config, d2)
        except BaseException as exc:  # surfaced in the caller
            box["p2_error"] = exc

    worker = threading.Thread(target=p2_main, name="p2", daemon=True)
    worker.start()
    try:
        if transport == "tcp":
            c1 = listener.accept()
        p1 = run_p1(c1, config, d1, hold, m1)
    except SessionAbort as exc:
        worker.join(timeout=30)
        # P1 only saw the channel drop; P2's own abort is the cause
        if exc.code == AbortCode.TRANSPORT and isinstance(box.get("p2_error"), SessionAbort):
            raise box["p2_error"] from exc
        raise
    except BaseException:
        worker.join(timeout=30)
        raise
    worker.join()
    if "p2_error" in box:
        raise box["p2_error"]
    return SessionResult(p1, box["p2"], c1.transcript, box["p2_channel"].transcript)
