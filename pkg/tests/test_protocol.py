import math

import numpy as np
import pytest

from collab_assure import nn
from collab_assure.data import RandomLabeler, SplitPlan, gen_synthetic_binary, relabel_random, split
from collab_assure.privacy import PrivacyAccountant, batch_sensitivity
from collab_assure.protocol import messages as M
from collab_assure.protocol import session as S
from collab_assure.protocol.transport import inproc_pair
from collab_assure.torus import decrypt_many, keygen

SPEC_222 = nn.LayerSpec((2, 2, 2))


def small_parts(seed=0, n=60):
    data = gen_synthetic_binary(n, 2, 0.5, seed)
    d1, d2, hold = split(data, SplitPlan(0.3, 0.2, None, seed=seed))
    return d1.xy, d2.xy, hold.xy


def cfg(**kw):
    base = dict(spec=nn.LayerSpec((2, 3, 2)), epsilon_total=math.inf, epochs=5, batch_size=8, seed=0)
    base.update(kw)
    return S.SessionConfig(**base)


def sig(x):
    return 1 / (1 + np.exp(-x))


def test_config_validation():
    with pytest.raises(ValueError):
        cfg(scale_z=10**5)
    with pytest.raises(ValueError):
        cfg(verdict_detail="everything")
    with pytest.raises(ValueError):
        cfg(noise_calibration="other")
    with pytest.raises(ValueError):
        cfg(epsilon_total=0.0)
    assert cfg(epsilon_total=10.0, epochs=100).epsilon_batch == pytest.approx(1.0)


def test_fixed_point_rounds_half_to_even():
    assert S.fixed_point([0.5e-6, 1.5e-6, -0.5e-6, 2.5e-6], 10**6).tolist() == [0, 2, 0, 2]


def test_single_exchange_matches_hand_computation():
    """2-2-2 net, two P2 rows, no noise: the protocol step equals a hand-derived SGD step."""
    w1 = np.array([[0.5, -0.25], [0.1, 0.3]])
    b1 = np.array([0.05, -0.1])
    w2 = np.array([[0.2, -0.4], [0.7, 0.1]])
    params = nn.NetworkParams(SPEC_222, [w1.copy(), w2.copy()], [b1.copy()])
    x = np.array([[1.0, 2.0], [-1.0, 0.5]])
    y = np.array([1, 0])
    config = S.SessionConfig(spec=SPEC_222, epsilon_total=math.inf, batch_size=2, learning_rate=0.5, l2=0.0)

    # hand-derived gradient of the mean cross-entropy
    h = sig(x @ w1.T + b1)
    z = h @ w2.T
    p = np.exp(z) / np.exp(z).sum(axis=1, keepdims=True)
    d = p - np.eye(2)[y]
    gw2 = d.T @ h / 2
    dh = (d @ w2) * h * (1 - h)
    gw1 = dh.T @ x / 2
    gb1 = dh.sum(axis=0) / 2
    expected = np.r_[w1.ravel() - 0.5 * gw1.ravel(), b1 - 0.5 * gb1, w2.ravel() - 0.5 * gw2.ravel()]

    key = keygen(config.tlwe, 1)
    rng = np.random.default_rng(2)
    enc = S.p2_prepare_encrypted_dataset(x, y, key, config, rng)
    trace = nn.forward(params, x)
    jac = nn.z_jacobian(params, trace)
    enc_y = S.p1_homomorphic_y_term(jac, enc.label_cts, config)
    eta = S.p2_noise(jac.shape[2], config, rng)
    assert not eta.any()
    noise = S.p2_encrypt_noise(eta, key, config, rng)
    mu = np.random.default_rng(3).integers(0, config.tlwe.p, size=jac.shape[2], dtype=np.uint64)
    blinded = S.p1_scale_and_blind(enc_y, noise, 1.0, mu, config)
    dec = S.p2_decrypt_blinded(blinded, key, config)
    new = S.p1_unblind_and_step(dec, mu, nn.p_term(trace.p, jac), np.zeros(jac.shape[2]), 2, params, None, config)
    # quantization: each y-term coordinate is off by at most K*|B|*0.5/scale_z before the /|B|
    tol = 0.5 * (2 * 2 * 0.5 / 1e6) / 2 + 1e-12
    assert np.max(np.abs(new.flat() - expected)) <= tol


def test_homomorphic_y_term_decrypts_to_rounded_sum():
    rng = np.random.default_rng(4)
    config = cfg(batch_size=4)
    key = keygen(config.tlwe, 0)
    labels = np.array([0, 1, 1, 0])
    enc = S.p2_prepare_encrypted_dataset(rng.normal(size=(4, 2)), labels, key, config, rng)
    jac = rng.normal(scale=0.7, size=(4, 2, 5))
    slots = decrypt_many(S.p1_homomorphic_y_term(jac, enc.label_cts, config), key, config.tlwe)
    got = [config.tlwe.p and (int(s) - config.tlwe.p if s >= config.tlwe.p // 2 else int(s)) for s in slots]
    zhat = np.rint(jac * 1e6).astype(np.int64)
    want = sum(zhat[s, labels[s]] for s in range(4))
    assert got == want.tolist()


def test_overflow_abort():
    config = cfg(batch_size=2)
    key = keygen(config.tlwe, 0)
    enc = S.p2_prepare_encrypted_dataset(np.zeros((1, 2)), [0], key, config, np.random.default_rng(0))
    big = np.full((1, 2, 1), 3.0)  # 3e6 > 1e6 * sqrt(4)
    with pytest.raises(S.SessionAbort) as ei:
        S.p1_homomorphic_y_term(big, enc.label_cts, config)
    assert ei.value.code == S.AbortCode.OVERFLOW


def test_missing_or_misshaped_noise_aborts():
    config = cfg()
    y = np.zeros((3, config.tlwe.n + 1), dtype=np.uint64)
    for noise in (None, M.EncNoise(np.zeros((2, config.tlwe.n + 1), dtype=np.uint64))):
        with pytest.raises(S.SessionAbort) as ei:
            S.p1_scale_and_blind(y, noise, 1.0, np.zeros(3, dtype=np.uint64), config)
        assert ei.value.code == S.AbortCode.ORDER


def test_unblind_inverts_blind():
    config = cfg()
    rng = np.random.default_rng(5)
    vals = rng.integers(-(2**31), 2**31, size=50)
    mu = rng.integers(0, 2**32, size=50)
    blinded = [(int(v) + int(m)) % 2**32 for v, m in zip(vals, mu)]
    assert np.array_equal(S.unblind(blinded, mu, config), vals)


def test_noise_scaling_decrypts_to_sensitivity_times_noise():
    config = cfg(epsilon_total=1.0, epochs=1)
    key = keygen(config.tlwe, 0)
    rng = np.random.default_rng(6)
    eta = S.p2_noise(6, config, rng)
    assert eta.any()
    noise = S.p2_encrypt_noise(eta, key, config, rng)
    zero = np.zeros((6, config.tlwe.n + 1), dtype=np.uint64)
    mu = np.zeros(6, dtype=np.uint64)
    dec = S.p2_decrypt_blinded(S.p1_scale_and_blind(zero, noise, 0.0123, mu, config), key, config)
    assert np.array_equal(dec.values, 12 * eta)  # round(0.0123 * 1e3) = 12


def test_compat_nonneg_matches_signed_mode():
    d1, d2, hold = small_parts(1)
    signed = S.run_session(cfg(epsilon_total=5.0), d1, d2, hold)
    compat = S.run_session(cfg(epsilon_total=5.0, compat_nonneg=True), d1, d2, hold)
    assert np.array_equal(signed.p1.params.flat(), compat.p1.params.flat())
    frames = [f for d, f in compat.p2_transcript if d == "out" and f[5] == M.EncNoise.tag]
    assert frames and all(f[6] == 2 for f in frames)


def test_zero_noise_matches_plaintext_training():
    d1, d2, hold = small_parts(2, n=120)
    config = cfg(epochs=10)
    res = S.run_session(config, d1, d2, hold)
    x = np.vstack([d1[0], d2[0]])
    y = np.r_[d1[1], d2[1]]
    plain = nn.train_plaintext(x, y, config.spec, config.train_config, config.seed)
    assert np.max(np.abs(res.p1.params.flat() - plain.flat())) <= 1e-4
    m1 = nn.train_plaintext(*d1, config.spec, config.train_config, config.seed)
    assert np.array_equal(res.p1.m1.flat(), m1.flat())


def test_exchanges_and_spend_follow_d2_batches():
    d1, d2, hold = small_parts(3, n=80)
    config = cfg(epsilon_total=4.0, epochs=4, batch_size=4)
    res = S.run_session(config, d1, d2, hold)
    n1 = len(d1[1])
    expected, epochs_used = 0, set()
    for epoch, _, idx in nn.batch_schedule(n1 + len(d2[1]), 4, 4, config.seed):
        if (idx >= n1).any():
            expected += 1
            epochs_used.add(epoch)
    assert expected < sum(1 for _ in nn.batch_schedule(n1 + len(d2[1]), 4, 4, config.seed))
    assert res.p1.exchanges == expected == len(res.p1.accountant.ledger)
    requests = [f for d, f in res.p1_transcript if d == "out" and f[5] == M.NoiseRequest.tag]
    assert len(requests) == expected
    assert res.p1.accountant.total() == pytest.approx(math.sqrt(len(epochs_used)) * 4.0 / 2.0, abs=1e-12)


def test_blinded_values_hide_the_label_term():
    d1, d2, hold = small_parts(4)
    config = cfg(epochs=2)
    res = S.run_session(config, d1, d2, hold)
    seen = [M.frame_decode(f, config.tlwe).values for d, f in res.p2_transcript
            if d == "out" and f[5] == M.DecryptedBlinded.tag]
    vals = np.concatenate(seen).astype(float)
    # honest label terms are a few units at scale 1e6; blinded ones are spread over the whole 32-bit range
    assert np.abs(vals).max() > 2**28
    assert abs(vals.std() / (2**32 / math.sqrt(12)) - 1) < 0.25


def test_noise_dominates_at_tiny_epsilon():
    rng = np.random.default_rng(7)
    config = cfg(epsilon_total=0.001, epochs=1, batch_size=8)
    params = nn.init_params(config.spec, 0)
    x = rng.normal(size=(8, 2))
    y = rng.integers(0, 2, size=8)
    trace = nn.forward(params, x)
    jac = nn.z_jacobian(params, trace)
    oracle = nn.backprop(params, trace, trace.p - nn.one_hot(y, 2))
    key = keygen(config.tlwe, 0)
    enc = S.p2_prepare_encrypted_dataset(x, y, key, config, rng)
    enc_y = S.p1_homomorphic_y_term(jac, enc.label_cts, config)
    mult = batch_sensitivity(jac) * 8
    cosines = []
    for _ in range(30):
        noise = S.p2_encrypt_noise(S.p2_noise(jac.shape[2], config, rng), key, config, rng)
        mu = rng.integers(0, config.tlwe.p, size=jac.shape[2], dtype=np.uint64)
        dec = S.p2_decrypt_blinded(S.p1_scale_and_blind(enc_y, noise, mult, mu, config), key, config)
        y_sum = S.unblind(dec.values, mu, config) / config.scale_z
        g = nn.p_term(trace.p, jac) - y_sum / 8
        cosines.append(abs(g @ oracle) / (np.linalg.norm(g) * np.linalg.norm(oracle)))
    assert np.mean(cosines) < 0.5


def test_budget_exhaustion_aborts():
    config = cfg()
    params = nn.init_params(config.spec, 0)
    r = config.spec.n_params
    full = PrivacyAccountant(1.0, 1)
    full.charge(0, 0, 0.1)
    with pytest.raises(S.SessionAbort) as ei:
        S.p1_unblind_and_step(M.DecryptedBlinded(np.zeros(r, dtype=np.int64)), np.zeros(r, dtype=np.uint64),
                              np.zeros(r), np.zeros(r), 4, params, full, config, epoch=1)
    assert ei.value.code == S.AbortCode.BUDGET


def test_noise_budget_failure_aborts():
    d1, d2, hold = small_parts(5)
    with pytest.raises(S.SessionAbort) as ei:
        S.run_session(cfg(batch_size=10**6), d1, d2, hold)
    assert ei.value.code == S.AbortCode.NOISE_BUDGET


def test_empty_d2_aborts():
    d1, _, hold = small_parts(6)
    with pytest.raises(S.SessionAbort) as ei:
        S.run_session(cfg(), d1, (np.zeros((0, 2)), np.zeros(0, dtype=int)), hold)
    assert ei.value.code == S.AbortCode.INPUT


def test_out_of_order_message_aborts_p1():
    a, b = inproc_pair()
    b.send(M.frame_encode(M.Verdict(True)))
    d1, _, hold = small_parts(7)
    with pytest.raises(S.SessionAbort) as ei:
        S.run_p1(a, cfg(), d1, hold)
    assert ei.value.code == S.AbortCode.ORDER


def test_out_of_order_message_aborts_p2():
    a, b = inproc_pair()
    a.send(M.frame_encode(M.DecryptedBlinded(np.zeros(2, dtype=np.int64))))
    _, d2, _ = small_parts(8)
    with pytest.raises(S.SessionAbort) as ei:
        S.run_p2(b, cfg(), d2)
    assert ei.value.code == S.AbortCode.ORDER


def test_malformed_frame_is_transport_abort():
    a, b = inproc_pair()
    b.send(b"\x00\x00\x00\x01\x07\x01\x00")
    d1, _, hold = small_parts(9)
    with pytest.raises(S.SessionAbort) as ei:
        S.run_p1(a, cfg(), d1, hold)
    assert ei.value.code == S.AbortCode.TRANSPORT


def test_peer_disappearing_is_transport_abort():
    a, b = inproc_pair()
    b.close()
    d1, _, hold = small_parts(10)
    with pytest.raises(S.SessionAbort) as ei:
        S.run_p1(a, cfg(), d1, hold)
    assert ei.value.code == S.AbortCode.TRANSPORT


def test_transports_give_identical_transcripts():
    d1, d2, hold = small_parts(11)
    config = cfg(epsilon_total=3.0, epochs=3)
    a = S.run_session(config, d1, d2, hold, transport="inproc")
    b = S.run_session(config, d1, d2, hold, transport="tcp")
    assert a.p1_transcript == b.p1_transcript
    assert a.p2_transcript == b.p2_transcript
    assert a.p1.verdict == a.p2_verdict == b.p2_verdict


def test_verdict_detail_switch():
    d1, d2, hold = small_parts(12)
    bit = S.run_session(cfg(epochs=2), d1, d2, hold)
    assert bit.p2_verdict.acc_m1 is None
    full = S.run_session(cfg(epochs=2, verdict_detail="with-accuracy"), d1, d2, hold)
    assert full.p2_verdict.acc_m1 == pytest.approx(full.p1.acc_m1, abs=1e-6)
    assert full.p2_verdict.improved == (full.p1.acc_m2 > full.p1.acc_m1)


def test_unknown_transport():
    d1, d2, hold = small_parts(13)
    with pytest.raises(ValueError):
        S.run_session(cfg(), d1, d2, hold, transport="carrier-pigeon")


def test_randomly_labelled_d2_rarely_helps():
    falses = 0
    for s in range(10):
        data = gen_synthetic_binary(900, 4, 0.5, s)
        d1, d2, hold = split(data, SplitPlan(d2_fraction=None, d1_counts=(50, 50), holdout_counts=(200, 200), seed=s))
        d2 = relabel_random(d2, RandomLabeler(0.5, s))
        config = S.SessionConfig(spec=nn.LayerSpec((4, 4, 2)), epsilon_total=10.0, epochs=100, batch_size=32, seed=s)
        res = S.run_session(config, d1.xy, d2.xy, hold.xy)
        assert res.p1.verdict == res.p2_verdict
        falses += not res.p2_verdict.improved
    assert falses >= 8
