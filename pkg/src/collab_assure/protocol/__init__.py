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
from .session import (
    AbortCode,
    P1Result,
    SessionAbort,
    SessionConfig,
    SessionResult,
    fixed_point,
    p1_homomorphic_y_term,
    p1_scale_and_blind,
    p1_unblind_and_step,
    p2_decrypt_blinded,
    p2_encrypt_noise,
    p2_noise,
    p2_prepare_encrypted_dataset,
    run_p1,
    run_p2,
    run_session,
    unblind,
)
from .transport import Listener, TransportError, inproc_pair, tcp_connect
