import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedsim import crypto
from fedsim.crypto import (
    AuthenticationFailed,
    CorruptEnvelope,
    CryptoError,
    EmptyPlaintext,
    UnwrapFailed,
)
from fedsim.learner import init_model, serialize_model


@pytest.fixture(scope="module")
def keypairs():
    return (
        crypto.generate_keypair(np.random.default_rng(101)),
        crypto.generate_keypair(np.random.default_rng(202)),
    )


def test_keygen_deterministic_and_distinct():
    a = crypto.generate_keypair(np.random.default_rng(11))
    b = crypto.generate_keypair(np.random.default_rng(11))
    c = crypto.generate_keypair(np.random.default_rng(12))
    assert a.public == b.public and a.private == b.private
    assert a.public != c.public
    assert a.public.n.bit_length() == crypto.RSA_BITS


def test_wrap_unwrap_roundtrip_many_keys(keypairs):
    pair, _ = keypairs
    rng = np.random.default_rng(5)
    for _ in range(100):
        key = crypto.generate_symmetric_key(rng)
        assert crypto.unwrap_key(pair.private, crypto.wrap_key(pair.public, key)) == key


def test_unwrap_with_wrong_private_key(keypairs):
    pair_a, pair_b = keypairs
    wrapped = crypto.wrap_key(pair_a.public, b"\x07" * 32)
    with pytest.raises(UnwrapFailed):
        crypto.unwrap_key(pair_b.private, wrapped)


def test_unwrap_truncated_blob(keypairs):
    pair, _ = keypairs
    wrapped = crypto.wrap_key(pair.public, b"\x07" * 32)
    with pytest.raises(UnwrapFailed):
        crypto.unwrap_key(pair.private, wrapped[:-5])


def test_encrypt_roundtrip_and_length():
    rng = np.random.default_rng(1)
    key = crypto.generate_symmetric_key(rng)
    payload = rng.bytes(1 << 20)  # 1 MiB
    nonce, ct, tag = crypto.encrypt(key, payload, rng)
    assert len(ct) == len(payload)
    assert len(nonce) == crypto.NONCE_BYTES and len(tag) == crypto.TAG_BYTES
    assert crypto.decrypt(key, nonce, ct, tag) == payload


def test_encrypt_empty_plaintext():
    rng = np.random.default_rng(1)
    with pytest.raises(EmptyPlaintext):
        crypto.encrypt(crypto.generate_symmetric_key(rng), b"", rng)


def test_single_bit_flip_fails_authentication():
    rng = np.random.default_rng(2)
    key = crypto.generate_symmetric_key(rng)
    nonce, ct, tag = crypto.encrypt(key, b"model parameters", rng)
    flipped = bytearray(ct)
    flipped[3] ^= 0x10
    with pytest.raises(AuthenticationFailed):
        crypto.decrypt(key, nonce, bytes(flipped), tag)
    with pytest.raises(AuthenticationFailed):
        crypto.decrypt(key, bytes(12), ct, tag)
    with pytest.raises(AuthenticationFailed):
        crypto.decrypt(crypto.generate_symmetric_key(rng), nonce, ct, tag)


def test_nonce_uniqueness_across_encryptions():
    rng = np.random.default_rng(3)
    key = crypto.generate_symmetric_key(rng)
    nonces = {crypto.encrypt(key, b"x", rng)[0] for _ in range(1000)}
    assert len(nonces) == 1000


def test_seal_open_roundtrip_on_model(keypairs):
    pair, _ = keypairs
    rng = np.random.default_rng(4)
    payload = serialize_model(init_model([8, 6, 4], seed=9))
    envelope = crypto.seal_model(pair.public, payload, rng)
    assert crypto.open_model(pair.private, envelope) == payload


def test_seal_uses_fresh_keys(keypairs):
    pair, _ = keypairs
    rng = np.random.default_rng(5)
    first = crypto.seal_model(pair.public, b"payload", rng)
    second = crypto.seal_model(pair.public, b"payload", rng)
    assert first.wrapped_key != second.wrapped_key
    assert first.nonce != second.nonce


def test_open_with_wrong_private_key(keypairs):
    pair_a, pair_b = keypairs
    envelope = crypto.seal_model(pair_a.public, b"secret model", np.random.default_rng(6))
    with pytest.raises(UnwrapFailed):
        crypto.open_model(pair_b.private, envelope)


def test_swapped_wrapped_key_never_yields_plaintext(keypairs):
    pair, _ = keypairs
    rng = np.random.default_rng(7)
    env_a = crypto.seal_model(pair.public, b"payload one", rng)
    env_b = crypto.seal_model(pair.public, b"payload two", rng)
    env_a.wrapped_key = env_b.wrapped_key
    with pytest.raises((AuthenticationFailed, UnwrapFailed)):
        crypto.open_model(pair.private, env_a)


def test_envelope_serialization_roundtrip(keypairs):
    pair, _ = keypairs
    envelope = crypto.seal_model(pair.public, b"bytes on the wire", np.random.default_rng(8))
    blob = crypto.serialize_envelope(envelope)
    assert blob[:4] == b"FENV"
    back = crypto.deserialize_envelope(blob)
    assert back == envelope
    assert crypto.open_model(pair.private, back) == b"bytes on the wire"


@pytest.mark.parametrize(
    "mangle",
    [
        lambda b: b[:-1],
        lambda b: b"XENV" + b[4:],
        lambda b: b[:4] + b"\x02" + b[5:],
        lambda b: b + b"\x00",
        lambda b: b[:8],
    ],
)
def test_envelope_deserialize_rejects_corruption(keypairs, mangle):
    pair, _ = keypairs
    blob = crypto.serialize_envelope(
        crypto.seal_model(pair.public, b"payload", np.random.default_rng(9))
    )
    with pytest.raises(CorruptEnvelope):
        crypto.deserialize_envelope(mangle(blob))


@settings(max_examples=50, deadline=None)
@given(st.binary(min_size=1, max_size=2048))
def test_seal_open_roundtrip_random_payloads(payload):
    pair = _roundtrip_pair()
    envelope = crypto.seal_model(pair.public, payload, np.random.default_rng(len(payload)))
    assert crypto.open_model(pair.private, envelope) == payload


_PAIR_CACHE = {}


def _roundtrip_pair():
    if "pair" not in _PAIR_CACHE:
        _PAIR_CACHE["pair"] = crypto.generate_keypair(np.random.default_rng(999))
    return _PAIR_CACHE["pair"]


# -- group envelopes -----------------------------------------------------------


def test_group_envelope_all_recipients_can_open():
    rng = np.random.default_rng(10)
    pairs = {f"w{i}": crypto.generate_keypair(np.random.default_rng(50 + i)) for i in range(3)}
    group = crypto.seal_model_group(
        {addr: pair.public for addr, pair in pairs.items()}, b"shared model", rng
    )
    for addr, pair in pairs.items():
        assert crypto.open_model_group(addr, pair.private, group) == b"shared model"


def test_group_envelope_outsider_rejected():
    rng = np.random.default_rng(11)
    insider = crypto.generate_keypair(np.random.default_rng(60))
    outsider = crypto.generate_keypair(np.random.default_rng(61))
    group = crypto.seal_model_group({"w0": insider.public}, b"members only", rng)
    with pytest.raises(UnwrapFailed):
        crypto.open_model_group("w9", outsider.private, group)
    with pytest.raises(UnwrapFailed):
        crypto.open_model_group("w0", outsider.private, group)


def test_group_envelope_serialization_roundtrip():
    rng = np.random.default_rng(12)
    pairs = {f"w{i}": crypto.generate_keypair(np.random.default_rng(70 + i)) for i in range(2)}
    group = crypto.seal_model_group(
        {addr: pair.public for addr, pair in pairs.items()}, b"roundtrip", rng
    )
    back = crypto.deserialize_group_envelope(crypto.serialize_group_envelope(group))
    assert back == group
    with pytest.raises(CryptoError):
        crypto.seal_model_group({}, b"nobody", rng)


def test_public_pem_roundtrip():
    pair = _roundtrip_pair()
    pem = crypto.public_pem(pair.public)
    assert pem.startswith("-----BEGIN PUBLIC KEY-----")
    assert crypto.load_public_pem(pem) == pair.public
