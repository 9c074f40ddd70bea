"""Secure channel between the vTPM and the device TMM.

Three pieces live here:

* AEAD framing: AES-256-GCM frames carrying an epoch, a per-direction
  counter (anti-replay) and a nonce derived from (direction, epoch,
  counter).  Frame overhead over the plaintext is exactly 40 bytes:
  4 (epoch) + 8 (counter) + 12 (nonce) + 16 (tag).

* The 9-step mutual authentication and session-key agreement.  The vTPM
  authenticates the device through one consumed CRP; the device
  authenticates the vTPM through its TTP-issued certificate.  Messages
  1, 2, 3, 5, 8 and 9 go over the wire; steps 4, 6 and 7 are local
  computations.

* The 9-step dynamic key update.  The new key binds the current platform
  state (hash over all 24 PCRs) and a fresh CRP response:

      new_key = HKDF(salt=SHA-384(PCR0..PCR23),
                     ikm=response || old_key,
                     info=b"trctee-rekey" || epoch)

  Update messages ride inside the existing encrypted channel and both
  ends switch epochs only after a key-confirmation MAC exchange.

Rekey-threshold enforcement sits on the vTPM side: it is the only rekey
initiator, so the device relies on it and never refuses to answer.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from enum import Enum

from cryptography.exceptions import InvalidSignature, InvalidTag
from cryptography.hazmat.primitives.asymmetric.ed25519 import (
    Ed25519PrivateKey,
    Ed25519PublicKey,
)
from cryptography.hazmat.primitives.asymmetric.x25519 import (
    X25519PrivateKey,
    X25519PublicKey,
)
from cryptography.hazmat.primitives.ciphers.aead import AESGCM

from . import messages
from . import transport as _transport
from .crypto import Rng, constant_time_eq, hkdf_sha384, hmac_sha384, sha384
from .puf import CrpStore, PufDevice
from .ttp import Certificate

KEY_LEN = 32
NONCE_LEN = 12
TAG_LEN = 16
FRAME_OVERHEAD = 4 + 8 + NONCE_LEN + TAG_LEN  # 40
HS_NONCE_LEN = 16
MAC_LEN = 48
DEFAULT_REKEY_THRESHOLD = 1024

_SESS_INFO = b"trctee-sess"
_CONFIRM_INFO = b"trctee-confirm"
_WRAP_INFO = b"trctee-kd-wrap"
_REKEY_INFO = b"trctee-rekey"
_DEPLOY_INFO = b"trctee-deploy"


class ChannelError(Exception):
    pass


class BadCert(ChannelError):
    pass


class PufMismatch(ChannelError):
    pass


class StaleNonce(ChannelError):
    pass


class Timeout(ChannelError):
    pass


class RekeyRequired(ChannelError):
    pass


class AuthFailure(ChannelError):
    pass


class ReplayDetected(ChannelError):
    pass


class WrongEpoch(ChannelError):
    pass


class ConfirmFailure(ChannelError):
    pass


class CrpUnavailable(ChannelError):
    pass


class Role(Enum):
    VTPM = "vtpm"
    TMM = "tmm"


@dataclass
class SessionState:
    """One endpoint's view of an established channel."""

    sess_key: bytes
    peer_role: Role
    epoch: int = 0
    send_counter: int = 0  # last counter used for sending
    recv_counter: int = 0  # last counter accepted
    rekey_threshold: int = DEFAULT_REKEY_THRESHOLD
    enforce_rekey: bool = True

    def __post_init__(self):
        if len(self.sess_key) != KEY_LEN:
            raise ValueError("session key must be 32 bytes")
        if self.rekey_threshold < 1:
            raise ValueError("rekey threshold must be at least 1")

    @property
    def my_role(self) -> Role:
        return Role.TMM if self.peer_role is Role.VTPM else Role.VTPM

    def switch_epoch(self, new_key: bytes) -> None:
        self.sess_key = new_key
        self.epoch += 1
        self.send_counter = 0
        self.recv_counter = 0


@dataclass(frozen=True)
class Frame:
    epoch: int
    counter: int
    nonce: bytes
    ciphertext: bytes  # includes the 16-byte GCM tag

    def encode(self) -> bytes:
        return struct.pack(">IQ", self.epoch, self.counter) + self.nonce + self.ciphertext

    @classmethod
    def decode(cls, data: bytes) -> "Frame":
        if len(data) < 4 + 8 + NONCE_LEN + TAG_LEN:
            raise AuthFailure("frame shorter than its fixed fields")
        epoch, counter = struct.unpack_from(">IQ", data)
        return cls(
            epoch=epoch,
            counter=counter,
            nonce=data[12 : 12 + NONCE_LEN],
            ciphertext=data[12 + NONCE_LEN :],
        )


def _nonce(direction: Role, epoch: int, counter: int) -> bytes:
    lead = 0 if direction is Role.VTPM else 1
    return bytes([lead]) + (epoch & 0xFFFFFF).to_bytes(3, "big") + counter.to_bytes(8, "big")


def _aad(epoch: int, counter: int) -> bytes:
    return struct.pack(">IQ", epoch, counter)


def seal(session: SessionState, plaintext: bytes, *, _rekey_bypass: bool = False) -> Frame:
    """Encrypt one payload; raises RekeyRequired once the threshold is hit."""
    if (
        session.enforce_rekey
        and not _rekey_bypass
        and session.send_counter >= session.rekey_threshold
    ):
        raise RekeyRequired(
            f"{session.send_counter} frames sent this epoch; update the key first"
        )
    counter = session.send_counter + 1
    nonce = _nonce(session.my_role, session.epoch, counter)
    ciphertext = AESGCM(session.sess_key).encrypt(
        nonce, plaintext, _aad(session.epoch, counter)
    )
    session.send_counter = counter
    return Frame(epoch=session.epoch, counter=counter, nonce=nonce, ciphertext=ciphertext)


def open_frame(session: SessionState, frame: Frame | bytes) -> bytes:
    """Authenticate and decrypt one frame, enforcing epoch and anti-replay."""
    if isinstance(frame, bytes):
        frame = Frame.decode(frame)
    if frame.epoch != session.epoch:
        raise WrongEpoch(f"frame epoch {frame.epoch}, session epoch {session.epoch}")
    if frame.counter <= session.recv_counter:
        raise ReplayDetected(
            f"counter {frame.counter} not above last accepted {session.recv_counter}"
        )
    if frame.nonce != _nonce(session.peer_role, frame.epoch, frame.counter):
        raise AuthFailure("frame nonce does not match its header fields")
    try:
        plaintext = AESGCM(session.sess_key).decrypt(
            frame.nonce, frame.ciphertext, _aad(frame.epoch, frame.counter)
        )
    except InvalidTag:
        raise AuthFailure("frame failed authentication") from None
    session.recv_counter = frame.counter
    return plaintext


def counter_tick(session: SessionState) -> bool:
    """True once the send counter has crossed the rekey threshold."""
    return session.send_counter >= session.rekey_threshold


def derive_deploy_key(sess_key: bytes) -> bytes:
    """Bitstream-encryption key, fixed at the epoch-0 session key."""
    return hkdf_sha384(sess_key, info=_DEPLOY_INFO, length=KEY_LEN)


def derive_updated_key(
    state_hash: bytes, response: bytes, old_key: bytes, new_epoch: int
) -> tuple[bytes, bytes]:
    """New session key and its confirmation key for a key update."""
    info = _REKEY_INFO + struct.pack(">I", new_epoch)
    ikm = response + old_key
    new_key = hkdf_sha384(ikm, salt=state_hash, info=info, length=KEY_LEN)
    confirm = hkdf_sha384(ikm, salt=state_hash, info=info + b"/confirm", length=KEY_LEN)
    return new_key, confirm


# -- handshake -------------------------------------------------------------------

_HS1 = 0x11
_HS2 = 0x12
_HS3 = 0x13
_HS5 = 0x15
_HS8 = 0x18
_HS9 = 0x19


class _Transcript:
    """Running hash binding every prior handshake message."""

    def __init__(self):
        self._parts: list[bytes] = [b"trctee-hs-v1"]

    def absorb(self, data: bytes) -> None:
        self._parts.append(struct.pack(">I", len(data)) + data)

    def digest(self) -> bytes:
        return sha384(b"".join(self._parts))

    def fork(self, data: bytes) -> bytes:
        """Digest as if ``data`` were absorbed, without mutating the transcript."""
        return sha384(b"".join(self._parts) + struct.pack(">I", len(data)) + data)


def _derive_session_keys(
    response: bytes, k_d: bytes, nonce_v: bytes, nonce_d: bytes
) -> tuple[bytes, bytes]:
    ikm = response + k_d + nonce_v + nonce_d
    sess = hkdf_sha384(ikm, salt=b"trctee-handshake", info=_SESS_INFO, length=KEY_LEN)
    confirm = hkdf_sha384(ikm, salt=b"trctee-handshake", info=_CONFIRM_INFO, length=KEY_LEN)
    return sess, confirm


def _wrap_key(shared: bytes) -> bytes:
    return hkdf_sha384(shared, info=_WRAP_INFO, length=KEY_LEN)


class VtpmHandshake:
    """Initiator side.  Call start(), then feed every reply to on_message().

    Inputs: the vTPM identity (signing seed, certificate, the TTP public
    key), the provisioned device id and the user-held CRP slice.  One CRP
    is consumed per handshake.
    """

    def __init__(
        self,
        *,
        sk_tpm: bytes,
        cert: Certificate,
        pk_ttp: bytes,
        device_id: str,
        crp_store: CrpStore,
        rng: Rng,
        rekey_threshold: int = DEFAULT_REKEY_THRESHOLD,
    ):
        self._sk = Ed25519PrivateKey.from_private_bytes(sk_tpm)
        self._cert = cert
        self._pk_ttp = pk_ttp
        self._device_id = device_id
        self._crps = crp_store
        self._rng = rng
        self._threshold = rekey_threshold
        self._transcript = _Transcript()
        self._state = "start"
        self._nonce_v = b""
        self._nonce_d = b""
        self._crp = None
        self._eph: X25519PrivateKey | None = None
        self._confirm_key = b""
        self._pending_key = b""
        self.session: SessionState | None = None

    def start(self) -> bytes:
        if self._state != "start":
            raise StaleNonce("handshake already started")
        self._nonce_v = self._rng.bytes(HS_NONCE_LEN)
        cert_bytes = self._cert.encode()
        msg = bytes([_HS1]) + self._nonce_v + struct.pack(">H", len(cert_bytes)) + cert_bytes
        self._transcript.absorb(msg)
        self._state = "sent-hello"
        return msg

    def on_message(self, data: bytes) -> bytes | None:
        if not data:
            raise StaleNonce("empty handshake message")
        kind = data[0]
        if self._state == "sent-hello" and kind == _HS2:
            return self._handle_hs2(data)
        if self._state == "sent-challenge" and kind == _HS5:
            return self._handle_hs5(data)
        if self._state == "sent-confirm" and kind == _HS9:
            return self._handle_hs9(data)
        raise StaleNonce(f"unexpected handshake message 0x{kind:02X} in state {self._state}")

    def _handle_hs2(self, data: bytes) -> bytes:
        body = data[1:]
        if len(body) < HS_NONCE_LEN + 2:
            raise StaleNonce("short device hello")
        self._nonce_d = body[:HS_NONCE_LEN]
        (id_len,) = struct.unpack_from(">H", body, HS_NONCE_LEN)
        if len(body) != HS_NONCE_LEN + 2 + id_len:
            raise StaleNonce("bad device hello length")
        device_id = body[HS_NONCE_LEN + 2 :].decode()
        if device_id != self._device_id:
            raise ChannelError(
                f"device identifies as {device_id!r}, provisioned for {self._device_id!r}"
            )
        self._transcript.absorb(data)
        # Step 3: consume one CRP, send its challenge plus a signed ephemeral
        # key so the device can return its key share for our eyes only.
        self._crp = self._crps.take_unused()
        self._eph = X25519PrivateKey.from_private_bytes(self._rng.bytes(32))
        eph_pub = self._eph.public_key().public_bytes_raw()
        head = bytes([_HS3]) + self._crp.challenge + eph_pub
        sig = self._sk.sign(self._transcript.digest() + head)
        msg = head + sig
        self._transcript.absorb(msg)
        self._state = "sent-challenge"
        return msg

    def _handle_hs5(self, data: bytes) -> bytes:
        body = data[1:]
        if len(body) != 32 + 48 + MAC_LEN:
            raise StaleNonce("bad key-share message length")
        eph_d = body[:32]
        wrapped = body[32:80]
        mac = body[80:]
        # Step 6: the MAC keyed by the PUF response authenticates the device.
        expected = hmac_sha384(
            self._crp.response, self._transcript.fork(data[: 1 + 32 + 48])
        )
        if not constant_time_eq(mac, expected):
            raise PufMismatch("device PUF response does not match the enrolled CRP")
        shared = self._eph.exchange(X25519PublicKey.from_public_bytes(eph_d))
        try:
            k_d = AESGCM(_wrap_key(shared)).decrypt(bytes(NONCE_LEN), wrapped, b"")
        except InvalidTag:
            raise AuthFailure("key share failed to unwrap") from None
        self._transcript.absorb(data)
        # Step 7: derive; step 8: prove key possession.
        sess_key, self._confirm_key = _derive_session_keys(
            self._crp.response, k_d, self._nonce_v, self._nonce_d
        )
        self._pending_key = sess_key
        mac_v = hmac_sha384(self._confirm_key, b"vtpm-confirm" + self._transcript.digest())
        msg = bytes([_HS8]) + mac_v
        self._transcript.absorb(msg)
        self._state = "sent-confirm"
        return msg

    def _handle_hs9(self, data: bytes) -> None:
        mac_d = data[1:]
        expected = hmac_sha384(self._confirm_key, b"device-confirm" + self._transcript.digest())
        if not constant_time_eq(mac_d, expected):
            raise ConfirmFailure("device key confirmation failed")
        self.session = SessionState(
            sess_key=self._pending_key,
            peer_role=Role.TMM,
            rekey_threshold=self._threshold,
        )
        self._state = "done"
        return None


class DeviceHandshake:
    """Responder side, driven entirely by on_message()."""

    def __init__(
        self,
        *,
        pk_ttp: bytes,
        device_id: str,
        puf: PufDevice,
        rng: Rng,
        rekey_threshold: int = DEFAULT_REKEY_THRESHOLD,
    ):
        self._pk_ttp = pk_ttp
        self._device_id = device_id
        self._puf = puf
        self._rng = rng
        self._threshold = rekey_threshold
        self._transcript = _Transcript()
        self._state = "idle"
        self._nonce_v = b""
        self._nonce_d = b""
        self._pk_tpm = b""
        self._response = b""
        self._k_d = b""
        self._confirm_key = b""
        self._pending_key = b""
        self.session: SessionState | None = None

    def on_message(self, data: bytes) -> bytes | None:
        if not data:
            raise StaleNonce("empty handshake message")
        kind = data[0]
        if self._state == "idle" and kind == _HS1:
            return self._handle_hs1(data)
        if self._state == "sent-hello" and kind == _HS3:
            return self._handle_hs3(data)
        if self._state == "sent-share" and kind == _HS8:
            return self._handle_hs8(data)
        raise StaleNonce(f"unexpected handshake message 0x{kind:02X} in state {self._state}")

    def _handle_hs1(self, data: bytes) -> bytes:
        body = data[1:]
        if len(body) < HS_NONCE_LEN + 2:
            raise StaleNonce("short hello")
        self._nonce_v = body[:HS_NONCE_LEN]
        (cert_len,) = struct.unpack_from(">H", body, HS_NONCE_LEN)
        if len(body) != HS_NONCE_LEN + 2 + cert_len:
            raise StaleNonce("bad hello length")
        try:
            cert = Certificate.decode(body[HS_NONCE_LEN + 2 :])
        except ValueError as exc:
            raise BadCert(f"unparseable certificate: {exc}") from None
        # Step 2: the pre-stored TTP public key decides certificate validity.
        if not cert.verify(self._pk_ttp):
            raise BadCert("vTPM certificate does not verify under the TTP key")
        self._pk_tpm = cert.pk_tpm
        self._transcript.absorb(data)
        self._nonce_d = self._rng.bytes(HS_NONCE_LEN)
        encoded_id = self._device_id.encode()
        msg = bytes([_HS2]) + self._nonce_d + struct.pack(">H", len(encoded_id)) + encoded_id
        self._transcript.absorb(msg)
        self._state = "sent-hello"
        return msg

    def _handle_hs3(self, data: bytes) -> bytes:
        body = data[1:]
        if len(body) != 4 + 32 + 64:
            raise StaleNonce("bad challenge message length")
        challenge = body[:4]
        eph_v = body[4:36]
        sig = body[36:]
        # Step 4: only the certified vTPM can have signed this transcript.
        try:
            Ed25519PublicKey.from_public_bytes(self._pk_tpm).verify(
                sig, self._transcript.digest() + data[:37]
            )
        except InvalidSignature:
            raise BadCert("transcript signature does not verify under the certified key") from None
        self._transcript.absorb(data)
        self._response = self._puf.respond(challenge)
        # Step 5: fresh key share, wrapped for the signed ephemeral key, plus
        # the PUF-keyed transcript MAC that authenticates this device.
        self._k_d = self._rng.bytes(KEY_LEN)
        eph = X25519PrivateKey.from_private_bytes(self._rng.bytes(32))
        shared = eph.exchange(X25519PublicKey.from_public_bytes(eph_v))
        wrapped = AESGCM(_wrap_key(shared)).encrypt(bytes(NONCE_LEN), self._k_d, b"")
        head = bytes([_HS5]) + eph.public_key().public_bytes_raw() + wrapped
        mac = hmac_sha384(self._response, self._transcript.fork(head))
        msg = head + mac
        self._transcript.absorb(msg)
        sess_key, self._confirm_key = _derive_session_keys(
            self._response, self._k_d, self._nonce_v, self._nonce_d
        )
        self._pending_key = sess_key
        self._state = "sent-share"
        return msg

    def _handle_hs8(self, data: bytes) -> bytes:
        mac_v = data[1:]
        expected = hmac_sha384(self._confirm_key, b"vtpm-confirm" + self._transcript.digest())
        if not constant_time_eq(mac_v, expected):
            raise ConfirmFailure("vTPM key confirmation failed")
        self._transcript.absorb(data)
        mac_d = hmac_sha384(self._confirm_key, b"device-confirm" + self._transcript.digest())
        self.session = SessionState(
            sess_key=self._pending_key,
            peer_role=Role.VTPM,
            rekey_threshold=self._threshold,
            enforce_rekey=False,
        )
        self._state = "done"
        return bytes([_HS9]) + mac_d


class ChannelEndpoint:
    """A session bound to a transport: sealed request/response plumbing."""

    def __init__(self, session: SessionState, transport, recv_timeout: float | None = 5.0):
        self.session = session
        self.transport = transport
        self.recv_timeout = recv_timeout

    def send(self, payload: bytes, *, _rekey_bypass: bool = False) -> None:
        frame = seal(self.session, payload, _rekey_bypass=_rekey_bypass)
        self.transport.send_record(frame.encode())

    def recv(self) -> bytes:
        try:
            record = self.transport.recv_record(self.recv_timeout)
        except _transport.ReceiveTimeout as exc:
            raise Timeout(str(exc)) from None
        return open_frame(self.session, record)

    def request(self, payload: bytes, *, _rekey_bypass: bool = False) -> bytes:
        self.send(payload, _rekey_bypass=_rekey_bypass)
        return self.recv()


def initiate_update(
    endpoint: ChannelEndpoint, challenge: bytes, response: bytes, state_hash: bytes
) -> None:
    """vTPM side of the key update; switches the session epoch on success."""
    session = endpoint.session
    new_epoch = session.epoch + 1
    new_key, confirm_key = derive_updated_key(
        state_hash, response, session.sess_key, new_epoch
    )
    reply = endpoint.request(
        messages.encode_update_req(challenge, state_hash, new_epoch),
        _rekey_bypass=True,
    )
    mac_d = messages.decode_update_confirm(reply, messages.UPDATE_CONFIRM_D)
    expected = hmac_sha384(confirm_key, b"update-confirm-d" + struct.pack(">I", new_epoch))
    if not constant_time_eq(mac_d, expected):
        raise ConfirmFailure("device confirmation of the updated key failed")
    mac_v = hmac_sha384(confirm_key, b"update-confirm-v" + struct.pack(">I", new_epoch))
    endpoint.send(
        messages.encode_update_confirm(messages.UPDATE_CONFIRM_V, mac_v),
        _rekey_bypass=True,
    )
    session.switch_epoch(new_key)


def respond_update(
    endpoint: ChannelEndpoint, payload: bytes, puf: PufDevice
) -> None:
    """Device side of the key update, entered on an update request payload."""
    session = endpoint.session
    challenge, state_hash, new_epoch = messages.decode_update_req(payload)
    if new_epoch != session.epoch + 1:
        raise ConfirmFailure(f"update proposes epoch {new_epoch}, expected {session.epoch + 1}")
    response = puf.respond(challenge)
    new_key, confirm_key = derive_updated_key(
        state_hash, response, session.sess_key, new_epoch
    )
    mac_d = hmac_sha384(confirm_key, b"update-confirm-d" + struct.pack(">I", new_epoch))
    confirm = endpoint.request(
        messages.encode_update_confirm(messages.UPDATE_CONFIRM_D, mac_d),
        _rekey_bypass=True,
    )
    mac_v = messages.decode_update_confirm(confirm, messages.UPDATE_CONFIRM_V)
    expected = hmac_sha384(confirm_key, b"update-confirm-v" + struct.pack(">I", new_epoch))
    if not constant_time_eq(mac_v, expected):
        raise ConfirmFailure("vTPM confirmation of the updated key failed")
    session.switch_epoch(new_key)
