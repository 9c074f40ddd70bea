"""Payload vocabulary carried inside sealed channel frames.

One byte of message type, then type-specific fields (big-endian lengths).
This is the private protocol between the vTPM and the device-side TMM;
the TPM-Agent in between forwards the sealed frames without parsing them.
"""

from __future__ import annotations

import struct

BOOT_REPORT = 0x01
UPDATE_REQ = 0x02
UPDATE_CONFIRM_D = 0x03
UPDATE_CONFIRM_V = 0x04
STORE_BLOB = 0x05
STORE_OK = 0x06
DEPLOY_REQ = 0x07
DEPLOY_RESP = 0x08
INVOKE_REQ = 0x09
INVOKE_RESP = 0x0A

DIGEST_LEN = 48
MAC_LEN = 48


class MessageError(Exception):
    pass


def kind_of(payload: bytes) -> int:
    if not payload:
        raise MessageError("empty channel payload")
    return payload[0]


def _expect(payload: bytes, kind: int) -> bytes:
    if kind_of(payload) != kind:
        raise MessageError(f"expected message type {kind}, got {payload[0]}")
    return payload[1:]


# -- boot report ---------------------------------------------------------------


def encode_boot_report(measurements: list[tuple[int, str, bytes]]) -> bytes:
    out = bytearray([BOOT_REPORT])
    out += struct.pack(">H", len(measurements))
    for index, name, digest in measurements:
        if len(digest) != DIGEST_LEN:
            raise MessageError("boot measurement digest must be 48 bytes")
        encoded = name.encode()
        out += struct.pack(">BH", index, len(encoded)) + encoded + digest
    return bytes(out)


def decode_boot_report(payload: bytes) -> list[tuple[int, str, bytes]]:
    body = _expect(payload, BOOT_REPORT)
    if len(body) < 2:
        raise MessageError("boot report truncated")
    (count,) = struct.unpack_from(">H", body)
    offset = 2
    measurements = []
    for _ in range(count):
        if len(body) < offset + 3:
            raise MessageError("boot report truncated")
        index, name_len = struct.unpack_from(">BH", body, offset)
        offset += 3
        if len(body) < offset + name_len + DIGEST_LEN:
            raise MessageError("boot report truncated")
        name = body[offset : offset + name_len].decode()
        offset += name_len
        digest = body[offset : offset + DIGEST_LEN]
        offset += DIGEST_LEN
        measurements.append((index, name, digest))
    if offset != len(body):
        raise MessageError("boot report has trailing bytes")
    return measurements


# -- session-key update --------------------------------------------------------


def encode_update_req(challenge: bytes, state_hash: bytes, new_epoch: int) -> bytes:
    if len(challenge) != 4 or len(state_hash) != DIGEST_LEN:
        raise MessageError("bad update request field sizes")
    return bytes([UPDATE_REQ]) + challenge + state_hash + struct.pack(">I", new_epoch)


def decode_update_req(payload: bytes) -> tuple[bytes, bytes, int]:
    body = _expect(payload, UPDATE_REQ)
    if len(body) != 4 + DIGEST_LEN + 4:
        raise MessageError("update request length mismatch")
    challenge = body[:4]
    state_hash = body[4 : 4 + DIGEST_LEN]
    (new_epoch,) = struct.unpack_from(">I", body, 4 + DIGEST_LEN)
    return challenge, state_hash, new_epoch


def encode_update_confirm(kind: int, mac: bytes) -> bytes:
    if kind not in (UPDATE_CONFIRM_D, UPDATE_CONFIRM_V):
        raise MessageError("not an update confirmation type")
    if len(mac) != MAC_LEN:
        raise MessageError("confirmation MAC must be 48 bytes")
    return bytes([kind]) + mac


def decode_update_confirm(payload: bytes, kind: int) -> bytes:
    mac = _expect(payload, kind)
    if len(mac) != MAC_LEN:
        raise MessageError("confirmation MAC must be 48 bytes")
    return mac


# -- file-store upload -----------------------------------------------------------


def encode_store_blob(name: str, blob: bytes) -> bytes:
    encoded = name.encode()
    return bytes([STORE_BLOB]) + struct.pack(">H", len(encoded)) + encoded + blob


def decode_store_blob(payload: bytes) -> tuple[str, bytes]:
    body = _expect(payload, STORE_BLOB)
    if len(body) < 2:
        raise MessageError("store request truncated")
    (name_len,) = struct.unpack_from(">H", body)
    if len(body) < 2 + name_len:
        raise MessageError("store request truncated")
    return body[2 : 2 + name_len].decode(), body[2 + name_len :]


def encode_store_ok() -> bytes:
    return bytes([STORE_OK])


# -- deploy / invoke -------------------------------------------------------------


def encode_deploy_req(ip_num: int) -> bytes:
    return bytes([DEPLOY_REQ]) + struct.pack(">H", ip_num)


def decode_deploy_req(payload: bytes) -> int:
    body = _expect(payload, DEPLOY_REQ)
    if len(body) != 2:
        raise MessageError("deploy request length mismatch")
    return struct.unpack(">H", body)[0]


def encode_deploy_resp(rc: int, bin_hash: bytes) -> bytes:
    if len(bin_hash) != DIGEST_LEN:
        raise MessageError("deploy hash must be 48 bytes")
    return bytes([DEPLOY_RESP]) + struct.pack(">H", rc) + bin_hash


def decode_deploy_resp(payload: bytes) -> tuple[int, bytes]:
    body = _expect(payload, DEPLOY_RESP)
    if len(body) != 2 + DIGEST_LEN:
        raise MessageError("deploy response length mismatch")
    return struct.unpack(">H", body[:2])[0], body[2:]


def encode_invoke_req(ip_num: int, data: bytes, flag: int) -> bytes:
    return bytes([INVOKE_REQ]) + struct.pack(">HII", ip_num, flag, len(data)) + data


def decode_invoke_req(payload: bytes) -> tuple[int, bytes, int]:
    body = _expect(payload, INVOKE_REQ)
    if len(body) < 10:
        raise MessageError("invoke request truncated")
    ip_num, flag, length = struct.unpack_from(">HII", body)
    if len(body) != 10 + length:
        raise MessageError("invoke request length mismatch")
    return ip_num, body[10:], flag


def encode_invoke_resp(rc: int, output: bytes) -> bytes:
    return bytes([INVOKE_RESP]) + struct.pack(">HI", rc, len(output)) + output


def decode_invoke_resp(payload: bytes) -> tuple[int, bytes]:
    body = _expect(payload, INVOKE_RESP)
    if len(body) < 6:
        raise MessageError("invoke response truncated")
    rc, length = struct.unpack_from(">HI", body)
    if len(body) != 6 + length:
        raise MessageError("invoke response length mismatch")
    return rc, body[6:]
