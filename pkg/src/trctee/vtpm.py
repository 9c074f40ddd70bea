"""User-side vTPM engine: SHA-384 PCR bank, append-only measurement log,
a minimal standard-command subset and routing of the extended commands.

The engine speaks the wire format of :mod:`trctee.wire`.  Four standard
commands are implemented (PCR_Extend, PCR_Read, GetRandom, Hash); every
other standard code is answered with an unsupported-command response.
Simplified parameter layouts for the standard subset, all big-endian:

    GetRandom   cmd body = u16 count            resp body = u16 size || bytes
    PCR_Read    cmd body = u32 index            resp body = 48-byte register
    PCR_Extend  cmd body = u32 index || digest  resp body = empty
    Hash        cmd body = u16 alg id || data   resp body = u16 size || digest

Extended commands are delegated to pluggable handlers wired up by the
runtime orchestration; without a handler they answer as failures.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass
from enum import Enum
from typing import Callable, Iterable

from . import wire
from .crypto import Rng, sha384

PCR_COUNT = 24
DIGEST_LEN = 48
MAX_RANDOM = 64

# Response codes (values follow the TPM 2.0 constants of the same name).
RC_SUCCESS = 0x000
RC_BAD_TAG = 0x01E
RC_HASH = 0x083
RC_VALUE = 0x084
RC_SIZE = 0x095
RC_FAILURE = 0x101
RC_COMMAND_SIZE = 0x142
RC_COMMAND_CODE = 0x143

ALG_SHA256 = 0x000B
ALG_SHA384 = 0x000C
ALG_SHA3_384 = 0x0028


class VtpmError(Exception):
    pass


class IndexOutOfRange(VtpmError):
    pass


class BadLength(VtpmError):
    pass


class UnsupportedAlg(VtpmError):
    pass


class EventKind(Enum):
    BOOT_COMPONENT = "BootComponent"
    IP_DEPLOY = "IpDeploy"
    IP_INPUT = "IpInput"
    IP_OUTPUT = "IpOutput"
    OTHER = "Other"


@dataclass(frozen=True)
class MeasurementEvent:
    seq: int
    pcr_index: int
    digest: bytes
    kind: EventKind
    label: str

    def __post_init__(self):
        if "\n" in self.label or "\r" in self.label:
            raise ValueError("event label must be a single line")


_HASHES = {
    "sha256": hashlib.sha256,
    "sha384": hashlib.sha384,
    "sha3-384": hashlib.sha3_384,
}

_ALG_IDS = {ALG_SHA256: "sha256", ALG_SHA384: "sha384", ALG_SHA3_384: "sha3-384"}


def hash_data(data: bytes, alg: str) -> bytes:
    """Digest ``data`` under one of sha256 / sha384 / sha3-384."""
    name = alg.lower().replace("_", "-").replace("sha-", "sha")
    try:
        return _HASHES[name](data).digest()
    except KeyError:
        raise UnsupportedAlg(f"unsupported hash algorithm {alg!r}") from None


class PcrBank:
    """24 SHA-384 platform configuration registers, all-zero at reset."""

    def __init__(self):
        self._regs = [bytes(DIGEST_LEN) for _ in range(PCR_COUNT)]

    def _check(self, index: int) -> None:
        if not 0 <= index < PCR_COUNT:
            raise IndexOutOfRange(f"PCR index {index} outside 0..{PCR_COUNT - 1}")

    def read(self, index: int) -> bytes:
        self._check(index)
        return self._regs[index]

    def extend(self, index: int, digest: bytes) -> bytes:
        self._check(index)
        if len(digest) != DIGEST_LEN:
            raise BadLength(f"extend digest must be {DIGEST_LEN} bytes")
        self._regs[index] = sha384(self._regs[index] + digest)
        return self._regs[index]

    def registers(self) -> list[bytes]:
        return list(self._regs)

    def state_hash(self) -> bytes:
        """SHA-384 over the concatenation of all 24 registers."""
        return sha384(b"".join(self._regs))


def replay_log(events: Iterable[MeasurementEvent]) -> PcrBank:
    """Rebuild a PCR bank from reset by re-applying the event log."""
    bank = PcrBank()
    for event in events:
        bank.extend(event.pcr_index, event.digest)
    return bank


def export_log(events: Iterable[MeasurementEvent]) -> str:
    """Line format: ``seq, pcr_index, kind, label, hex(digest)``."""
    lines = []
    for e in events:
        lines.append(f"{e.seq}, {e.pcr_index}, {e.kind.value}, {e.label}, {e.digest.hex()}")
    return "\n".join(lines) + ("\n" if lines else "")


def parse_log(text: str) -> list[MeasurementEvent]:
    events = []
    for line in text.splitlines():
        line = line.strip()
        if not line:
            continue
        seq_s, idx_s, kind_s, rest = line.split(", ", 3)
        label, digest_hex = rest.rsplit(", ", 1)
        events.append(
            MeasurementEvent(
                seq=int(seq_s),
                pcr_index=int(idx_s),
                digest=bytes.fromhex(digest_hex),
                kind=EventKind(kind_s),
                label=label,
            )
        )
    return events


class Vtpm:
    """One vTPM instance: PCR bank, event log, RNG, command dispatch.

    Commands are processed strictly one at a time; callers running the
    instance from several threads must serialize dispatch externally.
    """

    def __init__(self, identity=None, rng: Rng | None = None):
        self.pcrs = PcrBank()
        self.log: list[MeasurementEvent] = []
        self.identity = identity
        self.msg_counter = 0
        self._rng = rng or Rng()
        # Extended-command handlers, wired by the runtime layer.
        self.update_handler: Callable[[bytes], int] | None = None
        self.deploy_handler: Callable[[int], tuple[int, bytes]] | None = None
        self.invoke_handler: Callable[[int, bytes, int], tuple[int, bytes]] | None = None

    # -- core TPM operations ------------------------------------------------

    def pcr_extend(
        self,
        index: int,
        digest: bytes,
        kind: EventKind = EventKind.OTHER,
        label: str = "",
    ) -> bytes:
        value = self.pcrs.extend(index, digest)
        self.log.append(
            MeasurementEvent(
                seq=len(self.log), pcr_index=index, digest=digest, kind=kind, label=label
            )
        )
        return value

    def pcr_read(self, index: int) -> bytes:
        return self.pcrs.read(index)

    def get_random(self, n: int) -> bytes:
        if not 0 < n <= MAX_RANDOM:
            raise BadLength(f"byte count must be in 1..{MAX_RANDOM}, got {n}")
        return self._rng.bytes(n)

    def hash(self, data: bytes, alg: str) -> bytes:
        return hash_data(data, alg)

    def measure(self, data: bytes, pcr_index: int, kind: EventKind, label: str) -> bytes:
        """Measure = SHA-384 the data, then extend the digest."""
        return self.pcr_extend(pcr_index, sha384(data), kind, label)

    def export_log(self) -> str:
        return export_log(self.log)

    # -- command dispatch ---------------------------------------------------

    def dispatch(self, command: bytes) -> bytes:
        """Decode, execute, and answer one command; never raises on bad input."""
        self.msg_counter += 1
        try:
            message = wire.decode(command)
        except wire.WireError:
            return wire.encode(wire.StandardResp(response_code=RC_BAD_TAG))

        if isinstance(message, wire.UpdateCmd):
            rc = 1
            if self.update_handler is not None:
                rc = self.update_handler(message.challenge)
            return wire.encode(wire.UpdateResp(return_code=rc))
        if isinstance(message, wire.DeployCmd):
            rc, bin_hash = 1, bytes(DIGEST_LEN)
            if self.deploy_handler is not None:
                rc, bin_hash = self.deploy_handler(message.ip_num)
            return wire.encode(wire.DeployResp(bin_hash=bin_hash, response_code=rc))
        if isinstance(message, wire.InvokeCmd):
            rc, output = 1, b""
            if self.invoke_handler is not None:
                rc, output = self.invoke_handler(message.ip_num, message.input, message.flag)
            return wire.encode(wire.InvokeResp(output=output, response_code=rc))
        return self._dispatch_standard(message)

    def _dispatch_standard(self, message: wire.StandardCmd) -> bytes:
        code, body = message.command_code, message.body
        try:
            if code == wire.CC_GET_RANDOM:
                if len(body) != 2:
                    return _fail(RC_COMMAND_SIZE)
                n = struct.unpack(">H", body)[0]
                data = self.get_random(n)
                return _ok(struct.pack(">H", len(data)) + data)
            if code == wire.CC_PCR_READ:
                if len(body) != 4:
                    return _fail(RC_COMMAND_SIZE)
                index = struct.unpack(">I", body)[0]
                return _ok(self.pcr_read(index))
            if code == wire.CC_PCR_EXTEND:
                if len(body) != 4 + DIGEST_LEN:
                    return _fail(RC_COMMAND_SIZE)
                index = struct.unpack(">I", body[:4])[0]
                self.pcr_extend(index, body[4:], EventKind.OTHER, "pcr-extend-cmd")
                return _ok(b"")
            if code == wire.CC_HASH:
                if len(body) < 2:
                    return _fail(RC_COMMAND_SIZE)
                alg_id = struct.unpack(">H", body[:2])[0]
                alg = _ALG_IDS.get(alg_id)
                if alg is None:
                    return _fail(RC_HASH)
                digest = self.hash(body[2:], alg)
                return _ok(struct.pack(">H", len(digest)) + digest)
            return _fail(RC_COMMAND_CODE)
        except (IndexOutOfRange, BadLength):
            return _fail(RC_VALUE)
        except UnsupportedAlg:
            return _fail(RC_HASH)


def _ok(body: bytes) -> bytes:
    return wire.encode(wire.StandardResp(response_code=RC_SUCCESS, body=body))


def _fail(rc: int) -> bytes:
    return wire.encode(wire.StandardResp(response_code=rc))
