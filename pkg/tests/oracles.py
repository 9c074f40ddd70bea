"""Independent reference implementations used as test oracles.

These deliberately avoid the production code paths: the HKDF is spelled
out as raw HMAC extract-then-expand, the PCR chain is recomputed from
scratch, and the matrix multiply is the naive triple loop.
"""

import hashlib
import hmac


def reference_hkdf(ikm: bytes, salt: bytes, info: bytes, length: int) -> bytes:
    """RFC 5869 HKDF over SHA-384, written out by hand."""
    hash_len = 48
    if not salt:
        salt = bytes(hash_len)
    prk = hmac.new(salt, ikm, hashlib.sha384).digest()
    okm = b""
    block = b""
    counter = 1
    while len(okm) < length:
        block = hmac.new(prk, block + info + bytes([counter]), hashlib.sha384).digest()
        okm += block
        counter += 1
    return okm[:length]


def pcr_chain(digests: list[bytes]) -> bytes:
    """Fold digests into one register starting from the 48-byte zero state."""
    register = bytes(48)
    for digest in digests:
        register = hashlib.sha384(register + digest).digest()
    return register


def brute_matmul8(a: bytes, b: bytes) -> bytes:
    """8x8 byte matrix product mod 256, index arithmetic spelled out."""
    assert len(a) == 64 and len(b) == 64
    out = []
    for i in range(8):
        for j in range(8):
            total = 0
            for k in range(8):
                total = (total + a[i * 8 + k] * b[k * 8 + j]) % 256
            out.append(total)
    return bytes(out)
