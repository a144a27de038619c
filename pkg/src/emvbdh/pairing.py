"""Pairing-based certificates with blinding, over a pluggable group.

A certificate on a card public key ``pk_c = c*g`` is ``sig = s*pk_c`` for
the authority secret ``s``; the authority publishes ``pk_s = s*v`` in the
second source group.  Verification checks ``e(pk_c, pk_s) == e(sig, v)``,
which still holds after both halves are multiplied by the same scalar.

:class:`MockGroup` instantiates everything in the integers modulo a prime
``q`` with ``g = v = 1`` and ``e(x, y) = x*y mod q``.  It is bilinear and
fast, and offers no security: discrete logarithms are trivial.
"""

from __future__ import annotations

import hashlib
import random
from dataclasses import dataclass

from cryptography.exceptions import InvalidTag
from cryptography.hazmat.primitives.ciphers.aead import AESGCM

MERSENNE_61 = (1 << 61) - 1
NONCE_BYTES = 12


class InvalidPoint(ValueError):
    """Bytes or an integer that do not encode a group element."""


class GroupParams:
    """Interface of a bilinear group setting used by the protocol code.

    Points of both source groups and of the target group are opaque
    values handled only through these methods.
    """

    order: int
    g: object
    v: object
    name: str = "abstract"

    def random_scalar(self, rng: random.Random) -> int:
        return rng.randrange(1, self.order)

    def mul(self, k: int, point):
        raise NotImplementedError

    def pair(self, p1, p2):
        raise NotImplementedError

    def gt_pow(self, x, k: int):
        raise NotImplementedError

    def encode(self, point) -> bytes:
        raise NotImplementedError

    def decode(self, data: bytes):
        raise NotImplementedError

    @property
    def point_bytes(self) -> int:
        raise NotImplementedError


class MockGroup(GroupParams):
    """Integers modulo a prime standing in for all three groups."""

    def __init__(self, q: int = 101):
        if q < 5 or not _is_probable_prime(q):
            raise ValueError(f"group order must be a prime >= 5, got {q}")
        self.order = q
        self.g = 1
        self.v = 1
        self.name = f"mock-{q}"
        self._width = (q.bit_length() + 7) // 8

    def _check(self, x) -> int:
        if not isinstance(x, int) or isinstance(x, bool) or not 0 <= x < self.order:
            raise InvalidPoint(f"{x!r} is not an element of Z_{self.order}")
        return x

    def mul(self, k: int, point) -> int:
        return (k * self._check(point)) % self.order

    def add(self, p1, p2) -> int:
        return (self._check(p1) + self._check(p2)) % self.order

    def pair(self, p1, p2) -> int:
        return (self._check(p1) * self._check(p2)) % self.order

    def gt_pow(self, x, k: int) -> int:
        return (self._check(x) * k) % self.order

    @property
    def point_bytes(self) -> int:
        return self._width

    def encode(self, point) -> bytes:
        return self._check(point).to_bytes(self._width, "big")

    def decode(self, data: bytes) -> int:
        if len(data) != self._width:
            raise InvalidPoint(f"expected {self._width} bytes, got {len(data)}")
        return self._check(int.from_bytes(data, "big"))


def mock_group(q: int = 101) -> MockGroup:
    return MockGroup(q)


def _is_probable_prime(n: int) -> bool:
    if n < 2:
        return False
    small = (2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37)
    for p in small:
        if n % p == 0:
            return n == p
    d, r = n - 1, 0
    while d % 2 == 0:
        d //= 2
        r += 1
    for a in small:
        x = pow(a, d, n)
        if x in (1, n - 1):
            continue
        for _ in range(r - 1):
            x = pow(x, 2, n)
            if x == n - 1:
                break
        else:
            return False
    return True


@dataclass(frozen=True)
class Certificate:
    pk: object
    sig: object

    def encode(self, params: GroupParams) -> bytes:
        return params.encode(self.pk) + params.encode(self.sig)

    @classmethod
    def decode(cls, data: bytes, params: GroupParams) -> "Certificate":
        w = params.point_bytes
        if len(data) != 2 * w:
            raise InvalidPoint(f"certificate must be {2 * w} bytes")
        return cls(params.decode(data[:w]), params.decode(data[w:]))


def authority_key(s: int, params: GroupParams):
    """Public authority key ``s*v``."""
    _check_secret(s, params)
    return params.mul(s, params.v)


def card_public_key(c: int, params: GroupParams):
    _check_secret(c, params)
    return params.mul(c, params.g)


def _check_secret(k: int, params: GroupParams) -> None:
    if k % params.order == 0:
        raise ValueError("secret scalar must be non-zero modulo the group order")


def sign(s: int, pk_point, params: GroupParams) -> Certificate:
    _check_secret(s, params)
    return Certificate(pk_point, params.mul(s, pk_point))


def verify(cert: Certificate, pk_s, params: GroupParams) -> bool:
    try:
        return params.pair(cert.pk, pk_s) == params.pair(cert.sig, params.v)
    except InvalidPoint:
        return False


def verify_bytes(data: bytes, pk_s, params: GroupParams) -> bool:
    """Verify an encoded certificate; malformed encodings are rejected."""
    try:
        cert = Certificate.decode(data, params)
    except InvalidPoint:
        return False
    return verify(cert, pk_s, params)


def blind(cert: Certificate, a: int, params: GroupParams) -> Certificate:
    _check_secret(a, params)
    return Certificate(params.mul(a, cert.pk), params.mul(a, cert.sig))


def kdf(point, params: GroupParams) -> bytes:
    """256-bit session key derived from a shared group element."""
    return hashlib.sha256(b"bdh-kdf" + params.encode(point)).digest()


def aead_encrypt(key: bytes, plaintext: bytes, nonce: bytes) -> bytes:
    if len(nonce) != NONCE_BYTES:
        raise ValueError(f"nonce must be {NONCE_BYTES} bytes")
    return nonce + AESGCM(key).encrypt(nonce, plaintext, None)


def aead_decrypt(key: bytes, blob: bytes) -> bytes | None:
    """Plaintext, or None when the ciphertext does not authenticate."""
    if len(blob) < NONCE_BYTES + 16:
        return None
    try:
        return AESGCM(key).decrypt(blob[:NONCE_BYTES], blob[NONCE_BYTES:], None)
    except InvalidTag:
        return None
