"""Wire format and crypto envelope for private mode.

Every field is big-endian. Frames are fixed-order with 1-byte type tags and
length-prefixed variable fields. The same framing is used inside the HTTPS
payload (client to bridge) and on the TCP stream (bridge to exit server), so
both ends of the tunnel share this module and nothing else.

Request frame (client -> exit server, opaque to the bridge except the header):

    [socks address of exit server][payload_length u32][sealed envelope]

Sealed envelope:

    [recipient public key 32B][ephemeral X25519 public key 32B][AEAD ciphertext]

Envelope plaintext, request direction:

    [client public key 32B][nonce u64][inner tag 1B][inner body]

    tag 1 start:  [socks address of target]
    tag 2 data:   [conn id u64][signature 64B][compressed 1B]
                  [original_length u32][compressed_length u32][data]
    tag 3 close:  [conn id u64][signature 64B]

Envelope plaintext, response direction:

    tag 1 established: [conn id u64][signature 64B]
    tag 2 data:        [conn id u64][signature 64B][compressed 1B]
                       [original_length u32][actual_length u32][data]
    tag 3 close:       [conn id u64][signature 64B][message_length u16][message]
    tag 4 error:       [conn id u64][signature 64B][error_code u16]
                       [message_length u16][message]

Identity keys are Ed25519 and double as encryption keys: signatures use them
directly, confidentiality uses a sealed-box construction over the birationally
equivalent Montgomery curve (ephemeral X25519 + HKDF-SHA256 + ChaCha20-Poly1305).
A data plaintext of length 0 is a keepalive.
"""

from __future__ import annotations

import hashlib
import ipaddress
import os
import struct
import threading
import zlib
from dataclasses import dataclass, field
from enum import IntEnum

from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives import hashes, serialization
from cryptography.hazmat.primitives.asymmetric.ed25519 import (
    Ed25519PrivateKey,
    Ed25519PublicKey,
)
from cryptography.hazmat.primitives.asymmetric.x25519 import (
    X25519PrivateKey,
    X25519PublicKey,
)
from cryptography.hazmat.primitives.ciphers.aead import ChaCha20Poly1305
from cryptography.hazmat.primitives.kdf.hkdf import HKDF

KEY_LEN = 32
SIG_LEN = 64
NONCE_START = 1

# 1 MiB plaintext per data message keeps sealed frames far below the 6 MB
# invocation payload cap even after envelope overhead.
MAX_DATA_LEN = 1024 * 1024
MAX_ENVELOPE_LEN = 2 * 1024 * 1024
MAX_STREAM_FRAME = 4 * 1024 * 1024

_SEAL_INFO = b"cloudhop-seal-v1"
_SEAL_NONCE = bytes(12)  # fresh key per message, so a fixed AEAD nonce is safe

ATYP_IPV4 = 1
ATYP_DOMAIN = 3
ATYP_IPV6 = 4

_U16 = struct.Struct(">H")
_U32 = struct.Struct(">I")
_U64 = struct.Struct(">Q")


class ProtocolError(Exception):
    """Base for anything that goes wrong at the protocol layer."""


class DecodeError(ProtocolError):
    """Malformed, truncated or oversized frame."""


class OpenError(ProtocolError):
    """Envelope failed to decrypt or authenticate."""


class ErrorCode(IntEnum):
    REPLAY = 1
    AUTH = 2
    FORBIDDEN_TARGET = 3
    NO_CONN = 4
    CONNECT_FAILED = 5
    BAD_FRAME = 6
    INTERNAL = 7


# ---------------------------------------------------------------------------
# Keys
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class KeyPair:
    """Ed25519 identity keypair; the 32-byte seed is the secret."""

    public_key: bytes
    secret_key: bytes

    def signer(self) -> Ed25519PrivateKey:
        return Ed25519PrivateKey.from_private_bytes(self.secret_key)


def generate_keypair(seed: bytes | None = None) -> KeyPair:
    """Make a keypair, deterministically when a 32-byte seed is given."""
    if seed is None:
        seed = os.urandom(KEY_LEN)
    if len(seed) != KEY_LEN:
        raise ProtocolError(f"seed must be {KEY_LEN} bytes, got {len(seed)}")
    priv = Ed25519PrivateKey.from_private_bytes(seed)
    pub = priv.public_key().public_bytes(
        serialization.Encoding.Raw, serialization.PublicFormat.Raw
    )
    return KeyPair(public_key=pub, secret_key=seed)


_P = 2**255 - 19


def _ed25519_pub_to_x25519(pk: bytes) -> bytes:
    # Montgomery u = (1+y)/(1-y) mod p; only the Edwards y coordinate matters.
    if len(pk) != KEY_LEN:
        raise ProtocolError("bad public key length")
    y = int.from_bytes(pk, "little") & ((1 << 255) - 1)
    if y >= _P or y == 1:
        raise ProtocolError("public key not usable for encryption")
    u = (1 + y) * pow(1 - y, _P - 2, _P) % _P
    return u.to_bytes(KEY_LEN, "little")


def _ed25519_seed_to_x25519(seed: bytes) -> bytes:
    # Same scalar Ed25519 uses internally; X25519 clamps it again on load.
    return hashlib.sha512(seed).digest()[:KEY_LEN]


# ---------------------------------------------------------------------------
# Sealed envelopes
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SealedEnvelope:
    recipient_hint: bytes  # recipient's Ed25519 public key
    ciphertext: bytes      # ephemeral X25519 public key || AEAD ciphertext

    @property
    def length(self) -> int:
        return KEY_LEN + len(self.ciphertext)

    def to_bytes(self) -> bytes:
        return self.recipient_hint + self.ciphertext

    @classmethod
    def from_bytes(cls, raw: bytes) -> "SealedEnvelope":
        if len(raw) < 2 * KEY_LEN:
            raise DecodeError("envelope too short")
        return cls(recipient_hint=raw[:KEY_LEN], ciphertext=raw[KEY_LEN:])


def _seal_key(shared: bytes, eph_pub: bytes, recipient_hint: bytes) -> bytes:
    return HKDF(
        algorithm=hashes.SHA256(),
        length=32,
        salt=None,
        info=_SEAL_INFO + eph_pub + recipient_hint,
    ).derive(shared)


def seal(plaintext: bytes, recipient: bytes) -> SealedEnvelope:
    """Encrypt so that only the holder of the recipient's secret key can read.

    Randomized: every call draws a fresh ephemeral X25519 key, so two seals of
    the same plaintext differ.
    """
    if not plaintext:
        raise ProtocolError("refusing to seal empty plaintext")
    recip_x = X25519PublicKey.from_public_bytes(_ed25519_pub_to_x25519(recipient))
    eph = X25519PrivateKey.generate()
    eph_pub = eph.public_key().public_bytes(
        serialization.Encoding.Raw, serialization.PublicFormat.Raw
    )
    key = _seal_key(eph.exchange(recip_x), eph_pub, recipient)
    ct = ChaCha20Poly1305(key).encrypt(_SEAL_NONCE, plaintext, None)
    return SealedEnvelope(recipient_hint=recipient, ciphertext=eph_pub + ct)


def open_envelope(envelope: SealedEnvelope, secret: bytes) -> bytes:
    """Inverse of seal. Raises OpenError on any tamper or key mismatch."""
    if len(envelope.ciphertext) < KEY_LEN + 16:
        raise DecodeError("ciphertext too short")
    eph_pub = envelope.ciphertext[:KEY_LEN]
    ct = envelope.ciphertext[KEY_LEN:]
    try:
        sk = X25519PrivateKey.from_private_bytes(_ed25519_seed_to_x25519(secret))
        shared = sk.exchange(X25519PublicKey.from_public_bytes(eph_pub))
        key = _seal_key(shared, eph_pub, envelope.recipient_hint)
        return ChaCha20Poly1305(key).decrypt(_SEAL_NONCE, ct, None)
    except Exception as exc:
        raise OpenError("envelope authentication failed") from exc


# ---------------------------------------------------------------------------
# Signed connection IDs
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ConnectionId:
    id: int
    signature: bytes

    def __post_init__(self):
        if not 0 <= self.id < 2**64:
            raise ProtocolError("connection id out of range")
        if len(self.signature) != SIG_LEN:
            raise ProtocolError("bad signature length")


NULL_CONNECTION = ConnectionId(id=0, signature=bytes(SIG_LEN))


def sign_connection_id(conn_id: int, secret: bytes) -> ConnectionId:
    sig = Ed25519PrivateKey.from_private_bytes(secret).sign(_U64.pack(conn_id))
    return ConnectionId(id=conn_id, signature=sig)


def verify_connection_id(conn: ConnectionId, public: bytes) -> bool:
    try:
        Ed25519PublicKey.from_public_bytes(public).verify(
            conn.signature, _U64.pack(conn.id)
        )
        return True
    except (InvalidSignature, ValueError):
        return False


# ---------------------------------------------------------------------------
# Nonce discipline
# ---------------------------------------------------------------------------

class NonceCounter:
    """Strictly increasing per-sender-key nonce table.

    check_and_accept is a serialized check-and-increment: safe to share across
    concurrent connection handlers.
    """

    def __init__(self):
        self._last: dict[bytes, int] = {}
        self._lock = threading.Lock()

    def check_and_accept(self, sender_key: bytes, nonce: int) -> bool:
        if not 0 < nonce < 2**64:
            return False
        with self._lock:
            if nonce <= self._last.get(sender_key, NONCE_START - 1):
                return False
            self._last[sender_key] = nonce
            return True

    def next_nonce(self, sender_key: bytes) -> int:
        """Sender-side counterpart: allocate the next nonce to stamp."""
        with self._lock:
            nxt = self._last.get(sender_key, NONCE_START - 1) + 1
            self._last[sender_key] = nxt
            return nxt


# ---------------------------------------------------------------------------
# Compression
# ---------------------------------------------------------------------------

def compress(data: bytes) -> tuple[bytes, bool]:
    """Deflate when it helps; otherwise pass through with flag false."""
    if not data:
        return data, False
    packed = zlib.compress(data, 6)
    if len(packed) < len(data):
        return packed, True
    return data, False


def decompress(data: bytes, original_length: int) -> bytes:
    try:
        out = zlib.decompress(data)
    except zlib.error as exc:
        raise DecodeError("corrupted compressed stream") from exc
    if len(out) != original_length:
        raise DecodeError(
            f"decompressed to {len(out)} bytes, expected {original_length}"
        )
    return out


# ---------------------------------------------------------------------------
# Messages
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class StartConnection:
    target_address: str
    target_port: int


@dataclass(frozen=True)
class Data:
    connection: ConnectionId
    compressed: bool
    original_length: int
    data: bytes

    @property
    def is_keepalive(self) -> bool:
        return self.original_length == 0 and not self.data


@dataclass(frozen=True)
class CloseConnection:
    connection: ConnectionId


@dataclass(frozen=True)
class RequestPayload:
    """Plaintext carried inside the request envelope."""

    client_public_key: bytes
    nonce: int
    inner: StartConnection | Data | CloseConnection


@dataclass(frozen=True)
class PrivateRequest:
    """Outer request frame; only this much is visible to the bridge."""

    server_address: str
    server_port: int
    envelope: SealedEnvelope

    @property
    def payload_length(self) -> int:
        return self.envelope.length


@dataclass(frozen=True)
class ConnectionEstablished:
    connection: ConnectionId


@dataclass(frozen=True)
class DataResponse:
    connection: ConnectionId
    compressed: bool
    original_length: int
    data: bytes


@dataclass(frozen=True)
class ConnectionClose:
    connection: ConnectionId
    message: bytes = b""


@dataclass(frozen=True)
class ErrorResponse:
    connection: ConnectionId
    error_code: ErrorCode
    message: bytes = b""


PrivateResponse = ConnectionEstablished | DataResponse | ConnectionClose | ErrorResponse

_INNER_START = 1
_INNER_DATA = 2
_INNER_CLOSE = 3

_RESP_ESTABLISHED = 1
_RESP_DATA = 2
_RESP_CLOSE = 3
_RESP_ERROR = 4


class _Reader:
    """Cursor over a frame; every take checks for truncation."""

    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if n < 0 or self.pos + n > len(self.buf):
            raise DecodeError("truncated frame")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def u8(self) -> int:
        return self.take(1)[0]

    def u16(self) -> int:
        return _U16.unpack(self.take(2))[0]

    def u32(self) -> int:
        return _U32.unpack(self.take(4))[0]

    def u64(self) -> int:
        return _U64.unpack(self.take(8))[0]

    def expect_end(self):
        if self.pos != len(self.buf):
            raise DecodeError(f"{len(self.buf) - self.pos} trailing bytes")


def encode_address(host: str, port: int) -> bytes:
    if not 0 <= port < 2**16:
        raise ProtocolError(f"port out of range: {port}")
    try:
        ip = ipaddress.ip_address(host)
    except ValueError:
        # Domain names travel as ASCII; non-ASCII callers must punycode first.
        try:
            raw = host.encode("ascii")
        except UnicodeError:
            raise ProtocolError(f"hostname is not ASCII: {host!r}")
        if not 0 < len(raw) < 256:
            raise ProtocolError(f"bad domain name: {host!r}")
        return bytes([ATYP_DOMAIN, len(raw)]) + raw + _U16.pack(port)
    if ip.version == 4:
        return bytes([ATYP_IPV4]) + ip.packed + _U16.pack(port)
    return bytes([ATYP_IPV6]) + ip.packed + _U16.pack(port)


def _decode_address(r: _Reader) -> tuple[str, int]:
    atyp = r.u8()
    if atyp == ATYP_IPV4:
        host = str(ipaddress.IPv4Address(r.take(4)))
    elif atyp == ATYP_IPV6:
        host = str(ipaddress.IPv6Address(r.take(16)))
    elif atyp == ATYP_DOMAIN:
        n = r.u8()
        if n == 0:
            raise DecodeError("empty domain")
        try:
            host = r.take(n).decode("ascii")
        except UnicodeDecodeError:
            raise DecodeError("domain is not ASCII")
    else:
        raise DecodeError(f"unknown address type {atyp}")
    return host, r.u16()


def decode_address(raw: bytes) -> tuple[str, int]:
    r = _Reader(raw)
    out = _decode_address(r)
    r.expect_end()
    return out


def _encode_connection(conn: ConnectionId) -> bytes:
    return _U64.pack(conn.id) + conn.signature


def _decode_connection(r: _Reader) -> ConnectionId:
    return ConnectionId(id=r.u64(), signature=r.take(SIG_LEN))


def _check_data_lengths(compressed: bool, original_length: int, data: bytes):
    if original_length > MAX_DATA_LEN:
        raise ProtocolError(f"data message over {MAX_DATA_LEN} byte cap")
    if compressed:
        if len(data) > original_length:
            raise ProtocolError("compressed larger than original")
    elif len(data) != original_length:
        raise ProtocolError("length field disagrees with data")


def encode_payload(payload: RequestPayload) -> bytes:
    if len(payload.client_public_key) != KEY_LEN:
        raise ProtocolError("bad client public key length")
    if not 0 < payload.nonce < 2**64:
        raise ProtocolError("nonce out of range")
    head = payload.client_public_key + _U64.pack(payload.nonce)
    inner = payload.inner
    if isinstance(inner, StartConnection):
        body = bytes([_INNER_START]) + encode_address(
            inner.target_address, inner.target_port
        )
    elif isinstance(inner, Data):
        _check_data_lengths(inner.compressed, inner.original_length, inner.data)
        body = (
            bytes([_INNER_DATA])
            + _encode_connection(inner.connection)
            + bytes([1 if inner.compressed else 0])
            + _U32.pack(inner.original_length)
            + _U32.pack(len(inner.data))
            + inner.data
        )
    elif isinstance(inner, CloseConnection):
        body = bytes([_INNER_CLOSE]) + _encode_connection(inner.connection)
    else:
        raise ProtocolError(f"unknown inner message {type(inner).__name__}")
    return head + body


def decode_payload(raw: bytes) -> RequestPayload:
    r = _Reader(raw)
    client_key = r.take(KEY_LEN)
    nonce = r.u64()
    tag = r.u8()
    inner: StartConnection | Data | CloseConnection
    if tag == _INNER_START:
        host, port = _decode_address(r)
        inner = StartConnection(target_address=host, target_port=port)
    elif tag == _INNER_DATA:
        conn = _decode_connection(r)
        compressed = r.u8() != 0
        original = r.u32()
        length = r.u32()
        if original > MAX_DATA_LEN or length > MAX_DATA_LEN:
            raise DecodeError("declared data length over cap")
        data = r.take(length)
        inner = Data(
            connection=conn, compressed=compressed,
            original_length=original, data=data,
        )
    elif tag == _INNER_CLOSE:
        inner = CloseConnection(connection=_decode_connection(r))
    else:
        raise DecodeError(f"unknown inner message tag {tag}")
    r.expect_end()
    return RequestPayload(client_public_key=client_key, nonce=nonce, inner=inner)


def encode_request(msg: PrivateRequest) -> bytes:
    env = msg.envelope.to_bytes()
    if len(env) > MAX_ENVELOPE_LEN:
        raise ProtocolError("envelope over size cap")
    return (
        encode_address(msg.server_address, msg.server_port)
        + _U32.pack(len(env))
        + env
    )


def decode_request(raw: bytes) -> PrivateRequest:
    r = _Reader(raw)
    host, port = _decode_address(r)
    length = r.u32()
    if length > MAX_ENVELOPE_LEN:
        raise DecodeError("declared payload length over cap")
    env = r.take(length)
    r.expect_end()
    return PrivateRequest(
        server_address=host, server_port=port,
        envelope=SealedEnvelope.from_bytes(env),
    )


def encode_response(msg: PrivateResponse) -> bytes:
    if isinstance(msg, ConnectionEstablished):
        return bytes([_RESP_ESTABLISHED]) + _encode_connection(msg.connection)
    if isinstance(msg, DataResponse):
        _check_data_lengths(msg.compressed, msg.original_length, msg.data)
        return (
            bytes([_RESP_DATA])
            + _encode_connection(msg.connection)
            + bytes([1 if msg.compressed else 0])
            + _U32.pack(msg.original_length)
            + _U32.pack(len(msg.data))
            + msg.data
        )
    if isinstance(msg, ConnectionClose):
        if len(msg.message) > 2**16 - 1:
            raise ProtocolError("close message too long")
        return (
            bytes([_RESP_CLOSE])
            + _encode_connection(msg.connection)
            + _U16.pack(len(msg.message))
            + msg.message
        )
    if isinstance(msg, ErrorResponse):
        if len(msg.message) > 2**16 - 1:
            raise ProtocolError("error message too long")
        return (
            bytes([_RESP_ERROR])
            + _encode_connection(msg.connection)
            + _U16.pack(int(msg.error_code))
            + _U16.pack(len(msg.message))
            + msg.message
        )
    raise ProtocolError(f"unknown response message {type(msg).__name__}")


def decode_response(raw: bytes) -> PrivateResponse:
    r = _Reader(raw)
    tag = r.u8()
    conn = _decode_connection(r)
    msg: PrivateResponse
    if tag == _RESP_ESTABLISHED:
        msg = ConnectionEstablished(connection=conn)
    elif tag == _RESP_DATA:
        compressed = r.u8() != 0
        original = r.u32()
        actual = r.u32()
        if original > MAX_DATA_LEN or actual > MAX_DATA_LEN:
            raise DecodeError("declared data length over cap")
        msg = DataResponse(
            connection=conn, compressed=compressed,
            original_length=original, data=r.take(actual),
        )
    elif tag == _RESP_CLOSE:
        msg = ConnectionClose(connection=conn, message=r.take(r.u16()))
    elif tag == _RESP_ERROR:
        code = r.u16()
        try:
            code = ErrorCode(code)
        except ValueError:
            raise DecodeError(f"unknown error code {code}")
        msg = ErrorResponse(connection=conn, error_code=code, message=r.take(r.u16()))
    else:
        raise DecodeError(f"unknown response tag {tag}")
    r.expect_end()
    return msg


# ---------------------------------------------------------------------------
# Stream framing (bridge <-> exit server TCP)
# ---------------------------------------------------------------------------

def write_frame(stream, frame: bytes):
    if len(frame) > MAX_STREAM_FRAME:
        raise ProtocolError("frame over stream cap")
    stream.sendall(_U32.pack(len(frame)) + frame)


def read_frame(stream) -> bytes:
    head = _read_exact(stream, 4)
    (length,) = _U32.unpack(head)
    if length > MAX_STREAM_FRAME:
        raise DecodeError("frame over stream cap")
    return _read_exact(stream, length)


def _read_exact(stream, n: int) -> bytes:
    chunks = []
    got = 0
    while got < n:
        chunk = stream.recv(n - got)
        if not chunk:
            raise DecodeError("stream closed mid-frame")
        chunks.append(chunk)
        got += len(chunk)
    return b"".join(chunks)
