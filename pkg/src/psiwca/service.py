"""Network services: two FSS servers, a key server, a verification server.

Everything on the wire is a length-prefixed binary frame (see WIRE.md for
the byte-exact layout and test vectors). The evaluation engine itself is
transport-free (`ServerState`); the socket classes wrap it with a
threaded, one-frame-in / one-frame-out dispatch loop, so a trace costs
exactly one request and one response frame per server.
"""
from __future__ import annotations

import hashlib
import hmac as hmac_mod
import json
import os
import socket
import socketserver
import struct
import threading
from dataclasses import dataclass, field
from enum import IntEnum
from typing import Callable, Sequence

from cryptography.hazmat.primitives.ciphers.aead import AESGCM

from .bucketing import BucketConfig, BucketedQuery, bucketed_server_eval
from .dpf import DomainPoint, DpfKey
from .errors import (
    ClockRegressionError,
    FrameError,
    InvalidInputError,
    ProtocolError,
    UnauthorizedError,
)
from .group import Group, GroupElement
from .psi import AnswerShare, QueryShare, derive_blinds, server_eval

MAGIC = b"PWCA"
WIRE_VERSION = 1
HEADER = struct.Struct("<4sBB16sQ")  # magic, version, type, query_id, payload_len
MAX_PAYLOAD = 1 << 31


class MsgType(IntEnum):
    UPLOAD = 0x01
    UPLOAD_ACK = 0x02
    QUERY = 0x10
    ANSWER = 0x11
    EPOCH_ROLL = 0x20
    ROLL_ACK = 0x21
    HEALTH = 0x30
    HEALTH_ACK = 0x31
    RELAY = 0x40
    RELAY_ACK = 0x41
    ATTEST = 0x50
    ATTEST_ACK = 0x51
    VC_REQ = 0x60
    VC_ACK = 0x61
    SUBMIT = 0x62
    SUBMIT_ACK = 0x63
    ERROR = 0x7F


class ErrorCode(IntEnum):
    MALFORMED = 1
    BAD_VERSION = 2
    DOMAIN_MISMATCH = 3
    UNAUTHORIZED = 4
    REPLAY = 5
    CLOCK_REGRESSION = 6
    UNKNOWN_TYPE = 7
    GROUP_MISMATCH = 8
    UNKNOWN_QUERY = 9
    INTERNAL = 10


NO_QUERY_ID = b"\x00" * 16


@dataclass(frozen=True)
class WireFrame:
    msg_type: int
    query_id: bytes
    payload: bytes

    def __post_init__(self):
        if len(self.query_id) != 16:
            raise FrameError("query id must be 16 bytes")
        if len(self.payload) > MAX_PAYLOAD:
            raise FrameError("payload too large")

    def to_bytes(self) -> bytes:
        return HEADER.pack(MAGIC, WIRE_VERSION, self.msg_type, self.query_id, len(self.payload)) + self.payload

    @classmethod
    def from_bytes(cls, buf: bytes) -> "WireFrame":
        if len(buf) < HEADER.size:
            raise FrameError("truncated frame header")
        magic, version, mtype, qid, plen = HEADER.unpack_from(buf, 0)
        if magic != MAGIC:
            raise FrameError("bad magic")
        if version != WIRE_VERSION:
            raise FrameError(f"unsupported wire version {version}")
        if len(buf) != HEADER.size + plen:
            raise FrameError("payload length mismatch")
        return cls(mtype, qid, buf[HEADER.size:])


def read_frame(stream) -> WireFrame:
    head = _read_exact(stream, HEADER.size)
    magic, version, mtype, qid, plen = HEADER.unpack(head)
    if magic != MAGIC:
        raise FrameError("bad magic")
    if version != WIRE_VERSION:
        raise FrameError(f"unsupported wire version {version}")
    if plen > MAX_PAYLOAD:
        raise FrameError("payload too large")
    payload = _read_exact(stream, plen)
    return WireFrame(mtype, qid, payload)


def _read_exact(stream, n: int) -> bytes:
    chunks = []
    got = 0
    while got < n:
        chunk = stream.read(n - got)
        if not chunk:
            raise EOFError("peer closed mid-frame")
        chunks.append(chunk)
        got += len(chunk)
    return b"".join(chunks)


# ---------------------------------------------------------------------------
# Payload codecs

QUERY_FLAG_BUCKETED = 1
QUERY_FLAG_STORE = 2
QUERY_FLAG_REEVAL = 4


def encode_plain_query(share: QueryShare, store: bool = False) -> bytes:
    out = bytearray(struct.pack("<QB", share.epoch, QUERY_FLAG_STORE if store else 0))
    out += struct.pack("<I", len(share.keys))
    for k in share.keys:
        blob = k.to_bytes()
        out += struct.pack("<I", len(blob)) + blob
    return bytes(out)


def encode_bucketed_query(bq: BucketedQuery, store: bool = False) -> bytes:
    cfg = bq.config
    flags = QUERY_FLAG_BUCKETED | (QUERY_FLAG_STORE if store else 0)
    out = bytearray(struct.pack("<QB", bq.day, flags))
    out += struct.pack("<IIBB", cfg.buckets, cfg.capacity, cfg.choices, int(cfg.rerandomize))
    out += struct.pack("<Q", bq.day) + cfg.hash_seed
    keys = [k for share in bq.shares for k in share.keys]
    out += struct.pack("<I", len(keys))
    for k in keys:
        blob = k.to_bytes()
        out += struct.pack("<I", len(blob)) + blob
    return bytes(out)


def encode_reeval_query(epoch: int) -> bytes:
    return struct.pack("<QBI", epoch, QUERY_FLAG_REEVAL, 0)


@dataclass(frozen=True)
class ParsedQuery:
    epoch: int
    flags: int
    keys: tuple
    bucket_cfg: BucketConfig | None
    day: int


def decode_query(payload: bytes) -> ParsedQuery:
    try:
        epoch, flags = struct.unpack_from("<QB", payload, 0)
        off = 9
        cfg = None
        day = 0
        if flags & QUERY_FLAG_BUCKETED:
            m, b, c, rer = struct.unpack_from("<IIBB", payload, off)
            off += 10
            (day,) = struct.unpack_from("<Q", payload, off)
            off += 8
            seed = payload[off : off + 16]
            off += 16
            cfg = BucketConfig(m, b, c, bool(rer), bytes(seed))
        (count,) = struct.unpack_from("<I", payload, off)
        off += 4
        keys = []
        for _ in range(count):
            (klen,) = struct.unpack_from("<I", payload, off)
            off += 4
            keys.append(DpfKey.from_bytes(bytes(payload[off : off + klen])))
            off += klen
        if off != len(payload):
            raise FrameError("trailing bytes in query payload")
    except (struct.error, InvalidInputError) as exc:
        raise FrameError(f"malformed query payload: {exc}") from exc
    if cfg is not None and len(keys) != cfg.buckets * cfg.capacity:
        raise FrameError("bucketed query must carry exactly m*b keys")
    return ParsedQuery(epoch, flags, tuple(keys), cfg, day)


def encode_answer(value: GroupElement) -> bytes:
    return value.group.element_to_bytes(value)


def decode_answer(payload: bytes, group: Group) -> GroupElement:
    if len(payload) != group.element_byte_length():
        raise FrameError("answer payload must be exactly one group element")
    return group.element_from_bytes(payload)


def encode_upload(upload_id: bytes, tokens: Sequence[DomainPoint], auth_key: bytes) -> bytes:
    if len(upload_id) != 16:
        raise InvalidInputError("upload id must be 16 bytes")
    width = (tokens[0].bits + 7) // 8 if tokens else 0
    bits = tokens[0].bits if tokens else 0
    body = bytearray(upload_id)
    body += struct.pack("<IBB", len(tokens), width, bits)
    for t in tokens:
        if t.bits != bits:
            raise InvalidInputError("mixed token widths in one upload")
        body += t.value.to_bytes(width, "little")
    tag = hmac_mod.new(auth_key, bytes(body), hashlib.sha256).digest()
    return bytes(body) + tag


def decode_upload(payload: bytes, auth_key: bytes) -> tuple[bytes, list[DomainPoint]]:
    if len(payload) < 16 + 6 + 32:
        raise FrameError("upload payload too short")
    body, tag = payload[:-32], payload[-32:]
    if not hmac_mod.compare_digest(hmac_mod.new(auth_key, body, hashlib.sha256).digest(), tag):
        raise UnauthorizedError("upload authentication failed")
    upload_id = bytes(body[:16])
    count, width, bits = struct.unpack_from("<IBB", body, 16)
    off = 22
    if len(body) != off + count * width:
        raise FrameError("upload token block length mismatch")
    toks = []
    for i in range(count):
        raw = body[off + i * width : off + (i + 1) * width]
        toks.append(DomainPoint(int.from_bytes(raw, "little"), bits))
    return upload_id, toks


def encode_error(code: int, message: str) -> bytes:
    return struct.pack("<H", code) + message.encode()


def decode_error(payload: bytes) -> tuple[int, str]:
    (code,) = struct.unpack_from("<H", payload, 0)
    return code, payload[2:].decode(errors="replace")


# ---------------------------------------------------------------------------
# Engine


@dataclass
class ServerConfig:
    role: int
    group: Group = field(default_factory=Group)
    domain_bits: int = 74
    T: int = 14
    blind_seed: bytes = b"\x00" * 32
    vs_auth_key: bytes = b"\x01" * 32
    channel_key: bytes | None = None   # client<->this-server sealing key
    host: str = "127.0.0.1"
    port: int = 0
    peer_host: str | None = None
    peer_port: int | None = None

    @classmethod
    def from_json_file(cls, path: str) -> "ServerConfig":
        with open(path, "r", encoding="utf-8") as fh:
            raw = json.load(fh)
        blind_seed = bytes.fromhex(raw.get("blind_seed_hex", "00" * 32))
        seed_path = os.environ.get("PSIWCA_BLIND_SEED_PATH") or raw.get("blind_seed_path")
        if seed_path:
            with open(seed_path, "r", encoding="utf-8") as fh:
                blind_seed = bytes.fromhex(fh.read().strip())
        ck = raw.get("channel_key_hex")
        return cls(
            role=int(raw["role"]),
            group=Group(tuple(raw.get("moduli", [1 << 16]))),
            domain_bits=int(raw.get("domain_bits", 74)),
            T=int(raw.get("T", 14)),
            blind_seed=blind_seed,
            vs_auth_key=bytes.fromhex(raw.get("vs_auth_key_hex", "01" * 32)),
            channel_key=bytes.fromhex(ck) if ck else None,
            host=raw.get("host", "127.0.0.1"),
            port=int(raw.get("port", 0)),
            peer_host=raw.get("peer_host"),
            peer_port=int(raw["peer_port"]) if raw.get("peer_port") is not None else None,
        )


class ServerState:
    """One FSS server's epoch-partitioned token store plus evaluation.

    Queries evaluate against an immutable snapshot taken under the lock;
    uploads and rolls are single-writer. Both servers fed the same
    synchronized uploads and rolls keep byte-identical stores.
    """

    def __init__(self, cfg: ServerConfig):
        if cfg.role not in (0, 1):
            raise InvalidInputError("role must be 0 or 1")
        self.cfg = cfg
        self.epoch = 0
        self._tokens: dict[int, set[int]] = {}
        self._seen_uploads: set[bytes] = set()
        self._stored_queries: dict[bytes, tuple[int, ParsedQuery]] = {}
        self._lock = threading.Lock()

    # -- store ------------------------------------------------------------

    def ingest_tokens(self, upload_id: bytes, tokens: Sequence[DomainPoint]) -> int:
        """Insert an authenticated upload under the current epoch (idempotent)."""
        for t in tokens:
            if t.bits != self.cfg.domain_bits:
                raise InvalidInputError("uploaded token bit-length does not match server domain")
        with self._lock:
            if upload_id in self._seen_uploads:
                return 0
            self._seen_uploads.add(upload_id)
            store = self._tokens.setdefault(self.epoch, set())
            before = len(store)
            store.update(t.value for t in tokens)
            return len(store) - before

    def snapshot(self) -> list[DomainPoint]:
        with self._lock:
            vals = sorted(v for s in self._tokens.values() for v in s)
        return [DomainPoint(v, self.cfg.domain_bits) for v in vals]

    def token_count(self) -> int:
        with self._lock:
            return sum(len(s) for s in self._tokens.values())

    def epoch_roll(self, now: int) -> int:
        """Advance the clock; drop epochs and stored queries older than T."""
        with self._lock:
            if now < self.epoch:
                raise ClockRegressionError(f"clock regression: {now} < {self.epoch}")
            self.epoch = now
            cutoff = now - self.cfg.T
            dead = [e for e in self._tokens if e <= cutoff]
            for e in dead:
                del self._tokens[e]
            dead_q = [q for q, (e, _) in self._stored_queries.items() if e <= cutoff]
            for q in dead_q:
                del self._stored_queries[q]
            return len(dead)

    def store_digest(self) -> bytes:
        with self._lock:
            h = hashlib.sha256()
            for e in sorted(self._tokens):
                h.update(struct.pack("<q", e))
                for v in sorted(self._tokens[e]):
                    h.update(struct.pack("<16s", v.to_bytes(16, "little")))
            return h.digest()

    # -- evaluation ---------------------------------------------------------

    def _blind(self, query_id: bytes) -> GroupElement:
        epoch_seed = hashlib.blake2b(
            struct.pack("<q", self.epoch), key=self.cfg.blind_seed, digest_size=32
        ).digest()
        return derive_blinds(epoch_seed, query_id, self.cfg.group)[self.cfg.role]

    def answer_query(self, query_id: bytes, pq: ParsedQuery) -> AnswerShare:
        if pq.flags & QUERY_FLAG_REEVAL:
            with self._lock:
                stored = self._stored_queries.get(query_id)
            if stored is None:
                raise ProtocolError("unknown stored query id")
            pq = stored[1]
        else:
            for k in pq.keys:
                if k.domain_bits != self.cfg.domain_bits:
                    raise InvalidInputError("query domain does not match server configuration")
                if k.group != self.cfg.group:
                    raise InvalidInputError("query group does not match server configuration")
            if pq.flags & QUERY_FLAG_STORE:
                with self._lock:
                    self._stored_queries[query_id] = (self.epoch, pq)
        tokens = self.snapshot()
        blind = self._blind(query_id)
        if pq.bucket_cfg is not None:
            b = pq.bucket_cfg.capacity
            shares = tuple(
                QueryShare(query_id, pq.epoch, tuple(pq.keys[q * b : (q + 1) * b]))
                for q in range(pq.bucket_cfg.buckets)
            )
            bq = BucketedQuery(query_id, pq.day, pq.bucket_cfg, self.cfg.domain_bits, shares)
            return bucketed_server_eval(bq, tokens, blind)
        share = QueryShare(query_id, pq.epoch, pq.keys)
        return server_eval(share, tokens, blind)

    # -- frame dispatch -----------------------------------------------------

    def handle_frame(self, frame: WireFrame, unseal_ok: bool = True) -> WireFrame:
        try:
            return self._dispatch(frame, unseal_ok)
        except (FrameError, struct.error) as exc:
            return _err(frame, ErrorCode.MALFORMED, str(exc))
        except UnauthorizedError as exc:
            return _err(frame, ErrorCode.UNAUTHORIZED, str(exc))
        except ClockRegressionError as exc:
            return _err(frame, ErrorCode.CLOCK_REGRESSION, str(exc))
        except InvalidInputError as exc:
            code = ErrorCode.GROUP_MISMATCH if "group" in str(exc) else ErrorCode.DOMAIN_MISMATCH
            return _err(frame, code, str(exc))
        except ProtocolError as exc:
            return _err(frame, ErrorCode.UNKNOWN_QUERY, str(exc))

    def _dispatch(self, frame: WireFrame, unseal_ok: bool) -> WireFrame:
        mtype = frame.msg_type
        if mtype == MsgType.QUERY:
            pq = decode_query(frame.payload)
            ans = self.answer_query(frame.query_id, pq)
            return WireFrame(MsgType.ANSWER, frame.query_id, encode_answer(ans.value))
        if mtype == MsgType.UPLOAD:
            upload_id, toks = decode_upload(frame.payload, self.cfg.vs_auth_key)
            inserted = self.ingest_tokens(upload_id, toks)
            return WireFrame(MsgType.UPLOAD_ACK, frame.query_id, upload_id + struct.pack("<I", inserted))
        if mtype == MsgType.EPOCH_ROLL:
            (now,) = struct.unpack("<Q", frame.payload)
            dropped = self.epoch_roll(now)
            return WireFrame(MsgType.ROLL_ACK, frame.query_id, struct.pack("<IQ", dropped, self.epoch))
        if mtype == MsgType.HEALTH:
            return WireFrame(
                MsgType.HEALTH_ACK,
                frame.query_id,
                struct.pack("<BQB", self.cfg.role, self.epoch, WIRE_VERSION),
            )
        if mtype == MsgType.RELAY and unseal_ok and self.cfg.channel_key is not None:
            inner = unseal_frame(self.cfg.channel_key, frame.payload)
            resp = self.handle_frame(inner, unseal_ok=False)
            return WireFrame(MsgType.RELAY_ACK, frame.query_id, seal_frame(self.cfg.channel_key, resp))
        return _err(frame, ErrorCode.UNKNOWN_TYPE, f"unsupported message type {mtype:#x}")


def _err(frame: WireFrame, code: int, message: str) -> WireFrame:
    return WireFrame(MsgType.ERROR, frame.query_id, encode_error(code, message))


# ---------------------------------------------------------------------------
# Sealed relay channel


def seal_frame(channel_key: bytes, frame: WireFrame) -> bytes:
    nonce = os.urandom(12)
    return nonce + AESGCM(channel_key).encrypt(nonce, frame.to_bytes(), b"relay")


def unseal_frame(channel_key: bytes, payload: bytes) -> WireFrame:
    if len(payload) < 13:
        raise FrameError("sealed payload too short")
    try:
        inner = AESGCM(channel_key).decrypt(payload[:12], payload[12:], b"relay")
    except Exception as exc:
        raise UnauthorizedError("cannot unseal relayed frame") from exc
    return WireFrame.from_bytes(inner)


# ---------------------------------------------------------------------------
# Socket plumbing


class _FrameHandler(socketserver.StreamRequestHandler):
    def handle(self):
        while True:
            try:
                frame = read_frame(self.rfile)
            except (EOFError, FrameError, ConnectionError):
                return
            resp = self.server.dispatch(frame)  # type: ignore[attr-defined]
            try:
                self.wfile.write(resp.to_bytes())
                self.wfile.flush()
            except (BrokenPipeError, ConnectionError):
                return


class _ThreadedServer(socketserver.ThreadingTCPServer):
    daemon_threads = True
    allow_reuse_address = True


class FrameService:
    """A threaded frame server around a dispatch callable."""

    def __init__(self, host: str, port: int, dispatch: Callable[[WireFrame], WireFrame]):
        self._srv = _ThreadedServer((host, port), _FrameHandler)
        self._srv.dispatch = dispatch  # type: ignore[attr-defined]
        self._thread: threading.Thread | None = None

    @property
    def address(self) -> tuple[str, int]:
        return self._srv.server_address[:2]

    def start(self) -> "FrameService":
        self._thread = threading.Thread(target=self._srv.serve_forever, daemon=True)
        self._thread.start()
        return self

    def stop(self) -> None:
        self._srv.shutdown()
        self._srv.server_close()
        if self._thread:
            self._thread.join(timeout=5)

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.stop()


class FssServer(FrameService):
    """An FSS evaluation server; role 0 additionally forwards sealed relays."""

    def __init__(self, cfg: ServerConfig):
        self.state = ServerState(cfg)
        super().__init__(cfg.host, cfg.port, self._handle)

    def _handle(self, frame: WireFrame) -> WireFrame:
        if frame.msg_type == MsgType.RELAY and self.state.cfg.role == 0:
            # Relay hop: pass the sealed payload through to the peer untouched.
            peer = (self.state.cfg.peer_host, self.state.cfg.peer_port)
            if peer[0] is None or peer[1] is None:
                return _err(frame, ErrorCode.INTERNAL, "no relay peer configured")
            try:
                resp = send_frame(peer, frame)
            except OSError as exc:
                return _err(frame, ErrorCode.INTERNAL, f"relay failed: {exc}")
            return resp
        return self.state.handle_frame(frame)


def send_frame(address: tuple[str, int], frame: WireFrame, timeout: float = 30.0) -> WireFrame:
    """One request frame out, one response frame back."""
    with socket.create_connection(address, timeout=timeout) as sock:
        sock.sendall(frame.to_bytes())
        with sock.makefile("rb") as rf:
            return read_frame(rf)


class ServiceClient:
    """Client-side helper for tests and the CLI."""

    def __init__(self, address: tuple[str, int]):
        self.address = address

    def call(self, frame: WireFrame) -> WireFrame:
        return send_frame(self.address, frame)

    def health(self) -> tuple[int, int]:
        resp = self.call(WireFrame(MsgType.HEALTH, NO_QUERY_ID, b""))
        raise_on_error(resp)
        role, epoch, _ = struct.unpack("<BQB", resp.payload)
        return role, epoch

    def roll(self, now: int) -> int:
        resp = self.call(WireFrame(MsgType.EPOCH_ROLL, NO_QUERY_ID, struct.pack("<Q", now)))
        raise_on_error(resp)
        dropped, _ = struct.unpack("<IQ", resp.payload)
        return dropped


def raise_on_error(frame: WireFrame) -> WireFrame:
    if frame.msg_type == MsgType.ERROR:
        code, msg = decode_error(frame.payload)
        raise ProtocolError(f"server error {code}: {msg}")
    return frame


# ---------------------------------------------------------------------------
# Verification server and key server


class VerificationServer:
    """Checks upload commitments and forwards accepted sets to both FSS servers.

    Challenges are one-time: a replayed or unknown challenge is rejected.
    `fss_senders` are frame transports (in-process dispatch or sockets).
    """

    def __init__(self, k2: bytes, vs_auth_key: bytes, fss_senders: Sequence[Callable[["WireFrame"], "WireFrame"]]):
        self.k2 = k2
        self.vs_auth_key = vs_auth_key
        self.fss_senders = list(fss_senders)
        self._open_challenges: set[bytes] = set()
        self._lock = threading.Lock()

    def issue_challenge(self) -> bytes:
        vc = os.urandom(16)
        with self._lock:
            self._open_challenges.add(vc)
        return vc

    def verify_and_forward(self, vc: bytes, tokens: Sequence[DomainPoint], tag: bytes) -> bytes:
        with self._lock:
            if vc not in self._open_challenges:
                raise UnauthorizedError("unknown or already-used verification challenge")
        if not hmac_mod.compare_digest(upload_commitment(self.k2, vc, tokens), tag):
            raise UnauthorizedError("upload commitment mismatch")
        with self._lock:
            self._open_challenges.discard(vc)
        upload_id = hashlib.blake2b(vc, key=self.vs_auth_key, digest_size=16).digest()
        payload = encode_upload(upload_id, tokens, self.vs_auth_key)
        for sender in self.fss_senders:
            resp = sender(WireFrame(MsgType.UPLOAD, NO_QUERY_ID, payload))
            raise_on_error(resp)
        return upload_id

    def dispatch(self, frame: WireFrame) -> WireFrame:
        try:
            if frame.msg_type == MsgType.VC_REQ:
                return WireFrame(MsgType.VC_ACK, frame.query_id, self.issue_challenge())
            if frame.msg_type == MsgType.SUBMIT:
                vc = bytes(frame.payload[:16])
                body = frame.payload[16:-32]
                tag = bytes(frame.payload[-32:])
                count, width, bits = struct.unpack_from("<IBB", body, 0)
                off = 6
                if len(body) != off + count * width:
                    raise FrameError("submission token block length mismatch")
                toks = [
                    DomainPoint(int.from_bytes(body[off + i * width : off + (i + 1) * width], "little"), bits)
                    for i in range(count)
                ]
                upload_id = self.verify_and_forward(vc, toks, tag)
                return WireFrame(MsgType.SUBMIT_ACK, frame.query_id, upload_id)
            return _err(frame, ErrorCode.UNKNOWN_TYPE, f"unsupported message type {frame.msg_type:#x}")
        except UnauthorizedError as exc:
            return _err(frame, ErrorCode.UNAUTHORIZED, str(exc))
        except (FrameError, struct.error, InvalidInputError) as exc:
            return _err(frame, ErrorCode.MALFORMED, str(exc))


def upload_commitment(k2: bytes, vc: bytes, tokens: Sequence[DomainPoint]) -> bytes:
    """Commitment over the exact submitted sequence, length-delimited."""
    h = hmac_mod.new(k2, digestmod=hashlib.sha256)
    h.update(vc)
    for t in tokens:
        blob = t.to_bytes()
        h.update(struct.pack("<IB", len(blob), t.bits))
        h.update(blob)
    return h.digest()


def encode_submit(vc: bytes, tokens: Sequence[DomainPoint], k2: bytes) -> bytes:
    width = (tokens[0].bits + 7) // 8 if tokens else 0
    bits = tokens[0].bits if tokens else 0
    body = bytearray(struct.pack("<IBB", len(tokens), width, bits))
    for t in tokens:
        body += t.value.to_bytes(width, "little")
    return vc + bytes(body) + upload_commitment(k2, vc, tokens)


class KeyServer:
    """Hands (K1, K2) to devices after a stubbed attestation handshake.

    The device proves knowledge of the enrollment key by an HMAC over its
    id; the keys come back sealed under the same enrollment key.
    """

    def __init__(self, k1: bytes, k2: bytes, enrollment_key: bytes):
        self.k1 = k1
        self.k2 = k2
        self.enrollment_key = enrollment_key

    def attest_evidence(self, device_id: bytes) -> bytes:
        return hmac_mod.new(self.enrollment_key, b"attest" + device_id, hashlib.sha256).digest()

    def provision(self, device_id: bytes, evidence: bytes) -> bytes:
        if not hmac_mod.compare_digest(evidence, self.attest_evidence(device_id)):
            raise UnauthorizedError("attestation evidence rejected")
        nonce = os.urandom(12)
        blob = AESGCM(self.enrollment_key).encrypt(nonce, self.k1 + self.k2, device_id)
        return nonce + blob

    def dispatch(self, frame: WireFrame) -> WireFrame:
        try:
            if frame.msg_type == MsgType.ATTEST:
                (idlen,) = struct.unpack_from("<H", frame.payload, 0)
                device_id = bytes(frame.payload[2 : 2 + idlen])
                evidence = bytes(frame.payload[2 + idlen :])
                return WireFrame(MsgType.ATTEST_ACK, frame.query_id, self.provision(device_id, evidence))
            return _err(frame, ErrorCode.UNKNOWN_TYPE, f"unsupported message type {frame.msg_type:#x}")
        except UnauthorizedError as exc:
            return _err(frame, ErrorCode.UNAUTHORIZED, str(exc))
        except (struct.error, FrameError) as exc:
            return _err(frame, ErrorCode.MALFORMED, str(exc))


def open_provision_blob(enrollment_key: bytes, device_id: bytes, blob: bytes) -> tuple[bytes, bytes]:
    keys = AESGCM(enrollment_key).decrypt(blob[:12], blob[12:], device_id)
    return keys[:32], keys[32:]
