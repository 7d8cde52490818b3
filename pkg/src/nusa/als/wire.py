"""Wire protocol for talking to the aggregation server.

Requests and responses are single lines of JSON over a local stream
socket.  The server opens every connection with a greeting line naming
the protocol version ("nusa/1"); after that each request carries
``{token, op, args}`` and each response ``{status, payload}`` or
``{status, error, message}``.

Two transports implement the same call interface: ``SocketTransport``
speaks the protocol over TCP, ``DirectTransport`` short-circuits the
socket but still round-trips every message through the JSON codec so
both paths exercise identical encode/decode logic.
"""
from __future__ import annotations

import json
import socket
import socketserver
import threading
from typing import Any

from ..crypto_core import LayeredCiphertext, ObfuscatedBlob, PatientIdentifier
from ..ehr_store import MedicalRecord, RecordView
from ..errors import NusaError, ProtocolError, error_for_code
from ..patient_registry import Identity
from .service import AggregationLoginServer

PROTOCOL_VERSION = "nusa/1"
MAX_LINE = 4 * 1024 * 1024


def _identity_from_args(args: dict) -> Identity:
    try:
        return Identity.from_dict(args["identity"])
    except (KeyError, TypeError) as exc:
        raise ProtocolError(f"bad identity argument: {exc}") from exc


def _windows_from_args(raw: Any) -> list[tuple[float, float]]:
    if raw is None:
        return []
    try:
        return [(float(s), float(e)) for s, e in raw]
    except (TypeError, ValueError) as exc:
        raise ProtocolError(f"bad windows argument: {exc}") from exc


def _blobs_from_args(raw: Any) -> dict[str, ObfuscatedBlob]:
    out = {}
    for name, d in (raw or {}).items():
        out[name] = ObfuscatedBlob.from_dict(d)
    return out


def _store_index(als: AggregationLoginServer, value: Any) -> int:
    """Stores are addressed by position or by name on the wire."""
    if isinstance(value, bool):
        raise ProtocolError("bad store reference")
    if isinstance(value, int):
        return value
    for idx, store in enumerate(als.stores):
        if store.name == value:
            return idx
    raise ProtocolError(f"unknown store {value!r}")


def _view_to_wire(store_name: str, view: RecordView) -> dict:
    return {
        "store": store_name,
        "pid": view.pid.hex,
        "clear": dict(view.clear_fields),
        "obfuscated": {k: b.to_dict() for k, b in view.obfuscated_fields.items()},
    }


def _session_to_wire(session) -> dict:
    return {
        "token": session.token,
        "principal": session.principal_id,
        "role": session.role,
        "expiry": session.expiry,
    }


def _need_token(token: str | None) -> str:
    if not token:
        raise ProtocolError("request requires a session token")
    return token


def dispatch(als: AggregationLoginServer, token: str | None, op: str, args: dict) -> dict:
    """Decode one request, invoke the server, encode the payload.

    Raises NusaError subclasses; the transport layers turn those into
    error responses.  Everything crossing this boundary is plain JSON,
    so both transports share one serialization story.
    """
    if op == "authenticate":
        session = als.authenticate(args["principal"], args["credential"])
        return _session_to_wire(session)
    if op == "renew":
        return _session_to_wire(als.renew(_need_token(token)))

    tok = _need_token(token)

    if op == "populate":
        record_id = als.populate(
            tok,
            _identity_from_args(args),
            LayeredCiphertext.from_hex(args["epid"]),
            PatientIdentifier.from_hex(args["pid"]),
            dict(args.get("clear") or {}),
            _blobs_from_args(args.get("obfuscated")),
            store_indexes=[_store_index(als, s) for s in args.get("stores", [0])],
        )
        return {"record_id": record_id}
    if op == "query_patient_epid":
        epid, identity, record_id = als.query_patient_epid(tok, dict(args["query"]))
        return {"epid": epid.hex, "identity": identity.to_dict(), "record_id": record_id}
    if op == "fetch_records":
        views = als.fetch_records(tok, PatientIdentifier.from_hex(args["pid"]))
        return {"records": [_view_to_wire(name, v) for name, v in views]}
    if op == "update_record":
        touched = als.update_record(
            tok,
            PatientIdentifier.from_hex(args["pid"]),
            dict(args.get("clear") or {}),
            _blobs_from_args(args.get("obfuscated")),
        )
        return {"stores": touched}
    if op == "replace_record":
        pid = PatientIdentifier.from_hex(args["pid"])
        record = MedicalRecord(
            pid=pid,
            clear_fields=dict(args.get("clear") or {}),
            obfuscated_fields=_blobs_from_args(args.get("obfuscated")),
        )
        touched = als.replace_record(tok, pid, record)
        return {"stores": touched}
    if op == "attach_legacy":
        count = als.attach_legacy(
            tok,
            _store_index(als, args["store"]),
            dict(args["query"]),
            PatientIdentifier.from_hex(args["pid"]),
        )
        return {"attached": count}
    if op == "keyword_search":
        hits = als.keyword_search(tok, list(args["terms"]))
        return {"hits": [[store, pid.hex, field] for store, pid, field in hits]}
    if op == "stats":
        store = args.get("store")
        value = als.stats(
            tok,
            args["field"],
            args["statistic"],
            store_index=None if store is None else _store_index(als, store),
        )
        return {"value": value}
    if op == "list_patients":
        rows = als.list_patients(tok)
        return {
            "patients": [
                {
                    "record_id": rid,
                    "identity": ident.to_dict(),
                    "role": grant.role,
                    "windows": [[s, e] for s, e in grant.windows],
                }
                for rid, ident, grant in rows
            ]
        }
    if op == "delegate_offer":
        ticket_ids = als.delegate_offer(tok, [dict(q) for q in args["queries"]], args["grantee"])
        return {"tickets": ticket_ids}
    if op == "inbox":
        return {"tickets": [t.to_dict() for t in als.inbox(tok)]}
    if op == "pmd_inbox":
        return {"tickets": [t.to_dict() for t in als.pmd_inbox(tok)]}
    if op == "accept_ticket":
        als.accept_ticket(tok, int(args["ticket"]), LayeredCiphertext.from_hex(args["eepid"]))
        return {}
    if op == "complete_ticket":
        pid = args.get("pid")
        als.complete_ticket(
            tok,
            int(args["ticket"]),
            LayeredCiphertext.from_hex(args["epid"]),
            windows=_windows_from_args(args.get("windows")),
            pid=PatientIdentifier.from_hex(pid) if pid else None,
        )
        return {}
    if op == "request_access":
        return {"ticket": als.request_access(tok, dict(args["query"]))}
    if op == "remove_patient_stage1":
        removed = als.remove_patient_stage1(tok, PatientIdentifier.from_hex(args["pid"]))
        return {"stores": removed}
    if op == "remove_patient_stage2":
        record_id = als.remove_patient_stage2(tok, LayeredCiphertext.from_hex(args["epid"]))
        return {"record_id": record_id}
    if op == "recover_pmd_key":
        pairs = [
            (LayeredCiphertext.from_hex(old), LayeredCiphertext.from_hex(new))
            for old, new in args["replacements"]
        ]
        replaced, errors = als.recover_pmd_key(tok, pairs)
        return {"replaced": replaced, "errors": errors}
    if op == "recover_smd_key":
        revoked, ticket_ids = als.recover_smd_key(tok, bytes.fromhex(args["new_key_id"]))
        return {"revoked": revoked, "tickets": ticket_ids}
    if op == "set_visibility":
        als.set_obfuscation_visibility(
            tok,
            PatientIdentifier.from_hex(args["pid"]),
            args["field"],
            args["md"],
            bool(args["hidden"]),
        )
        return {}
    if op == "sweep":
        return {"removed": als.sweep_expired(token=tok)}
    raise ProtocolError(f"unknown op {op!r}")


def handle_line(als: AggregationLoginServer, line: str) -> str:
    """Process one raw request line and render the response line."""
    try:
        msg = json.loads(line)
        if not isinstance(msg, dict) or not isinstance(msg.get("op"), str):
            raise ProtocolError("request must be an object with an 'op'")
        payload = dispatch(als, msg.get("token"), msg["op"], msg.get("args") or {})
        reply = {"status": "ok", "payload": payload}
    except NusaError as exc:
        reply = {"status": "error", "error": exc.code, "message": str(exc)}
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        reply = {"status": "error", "error": "ProtocolError", "message": str(exc)}
    return json.dumps(reply, separators=(",", ":"))


class DirectTransport:
    """In-process transport that still round-trips JSON both ways."""

    def __init__(self, als: AggregationLoginServer):
        self._als = als

    def call(self, op: str, args: dict | None = None, token: str | None = None) -> dict:
        request = json.dumps(
            {"token": token, "op": op, "args": args or {}}, separators=(",", ":")
        )
        reply = json.loads(handle_line(self._als, request))
        if reply["status"] != "ok":
            raise error_for_code(reply["error"], reply.get("message", ""))
        return reply["payload"]

    def close(self) -> None:
        pass


class _Handler(socketserver.StreamRequestHandler):
    def handle(self) -> None:
        self.wfile.write(
            (json.dumps({"proto": PROTOCOL_VERSION}, separators=(",", ":")) + "\n").encode()
        )
        while True:
            raw = self.rfile.readline(MAX_LINE)
            if not raw:
                return
            line = raw.decode("utf-8", errors="replace").strip()
            if not line:
                continue
            out = handle_line(self.server.als, line)  # type: ignore[attr-defined]
            try:
                self.wfile.write((out + "\n").encode())
                self.wfile.flush()
            except (BrokenPipeError, ConnectionResetError):
                return


class _TCPServer(socketserver.ThreadingTCPServer):
    allow_reuse_address = True
    daemon_threads = True

    def __init__(self, addr, als: AggregationLoginServer):
        super().__init__(addr, _Handler)
        self.als = als


class ProtocolServer:
    """Threaded socket front end for one aggregation server."""

    def __init__(self, als: AggregationLoginServer, host: str = "127.0.0.1", port: int = 0):
        self._server = _TCPServer((host, port), als)
        self._thread: threading.Thread | None = None

    @property
    def address(self) -> tuple[str, int]:
        host, port = self._server.server_address[:2]
        return str(host), int(port)

    def start(self) -> "ProtocolServer":
        self._thread = threading.Thread(
            target=self._server.serve_forever, name="nusa-wire", daemon=True
        )
        self._thread.start()
        return self

    def serve_forever(self) -> None:
        self._server.serve_forever()

    def stop(self) -> None:
        self._server.shutdown()
        self._server.server_close()
        if self._thread is not None:
            self._thread.join(timeout=5)
            self._thread = None


class SocketTransport:
    """Client side of the line protocol over TCP."""

    def __init__(self, host: str, port: int, timeout: float = 10.0):
        self._sock = socket.create_connection((host, port), timeout=timeout)
        self._file = self._sock.makefile("rwb")
        self._lock = threading.Lock()
        greeting = json.loads(self._file.readline(MAX_LINE).decode())
        if greeting.get("proto") != PROTOCOL_VERSION:
            self.close()
            raise ProtocolError(f"unexpected protocol greeting: {greeting!r}")

    def call(self, op: str, args: dict | None = None, token: str | None = None) -> dict:
        request = json.dumps(
            {"token": token, "op": op, "args": args or {}}, separators=(",", ":")
        )
        with self._lock:
            self._file.write((request + "\n").encode())
            self._file.flush()
            raw = self._file.readline(MAX_LINE)
        if not raw:
            raise ProtocolError("server closed the connection")
        reply = json.loads(raw.decode())
        if reply.get("status") != "ok":
            raise error_for_code(reply.get("error", "ProtocolError"), reply.get("message", ""))
        return reply["payload"]

    def close(self) -> None:
        try:
            self._file.close()
        finally:
            self._sock.close()


class ProtocolClient:
    """Session-holding convenience wrapper over either transport."""

    def __init__(self, transport):
        self.transport = transport
        self.token: str | None = None
        self.principal: str | None = None

    def login(self, principal: str, credential: str) -> dict:
        session = self.transport.call(
            "authenticate", {"principal": principal, "credential": credential}
        )
        self.token = session["token"]
        self.principal = session["principal"]
        return session

    def call(self, op: str, args: dict | None = None) -> dict:
        return self.transport.call(op, args, token=self.token)

    def close(self) -> None:
        self.transport.close()
