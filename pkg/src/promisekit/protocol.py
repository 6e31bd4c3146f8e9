"""Wire codec for promise envelopes.

Bodies are JSON documents; frames on the byte stream are
magic + 4-byte big-endian length + body. docs/wire-protocol.md is the
normative field list. decode() raises MalformedMessage and nothing else,
whatever the input bytes.
"""

from __future__ import annotations

import json
import socket
from dataclasses import dataclass, field
from typing import Optional

from .predicates import Predicate, predicate_from_wire, predicate_to_wire

RESULT_ACCEPTED = "accepted"
RESULT_REJECTED = "rejected"

OPTION_RETAIN = "retain"
OPTION_RELEASE_AFTER_SUCCESS = "release-after-success"
RELEASE_OPTIONS = (OPTION_RETAIN, OPTION_RELEASE_AFTER_SUCCESS)

ACTION_SUCCEEDED = "succeeded"
ACTION_FAILED = "failed"
ACTION_REJECTED_BY_PROMISE_VIOLATION = "rejected-by-promise-violation"
ACTION_PROMISE_EXPIRED = "promise-expired"
ACTION_UNKNOWN_ACTION = "unknown-action"
ACTION_UNKNOWN_PROMISE_ID = "unknown-promise-id"
ACTION_STATUSES = (
    ACTION_SUCCEEDED,
    ACTION_FAILED,
    ACTION_REJECTED_BY_PROMISE_VIOLATION,
    ACTION_PROMISE_EXPIRED,
    ACTION_UNKNOWN_ACTION,
    ACTION_UNKNOWN_PROMISE_ID,
)

FRAME_MAGIC = b"PRM1"
MAX_FRAME_BODY = 1 << 20


class MalformedMessage(Exception):
    """Input bytes or document do not form a valid envelope."""


class InvariantViolation(Exception):
    """Envelope under encode() breaks a structural invariant."""


@dataclass(frozen=True)
class PromiseRequestMsg:
    request_id: str
    predicates: tuple[Predicate, ...]
    resources: tuple[tuple[str, Optional[str]], ...]
    duration: int
    release_on_grant: tuple[str, ...] = ()


@dataclass(frozen=True)
class PromiseResponseMsg:
    promise_id: Optional[str]
    result: str
    granted_duration: int
    correlation: str


@dataclass(frozen=True)
class EnvironmentMsg:
    promise_ids: tuple[str, ...]
    release_options: tuple[str, ...]


@dataclass(frozen=True)
class ActionMsg:
    action_name: str
    payload: object = None
    status: Optional[str] = None  # set on responses only


@dataclass(frozen=True)
class PromisePart:
    requests: tuple[PromiseRequestMsg, ...] = ()
    responses: tuple[PromiseResponseMsg, ...] = ()


@dataclass(frozen=True)
class Envelope:
    promise_part: Optional[PromisePart] = None
    environment: Optional[EnvironmentMsg] = None
    action: Optional[ActionMsg] = None
    error: Optional[str] = None


def derive_resources(predicates) -> tuple[tuple[str, Optional[str]], ...]:
    """Resource references covering the given predicates, deduplicated."""
    out: list[tuple[str, Optional[str]]] = []
    for p in predicates:
        wire = predicate_to_wire(p)
        ref = (wire["resource-type"], wire.get("key"))
        if ref not in out:
            out.append(ref)
    return tuple(out)


def make_request(request_id: str, predicates, duration: int,
                 release_on_grant=(), resources=None) -> PromiseRequestMsg:
    preds = tuple(predicates)
    if resources is None:
        resources = derive_resources(preds)
    return PromiseRequestMsg(request_id, preds, tuple(resources), duration,
                             tuple(release_on_grant))


# --- structural validation, shared by encode and decode ---

def _check_envelope(e: Envelope) -> None:
    if e.promise_part is not None and not (e.promise_part.requests or e.promise_part.responses):
        raise ValueError("an empty promise part must be omitted, not present")
    if e.promise_part is None and e.action is None and e.error is None:
        raise ValueError("envelope carries neither a promise part, an action, nor an error")
    if e.error is not None and (not isinstance(e.error, str) or not e.error):
        raise ValueError("error must be a non-empty string")
    if e.environment is not None:
        if e.action is None:
            raise ValueError("an environment is only meaningful with an action")
        env = e.environment
        if len(env.promise_ids) != len(env.release_options):
            raise ValueError("environment lists must be the same length")
        for pid in env.promise_ids:
            if not isinstance(pid, str) or not pid:
                raise ValueError("environment promise identifiers must be non-empty strings")
        for opt in env.release_options:
            if opt not in RELEASE_OPTIONS:
                raise ValueError(f"unknown release option {opt!r}")
    if e.action is not None:
        if not isinstance(e.action.action_name, str) or not e.action.action_name:
            raise ValueError("action needs a non-empty name")
        if e.action.status is not None and e.action.status not in ACTION_STATUSES:
            raise ValueError(f"unknown action status {e.action.status!r}")
    if e.promise_part is None:
        return
    seen_rids: set[str] = set()
    for req in e.promise_part.requests:
        if not isinstance(req.request_id, str) or not req.request_id:
            raise ValueError("request needs a non-empty request-identifier")
        if req.request_id in seen_rids:
            raise ValueError(f"duplicate request-identifier {req.request_id!r}")
        seen_rids.add(req.request_id)
        if not req.predicates:
            raise ValueError("a promise request needs at least one predicate")
        if not isinstance(req.duration, int) or isinstance(req.duration, bool) or req.duration < 1:
            raise ValueError("promise-duration must be a positive integer")
        if len(set(req.release_on_grant)) != len(req.release_on_grant):
            raise ValueError("release-on-grant repeats a promise identifier")
        for pid in req.release_on_grant:
            if not isinstance(pid, str) or not pid:
                raise ValueError("release-on-grant identifiers must be non-empty strings")
        _check_resources_cover(req)
    for resp in e.promise_part.responses:
        if resp.result not in (RESULT_ACCEPTED, RESULT_REJECTED):
            raise ValueError(f"unknown promise-result {resp.result!r}")
        if (resp.promise_id is not None) != (resp.result == RESULT_ACCEPTED):
            raise ValueError("promise-identifier must be present exactly when accepted")
        if not isinstance(resp.granted_duration, int) or isinstance(resp.granted_duration, bool) \
                or resp.granted_duration < 0:
            raise ValueError("promise-duration must be a non-negative integer")
        if not isinstance(resp.correlation, str) or not resp.correlation:
            raise ValueError("response needs a non-empty promise-correlation")


def _check_resources_cover(req: PromiseRequestMsg) -> None:
    types = {rt for rt, _ in req.resources}
    named = set(req.resources)
    for p in req.predicates:
        wire = predicate_to_wire(p)
        rt, key = wire["resource-type"], wire.get("key")
        if key is not None:
            if (rt, key) not in named:
                raise ValueError(f"resources list does not cover instance {rt}/{key}")
        elif rt not in types:
            raise ValueError(f"resources list does not cover resource type {rt!r}")


# --- JSON mapping ---

def _envelope_to_doc(e: Envelope) -> dict:
    doc: dict = {}
    if e.promise_part is not None and (e.promise_part.requests or e.promise_part.responses):
        part: dict = {}
        if e.promise_part.requests:
            part["promise-request"] = [_request_to_doc(r) for r in e.promise_part.requests]
        if e.promise_part.responses:
            part["promise-response"] = [_response_to_doc(r) for r in e.promise_part.responses]
        doc["promise"] = part
    if e.environment is not None:
        doc["environment"] = {
            "promise-identifiers": list(e.environment.promise_ids),
            "release-options": list(e.environment.release_options),
        }
    if e.action is not None:
        action: dict = {"action-name": e.action.action_name}
        if e.action.payload is not None:
            action["payload"] = e.action.payload
        if e.action.status is not None:
            action["status"] = e.action.status
        doc["action"] = action
    if e.error is not None:
        doc["error"] = e.error
    return doc


def _request_to_doc(r: PromiseRequestMsg) -> dict:
    doc = {
        "request-identifier": r.request_id,
        "predicates": [predicate_to_wire(p) for p in r.predicates],
        "resources": [_resource_to_doc(ref) for ref in r.resources],
        "promise-duration": r.duration,
    }
    if r.release_on_grant:
        doc["release-on-grant"] = list(r.release_on_grant)
    return doc


def _resource_to_doc(ref: tuple[str, Optional[str]]) -> dict:
    rt, key = ref
    return {"resource-type": rt} if key is None else {"resource-type": rt, "key": key}


def _response_to_doc(r: PromiseResponseMsg) -> dict:
    doc = {
        "promise-result": r.result,
        "promise-duration": r.granted_duration,
        "promise-correlation": r.correlation,
    }
    if r.promise_id is not None:
        doc["promise-identifier"] = r.promise_id
    return doc


def encode(envelope: Envelope) -> bytes:
    """Serialize a structurally valid envelope to canonical JSON bytes."""
    try:
        _check_envelope(envelope)
    except ValueError as exc:
        raise InvariantViolation(str(exc)) from exc
    doc = _envelope_to_doc(envelope)
    try:
        return json.dumps(doc, sort_keys=True, separators=(",", ":")).encode("utf-8")
    except (TypeError, ValueError) as exc:
        raise InvariantViolation(f"payload is not JSON-serializable: {exc}") from exc


def decode(data: bytes) -> Envelope:
    """Parse envelope bytes; any problem raises MalformedMessage."""
    try:
        doc = json.loads(data.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError, AttributeError) as exc:
        raise MalformedMessage(f"not a JSON document: {exc}") from exc
    try:
        envelope = _envelope_from_doc(doc)
        _check_envelope(envelope)
    except (ValueError, TypeError, KeyError) as exc:
        raise MalformedMessage(str(exc)) from exc
    return envelope


def _envelope_from_doc(doc) -> Envelope:
    if not isinstance(doc, dict):
        raise ValueError("envelope must be an object")
    unknown = set(doc) - {"promise", "environment", "action", "error"}
    if unknown:
        raise ValueError(f"unknown envelope fields {sorted(unknown)}")

    part = None
    if "promise" in doc:
        raw = doc["promise"]
        if not isinstance(raw, dict):
            raise ValueError("promise part must be an object")
        bad = set(raw) - {"promise-request", "promise-response"}
        if bad:
            raise ValueError(f"unknown promise part fields {sorted(bad)}")
        requests = tuple(_request_from_doc(r) for r in _as_list(raw.get("promise-request", [])))
        responses = tuple(_response_from_doc(r) for r in _as_list(raw.get("promise-response", [])))
        part = PromisePart(requests, responses)

    environment = None
    if "environment" in doc:
        raw = doc["environment"]
        if not isinstance(raw, dict):
            raise ValueError("environment must be an object")
        bad = set(raw) - {"promise-identifiers", "release-options"}
        if bad:
            raise ValueError(f"unknown environment fields {sorted(bad)}")
        ids = _as_list(raw.get("promise-identifiers", []))
        opts = _as_list(raw.get("release-options", []))
        environment = EnvironmentMsg(tuple(ids), tuple(opts))

    action = None
    if "action" in doc:
        raw = doc["action"]
        if not isinstance(raw, dict):
            raise ValueError("action must be an object")
        bad = set(raw) - {"action-name", "payload", "status"}
        if bad:
            raise ValueError(f"unknown action fields {sorted(bad)}")
        action = ActionMsg(raw.get("action-name"), raw.get("payload"), raw.get("status"))

    return Envelope(part, environment, action, doc.get("error"))


def _request_from_doc(raw) -> PromiseRequestMsg:
    if not isinstance(raw, dict):
        raise ValueError("promise-request must be an object")
    bad = set(raw) - {"request-identifier", "predicates", "resources",
                      "promise-duration", "release-on-grant"}
    if bad:
        raise ValueError(f"unknown promise-request fields {sorted(bad)}")
    predicates = tuple(predicate_from_wire(p) for p in _as_list(raw.get("predicates", [])))
    resources = tuple(_resource_from_doc(r) for r in _as_list(raw.get("resources", [])))
    return PromiseRequestMsg(
        request_id=raw.get("request-identifier"),
        predicates=predicates,
        resources=resources,
        duration=raw.get("promise-duration"),
        release_on_grant=tuple(_as_list(raw.get("release-on-grant", []))),
    )


def _resource_from_doc(raw) -> tuple[str, Optional[str]]:
    if not isinstance(raw, dict):
        raise ValueError("resource reference must be an object")
    rt = raw.get("resource-type")
    if not isinstance(rt, str) or not rt:
        raise ValueError("resource reference needs a non-empty resource-type")
    key = raw.get("key")
    if key is not None and (not isinstance(key, str) or not key):
        raise ValueError("resource key must be a non-empty string")
    return (rt, key)


def _response_from_doc(raw) -> PromiseResponseMsg:
    if not isinstance(raw, dict):
        raise ValueError("promise-response must be an object")
    bad = set(raw) - {"promise-identifier", "promise-result",
                      "promise-duration", "promise-correlation"}
    if bad:
        raise ValueError(f"unknown promise-response fields {sorted(bad)}")
    return PromiseResponseMsg(
        promise_id=raw.get("promise-identifier"),
        result=raw.get("promise-result"),
        granted_duration=raw.get("promise-duration"),
        correlation=raw.get("promise-correlation"),
    )


def _as_list(value) -> list:
    if not isinstance(value, list):
        raise ValueError("expected a list")
    return value


# --- framing ---

def frame(body: bytes) -> bytes:
    if len(body) > MAX_FRAME_BODY:
        raise InvariantViolation(f"frame body of {len(body)} bytes exceeds {MAX_FRAME_BODY}")
    return FRAME_MAGIC + len(body).to_bytes(4, "big") + body


def send_frame(sock: socket.socket, body: bytes) -> None:
    sock.sendall(frame(body))


class ConnectionClosed(Exception):
    pass


def recv_frame(sock: socket.socket) -> bytes:
    """Read one frame; raises ConnectionClosed on clean EOF between frames
    and MalformedMessage on a broken header (the stream is then desynced)."""
    header = _recv_exact(sock, 8, allow_eof=True)
    magic, length = header[:4], int.from_bytes(header[4:], "big")
    if magic != FRAME_MAGIC:
        raise MalformedMessage(f"bad frame magic {magic!r}")
    if length > MAX_FRAME_BODY:
        raise MalformedMessage(f"frame length {length} exceeds {MAX_FRAME_BODY}")
    return _recv_exact(sock, length, allow_eof=False)


def _recv_exact(sock: socket.socket, n: int, allow_eof: bool) -> bytes:
    chunks = []
    got = 0
    while got < n:
        chunk = sock.recv(n - got)
        if not chunk:
            if allow_eof and got == 0:
                raise ConnectionClosed()
            raise MalformedMessage("stream ended mid-frame")
        chunks.append(chunk)
        got += len(chunk)
    return b"".join(chunks)
