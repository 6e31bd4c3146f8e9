"""The promise manager: pipeline, action handlers, network endpoint.

Every envelope is handled as one serialized unit in a fixed order: expiry
sweep, promise requests (grant, or exchange when release-on-grant is
present), then the action. Actions run inside the catalog's mutation unit
with a savepoint taken first, so:

  - a handler's declared failure (ActionFailure) or a post-action promise
    violation rolls back the action's effects and any provisional
    releases, while grants made earlier in the same envelope stand;
  - any unexpected exception rolls back the whole envelope, promise table
    included, leaving the exact pre-call state.

Release options are honored literally: release-after-success releases a
promise iff the action result is succeeded; retain never releases.
"""

from __future__ import annotations

import json
import logging
import os
import select
import socket
import threading
from dataclasses import dataclass
from typing import Callable, Optional

from .catalog import CatalogError, ResourceCatalog, load_catalog_file
from .clock import WallClock
from .engine import (
    PROMISE_ACTIVE,
    PromiseEngine,
    Rejection,
    UnknownPromiseId,
    check_satisfiable,
)
from .predicates import PredicateInvalid, validate_predicate
from .protocol import (
    ACTION_FAILED,
    ACTION_PROMISE_EXPIRED,
    ACTION_REJECTED_BY_PROMISE_VIOLATION,
    ACTION_SUCCEEDED,
    ACTION_UNKNOWN_ACTION,
    ACTION_UNKNOWN_PROMISE_ID,
    OPTION_RELEASE_AFTER_SUCCESS,
    RESULT_ACCEPTED,
    RESULT_REJECTED,
    ActionMsg,
    ConnectionClosed,
    Envelope,
    MalformedMessage,
    PromisePart,
    PromiseRequestMsg,
    PromiseResponseMsg,
    decode,
    encode,
    recv_frame,
    send_frame,
)

log = logging.getLogger("promisekit")

CONFIG_ENV_VAR = "PROMISEKIT_CONFIG"

# names the service claims for itself
ACTION_NO_OP = "no-op"
ACTION_TABLE_DUMP = "promise-table-dump"

PIPELINE_STAGES = ("sweep", "requests", "action", "post-check", "commit")


class ActionFailure(Exception):
    """Raised by handlers to report a business-level action failure."""


class ServiceError(Exception):
    def __init__(self, code: str, message: str):
        super().__init__(f"{code}: {message}")
        self.code = code


Handler = Callable[[object, object, ResourceCatalog], object]


@dataclass
class ServiceConfig:
    host: str = "127.0.0.1"
    port: int = 0
    catalog_path: Optional[str] = None
    duration_cap: Optional[int] = None
    self_check: bool = False

    @staticmethod
    def from_file(path) -> "ServiceConfig":
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
        return ServiceConfig(
            host=doc.get("host", "127.0.0.1"),
            port=doc.get("port", 0),
            catalog_path=doc.get("catalog"),
            duration_cap=doc.get("duration-cap"),
            self_check=doc.get("self-check", False),
        )

    @staticmethod
    def resolve(path=None) -> "ServiceConfig":
        """Load from `path`, letting PROMISEKIT_CONFIG override it."""
        override = os.environ.get(CONFIG_ENV_VAR)
        chosen = override or path
        if chosen is None:
            raise ServiceError("config-error", f"no config path given and {CONFIG_ENV_VAR} unset")
        return ServiceConfig.from_file(chosen)


class PromiseManager:
    """Intermediary between clients and the resource catalog."""

    def __init__(self, catalog: ResourceCatalog, clock=None,
                 duration_cap: Optional[int] = None, self_check: bool = False):
        self.catalog = catalog
        self.engine = PromiseEngine(catalog)
        self.clock = clock if clock is not None else WallClock()
        self.duration_cap = duration_cap
        self.self_check = self_check
        self.self_check_failures: list[dict] = []
        self.counters = {"violations-rolled-back": 0, "internal-failures": 0}
        self.fault_hook: Optional[Callable[[str], None]] = None  # test instrumentation
        self._lock = threading.Lock()
        self._handlers: dict[str, Handler] = {}
        self.register_handler(ACTION_NO_OP, lambda payload, unit, catalog: {})
        self.register_handler(ACTION_TABLE_DUMP, self._dump_handler)

    def register_handler(self, action_name: str, handler: Handler) -> None:
        if action_name in self._handlers:
            raise ServiceError("duplicate-handler", f"{action_name!r} is already registered")
        self._handlers[action_name] = handler

    # --- pipeline ---

    def handle(self, envelope: Envelope, now: Optional[int] = None) -> Envelope:
        with self._lock:
            return self._handle_locked(envelope, now)

    def handle_bytes(self, data: bytes) -> bytes:
        try:
            envelope = decode(data)
        except MalformedMessage:
            return encode(Envelope(error="malformed-message"))
        return encode(self.handle(envelope))

    def _handle_locked(self, envelope: Envelope, now: Optional[int]) -> Envelope:
        requests = envelope.promise_part.requests if envelope.promise_part else ()
        if not requests and envelope.action is None:
            return Envelope(error="nothing-to-process")
        if now is None:
            now = self.clock.now()

        unit = self.catalog.begin_unit()
        table_before = self.engine.snapshot()
        try:
            self._stage("sweep")
            self.engine.expire_sweep(now, unit)

            self._stage("requests")
            responses = tuple(self._process_request(r, now, unit) for r in requests)

            action_result = None
            if envelope.action is not None:
                action_result = self._run_action(envelope, unit)

            self._stage("commit")
            self.catalog.commit_unit(unit)
        except Exception:
            log.exception("pipeline failure; rolling back the whole request")
            self.catalog.rollback_unit(unit)
            self.engine.restore(table_before)
            self.counters["internal-failures"] += 1
            return Envelope(error="internal-failure")

        if self.self_check:
            self._run_self_check(now)
        part = PromisePart(responses=responses) if responses else None
        return Envelope(promise_part=part, action=action_result)

    def _process_request(self, req: PromiseRequestMsg, now: int, unit) -> PromiseResponseMsg:
        rejected = PromiseResponseMsg(None, RESULT_REJECTED, 0, req.request_id)
        try:
            for p in req.predicates:
                validate_predicate(p, self.catalog.schema)
        except PredicateInvalid as exc:
            log.info("request %s rejected: %s", req.request_id, exc)
            self.engine.counters["rejections"] += 1
            return rejected

        duration = req.duration
        if self.duration_cap is not None:
            duration = min(duration, self.duration_cap)
        try:
            if req.release_on_grant:
                outcome = self.engine.exchange(req.predicates, duration,
                                               req.release_on_grant, now, unit)
            else:
                outcome = self.engine.grant(req.predicates, duration, now, unit)
        except UnknownPromiseId as exc:
            log.info("request %s rejected: %s", req.request_id, exc)
            return rejected
        if isinstance(outcome, Rejection):
            return rejected
        assert outcome is not None  # wire requests always carry predicates
        return PromiseResponseMsg(outcome.id, RESULT_ACCEPTED, duration, req.request_id)

    def _run_action(self, envelope: Envelope, unit) -> ActionMsg:
        self._stage("action")
        action = envelope.action
        name = action.action_name
        handler = self._handlers.get(name)
        if handler is None:
            return ActionMsg(name, {"reason": "no handler registered"}, ACTION_UNKNOWN_ACTION)

        env = envelope.environment
        env_ids = env.promise_ids if env else ()
        for pid in env_ids:
            rec = self.engine.record(pid)
            if rec is None:
                return ActionMsg(name, {"promise-identifier": pid}, ACTION_UNKNOWN_PROMISE_ID)
            if rec.status != PROMISE_ACTIVE:
                return ActionMsg(name, {"promise-identifier": pid}, ACTION_PROMISE_EXPIRED)

        mark = self.catalog.savepoint(unit)
        table_mark = self.engine.snapshot()
        release_ids = [pid for pid, opt in zip(env_ids, env.release_options)
                       if opt == OPTION_RELEASE_AFTER_SUCCESS] if env else []
        try:
            payload = handler(action.payload, unit, self.catalog)
            if release_ids:
                self.engine.release(release_ids, unit)
            self._stage("post-check")
            view = self.catalog.snapshot_availability(unit)
            if self.engine.post_action_check(release_ids, view):
                return ActionMsg(name, payload, ACTION_SUCCEEDED)
            self.catalog.rollback_to(unit, mark)
            self.engine.restore(table_mark)
            self.counters["violations-rolled-back"] += 1
            return ActionMsg(name, {"reason": "outcome would violate an active promise"},
                             ACTION_REJECTED_BY_PROMISE_VIOLATION)
        except ActionFailure as exc:
            self.catalog.rollback_to(unit, mark)
            self.engine.restore(table_mark)
            return ActionMsg(name, {"reason": str(exc)}, ACTION_FAILED)
        except CatalogError as exc:
            self.catalog.rollback_to(unit, mark)
            self.engine.restore(table_mark)
            return ActionMsg(name, {"reason": exc.code}, ACTION_FAILED)

    def _stage(self, stage: str) -> None:
        if self.fault_hook is not None:
            self.fault_hook(stage)

    # --- diagnostics ---

    def _dump_handler(self, payload, unit, catalog) -> dict:
        doc = self.engine.dump()
        doc["service-counters"] = dict(self.counters)
        doc["catalog-digest"] = catalog.state_digest()
        return doc

    def state_digest(self) -> str:
        """Hash of committed catalog state plus promise table records."""
        from .catalog import digest_document

        table = self.engine.dump()["promises"]
        return digest_document({"catalog": self.catalog.dump_state(), "promises": table})

    def _run_self_check(self, now: int) -> None:
        problems = []
        view = self.catalog.snapshot_availability()
        preds = self.engine.active_predicates()
        if not check_satisfiable(preds, view):
            problems.append("active set is not satisfiable")
        overcommit = self.engine.pool_overcommit(view)
        if overcommit:
            problems.append(f"pool overcommit: {overcommit}")
        conflicts = self.engine.named_conflicts()
        if conflicts:
            problems.append(f"double-promised instances: {[str(c) for c in conflicts]}")
        negative = {rt: n for rt, n in view.pools.items() if n < 0}
        if negative:
            problems.append(f"negative pools: {negative}")
        if problems:
            self.self_check_failures.append({"at": now, "problems": problems})
            log.error("self-check failed: %s", problems)


# --- network endpoint ---

class Server:
    """Framed TCP endpoint in front of a PromiseManager."""

    def __init__(self, manager: PromiseManager, host: str = "127.0.0.1", port: int = 0):
        self.manager = manager
        try:
            self._listener = socket.create_server((host, port))
        except OSError as exc:
            raise ServiceError("bind-failure", f"cannot bind {host}:{port}: {exc}") from exc
        self._listener.settimeout(0.2)
        self.address = self._listener.getsockname()
        self._stop = threading.Event()
        self._threads: list[threading.Thread] = []
        self._accept_thread = threading.Thread(target=self._accept_loop,
                                               name="promisekit-accept", daemon=True)
        self._accept_thread.start()

    def _accept_loop(self) -> None:
        while not self._stop.is_set():
            try:
                conn, _ = self._listener.accept()
            except socket.timeout:
                continue
            except OSError:
                break
            t = threading.Thread(target=self._serve_connection, args=(conn,), daemon=True)
            t.start()
            self._threads = [x for x in self._threads if x.is_alive()]
            self._threads.append(t)

    def _serve_connection(self, conn: socket.socket) -> None:
        seen_request_ids: set[str] = set()
        with conn:
            while not self._stop.is_set():
                # poll for the frame start so shutdown stays responsive, then
                # read the whole frame blocking: a slow sender must not be
                # desynced by a mid-frame timeout
                try:
                    readable, _, _ = select.select([conn], [], [], 0.2)
                except (OSError, ValueError):
                    return
                if not readable:
                    continue
                conn.settimeout(30)
                try:
                    body = recv_frame(conn)
                except ConnectionClosed:
                    return
                except (MalformedMessage, socket.timeout):
                    # broken framing desyncs the stream: report and drop
                    try:
                        send_frame(conn, encode(Envelope(error="malformed-message")))
                    except OSError:
                        pass
                    return
                except OSError:
                    return
                reply = self._dispatch(body, seen_request_ids)
                try:
                    send_frame(conn, reply)
                except OSError:
                    return

    def _dispatch(self, body: bytes, seen_request_ids: set[str]) -> bytes:
        try:
            envelope = decode(body)
        except MalformedMessage:
            return encode(Envelope(error="malformed-message"))
        rids = [r.request_id for r in envelope.promise_part.requests] \
            if envelope.promise_part else []
        if any(rid in seen_request_ids for rid in rids):
            return encode(Envelope(error="duplicate-request-identifier"))
        seen_request_ids.update(rids)
        return encode(self.manager.handle(envelope))

    def stop(self) -> None:
        """Graceful: in-flight requests finish before threads exit."""
        self._stop.set()
        try:
            self._listener.close()
        except OSError:
            pass
        self._accept_thread.join(timeout=5)
        for t in self._threads:
            t.join(timeout=5)


def serve(config: ServiceConfig, manager: Optional[PromiseManager] = None) -> Server:
    """Start a server from config; builds the manager when not supplied."""
    if manager is None:
        if config.catalog_path is None:
            raise ServiceError("config-error", "config names no catalog document")
        catalog = load_catalog_file(config.catalog_path)
        manager = PromiseManager(catalog, clock=WallClock(),
                                 duration_cap=config.duration_cap,
                                 self_check=config.self_check)
    return Server(manager, config.host, config.port)
