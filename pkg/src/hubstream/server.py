"""The ingestion middleware: registration orchestration plus TCP shell.

MiddlewareCore is the engine: it runs the whole registration pipeline
in-process (parse, fingerprint, plan lookup/compile, virtual sensor
definition, connection request, instance lifecycle, port assignment),
ingests decoded frames, and answers status queries.  Benchmarks and most
tests drive the core directly with no sockets involved.

MiddlewareServer is the network shell around a core: a control listener
that speaks the length-prefixed message protocol, and one data listener
per active session that checks the session token and feeds frames to the
core.  Registration steps run in this order:

    parse -> fingerprint -> plan lookup/compile -> generate definition
          -> reserve port -> connection request -> instantiate
          -> initialize -> start -> open data listener -> reply

and the elapsed wall time is recorded on the session as
configuration_time_ms.  A failure at any step rolls back everything the
attempt created: no session entry, no live definition, no reserved port,
no running instance.

Each accepted record is appended to a per-hub record log at
``<store>/data/<hub_id>.log``: an 8-byte big-endian arrival timestamp
(ms), then the frame exactly as received (length prefix included), so a
log replays through the same decode path that ingested it.
"""

from __future__ import annotations

import csv
import io
import os
import secrets
import socket
import threading
import time
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Callable, Optional

from . import wire
from .errors import (
    BadToken,
    FrameTooShort,
    HubStreamError,
    MalformedDocument,
    NameCollision,
    NoFreePort,
    SequenceRegression,
    TrailingBytes,
    TypeTagMismatch,
    UnknownHub,
)
from .sdd import SchemaFingerprint, ValueType, fingerprint, parse_musdd
from .vsd import VsdCatalog, eval_window_query, make_wcr
from .wrapper import (
    LifecycleState,
    PlanRepository,
    Strategy,
    StreamRecord,
    WrapperInstance,
    compile_plan,
    instantiate,
)

__all__ = [
    "AssignConfig",
    "SessionState",
    "RegistrationSession",
    "PortAllocator",
    "RecordLog",
    "MiddlewareCore",
    "MiddlewareServer",
    "STATUS_LIST",
    "STATUS_LATEST",
    "STATUS_WINDOW",
    "DEFAULT_CONTROL_PORT",
    "DEFAULT_DATA_PORTS",
]

DEFAULT_CONTROL_PORT = 7001
DEFAULT_DATA_PORTS = (7100, 7199)

STATUS_LIST = 0
STATUS_LATEST = 1
STATUS_WINDOW = 2

# Per-session in-memory record buffer feeding window queries.
WINDOW_BUFFER_LEN = 1024


class PortAllocator:
    """Hands out data ports from an inclusive range; released ports are
    reusable.  Thread-safe."""

    def __init__(self, lo: int, hi: int):
        if lo > hi:
            raise ValueError(f"empty port range {lo}-{hi}")
        self._lock = threading.Lock()
        self._free = list(range(hi, lo - 1, -1))  # pop() yields lo first
        self._taken: set[int] = set()

    def reserve(self) -> int:
        with self._lock:
            if not self._free:
                raise NoFreePort("data port range exhausted")
            port = self._free.pop()
            self._taken.add(port)
            return port

    def release(self, port: int) -> None:
        with self._lock:
            if port in self._taken:
                self._taken.remove(port)
                self._free.append(port)

    def active_count(self) -> int:
        with self._lock:
            return len(self._taken)


class RecordLog:
    """Append-only frame log for one hub, replayable through decode."""

    ARRIVAL = wire.U64

    def __init__(self, path: Path):
        self._path = path
        self._path.parent.mkdir(parents=True, exist_ok=True)
        self._fh = open(path, "ab")

    def append(self, arrival_ms: int, frame_body: bytes) -> None:
        self._fh.write(
            self.ARRIVAL.pack(arrival_ms) + wire.U32.pack(len(frame_body)) + frame_body
        )
        self._fh.flush()

    def close(self) -> None:
        self._fh.close()

    @staticmethod
    def replay(path: Path):
        """Yield (arrival_ms, frame_body) entries from a log file."""
        data = path.read_bytes()
        pos = 0
        while pos < len(data):
            (arrival,) = wire.U64.unpack_from(data, pos)
            (length,) = wire.U32.unpack_from(data, pos + 8)
            start = pos + 12
            body = data[start : start + length]
            if len(body) != length:
                raise FrameTooShort("record log truncated")
            yield arrival, body
            pos = start + length


class SessionState(Enum):
    CONFIGURING = "configuring"
    ACTIVE = "active"
    TORN_DOWN = "torn_down"


@dataclass
class AssignConfig:
    """What the hub needs to start streaming: where, as whom, in what
    field order."""

    data_port: int
    wrapper_name: str
    field_layout: tuple[tuple[str, ValueType], ...]
    session_token: bytes


@dataclass
class RegistrationSession:
    hub_id: str
    fingerprint: SchemaFingerprint
    strategy: Strategy
    data_port: int
    instance: WrapperInstance
    token: bytes
    created_at: float
    state: SessionState = SessionState.CONFIGURING
    cache_hit: bool = False
    configuration_time_ms: float = 0.0
    frames_received: int = 0
    frames_malformed: int = 0
    log: Optional[RecordLog] = None
    window_buffer: list = field(default_factory=list)

    @property
    def records_decoded(self) -> int:
        return self.instance.records_decoded

    @property
    def duplicates_dropped(self) -> int:
        return self.instance.duplicates_dropped


def _dispose_quietly(instance: WrapperInstance) -> None:
    """Wind an instance down along legal lifecycle edges only; an instance
    that never reached RUNNING is simply dropped."""
    if instance.state is LifecycleState.RUNNING:
        instance.stop()
    if instance.state is LifecycleState.STOPPED:
        instance.dispose()


class MiddlewareCore:
    """The in-process middleware engine (no sockets)."""

    def __init__(
        self,
        store_dir: str | os.PathLike,
        strategy: Strategy = Strategy.DGCW,
        port_range: tuple[int, int] = DEFAULT_DATA_PORTS,
    ):
        self.store_dir = Path(store_dir)
        self.strategy = strategy
        self.repository = PlanRepository(self.store_dir)
        self.catalog = VsdCatalog(self.store_dir)
        self.ports = PortAllocator(*port_range)
        self.sessions: dict[str, RegistrationSession] = {}
        self._lock = threading.Lock()
        # shell hook: called with the session before its instance stops,
        # so a network wrapper can close and join the data listener first
        self.on_teardown: Optional[Callable[[RegistrationSession], None]] = None

    # --- registration ------------------------------------------------------

    def handle_register(self, raw: bytes, reregister: bool = False) -> AssignConfig:
        """Run the registration pipeline; returns the stream assignment.

        Raises:
            MalformedDocument/UnknownVersion/SchemaViolation: bad document.
            NameCollision: hub already active and reregister not set.
            NoFreePort: port range exhausted.
        """
        t0 = time.perf_counter()
        doc = parse_musdd(raw)

        with self._lock:
            existing = self.sessions.get(doc.hub_id)
            if existing is not None and existing.state is SessionState.ACTIVE:
                if not reregister:
                    raise NameCollision(f"hub {doc.hub_id!r} already registered")
                self._teardown_locked(existing)

        fp = fingerprint(doc)
        plan, cache_hit = self.repository.lookup_or_add(
            fp, self.strategy, lambda: compile_plan(doc, self.strategy)
        )

        vsd = self.catalog.generate_vsd(doc, plan)
        port = None
        instance = None
        try:
            port = self.ports.reserve()
            wcr = make_wcr(vsd, port)
            instance = instantiate(wcr, self.repository)
            instance.initialize()
            instance.start()
            session = RegistrationSession(
                hub_id=doc.hub_id,
                fingerprint=fp,
                strategy=self.strategy,
                data_port=port,
                instance=instance,
                token=secrets.token_bytes(wire.TOKEN_LEN),
                created_at=time.time(),
                cache_hit=cache_hit,
            )
            session.log = RecordLog(self.store_dir / "data" / f"{doc.hub_id}.log")
            session.state = SessionState.ACTIVE
            session.configuration_time_ms = (time.perf_counter() - t0) * 1000.0
            with self._lock:
                self.sessions[doc.hub_id] = session
        except BaseException:
            self.catalog.teardown(doc.hub_id)
            if port is not None:
                self.ports.release(port)
            if instance is not None:
                _dispose_quietly(instance)
            raise
        return AssignConfig(
            data_port=port,
            wrapper_name=vsd.wrapper_name,
            field_layout=tuple((f.name, f.value_type) for f in plan.field_layout),
            session_token=session.token,
        )

    def handle_reregister(self, raw: bytes) -> AssignConfig:
        """Re-registration: tear down any active session for the hub, then
        register afresh (plan reuse applies).  Unknown hubs register
        normally."""
        return self.handle_register(raw, reregister=True)

    def _teardown_locked(self, session: RegistrationSession) -> None:
        if session.state is SessionState.TORN_DOWN:
            return
        if self.on_teardown is not None:
            self.on_teardown(session)
        _dispose_quietly(session.instance)
        if session.log is not None:
            session.log.close()
        self.ports.release(session.data_port)
        self.catalog.teardown(session.hub_id)
        session.state = SessionState.TORN_DOWN
        self.sessions.pop(session.hub_id, None)

    def teardown_session(self, hub_id: str) -> None:
        with self._lock:
            session = self.sessions.get(hub_id)
            if session is None:
                raise UnknownHub(f"no session for hub {hub_id!r}")
            self._teardown_locked(session)

    def shutdown(self) -> None:
        with self._lock:
            for session in list(self.sessions.values()):
                self._teardown_locked(session)

    def get_session(self, hub_id: str) -> RegistrationSession:
        with self._lock:
            session = self.sessions.get(hub_id)
        if session is None:
            raise UnknownHub(f"no session for hub {hub_id!r}")
        return session

    def get_session_by_token(self, token: bytes) -> RegistrationSession:
        with self._lock:
            for session in self.sessions.values():
                if session.token == token:
                    return session
        raise UnknownHub("no session for that token")

    # --- ingest --------------------------------------------------------------

    def ingest_frame(
        self, session: RegistrationSession, frame_body: bytes, arrival_ms: int | None = None
    ) -> Optional[StreamRecord]:
        """Feed one received frame body through the session's wrapper.

        Malformed frames and sequence regressions are counted and skipped;
        duplicates are dropped by the wrapper.  Returns the stored record,
        or None when nothing was stored.
        """
        session.frames_received += 1
        try:
            record = session.instance.on_stream_element(frame_body)
        except (FrameTooShort, TypeTagMismatch, TrailingBytes, SequenceRegression):
            session.frames_malformed += 1
            return None
        if record is None:
            return None
        if arrival_ms is None:
            arrival_ms = int(time.time() * 1000)
        session.log.append(arrival_ms, frame_body)
        session.window_buffer.append(record)
        if len(session.window_buffer) > WINDOW_BUFFER_LEN:
            del session.window_buffer[: -WINDOW_BUFFER_LEN]
        return record

    # --- status ----------------------------------------------------------------

    def status_query(self, kind: int, hub_id: str = "") -> str:
        """Answer a status query as CSV text."""
        if kind == STATUS_LIST:
            out = io.StringIO()
            w = csv.writer(out)
            w.writerow(["hub_id", "state", "records_decoded", "fingerprint"])
            with self._lock:
                rows = sorted(self.sessions.values(), key=lambda s: s.hub_id)
            for s in rows:
                w.writerow(
                    [s.hub_id, s.state.value, s.records_decoded, s.fingerprint.digest]
                )
            return out.getvalue()
        session = self.get_session(hub_id)
        if kind == STATUS_LATEST:
            out = io.StringIO()
            w = csv.writer(out)
            names = [f.name for f in session.instance.plan.field_layout]
            w.writerow(["hub_id", "sequence", "timestamp_ms", *names])
            if session.window_buffer:
                newest = max(session.window_buffer, key=lambda r: r.sequence)
                w.writerow(
                    [
                        session.hub_id,
                        newest.sequence,
                        newest.timestamp_ms,
                        *["" if v is None else v for _, v in newest.values],
                    ]
                )
            return out.getvalue()
        if kind == STATUS_WINDOW:
            vsd = self.catalog.live(hub_id)
            if vsd is None:
                raise UnknownHub(f"no live definition for hub {hub_id!r}")
            result = eval_window_query(vsd.query, session.window_buffer)
            out = io.StringIO()
            w = csv.writer(out)
            w.writerow(["field", "op", "value"])
            for (name, value), (_, agg) in zip(result, vsd.query.aggregates):
                w.writerow([name, agg.value, "" if value is None else value])
            return out.getvalue()
        raise MalformedDocument(f"unknown status kind {kind}")


# --- TCP shell ---------------------------------------------------------------

class _DataListener:
    """One session's data socket: accepts connections on the assigned port,
    verifies the token, and pumps frames into the core.  Connections are
    served one at a time (a hub that reconnects is served again)."""

    def __init__(self, core: MiddlewareCore, session: RegistrationSession, host: str):
        self.core = core
        self.session = session
        self.sock = socket.create_server((host, session.data_port))
        self.sock.settimeout(0.25)
        self._closing = threading.Event()
        self._conn_lock = threading.Lock()
        self._conn: Optional[socket.socket] = None
        self.bad_tokens = 0
        self.thread = threading.Thread(
            target=self._run, name=f"data-{session.hub_id}", daemon=True
        )

    def start(self) -> None:
        self.thread.start()

    def _run(self) -> None:
        while not self._closing.is_set():
            try:
                conn, _ = self.sock.accept()
            except socket.timeout:
                continue
            except OSError:
                break
            with self._conn_lock:
                self._conn = conn
            with conn:
                try:
                    self._serve(conn)
                except (wire.ConnectionClosed, OSError):
                    continue
                except BadToken:
                    self.bad_tokens += 1
                    continue
                finally:
                    with self._conn_lock:
                        self._conn = None

    def _serve(self, conn: socket.socket) -> None:
        conn.settimeout(None)
        token = wire.recv_exact(conn, wire.TOKEN_LEN)
        if token != self.session.token:
            raise BadToken("data connection presented a wrong token")
        while not self._closing.is_set():
            body = wire.read_frame(conn)
            self.core.ingest_frame(self.session, body)

    def close(self) -> None:
        self._closing.set()
        try:
            self.sock.close()
        except OSError:
            pass
        with self._conn_lock:
            conn = self._conn
        if conn is not None:
            # wake a thread blocked mid-recv on a live hub connection
            try:
                conn.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass
        if self.thread.is_alive() and threading.current_thread() is not self.thread:
            self.thread.join(timeout=5)


class MiddlewareServer:
    """Control and data listeners around a MiddlewareCore."""

    def __init__(
        self,
        store_dir: str | os.PathLike,
        strategy: Strategy = Strategy.DGCW,
        host: str = "127.0.0.1",
        control_port: int = DEFAULT_CONTROL_PORT,
        port_range: tuple[int, int] = DEFAULT_DATA_PORTS,
    ):
        self.core = MiddlewareCore(store_dir, strategy, port_range)
        self.core.on_teardown = self._close_listener
        self.host = host
        self._listeners: dict[str, _DataListener] = {}
        self._listener_lock = threading.Lock()
        self._closing = threading.Event()
        self._control = socket.create_server((host, control_port))
        self._control.settimeout(0.25)
        self.control_port = self._control.getsockname()[1]
        self._accept_thread = threading.Thread(
            target=self._accept_loop, name="control-accept", daemon=True
        )

    def start(self) -> "MiddlewareServer":
        self._accept_thread.start()
        return self

    def _accept_loop(self) -> None:
        while not self._closing.is_set():
            try:
                conn, _ = self._control.accept()
            except socket.timeout:
                continue
            except OSError:
                break
            threading.Thread(
                target=self._serve_control, args=(conn,), daemon=True
            ).start()

    def _serve_control(self, conn: socket.socket) -> None:
        with conn:
            while not self._closing.is_set():
                try:
                    opcode, payload = wire.read_message(conn)
                except (wire.ConnectionClosed, OSError):
                    return
                except MalformedDocument as exc:
                    self._nack(conn, wire.NACK_MALFORMED, str(exc))
                    return
                try:
                    if opcode == wire.OP_REGISTER:
                        self._handle_register(conn, payload)
                    elif opcode == wire.OP_STATUS:
                        kind, hub_id = wire.unpack_status(payload)
                        text = self.core.status_query(kind, hub_id)
                        wire.write_message(
                            conn, wire.OP_STATUS_OK, text.encode("utf-8")
                        )
                    else:
                        self._nack(conn, wire.NACK_MALFORMED, f"bad opcode {opcode:#x}")
                except UnknownHub as exc:
                    self._nack(conn, wire.NACK_UNKNOWN_HUB, str(exc))
                except NoFreePort as exc:
                    self._nack(conn, wire.NACK_NO_FREE_PORT, str(exc))
                except NameCollision as exc:
                    self._nack(conn, wire.NACK_NAME_COLLISION, str(exc))
                except HubStreamError as exc:
                    # document and schema defects, plus anything typed we
                    # did not map more specifically
                    self._nack(conn, wire.NACK_MALFORMED, str(exc))

    def _handle_register(self, conn: socket.socket, payload: bytes) -> None:
        raw, reregister = wire.unpack_register(payload)
        config = self.core.handle_register(raw, reregister=reregister)
        session = self.core.get_session_by_token(config.session_token)
        try:
            listener = _DataListener(self.core, session, self.host)
        except OSError:
            self.core.teardown_session(session.hub_id)
            raise NoFreePort(f"cannot bind data port {config.data_port}")
        with self._listener_lock:
            self._listeners[session.hub_id] = listener
        listener.start()
        wire.write_message(
            conn,
            wire.OP_ASSIGN,
            wire.pack_assign(
                config.data_port,
                config.session_token,
                config.wrapper_name,
                config.field_layout,
            ),
        )

    def _nack(self, conn: socket.socket, code: int, message: str) -> None:
        try:
            wire.write_message(conn, wire.OP_NACK, wire.pack_nack(code, message))
        except OSError:
            pass

    def _close_listener(self, session: RegistrationSession) -> None:
        with self._listener_lock:
            listener = self._listeners.pop(session.hub_id, None)
        if listener is not None:
            listener.close()

    def stop(self) -> None:
        self._closing.set()
        try:
            self._control.close()
        except OSError:
            pass
        self._accept_thread.join(timeout=5)
        self.core.shutdown()
        with self._listener_lock:
            leftovers = list(self._listeners.values())
            self._listeners.clear()
        for listener in leftovers:
            listener.close()
