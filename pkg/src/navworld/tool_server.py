"""Request/response tool server over newline-delimited JSON.

A request is ``{"id": int, "tool": str, "args": {...}}``; the response echoes
the id with either ``"payload"`` (``ok: true``) or ``"error"`` (``ok: false``).
Every successful mutating call is appended to the session's event log, and
a failing call never changes the scene.
"""

from __future__ import annotations

import json
import logging
import socketserver
import sys
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Mapping, TextIO

from . import raster
from .genspec import GenerationSpec
from .scene import Catalog, Rotation, SceneError, SceneGraph, Transform, Vec3, default_catalog
from .verifiers import (JudgeUnavailable, check_collisions, check_vertical_support, judge_scene,
                        summarize_scene)

log = logging.getLogger(__name__)

PRIMITIVE_TOOLS = (
    "spawn_blueprint_actor",
    "spawn_actor",
    "delete_actor",
    "delete_all_spawned",
    "get_actors_in_level",
    "find_actors_by_name",
    "set_actor_transform",
    "take_screenshot",
    "setup_environment",
    "list_assets",
    "verify_scene",
    "check_collisions",
    "check_vertical_support",
    "execute_python_script",
)


class ToolError(Exception):
    def __init__(self, code: str, message: str, **extra):
        super().__init__(message)
        self.code = code
        self.message = message
        self.extra = extra

    def to_dict(self) -> dict:
        return {"code": self.code, "message": self.message, **self.extra}


@dataclass
class Session:
    scene: SceneGraph = field(default_factory=SceneGraph)
    catalog: Catalog = field(default_factory=default_catalog)
    out_dir: Path | None = None
    judge: Any = "rule"
    spec: GenerationSpec | None = None
    extensions: dict[str, Callable[["Session", dict], dict]] = field(default_factory=dict)
    event_log: list[dict] = field(default_factory=list)
    last_id: int | None = None
    screenshots_taken: int = 0
    state: dict = field(default_factory=dict)

    @property
    def spawned(self) -> list[str]:
        return sorted(n for n, a in self.scene.actors.items() if a.spawned_in_session)

    def call(self, tool: str, **args) -> dict:
        """Dispatch in-process without request ids; raises ToolError on failure."""
        resp = execute(self, tool, args)
        return resp


@dataclass(frozen=True)
class ToolSpec:
    handler: Callable[[Session, dict], dict]
    required: tuple[str, ...] = ()
    optional: tuple[str, ...] = ()
    mutating: bool = False


# -- argument helpers ------------------------------------------------------


def _vec(args: dict, key: str, default=None) -> Vec3 | None:
    v = args.get(key)
    if v is None:
        return default
    if isinstance(v, Mapping):
        v = [v.get("x", 0.0), v.get("y", 0.0), v.get("z", 0.0)]
    if not isinstance(v, (list, tuple)) or len(v) != 3 or not all(isinstance(c, (int, float)) for c in v):
        raise ToolError("bad_args", f"{key} must be a list of 3 numbers")
    try:
        return Vec3.of(v)
    except SceneError as exc:
        raise ToolError("bad_args", f"{key}: {exc}") from None


def _rot(args: dict, key: str = "rotation") -> Rotation | None:
    v = args.get(key)
    if v is None:
        return None
    if isinstance(v, Mapping):
        v = [v.get("yaw", 0.0), v.get("pitch", 0.0), v.get("roll", 0.0)]
    if not isinstance(v, (list, tuple)) or len(v) != 3 or not all(isinstance(c, (int, float)) for c in v):
        raise ToolError("bad_args", f"{key} must be [yaw, pitch, roll]")
    try:
        return Rotation.of(v)
    except SceneError as exc:
        raise ToolError("bad_args", f"{key}: {exc}") from None


def _transform(args: dict) -> Transform:
    loc = _vec(args, "location")
    if loc is None:
        raise ToolError("bad_args", "location is required")
    return Transform(loc, _rot(args) or Rotation(), _vec(args, "scale", Vec3(1.0, 1.0, 1.0)))


def resolve_blueprint(blueprint_id: str, catalog: Catalog) -> str:
    """Map a blueprint path or shorthand (``/Game/.../BP_Tree_Oak_01.BP_Tree_Oak_01``) to an asset id."""
    name = blueprint_id.rsplit("/", 1)[-1].split(".", 1)[0]
    for prefix in ("BP_", "bp_", "SM_", "sm_"):
        if name.startswith(prefix):
            name = name[len(prefix):]
    cand = name.lower()
    if cand in catalog:
        return cand
    raise ToolError("unknown_asset", f"cannot resolve blueprint {blueprint_id!r}")


# -- tool handlers ---------------------------------------------------------


def _spawn(s: Session, name: str, asset_id: str, args: dict) -> dict:
    t = _transform(args)
    rec = s.scene.spawn_actor(name, asset_id, t, s.catalog)
    return {"actor": rec.to_dict()}


def _t_spawn_actor(s: Session, a: dict) -> dict:
    return _spawn(s, a["name"], a["static_mesh"], a)


def _t_spawn_blueprint_actor(s: Session, a: dict) -> dict:
    return _spawn(s, a["actor_name"], resolve_blueprint(str(a["blueprint_id"]), s.catalog), a)


def _t_delete_actor(s: Session, a: dict) -> dict:
    s.scene.delete_actor(a["name"])
    return {"deleted": a["name"]}


def _t_delete_all_spawned(s: Session, a: dict) -> dict:
    return {"deleted": s.scene.delete_all_spawned()}


def _t_get_actors(s: Session, a: dict) -> dict:
    return {"actors": [r.to_dict() for r in s.scene.get_actors()]}


def _t_find(s: Session, a: dict) -> dict:
    return {"actors": [r.to_dict() for r in s.scene.find_actors_by_name(a["pattern"])]}


def _t_set_transform(s: Session, a: dict) -> dict:
    rec = s.scene.set_actor_transform(a["name"], _vec(a, "location"), _rot(a), _vec(a, "scale"))
    return {"actor": rec.to_dict()}


def _t_screenshot(s: Session, a: dict) -> dict:
    if not s.scene.initialized:
        raise ToolError("setup_error", "setup_environment must be called before take_screenshot")
    if s.out_dir is None:
        raise ToolError("io_error", "session has no output directory for screenshots")
    filename = a.get("filename") or f"screenshot_{s.screenshots_taken:03d}.pgm"
    if "/" in filename or "\\" in filename or filename.startswith("."):
        raise ToolError("bad_args", "filename must be a plain file name")
    views = int(a.get("views", 1))
    size = int(a.get("size", 512))
    if views < 1 or size < 8:
        raise ToolError("bad_args", "views must be >= 1 and size >= 8")
    stem = filename[:-4] if filename.endswith(".pgm") else filename
    try:
        if views == 1:
            Path(s.out_dir).mkdir(parents=True, exist_ok=True)
            path = Path(s.out_dir) / f"{stem}.pgm"
            raster.write_pgm(path, raster.top_down(s.scene, s.catalog, size))
            paths = [path]
        else:
            paths = raster.screenshot_tour(s.scene, s.catalog, s.out_dir, stem, views, size)
    except OSError as exc:
        raise ToolError("io_error", f"cannot write screenshot: {exc.strerror}") from None
    s.screenshots_taken += 1
    return {"files": [p.name for p in paths], "size": size}


def _t_setup(s: Session, a: dict) -> dict:
    size = a.get("ground_size", 19000.0)
    if not isinstance(size, (int, float)):
        raise ToolError("bad_args", "ground_size must be a number")
    s.scene.setup_environment(float(size), str(a.get("time_of_day", "noon")), str(a.get("sky", "clear")),
                              bool(a.get("reinitialize", False)))
    return {"ground_half_extent": s.scene.ground_half_extent, "env_settings": s.scene.env_settings}


def _t_list_assets(s: Session, a: dict) -> dict:
    return {"assets": [x.to_dict() for x in s.catalog.list_assets(a.get("category"))]}


def _t_verify(s: Session, a: dict) -> dict:
    summary = summarize_scene(s.scene, s.catalog, s.spec)
    shots = []
    if s.out_dir is not None:
        shots = [str(p) for p in raster.screenshot_tour(s.scene, s.catalog, s.out_dir, "verify")]
    try:
        verdict = judge_scene(s.judge, str(a["original_request"]), summary, shots)
    except JudgeUnavailable as exc:
        raise ToolError("judge_unavailable", str(exc)) from None
    out = verdict.to_dict()
    out["metrics"] = summary["metrics"]
    out["focus_areas"] = list(a.get("focus_areas") or [])
    return out


def _t_collisions(s: Session, a: dict) -> dict:
    return check_collisions(s.scene, s.catalog, a.get("names"), a.get("scope"),
                            float(a.get("min_area_cm2", 0.0))).to_dict()


def _t_support(s: Session, a: dict) -> dict:
    gz = a.get("ground_z")
    return check_vertical_support(s.scene, s.catalog, a.get("names"), a.get("scope"),
                                  None if gz is None else float(gz),
                                  float(a.get("tolerance_cm", 10.0))).to_dict()


def _t_batch(s: Session, a: dict, key: str = "script") -> dict:
    commands = a[key]
    if not isinstance(commands, list) or not commands:
        raise ToolError("bad_args", f"{key} must be a non-empty list of {{tool, args}} objects")
    return run_batch(s, commands)


TOOLS: dict[str, ToolSpec] = {
    "spawn_blueprint_actor": ToolSpec(_t_spawn_blueprint_actor, ("actor_name", "blueprint_id", "location"),
                                      ("rotation", "scale"), True),
    "spawn_actor": ToolSpec(_t_spawn_actor, ("name", "static_mesh", "location"), ("rotation", "scale"), True),
    "delete_actor": ToolSpec(_t_delete_actor, ("name",), (), True),
    "delete_all_spawned": ToolSpec(_t_delete_all_spawned, (), (), True),
    "get_actors_in_level": ToolSpec(_t_get_actors),
    "find_actors_by_name": ToolSpec(_t_find, ("pattern",)),
    "set_actor_transform": ToolSpec(_t_set_transform, ("name",), ("location", "rotation", "scale"), True),
    "take_screenshot": ToolSpec(_t_screenshot, (), ("filename", "views", "size")),
    "setup_environment": ToolSpec(_t_setup, (), ("ground_size", "time_of_day", "sky", "reinitialize"), True),
    "list_assets": ToolSpec(_t_list_assets, (), ("category",)),
    "verify_scene": ToolSpec(_t_verify, ("original_request",), ("focus_areas",)),
    "check_collisions": ToolSpec(_t_collisions, (), ("names", "scope", "min_area_cm2")),
    "check_vertical_support": ToolSpec(_t_support, (), ("names", "scope", "ground_z", "tolerance_cm")),
    # the scripting hatch runs an atomic batch of primitive calls instead of engine code
    "execute_python_script": ToolSpec(_t_batch, ("script",)),
    "batch_commands": ToolSpec(lambda s, a: _t_batch(s, a, "commands"), ("commands",)),
}
assert set(PRIMITIVE_TOOLS) <= set(TOOLS)
BATCH_TOOLS = frozenset({"execute_python_script", "batch_commands"})


def _validate(spec: ToolSpec, tool: str, args: Any) -> None:
    if not isinstance(args, dict):
        raise ToolError("bad_args", "args must be an object")
    missing = [k for k in spec.required if k not in args]
    if missing:
        raise ToolError("bad_args", f"{tool}: missing required argument(s) {missing}")
    unknown = sorted(set(args) - set(spec.required) - set(spec.optional))
    if unknown:
        raise ToolError("bad_args", f"{tool}: unknown argument(s) {unknown}")


def execute(session: Session, tool: str, args: dict | None = None) -> dict:
    """Run one tool call; returns its payload or raises ToolError. Errors leave the scene unchanged."""
    args = {} if args is None else args
    if tool in session.extensions:
        return session.extensions[tool](session, args)
    spec = TOOLS.get(tool)
    if spec is None:
        raise ToolError("unknown_tool", f"no tool named {tool!r}")
    _validate(spec, tool, args)
    try:
        payload = spec.handler(session, args)
    except ToolError:
        raise
    except SceneError as exc:
        raise ToolError(exc.code, str(exc)) from None
    except (KeyError, TypeError, ValueError) as exc:
        raise ToolError("bad_args", f"{tool}: {exc}") from None
    if spec.mutating:
        session.event_log.append({"tool": tool, "args": args})
    return payload


def run_batch(session: Session, commands: list) -> dict:
    """Execute commands in order; on the first failure restore the pre-batch state."""
    scene_before = session.scene.copy()
    log_len = len(session.event_log)
    results = []
    for i, cmd in enumerate(commands):
        try:
            if not isinstance(cmd, dict) or "tool" not in cmd:
                raise ToolError("bad_args", "each command must be an object with a 'tool' key")
            if cmd["tool"] in BATCH_TOOLS:
                raise ToolError("bad_args", "batches cannot be nested")
            results.append(execute(session, cmd["tool"], cmd.get("args", {})))
        except ToolError as exc:
            session.scene = scene_before
            del session.event_log[log_len:]
            raise ToolError("batch_failed", f"command {i} ({cmd.get('tool') if isinstance(cmd, dict) else cmd!r}) "
                            f"failed: {exc.message}", index=i, cause=exc.code) from None
    return {"results": results}


def dispatch(session: Session, request: Any) -> dict:
    """Answer one decoded request frame."""
    if not isinstance(request, dict) or "tool" not in request:
        return {"id": None, "ok": False, "error": {"code": "bad_request", "message": "frame must be an object "
                                                   "with 'id', 'tool' and 'args'"}}
    rid = request.get("id")
    if not isinstance(rid, int) or isinstance(rid, bool):
        return {"id": None, "ok": False, "error": {"code": "bad_request", "message": "id must be an integer"}}
    if session.last_id is not None and rid <= session.last_id:
        return {"id": rid, "ok": False,
                "error": {"code": "bad_id", "message": f"id {rid} not greater than previous id {session.last_id}"}}
    session.last_id = rid
    try:
        payload = execute(session, request["tool"], request.get("args", {}))
    except ToolError as exc:
        return {"id": rid, "ok": False, "error": exc.to_dict()}
    return {"id": rid, "ok": True, "payload": payload}


def encode(obj: Any) -> str:
    return json.dumps(obj, separators=(",", ":"), allow_nan=False, default=_json_default)


def _json_default(o):
    if isinstance(o, Path):
        return str(o)
    if hasattr(o, "to_dict"):
        return o.to_dict()
    raise TypeError(f"not JSON serializable: {type(o).__name__}")


def handle_line(session: Session, line: str) -> str:
    try:
        req = json.loads(line)
    except json.JSONDecodeError as exc:
        resp = {"id": None, "ok": False, "error": {"code": "malformed_frame", "message": exc.msg}}
    else:
        resp = dispatch(session, req)
    try:
        return encode(resp)
    except (TypeError, ValueError) as exc:
        return encode({"id": resp.get("id"), "ok": False, "error": {"code": "internal", "message": str(exc)}})


def replay_events(events: list[dict], catalog: Catalog | None = None) -> SceneGraph:
    """Rebuild a scene by re-running an event log against a fresh session."""
    s = Session(catalog=catalog or default_catalog())
    for ev in events:
        execute(s, ev["tool"], ev["args"])
    return s.scene


def serve_stdio(session_factory: Callable[[], Session] = Session, stdin: TextIO | None = None,
                stdout: TextIO | None = None) -> None:
    stdin = stdin or sys.stdin
    stdout = stdout or sys.stdout
    session = session_factory()
    for line in stdin:
        if not line.strip():
            continue
        stdout.write(handle_line(session, line) + "\n")
        stdout.flush()


class _Handler(socketserver.StreamRequestHandler):
    def handle(self):
        session = self.server.session_factory()
        for raw in self.rfile:
            line = raw.decode("utf-8", errors="replace")
            if not line.strip():
                continue
            self.wfile.write((handle_line(session, line) + "\n").encode())
            self.wfile.flush()


class ToolServer(socketserver.ThreadingTCPServer):
    """TCP server: one session and one serial worker per connection."""

    daemon_threads = True
    allow_reuse_address = True

    def __init__(self, address: tuple[str, int], session_factory: Callable[[], Session] = Session):
        self.session_factory = session_factory
        super().__init__(address, _Handler)

    def start_background(self) -> threading.Thread:
        t = threading.Thread(target=self.serve_forever, daemon=True)
        t.start()
        return t


def parse_transport(spec: str) -> tuple[str, tuple[str, int] | None]:
    if spec == "stdio":
        return "stdio", None
    if spec.startswith("tcp:"):
        host, _, port = spec[4:].rpartition(":")
        return "tcp", (host or "127.0.0.1", int(port))
    raise ValueError(f"transport must be 'stdio' or 'tcp:host:port', got {spec!r}")


def serve(transport: str, session_factory: Callable[[], Session] = Session) -> None:
    kind, addr = parse_transport(transport)
    if kind == "stdio":
        serve_stdio(session_factory)
        return
    with ToolServer(addr, session_factory) as srv:
        log.info("tool server listening on %s:%d", *srv.server_address)
        srv.serve_forever()


def judge_extension(session: Session, args: dict) -> dict:
    """Extension tool letting this server act as an external judge for another process."""
    try:
        v = judge_scene(session.judge, args.get("request_text", ""), args.get("scene_summary", {}),
                        args.get("screenshots", []))
    except JudgeUnavailable as exc:
        raise ToolError("judge_unavailable", str(exc)) from None
    return v.to_dict()
