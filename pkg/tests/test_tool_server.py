import io
import json
import socket
import sys
from pathlib import Path

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from navworld.tool_server import (PRIMITIVE_TOOLS, Session, ToolError, ToolServer, execute, handle_line,
                                  parse_transport, replay_events, resolve_blueprint, serve_stdio)

ROOT = Path(__file__).resolve().parents[1]
GOLDEN = ROOT / "tests" / "golden" / "tool_transcript.txt"
sys.path.insert(0, str(ROOT / "scripts"))


def golden_pairs():
    lines = GOLDEN.read_text().splitlines()
    return [(lines[i][2:], lines[i + 1][2:]) for i in range(0, len(lines), 2)]


def replay_golden(tmp_path) -> list[tuple[str, str, str]]:
    """(request, expected, actual) for every golden call against a fresh session."""
    session = Session(out_dir=tmp_path)
    return [(req, want, handle_line(session, req)) for req, want in golden_pairs()]


def test_golden_covers_every_primitive_tool():
    tools = [json.loads(req)["tool"] for req, _ in golden_pairs()]
    assert sorted(tools) == sorted(PRIMITIVE_TOOLS) and len(tools) == 14


def test_golden_transcript_replays_byte_identically(tmp_path):
    for req, want, got in replay_golden(tmp_path):
        assert got == want, req


def test_golden_script_reproduces_file(tmp_path):
    import record_golden

    out = tmp_path / "t.txt"
    record_golden.main([str(out)])
    assert out.read_bytes() == GOLDEN.read_bytes()


def _setup(session):
    execute(session, "setup_environment", {"ground_size": 6000})


BAD_CALLS = [
    ("spawn_actor", {"name": "x", "static_mesh": "no_such_mesh", "location": [0, 0, 0]}),
    ("spawn_actor", {"name": "x", "static_mesh": "tree_oak_01"}),
    ("spawn_actor", {"name": "x", "static_mesh": "tree_oak_01", "location": [0, 0]}),
    ("spawn_actor", {"name": "x", "static_mesh": "tree_oak_01", "location": [0, 0, 0], "scale": [0, 1, 1]}),
    ("spawn_actor", {"name": "x", "static_mesh": "tree_oak_01", "location": [0, 0, 0], "colour": "red"}),
    ("spawn_blueprint_actor", {"actor_name": "y", "blueprint_id": "/Game/BP_Nope.BP_Nope", "location": [0, 0, 0]}),
    ("delete_actor", {"name": "ghost"}),
    ("set_actor_transform", {"name": "ghost", "location": [0, 0, 0]}),
    ("set_actor_transform", {"name": "t0", "rotation": [float("inf"), 0, 0]}),
    ("find_actors_by_name", {"pattern": "t[0]"}),
    ("list_assets", {"category": "spaceship"}),
    ("setup_environment", {"ground_size": -5}),
    ("setup_environment", {}),
    ("take_screenshot", {"filename": "../escape.pgm"}),
    ("execute_python_script", {"script": [
        {"tool": "spawn_actor", "args": {"name": "ok", "static_mesh": "tree_oak_01", "location": [0, 0, 0]}},
        {"tool": "delete_actor", "args": {"name": "ghost"}}]}),
    ("execute_python_script", {"script": []}),
    ("no_such_tool", {}),
]


@given(st.lists(st.sampled_from(range(len(BAD_CALLS))), min_size=1, max_size=12))
@settings(max_examples=50, deadline=None)
def test_errors_never_change_scene_hash(order):
    s = Session()
    _setup(s)
    execute(s, "spawn_actor", {"name": "t0", "static_mesh": "tree_oak_01", "location": [10, 20, 0]})
    before, log_len = s.scene.digest(), len(s.event_log)
    for i in order:
        tool, args = BAD_CALLS[i]
        with pytest.raises(ToolError):
            execute(s, tool, args)
        assert s.scene.digest() == before
    assert len(s.event_log) == log_len


def test_error_codes_on_wire():
    s = Session()
    assert json.loads(handle_line(s, "{not json"))["error"]["code"] == "malformed_frame"
    assert json.loads(handle_line(s, json.dumps({"id": 1, "tool": "delete_actor", "args": {"name": "g"}})))[
        "error"]["code"] == "unknown_actor"
    assert json.loads(handle_line(s, json.dumps({"id": 1, "tool": "list_assets"})))["error"]["code"] == "bad_id"
    assert json.loads(handle_line(s, json.dumps({"id": 2, "tool": "nope"})))["error"]["code"] == "unknown_tool"
    resp = json.loads(handle_line(s, json.dumps({"id": 3, "tool": "spawn_actor", "args": {
        "name": "a", "static_mesh": "tree_oak_01", "location": [0, 0, 0]}})))
    assert resp["error"]["code"] == "setup_error"


def test_batch_failure_reports_index_and_rolls_back():
    s = Session()
    _setup(s)
    with pytest.raises(ToolError) as exc:
        execute(s, "batch_commands", {"commands": BAD_CALLS[14][1]["script"]})
    assert exc.value.code == "batch_failed" and exc.value.extra["index"] == 1
    assert s.scene.actors == {}


@given(st.lists(st.tuples(st.sampled_from(["spawn", "move", "delete", "bad"]), st.integers(0, 5),
                          st.floats(-2000, 2000)), max_size=25))
@settings(max_examples=40, deadline=None)
def test_event_log_replay_reproduces_scene_file(ops):
    s = Session()
    _setup(s)
    for op, k, v in ops:
        name = f"a{k}"
        call = {"spawn": ("spawn_actor", {"name": name, "static_mesh": "prop_crate_01", "location": [v, -v, 40]}),
                "move": ("set_actor_transform", {"name": name, "location": [v, v, 40], "rotation": [v, 0, 0]}),
                "delete": ("delete_actor", {"name": name}),
                "bad": ("spawn_actor", {"name": name, "static_mesh": "nope", "location": [0, 0, 0]})}[op]
        try:
            execute(s, *call)
        except ToolError:
            pass
    assert replay_events(s.event_log).to_json().encode() == s.scene.to_json().encode()


def test_blueprint_resolution(catalog):
    assert resolve_blueprint("/Game/City/BP_Tree_Oak_01.BP_Tree_Oak_01", catalog) == "tree_oak_01"
    assert resolve_blueprint("SM_Vehicle_Bus_01", catalog) == "vehicle_bus_01"
    with pytest.raises(ToolError):
        resolve_blueprint("BP_Dragon", catalog)


def test_stdio_transport():
    reqs = "\n".join(req for req, _ in golden_pairs()[:3] if "screenshot" not in req) + "\n"
    out = io.StringIO()
    serve_stdio(Session, io.StringIO(reqs), out)
    assert [json.loads(x)["ok"] for x in out.getvalue().splitlines()] == [True, True, True]


def test_tcp_transport_sessions_are_isolated():
    srv = ToolServer(("127.0.0.1", 0), Session)
    srv.start_background()
    try:
        port = srv.server_address[1]
        replies = []
        for _ in range(2):
            with socket.create_connection(("127.0.0.1", port), timeout=10) as sock:
                f = sock.makefile("rwb")
                for req, _ in golden_pairs()[:3]:
                    f.write((req + "\n").encode())
                    f.flush()
                    replies.append(f.readline().decode().strip())
        assert replies[:3] == replies[3:]
        assert [r for _, r in golden_pairs()[:3]] == replies[:3]
    finally:
        srv.shutdown()
        srv.server_close()


def test_parse_transport():
    assert parse_transport("stdio") == ("stdio", None)
    assert parse_transport("tcp:127.0.0.1:9000") == ("tcp", ("127.0.0.1", 9000))
    with pytest.raises(ValueError):
        parse_transport("udp:1")


def test_extension_tools_take_precedence():
    s = Session(extensions={"echo": lambda session, args: {"echo": args}})
    assert execute(s, "echo", {"x": 1}) == {"echo": {"x": 1}}
