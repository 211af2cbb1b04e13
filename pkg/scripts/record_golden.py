"""Record the tool-server golden transcript: one call to each primitive tool, in a fixed order.

Usage: python scripts/record_golden.py [OUT]   (default tests/golden/tool_transcript.txt)

Each request line is written as ``> {json}`` and the server's reply as
``< {json}``. The conformance test replays the request lines against a fresh
session and compares every reply byte for byte.
"""

from __future__ import annotations

import json
import sys
import tempfile
from pathlib import Path

from navworld.tool_server import PRIMITIVE_TOOLS, Session, handle_line

REQUESTS = [
    ("setup_environment", {"ground_size": 8000, "time_of_day": "dusk", "sky": "overcast"}),
    ("list_assets", {"category": "tree"}),
    ("spawn_actor", {"name": "house_1", "static_mesh": "building_house_01", "location": [0, 0, 450],
                     "rotation": [30, 0, 0]}),
    ("spawn_blueprint_actor", {"actor_name": "oak_1", "blueprint_id": "/Game/City/BP_Tree_Oak_01.BP_Tree_Oak_01",
                               "location": [900, 200, 0], "scale": [1.2, 1.2, 1.2]}),
    ("execute_python_script", {"script": [
        {"tool": "spawn_actor", "args": {"name": "sedan_1", "static_mesh": "vehicle_sedan_01",
                                         "location": [-700, 300, 80]}},
        {"tool": "spawn_actor", "args": {"name": "sedan_2", "static_mesh": "vehicle_sedan_02",
                                         "location": [-650, 320, 80]}},
    ]}),
    ("get_actors_in_level", {}),
    ("find_actors_by_name", {"pattern": "sedan_*"}),
    ("check_collisions", {}),
    ("set_actor_transform", {"name": "sedan_2", "location": [-200, -900, 80], "rotation": [90, 0, 0]}),
    ("check_vertical_support", {"tolerance_cm": 10}),
    ("verify_scene", {"original_request": "a house with an oak tree and two parked sedans"}),
    ("take_screenshot", {"filename": "golden.pgm", "size": 64}),
    ("delete_actor", {"name": "oak_1"}),
    ("delete_all_spawned", {}),
]


def request_lines() -> list[str]:
    return [json.dumps({"id": i + 1, "tool": t, "args": a}, separators=(",", ":"))
            for i, (t, a) in enumerate(REQUESTS)]


def transcript(out_dir: Path) -> list[str]:
    session = Session(out_dir=out_dir)
    lines = []
    for req in request_lines():
        lines += [f"> {req}", f"< {handle_line(session, req)}"]
    return lines


def main(argv: list[str]) -> int:
    assert sorted(t for t, _ in REQUESTS) == sorted(PRIMITIVE_TOOLS)
    out = Path(argv[0]) if argv else Path(__file__).resolve().parents[1] / "tests" / "golden" / "tool_transcript.txt"
    with tempfile.TemporaryDirectory() as tmp:
        lines = transcript(Path(tmp))
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text("\n".join(lines) + "\n")
    print(f"wrote {len(lines) // 2} calls to {out}")
    return 0


if __name__ == "__main__":
    sys.exit(main(sys.argv[1:]))
