"""Regenerate the golden session transcripts used by the protocol
conformance tests (python suite and browser console suite).

The scripted session exercises the full stage machine: scene load,
planning, plan selection, a deliberate misaim, correction until aligned,
an out-of-order command (rejected), autonomous steering, and record
retrieval.  Everything is deterministic, so the transcript is stable.
"""

import json
from pathlib import Path

from lungsteer.anatomy import generate_scene, sample_target
from lungsteer.service import SessionState, handle_message

ROOT = Path(__file__).resolve().parent.parent
OUT_DIRS = [ROOT / "tests" / "golden",
            ROOT / "frontend" / "tests" / "golden"]


def build_transcript():
    scene = generate_scene(1)
    target = sample_target(scene, 900)
    session = SessionState(sid="golden")
    in_lines, out_lines = [], []
    n = 0

    def send(type_, **kw):
        nonlocal session, n
        n += 1
        msg = {"v": 1, "type": type_, "id": n, **kw}
        session, replies = handle_message(session, msg)
        in_lines.append(json.dumps(msg))
        out_lines.extend(json.dumps(r) for r in replies)
        return replies

    send("load_scene", seed=1, profile="noiseless", tick_stride=10)
    send("start_autonomous")                      # rejected: out of order
    send("request_plans", target=[round(x, 3) for x in target], seed=3)
    send("select_plan", i=1)
    send("aim", yaw=0.2, pitch=-0.1)              # deliberate misaim
    replies = send("query_alignment")             # not aligned
    assert replies[0]["aligned"] is False
    yaw, pitch = replies[0]["suggested_correction"]
    send("aim", yaw=round(yaw, 6), pitch=round(pitch, 6))
    replies = send("query_alignment")
    assert replies[0]["aligned"] is True
    send("request_hold")
    send("start_autonomous")
    send("get_record")
    assert session.stage == "done"
    return in_lines, out_lines


def main():
    in_lines, out_lines = build_transcript()
    for out_dir in OUT_DIRS:
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "session.in.ndjson").write_text(
            "\n".join(in_lines) + "\n")
        (out_dir / "session.out.ndjson").write_text(
            "\n".join(out_lines) + "\n")
        print(f"wrote {out_dir}/session.{{in,out}}.ndjson "
              f"({len(in_lines)} in, {len(out_lines)} out)")


if __name__ == "__main__":
    main()
