"""Stdio worker for external-process workloads.

Speaks newline-delimited protocol envelopes on stdin/stdout: replies pong to
the launcher's ping handshake, then serves calls with a builtin workload
model. Lets a manifest of kind external_process run a real child process:

    {"kind": "external_process",
     "params": {"command": "python3 -m skybridge.workers --manifest detector.json"}}
"""

from __future__ import annotations

import argparse
import os
import sys

from .manifest import ResourceQuota, parse_manifest
from .protocol import Envelope, Status, decode, encode
from .schemas import SchemaError
from .servant import BuiltinSandbox, UnknownTarget


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(prog="skybridge-worker")
    parser.add_argument("--manifest", required=True,
                        help="Manifest JSON describing the interface and workload model.")
    args = parser.parse_args(argv)

    with open(args.manifest, "rb") as fh:
        manifest = parse_manifest(fh.read())
    quota = ResourceQuota(
        cpu_millicores=int(os.environ.get("SKYBRIDGE_CPU_MILLICORES", "1000")),
        memory_mb=int(os.environ.get("SKYBRIDGE_MEMORY_MB", "256")),
    )
    sandbox = BuiltinSandbox("worker", manifest.interface, manifest.stateful,
                             manifest.workload, quota)

    out = sys.stdout.buffer
    for line in sys.stdin.buffer:
        line = line.strip()
        if not line:
            continue
        envelope = decode(line)
        if envelope.op == "ping":
            replies = [Envelope(op="pong", id=envelope.id)]
        elif envelope.op in ("call", "publish"):
            try:
                replies = sandbox.execute(envelope)
            except UnknownTarget:
                replies = [Envelope(op="error", id=envelope.id, target=envelope.target,
                                    status=Status(code="unknown_target"))]
            except SchemaError as exc:
                replies = [Envelope(op="error", id=envelope.id, target=envelope.target,
                                    status=Status(code="schema_error", detail=str(exc)))]
        else:
            replies = [Envelope(op="error", id=envelope.id,
                                status=Status(code="invariant",
                                              detail=f"unexpected op {envelope.op!r}"))]
        # batch contract: publishes stream first, then exactly one terminal
        # frame (response/error for calls, pong as the ack otherwise)
        publishes = [r for r in replies if r.op == "publish"]
        terminals = [r for r in replies if r.op != "publish"]
        if not terminals:
            terminals = [Envelope(op="pong", id=envelope.id)]
        for reply in publishes + terminals[:1]:
            out.write(encode(reply) + b"\n")
        out.flush()
    return 0


if __name__ == "__main__":
    sys.exit(main())
