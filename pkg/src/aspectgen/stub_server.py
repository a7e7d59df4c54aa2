"""Adapter wire protocol server backed by the stub suite.

Run as ``python -m aspectgen.stub_server``; reads one JSON request per line
from stdin and writes one JSON response per line to stdout.  Exists so the
subprocess adapter path can be exercised end to end without any real model.
"""

from __future__ import annotations

import argparse
import json
import sys

from .adapters import StubAdapters, wire_error_code


def handle_request(suite: StubAdapters, request: dict) -> dict:
    op = request.get("op")
    input_value = request.get("input")
    params = request.get("params") or {}
    try:
        if op == "encode_text":
            result: object = list(suite.encode_text(input_value).values)
        elif op == "encode_image":
            result = list(suite.encode_image(input_value).values)
        elif op == "caption":
            result = suite.caption(input_value)
        elif op == "vqa":
            answer = suite.answer_prompt(input_value, params["attribute"])
            result = answer.raw_response
        elif op == "ocr":
            # The client applies its own confidence threshold; ship everything.
            tokens = suite.ocr_tokens(input_value, -1.0)
            result = [[t.text, t.confidence] for t in tokens]
        else:
            return {"ok": False, "result": None, "error": f"adapter_unavailable: unknown op {op!r}"}
    except Exception as exc:
        return {"ok": False, "result": None, "error": f"{wire_error_code(exc)}: {exc}"}
    return {"ok": True, "result": result, "error": None}


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--embedding-dim", type=int, default=64)
    parser.add_argument("--noise", type=float, default=0.0)
    parser.add_argument("--max-input-chars", type=int, default=4096)
    args = parser.parse_args(argv)
    suite = StubAdapters(
        embedding_dim=args.embedding_dim,
        noise=args.noise,
        max_input_chars=args.max_input_chars,
    )
    for line in sys.stdin:
        line = line.strip()
        if not line:
            continue
        try:
            request = json.loads(line)
        except json.JSONDecodeError as exc:
            response = {"ok": False, "result": None, "error": f"adapter_unavailable: bad request: {exc}"}
        else:
            response = handle_request(suite, request)
        sys.stdout.write(json.dumps(response) + "\n")
        sys.stdout.flush()
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
