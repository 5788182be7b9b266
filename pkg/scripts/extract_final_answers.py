#!/usr/bin/env python3
from __future__ import annotations

import argparse
import json
from pathlib import Path


def main() -> int:
    parser = argparse.ArgumentParser(description="Extract final answers from a traces JSONL file as a JSON array.")
    parser.add_argument("input", nargs="?", default="output/traces.jsonl")
    parser.add_argument("--with-question", action="store_true", help="Emit {id, question, answer} objects instead of bare strings")
    parser.add_argument("--out", default="", help="Optional output path (writes JSON array). If omitted, prints to stdout.")
    args = parser.parse_args()

    input_path = Path(args.input)
    answers: list[object] = []
    for lineno, line in enumerate(input_path.read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        try:
            trace = json.loads(line)
        except json.JSONDecodeError as e:
            raise SystemExit(f"{input_path}: line {lineno}: invalid JSON ({e.msg})")
        final = (trace.get("final_answer") or {}).get("text") if isinstance(trace, dict) else None
        if not isinstance(final, str):
            continue
        if args.with_question:
            question = trace.get("question") or {}
            answers.append({"id": question.get("id"), "question": question.get("text"), "answer": final.strip()})
        else:
            answers.append(final.strip())

    out_json = json.dumps(answers, indent=2, ensure_ascii=False)
    if args.out:
        out_path = Path(args.out)
        out_path.parent.mkdir(parents=True, exist_ok=True)
        out_path.write_text(out_json + "\n", encoding="utf-8")
    else:
        print(out_json)

    return 0


if __name__ == "__main__":
    raise SystemExit(main())
