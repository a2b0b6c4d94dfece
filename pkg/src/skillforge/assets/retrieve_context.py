#!/usr/bin/env python3
"""Default retrieval: concatenate every file under context/.

Protocol: read one JSON request {"question": "..."} from stdin, write one JSON
response {"context": "..."} to stdout.
"""
import json
import sys
from pathlib import Path

SCRIPT_DIR = Path(__file__).resolve().parent


def retrieval_function(question: str) -> str:
    """Return relevant context for the given question."""
    context_dir = SCRIPT_DIR / "context"
    parts = []
    if context_dir.is_dir():
        for path in sorted(context_dir.rglob("*")):
            if path.is_file():
                parts.append(path.read_text(encoding="utf-8"))
    return "\n\n".join(parts)


def main() -> None:
    raw = sys.stdin.read()
    request = json.loads(raw) if raw.strip() else {}
    context = retrieval_function(str(request.get("question", "")))
    sys.stdout.write(json.dumps({"context": context}, ensure_ascii=False))
    sys.stdout.flush()


if __name__ == "__main__":
    main()
