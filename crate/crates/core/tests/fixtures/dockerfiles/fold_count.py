#!/usr/bin/env python3
"""Reference instruction counter for the golden Dockerfile corpus.

Folds continuation lines the way the Docker builder does and prints, per
file, the instruction keywords with their starting line. Output is the
golden file consumed by the Rust tests:

    python3 fold_count.py golden > golden/counts.json
"""
import json
import re
import sys
from pathlib import Path

DIRECTIVE = re.compile(r"^#\s*([a-zA-Z0-9_]+)\s*=\s*(.*?)\s*$")
KEYWORD = re.compile(r"^[A-Za-z][A-Za-z0-9_-]*$")
FS = {"RUN", "ADD", "COPY"}


def fold(text):
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    escape = "\\"
    i = 0
    while i < len(lines):
        m = DIRECTIVE.match(lines[i].strip())
        if not m:
            break
        if m.group(1).lower() == "escape" and m.group(2) in ("\\", "`"):
            escape = m.group(2)
        i += 1
    out = []
    while i < len(lines):
        s = lines[i].strip()
        i += 1
        if not s or s.startswith("#"):
            continue
        start = i
        body = s
        while body.endswith(escape):
            body = body[:-1]
            nxt = None
            while i < len(lines):
                cand = lines[i]
                i += 1
                if cand.strip() and not cand.strip().startswith("#"):
                    nxt = cand
                    break
            if nxt is None:
                break
            body += nxt.rstrip()
        word = body.split()[0]
        if KEYWORD.match(word):
            out.append((word.upper(), start))
    return out


def main(directory):
    result = {}
    for path in sorted(Path(directory).glob("*.Dockerfile")):
        ins = fold(path.read_text())
        result[path.name] = {
            "instructions": len(ins),
            "fs_layers": sum(1 for k, _ in ins if k in FS),
            "keywords": [k for k, _ in ins],
            "lines": [n for _, n in ins],
        }
    json.dump(result, sys.stdout, indent=1, sort_keys=True)
    print()


if __name__ == "__main__":
    main(sys.argv[1])
