"""Collects one result line per acceptance criterion for the terminal summary."""

LINES = []


def record(number, title, passed, detail=""):
    line = f"criterion {number:2d} [{'PASS' if passed else 'FAIL'}] {title}" + (f": {detail}" if detail else "")
    LINES.append(line)
    print(line)
    return passed
