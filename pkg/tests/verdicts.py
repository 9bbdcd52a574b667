"""Collects one PASS/FAIL line per acceptance criterion for the terminal summary."""

LINES = []


def verdict(number, title, ok, detail):
    line = f"ACCEPTANCE {number} {'PASS' if ok else 'FAIL'}: {title} ({detail})"
    LINES.append(line)
    print(line)
    return ok
