"""One line per acceptance criterion, collected for the end-of-run summary."""

LINES: dict[int, str] = {}


def record(number: int, passed: bool, detail: str):
    line = f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}"
    LINES[number] = line
    print(line)
