"""Collects one verdict line per acceptance criterion for the terminal summary."""

RESULTS: list[tuple[int, bool, str]] = []


def record(criterion: int, passed: bool, detail: str) -> bool:
    RESULTS.append((criterion, passed, detail))
    return passed
