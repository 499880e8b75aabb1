ACCEPTANCE_LINES: list[tuple[str, str]] = []


def record_acceptance(criterion: str, ok: bool, detail: str) -> str:
    line = f"{'PASS' if ok else 'FAIL'}  criterion {criterion}: {detail}"
    ACCEPTANCE_LINES.append((criterion, line))
    print(line)
    return line


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    key = lambda item: [int(p) if p.isdigit() else p for p in item[0].replace("-", ".").split(".")]
    for _, line in sorted(ACCEPTANCE_LINES, key=key):
        terminalreporter.write_line(line)
