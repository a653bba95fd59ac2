_ACCEPTANCE: dict = {}


def record_acceptance(num, title, passed, detail=""):
    _ACCEPTANCE[num] = (title, passed, detail)


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(_ACCEPTANCE):
        title, passed, detail = _ACCEPTANCE[num]
        status = "PASS" if passed else "FAIL"
        line = f"criterion {num}: {status} — {title}"
        if detail:
            line += f" ({detail})"
        terminalreporter.write_line(line)
