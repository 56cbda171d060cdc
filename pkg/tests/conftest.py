from __future__ import annotations


def pytest_terminal_summary(terminalreporter):
    lines = []
    for outcome in ("passed", "failed", "error"):
        for rep in terminalreporter.stats.get(outcome, []):
            if rep.when not in ("call", "setup") or rep.when == "setup" and rep.passed:
                continue
            props = dict(getattr(rep, "user_properties", ()))
            if "criterion" in props:
                lines.append((props["criterion"], "PASS" if rep.passed else "FAIL", props.get("title", ""),
                              props.get("detail", "")))
    if not lines:
        return
    terminalreporter.section("acceptance criteria")
    for num, verdict, title, detail in sorted(lines):
        terminalreporter.write_line(f"criterion {num:>2} {verdict}  {title}" + (f"  [{detail}]" if detail else ""))
