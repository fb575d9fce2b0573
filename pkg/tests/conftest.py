# criterion -> list of (arm, ok, detail); filled by test_acceptance
ACCEPTANCE = {}


def record(criterion, arm, ok, detail=""):
    ACCEPTANCE.setdefault(criterion, []).append((arm, bool(ok), detail))
    print(f"criterion {criterion} [{arm}]: {'PASS' if ok else 'FAIL'} {detail}")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for crit in sorted(ACCEPTANCE, key=lambda c: (int(str(c).split()[0]), str(c))):
        arms = ACCEPTANCE[crit]
        ok = all(a[1] for a in arms)
        tr.write_line(f"criterion {crit}: {'PASS' if ok else 'FAIL'}")
        for arm, a_ok, detail in arms:
            tr.write_line(f"    {arm}: {'PASS' if a_ok else 'FAIL'} {detail}")
