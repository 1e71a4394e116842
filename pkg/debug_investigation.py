#!/usr/bin/env python3
"""
Debug launcher for the investigation tool
Checks the environment, then runs the command line with debug logging and full
tracebacks
"""

import importlib
import sys

REQUIRED_MODULES = {
    "structlog": "pip install structlog",
    "networkx": "pip install networkx",
}
TOOL_MODULES = ["case_model", "case_dsl", "recon_engine", "blackbox_log", "scenario_sim", "forensic_cli"]


def check_environment(out=None) -> dict:
    """Availability of every module the tool needs, printed as a checklist"""
    out = out or sys.stdout
    print(f"Python version: {sys.version.split()[0]}", file=out)
    print(f"Python executable: {sys.executable}", file=out)
    status = {}
    for name in list(REQUIRED_MODULES) + TOOL_MODULES:
        try:
            importlib.import_module(name)
            status[name] = True
            print(f"✓ {name} available", file=out)
        except ImportError as e:
            status[name] = False
            print(f"✗ {name} not available: {e}", file=out)
            if name in REQUIRED_MODULES:
                print(f"Install with: {REQUIRED_MODULES[name]}", file=out)
    return status


def main(argv=None) -> int:
    """Run the investigation CLI with debug output"""
    argv = sys.argv[1:] if argv is None else list(argv)
    print("=== INVESTIGATION DEBUG LAUNCHER ===", file=sys.stderr)
    if not all(check_environment(sys.stderr).values()):
        print("ERROR: missing modules, see above", file=sys.stderr)
        return 2

    try:
        import forensic_cli
        return forensic_cli.run_cli(["-vv"] + argv)
    except Exception as e:
        print(f"FATAL ERROR: {e}", file=sys.stderr)
        import traceback
        traceback.print_exc()
        return 2


if __name__ == "__main__":
    sys.exit(main())
