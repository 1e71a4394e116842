#!/usr/bin/env python3
"""
Self-forensics investigation command line

Validates case files, reconstructs credibility-ranked backtraces, checks and
ranks theories, verifies and ingests blackbox logs, runs scenario simulations
and formats case files. Reports go to standard output; logs and diagnostics go
to standard error.

Exit codes: 0 success or agreement, 1 clean negative finding (no explanation,
theory disagrees, integrity findings, case errors), 2 usage, validation or
internal error.
"""

import argparse
import os
import sys
from enum import IntEnum
from pathlib import Path

import structlog

from blackbox_log import IngestMode, derive_observations, export_log, parse_rules, verify_log
from case_dsl import CaseParseError, check_case, format_case, has_errors, parse_case, statement_fragment
from case_model import Aggregator, ForensicError, ReconConfig, ValidationError
from forensic_logging import configure_logging, log_message, write_audit_log
from recon_engine import (
    check_theory,
    enumerate_runs_oracle,
    rank_theories,
    reconstruct,
    render_backtraces,
    render_ranking,
    render_verdict,
)
from scenario_sim import parse_schedule, simulate, write_log

logger = structlog.get_logger(__name__)


class ExitStatus(IntEnum):
    OK = 0
    FINDINGS = 1
    ERROR = 2


class UsageError(Exception):
    pass


class ForensicArgumentParser(argparse.ArgumentParser):
    """Reports usage problems as exit code 2 instead of terminating the process"""

    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _read_text(path) -> str:
    return Path(path).read_text(encoding="utf-8")


def _print_diagnostics(diagnostics, source, stream):
    for diag in diagnostics:
        print(diag.render(str(source)), file=stream)


def load_case(path):
    """Parsed and checked case; errors stop the command"""
    spec = parse_case(_read_text(path))
    diagnostics = check_case(spec)
    _print_diagnostics([d for d in diagnostics if not d.is_error], path, sys.stderr)
    if has_errors(diagnostics):
        _print_diagnostics([d for d in diagnostics if d.is_error], path, sys.stderr)
        raise ValidationError(f"{path} has errors; run 'check' for details")
    return spec


def _recon_config(args) -> ReconConfig:
    return ReconConfig(
        max_run_length=args.max_len,
        max_backtraces=args.max_traces,
        aggregator=Aggregator.from_name(args.aggregator),
        anchor_final=not args.no_anchor_final,
    )


def cmd_check(args) -> ExitStatus:
    try:
        diagnostics = check_case(parse_case(_read_text(args.case)))
    except CaseParseError as exc:
        diagnostics = exc.diagnostics
    _print_diagnostics(diagnostics, args.case, sys.stderr)
    errors = sum(1 for d in diagnostics if d.is_error)
    print(f"{args.case}: {errors} error(s), {len(diagnostics) - errors} warning(s)")
    return ExitStatus.FINDINGS if errors else ExitStatus.OK


def cmd_reconstruct(args) -> ExitStatus:
    spec = load_case(args.case)
    statement = spec.resolve_statement(args.evidence)
    cfg = _recon_config(args)
    result = reconstruct(spec.machine, statement, cfg)
    if args.oracle:
        expected = enumerate_runs_oracle(spec.machine, statement, cfg)
        if expected != result:
            log_message("Backtraces disagree with the brute-force oracle", "error",
                        engine=len(result), oracle=len(expected))
            return ExitStatus.ERROR
        log_message("Brute-force oracle agrees", "success", backtraces=len(result))
    sys.stdout.write(render_backtraces(statement.label, result))
    return ExitStatus.OK if result else ExitStatus.FINDINGS


def cmd_theory(args) -> ExitStatus:
    spec = load_case(args.case)
    statement = spec.resolve_statement(args.evidence)
    theories = [spec.resolve_theory(label) for label in args.theory]
    cfg = _recon_config(args)
    if len(theories) == 1:
        verdict = check_theory(spec.machine, statement, theories[0], cfg)
        sys.stdout.write(render_verdict(theories[0].label, verdict))
        return ExitStatus.OK if verdict.agrees else ExitStatus.FINDINGS
    ranking = rank_theories(spec.machine, statement, theories, cfg)
    sys.stdout.write(render_ranking(ranking))
    return ExitStatus.OK if ranking[0][1].agrees else ExitStatus.FINDINGS


def cmd_verify(args) -> ExitStatus:
    report = verify_log(args.log)
    sys.stdout.write(report.render())
    return ExitStatus.OK if report.clean else ExitStatus.FINDINGS


def cmd_ingest(args) -> ExitStatus:
    report = verify_log(args.log)
    if not report.clean and not args.accept_findings:
        sys.stdout.write(report.render())
        log_message("Log has integrity findings; pass --accept-findings to ingest anyway", "warning")
        return ExitStatus.FINDINGS
    rules = parse_rules(_read_text(args.rules))
    statement = derive_observations(report.records, rules, IngestMode(args.mode), args.label)
    Path(args.out).write_text(statement_fragment(statement), encoding="utf-8")
    observations = sum(len(os) for os in statement.sequences)
    print(f"ingested {report.records_read} record(s) from {args.log}: "
          f"{len(statement)} sequence(s), {observations} observation(s) -> {args.out}")
    return ExitStatus.OK


def cmd_simulate(args) -> ExitStatus:
    spec = load_case(args.case)
    schedule = parse_schedule(_read_text(args.schedule))
    out = Path(args.out)
    if out.exists() and not args.force:
        raise ValidationError(f"{out} already exists; pass --force to replace it")
    result = simulate(spec.machine, schedule, args.end)

    # the old log stays in place until the new one is complete
    staging = out.with_name(out.name + ".partial")
    staging.unlink(missing_ok=True)
    try:
        write_log(result.records, staging)
        os.replace(staging, out)
    finally:
        staging.unlink(missing_ok=True)
    if args.truth:
        Path(args.truth).write_text(result.truth.render() + "\n", encoding="utf-8")
    print(f"truth: {result.truth.render()}")
    print(f"records: {len(result.records)} -> {out}")
    return ExitStatus.OK


def cmd_fmt(args) -> ExitStatus:
    source = _read_text(args.case)
    try:
        spec = parse_case(source)
    except CaseParseError as exc:
        _print_diagnostics(exc.diagnostics, args.case, sys.stderr)
        return ExitStatus.FINDINGS
    diagnostics = check_case(spec)
    if has_errors(diagnostics):
        _print_diagnostics(diagnostics, args.case, sys.stderr)
        return ExitStatus.FINDINGS
    text = format_case(spec)
    if args.stdout:
        sys.stdout.write(text)
    elif text != source:
        Path(args.case).write_text(text, encoding="utf-8")
        print(f"formatted {args.case}")
    else:
        print(f"{args.case} already canonical")
    return ExitStatus.OK


def cmd_export(args) -> ExitStatus:
    digest = export_log(args.log, args.to)
    report = verify_log(args.to)
    print(f"{digest}  {args.to}")
    sys.stdout.write(report.render())
    return ExitStatus.OK if report.clean else ExitStatus.FINDINGS


def _add_recon_flags(parser):
    parser.add_argument("case", help="case file (.fcase)")
    parser.add_argument("--evidence", required=True, help="evidential statement label")
    parser.add_argument("--max-len", type=int, default=64, help="longest run in states (default 64)")
    parser.add_argument("--max-traces", type=int, default=1000, help="backtrace cap (default 1000)")
    parser.add_argument("--aggregator", choices=["product", "min", "minimum", "mean"], default="product")
    parser.add_argument("--no-anchor-final", action="store_true",
                        help="do not require runs to end in a final state")


def build_parser() -> ForensicArgumentParser:
    """Argument parser with one subcommand per investigation step"""
    parser = ForensicArgumentParser(prog="forensic", description="Self-forensic incident investigation")
    parser.add_argument("-v", "--verbose", action="count", default=0, help="more logging (repeatable)")
    parser.add_argument("--audit-log", help="append one line per invocation to this file")
    commands = parser.add_subparsers(dest="command", required=True, metavar="command")

    check = commands.add_parser("check", help="parse and check a case file")
    check.add_argument("case")
    check.set_defaults(handler=cmd_check, target="case")

    recon = commands.add_parser("reconstruct", help="ranked backtraces for an evidential statement")
    _add_recon_flags(recon)
    recon.add_argument("--oracle", action="store_true", help="cross-check with brute-force enumeration")
    recon.set_defaults(handler=cmd_reconstruct, target="case")

    theory = commands.add_parser("theory", help="check or rank theories against the evidence")
    _add_recon_flags(theory)
    theory.add_argument("--theory", action="append", required=True, help="theory label (repeatable)")
    theory.set_defaults(handler=cmd_theory, target="case")

    verify = commands.add_parser("verify", help="integrity report for a blackbox log")
    verify.add_argument("log")
    verify.set_defaults(handler=cmd_verify, target="log")

    ingest = commands.add_parser("ingest", help="derive observations from a blackbox log")
    ingest.add_argument("log")
    ingest.add_argument("--rules", required=True)
    ingest.add_argument("--out", required=True, help="case fragment to write")
    ingest.add_argument("--mode", choices=[m.value for m in IngestMode], default=IngestMode.SAMPLES.value)
    ingest.add_argument("--label", default="blackbox", help="evidence label (default blackbox)")
    ingest.add_argument("--accept-findings", action="store_true")
    ingest.set_defaults(handler=cmd_ingest, target="log")

    sim = commands.add_parser("simulate", help="replay a schedule into a blackbox log")
    sim.add_argument("case")
    sim.add_argument("--schedule", required=True)
    sim.add_argument("--out", required=True, help="blackbox log to create")
    sim.add_argument("--truth", help="write the ground-truth run here")
    sim.add_argument("--end", type=int, help="end time in ms (overrides the schedule)")
    sim.add_argument("--force", action="store_true", help="replace an existing log")
    sim.set_defaults(handler=cmd_simulate, target="case")

    fmt = commands.add_parser("fmt", help="canonical formatting")
    fmt.add_argument("case")
    fmt.add_argument("--stdout", action="store_true", help="print instead of rewriting the file")
    fmt.set_defaults(handler=cmd_fmt, target="case")

    export = commands.add_parser("export", help="copy a log off-vehicle with a sha256 sidecar")
    export.add_argument("log")
    export.add_argument("--to", required=True)
    export.set_defaults(handler=cmd_export, target="log")
    return parser


def run_cli(argv=None) -> int:
    """Run one command and return its exit code"""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return int(ExitStatus.ERROR)
    except SystemExit as exc:
        return int(exc.code or 0)

    configure_logging(args.verbose)
    try:
        status = args.handler(args)
    except CaseParseError as exc:
        _print_diagnostics(exc.diagnostics, getattr(args, "case", "<case>"), sys.stderr)
        status = ExitStatus.ERROR
    except (ForensicError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        status = ExitStatus.ERROR
    except Exception:
        logger.exception("Unexpected failure", command=args.command)
        status = ExitStatus.ERROR

    if args.audit_log:
        write_audit_log(args.audit_log, args.command, getattr(args, args.target), int(status))
    return int(status)


def main():
    """Entry point for the investigation tool"""
    try:
        sys.exit(run_cli(sys.argv[1:]))
    except KeyboardInterrupt:
        print("Interrupted", file=sys.stderr)
        sys.exit(int(ExitStatus.ERROR))


if __name__ == "__main__":
    main()
