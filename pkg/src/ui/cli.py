#!/usr/bin/env python3
"""
Command-line interface for the sqlsentinel query engine.

Exit codes: 0 answered (or success), 2 lint refused, 3 refused,
4 exhausted, 5 infrastructure or configuration error, 6 out of scope.
"""

import argparse
import json
import os
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

import pandas as pd
import requests

# Add the project root to the path
sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), '..', '..')))

from src.config import DATA_DIR, EngineConfig, load_config
from src.domain.errors import OutOfScope, SentinelError
from src.domain.models import FinalStatus, QueryAnswer

EXIT_OK = 0
EXIT_LINT_REFUSED = 2
EXIT_REFUSED = 3
EXIT_EXHAUSTED = 4
EXIT_INFRASTRUCTURE = 5
EXIT_OUT_OF_SCOPE = 6

STATUS_EXIT_CODES = {
    FinalStatus.ANSWERED.value: EXIT_OK,
    FinalStatus.REFUSED.value: EXIT_REFUSED,
    FinalStatus.EXHAUSTED.value: EXIT_EXHAUSTED,
}
HTTP_EXIT_CODES = {403: EXIT_REFUSED, 422: EXIT_OUT_OF_SCOPE, 404: EXIT_INFRASTRUCTURE, 503: EXIT_INFRASTRUCTURE}


class Colors:
    """ANSI color codes for terminal output."""
    HEADER = '\033[95m'
    BLUE = '\033[94m'
    GREEN = '\033[92m'
    YELLOW = '\033[93m'
    RED = '\033[91m'
    ENDC = '\033[0m'
    BOLD = '\033[1m'


def print_header(text: str) -> None:
    """Print a formatted header."""
    print(f"\n{Colors.HEADER}{Colors.BOLD}{text}{Colors.ENDC}\n")


def print_success(text: str) -> None:
    """Print a success message."""
    print(f"{Colors.GREEN}{text}{Colors.ENDC}")


def print_error(text: str) -> None:
    """Print an error message to stderr."""
    print(f"{Colors.RED}{text}{Colors.ENDC}", file=sys.stderr)


def print_warning(text: str) -> None:
    """Print a warning message."""
    print(f"{Colors.YELLOW}{text}{Colors.ENDC}")


def print_info(text: str) -> None:
    """Print an info message."""
    print(f"{Colors.BLUE}{text}{Colors.ENDC}")


def print_json(document: Any) -> None:
    print(json.dumps(document, indent=2, sort_keys=True, ensure_ascii=False, default=str))


def render_table(column_names: Sequence[str], rows: Sequence[Sequence[Any]]) -> str:
    if not column_names:
        return "(no columns)"
    frame = pd.DataFrame([list(r) for r in rows], columns=list(column_names))
    return frame.to_string(index=False) if len(frame) else "(no rows)"


def print_answer(document: Dict[str, Any]) -> None:
    """
    Print an answer document as tables and text.

    Args:
        document: QueryAnswer document, as produced by ``QueryAnswer.to_dict``
    """
    status = document["final_status"]
    attempts = document.get("attempts", [])
    if status == FinalStatus.EXHAUSTED.value:
        best = document.get("best_attempt")
        print_warning(f"WARNING: no accepted answer after {len(attempts)} attempts; "
                      f"showing the best-rated attempt ({best if best is not None else 'none'})")
    elif status == FinalStatus.REFUSED.value:
        print_error(f"Refused: {document.get('refusal_reason')}")

    print_header(document["question"]["text"])
    if document.get("rows") or document.get("column_names"):
        print(render_table(document.get("column_names", []), document.get("rows", [])))
        print()
    if document.get("narrative"):
        print(f"{Colors.BOLD}{document['narrative']}{Colors.ENDC}")
    for label, value in document.get("key_values", []):
        print(f"  {label}: {value}")
    print_info(f"status={status} attempts={len(attempts)}")


def exit_code_for(document: Dict[str, Any]) -> int:
    return STATUS_EXIT_CODES.get(document["final_status"], EXIT_INFRASTRUCTURE)


def _open_engine(config: EngineConfig, **kwargs):
    from src.orchestration.engine import QueryEngine

    return QueryEngine(config, **kwargs)


def ask_remote(api_url: str, question: str, datasource_id: Optional[str],
               verbosity: Optional[str], session_id: Optional[str]) -> Dict[str, Any]:
    """
    Ask a running service instead of a local engine.

    Returns:
        ``{"status_code": int, "body": dict}``
    """
    payload = {"question": question, "datasource_id": datasource_id,
               "verbosity": verbosity, "session_id": session_id}
    response = requests.post(f"{api_url.rstrip('/')}/v1/query", json=payload, timeout=300)
    return {"status_code": response.status_code, "body": response.json()}


def cmd_ask(args: argparse.Namespace) -> int:
    if args.api:
        try:
            reply = ask_remote(args.api, args.question, args.db, args.verbosity, args.session)
        except requests.exceptions.RequestException as e:
            print_error(f"Error contacting {args.api}: {e}")
            return EXIT_INFRASTRUCTURE
        body = reply["body"]
        if reply["status_code"] == 200:
            document = body
        elif reply["status_code"] == 403 and "answer" in body:
            document = body["answer"]
        else:
            print_error(f"{body.get('code', 'error')}: {body.get('message', body)}")
            return HTTP_EXIT_CODES.get(reply["status_code"], EXIT_INFRASTRUCTURE)
    else:
        config = load_config(args.config)
        with _open_engine(config) as engine:
            try:
                answer: QueryAnswer = engine.ask(args.question, args.db, args.verbosity, args.session)
            except OutOfScope as e:
                if args.format == "json":
                    print_json(e.to_dict())
                else:
                    print_warning(f"Out of scope: {e.message}")
                return EXIT_OUT_OF_SCOPE
            document = answer.to_dict()

    if args.format == "json":
        print_json(document)
    else:
        print_answer(document)
    return exit_code_for(document)


def cmd_lint(args: argparse.Namespace) -> int:
    if args.file:
        sql_text = Path(args.file).read_text(encoding="utf-8")
    elif args.sql:
        sql_text = args.sql
    else:
        sql_text = sys.stdin.read()
    if not sql_text.strip():
        print_error("Provide a statement, --file or SQL on stdin")
        return EXIT_INFRASTRUCTURE
    config = load_config(args.config)
    with _open_engine(config) as engine:
        report = engine.lint(sql_text, args.db)
    print_json(report)
    return EXIT_OK if report["decision"] == "allowed" else EXIT_LINT_REFUSED


def print_ranking(document: Dict[str, Any], output_format: str) -> int:
    if output_format == "json":
        print_json(document)
        return EXIT_OK
    print_header(f"Tables of {document['datasource_id']} ranked for: {document['question']}")
    selected = set(document["selected"])
    rows = [(name, round(score, 3), "yes" if name in selected else "no")
            for name, score in document["scored_tables"]]
    print(render_table(["table", "score", "in prompt"], rows))
    return EXIT_OK


def cmd_schema(args: argparse.Namespace) -> int:
    config = load_config(args.config)
    with _open_engine(config) as engine:
        if args.rank:
            return print_ranking(engine.rank(args.rank, args.db), args.format)
        document = engine.schema(args.db)
    if args.format == "json":
        print_json(document)
        return EXIT_OK
    print_header(f"Schema of {document['datasource_id']}")
    for table in document["tables"]:
        print(f"{Colors.BOLD}{table['name']}{Colors.ENDC} ({table.get('row_count_estimate')} rows)")
        for column in table["columns"]:
            unit = f" [{column['unit_hint']}]" if column.get("unit_hint") else ""
            print(f"  {column['name']}: {column['data_kind']}{unit}")
    return EXIT_OK


def cmd_audit(args: argparse.Namespace) -> int:
    from src.persistence.audit_store import build_audit_store, query_audit

    config = load_config(args.config)
    store = build_audit_store(config.audit.backend, config.audit.journal_path, config.audit.database_url)
    try:
        records = query_audit(store, session_id=args.session, since=args.since,
                              final_status=args.status, kind=args.kind)
    finally:
        store.close()
    if args.format == "json":
        print_json([r.to_dict() for r in records])
        return EXIT_OK
    if not records:
        print_warning("No audit records found")
        return EXIT_OK
    rows = [
        (r.record_id, r.to_dict()["timestamp"], r.kind.value, r.session_id, r.attempt_number,
         r.guardrail_decision, r.outcome_status, r.rating_score, r.final_status)
        for r in records
    ]
    print(render_table(["id", "timestamp", "kind", "session", "attempt", "guardrail",
                        "outcome", "score", "final"], rows))
    return EXIT_OK


def cmd_replay(args: argparse.Namespace) -> int:
    from src.orchestration.replay import run_replay

    results = run_replay(args.directory, enforcement=not args.no_guardrail)
    if args.format == "json":
        print_json([r.to_dict() for r in results])
    else:
        print_header(f"{len(results)} scenarios")
        for result in results:
            line = f"{result.name}: status={result.status} attempts={result.attempts}"
            if result.passed:
                print_success(f"PASS {line}")
                continue
            print_error(f"FAIL {line}")
            if result.error:
                print_error(f"  error: {result.error}")
            for check in result.failures():
                print_error(f"  {check.name}: expected {check.expected!r}, got {check.actual!r}")
    return EXIT_OK if all(r.passed for r in results) else 1


def cmd_serve(args: argparse.Namespace) -> int:
    from src.api.server import start_api_server

    config = load_config(args.config)
    engine = _open_engine(config)
    start_api_server(engine, args.host, args.port)
    return EXIT_OK


def cmd_schedule(args: argparse.Namespace) -> int:
    from src.orchestration.scheduler import ReportScheduler

    config = load_config(args.config)
    if not config.schedules:
        print_warning("No schedules configured")
        return EXIT_OK
    with _open_engine(config) as engine:
        engine.startup()
        scheduler = ReportScheduler(engine, config.schedules, clock=engine.clock)
        print_info(f"Running {len(config.schedules)} schedule(s); press Ctrl+C to stop")
        try:
            scheduler.run_forever(args.ticks)
        except KeyboardInterrupt:
            print("\nExiting...")
    return EXIT_OK


def cmd_build_fixtures(args: argparse.Namespace) -> int:
    from src.persistence.fixtures import build_fixture, fixture_names

    for name in fixture_names():
        path = build_fixture(name, Path(args.out) / f"{name}.db")
        print_success(f"Built {name} at {path}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    from src.persistence.fixtures import SCENARIO_DIR

    parser = argparse.ArgumentParser(description="Ask questions of a database through guarded, read-only SQL")
    parser.add_argument("--config", help="Engine config file (default: $SENTINEL_CONFIG or ./sentinel.yaml)")
    subparsers = parser.add_subparsers(dest="command", help="Command to execute")

    parser_ask = subparsers.add_parser("ask", help="Answer a natural-language question")
    parser_ask.add_argument("question", help="The question")
    parser_ask.add_argument("--db", help="Datasource id")
    parser_ask.add_argument("--format", choices=["table", "json"], default="table")
    parser_ask.add_argument("--verbosity", choices=["concise", "detailed"])
    parser_ask.add_argument("--session", help="Session id for the audit trail")
    parser_ask.add_argument("--api", help="Ask a running service at this base URL instead")
    parser_ask.set_defaults(handler=cmd_ask)

    parser_lint = subparsers.add_parser("lint", help="Check a statement against the guardrail without running it")
    parser_lint.add_argument("sql", nargs="?", help="SQL statement (read from stdin when omitted)")
    parser_lint.add_argument("--file", help="Read the statement from a file")
    parser_lint.add_argument("--db", help="Datasource id")
    parser_lint.set_defaults(handler=cmd_lint)

    parser_schema = subparsers.add_parser("schema", help="Show the introspected schema")
    parser_schema.add_argument("--db", help="Datasource id")
    parser_schema.add_argument("--rank", metavar="QUESTION", help="Rank the tables by relevance to a question")
    parser_schema.add_argument("--format", choices=["table", "json"], default="table")
    parser_schema.set_defaults(handler=cmd_schema)

    parser_audit = subparsers.add_parser("audit", help="Query the audit trail")
    parser_audit.add_argument("--session", help="Filter by session id")
    parser_audit.add_argument("--since", help="Only records at or after this ISO-8601 instant")
    parser_audit.add_argument("--status", help="Filter by final status")
    parser_audit.add_argument("--kind", choices=["route", "attempt", "introspection", "terminal"])
    parser_audit.add_argument("--format", choices=["table", "json"], default="table")
    parser_audit.set_defaults(handler=cmd_audit)

    parser_replay = subparsers.add_parser("replay", help="Replay the scripted scenario corpus")
    parser_replay.add_argument("directory", nargs="?", default=str(SCENARIO_DIR), help="Scenario directory")
    parser_replay.add_argument("--no-guardrail", action="store_true",
                               help="Disable guardrail enforcement (negative control)")
    parser_replay.add_argument("--format", choices=["table", "json"], default="table")
    parser_replay.set_defaults(handler=cmd_replay)

    parser_serve = subparsers.add_parser("serve", help="Start the HTTP service")
    parser_serve.add_argument("--host", help="Bind address")
    parser_serve.add_argument("--port", type=int, help="Port")
    parser_serve.set_defaults(handler=cmd_serve)

    parser_schedule = subparsers.add_parser("schedule", help="Run the configured report schedules")
    parser_schedule.add_argument("--ticks", type=int, help="Stop after this many ticks")
    parser_schedule.set_defaults(handler=cmd_schedule)

    parser_fixtures = subparsers.add_parser("build-fixtures", help="Build the fixture databases")
    parser_fixtures.add_argument("--out", default=str(DATA_DIR), help="Output directory")
    parser_fixtures.set_defaults(handler=cmd_build_fixtures)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    """Main entry point; returns the process exit code."""
    parser = build_parser()
    args = parser.parse_args(argv)
    if not getattr(args, "handler", None):
        parser.print_help()
        return EXIT_OK
    try:
        return args.handler(args)
    except SentinelError as e:
        print_error(f"{e.code}: {e.message}")
        return EXIT_INFRASTRUCTURE


if __name__ == "__main__":
    sys.exit(main())
