"""
In-process scheduler for recurring report questions.

Each schedule pairs a question with a cron expression; at every due tick
the question runs through the engine and the resulting QueryAnswer document
is appended as one JSON line to the schedule's output file.
"""

import json
import logging
import time
from dataclasses import dataclass
from datetime import datetime
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence

from croniter import croniter

from src.config import ScheduleConfig
from src.domain.clock import Clock, format_instant, utc_now
from src.domain.errors import ConfigError, SentinelError

logger = logging.getLogger(__name__)

DEFAULT_POLL_SECONDS = 30.0


@dataclass
class ScheduledReport:
    """One schedule and the next instant it is due."""
    config: ScheduleConfig
    next_run: datetime
    runs: int = 0
    failures: int = 0

    def advance(self, after: datetime) -> None:
        self.next_run = croniter(self.config.cron, after).get_next(datetime)


class ReportScheduler:
    """
    Runs scheduled questions against a QueryEngine.

    Failures are logged and the schedule simply waits for its next tick;
    the pipeline's own attempt budget is the only retry.
    """
    def __init__(
        self,
        engine,
        schedules: Sequence[ScheduleConfig],
        clock: Clock = utc_now,
        sleep: Callable[[float], None] = time.sleep,
    ):
        self.engine = engine
        self.clock = clock
        self.sleep = sleep
        now = clock()
        self.reports: List[ScheduledReport] = []
        for schedule in schedules:
            if not croniter.is_valid(schedule.cron):
                raise ConfigError(f"invalid schedule expression {schedule.cron!r}",
                                  {"question": schedule.question})
            report = ScheduledReport(schedule, now)
            report.advance(now)
            self.reports.append(report)
        logger.info(f"ReportScheduler initialized with {len(self.reports)} schedule(s)")

    def _append(self, path: Path, document: Dict) -> None:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "a", encoding="utf-8") as handle:
            handle.write(json.dumps(document, sort_keys=True, ensure_ascii=False) + "\n")

    def run_pending(self) -> int:
        """
        Run every schedule that is due at the current clock instant.

        Returns:
            Number of documents appended
        """
        now = self.clock()
        written = 0
        for report in self.reports:
            if report.next_run > now:
                continue
            schedule = report.config
            try:
                answer = self.engine.ask(schedule.question, datasource_id=schedule.datasource_id,
                                         session_id=f"schedule:{schedule.cron}")
                document = answer.to_dict()
                document["scheduled_at"] = format_instant(report.next_run)
                self._append(Path(schedule.output_path), document)
                report.runs += 1
                written += 1
                logger.info(f"Scheduled report {schedule.question!r} finished {answer.final_status.value}")
            except (SentinelError, OSError) as e:
                report.failures += 1
                logger.error(f"Scheduled report {schedule.question!r} failed: {e}", exc_info=True)
            report.advance(now)
        return written

    def seconds_until_next(self) -> float:
        if not self.reports:
            return DEFAULT_POLL_SECONDS
        upcoming = min(r.next_run for r in self.reports)
        return max((upcoming - self.clock()).total_seconds(), 0.0)

    def run_forever(self, max_ticks: Optional[int] = None) -> None:
        """
        Sleep until the next due schedule and run it, ``max_ticks`` times or forever.
        """
        ticks = 0
        while max_ticks is None or ticks < max_ticks:
            self.sleep(self.seconds_until_next())
            self.run_pending()
            ticks += 1
