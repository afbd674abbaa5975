import click
import contextlib
import logging

from tqdm import tqdm

LEVEL_STYLE = {
    logging.CRITICAL: ("!", "red"),
    logging.ERROR:    ("E", "red"),
    logging.WARNING:  ("W", "yellow"),
    logging.INFO:     ("*", "green"),
    logging.DEBUG:    ("D", "magenta"),
}

RUN_LOG_FORMAT = "%(asctime)s %(levelname)-8s %(processName)s %(name)s: %(message)s"


class ColorFormatter(logging.Formatter):
    """Terminal formatter: colored level mark, worker name for records from sweep workers"""

    def format(self, rec):
        mark, color = LEVEL_STYLE.get(rec.levelno, ("?", "white"))
        prefix = "".join([
            click.style("[",  fg="blue", bold=True),
            click.style(mark, fg=color,  bold=True),
            click.style("]",  fg="blue", bold=True),
            " ",
        ])
        if rec.processName != "MainProcess":
            prefix += click.style(f"{rec.processName}: ", dim=True)
        return prefix + super().format(rec)


class TqdmExitHandler(logging.StreamHandler):
    """Writes above any active progress bar; a CRITICAL record ends the program with status 127"""

    def emit(self, record):
        try:
            tqdm.write(self.format(record), file=self.stream)
        except Exception:
            self.handleError(record)
        if record.levelno == logging.CRITICAL:
            raise SystemExit(127)


def setup_logging(level=logging.INFO):
    # force: every invocation rebinds to the current stderr
    logging.basicConfig(handlers=[TqdmExitHandler()], force=True)
    log = logging.getLogger()
    log.setLevel(level)
    log.handlers[0].setFormatter(ColorFormatter("%(message)s"))
    logging.captureWarnings(True)
    return log


@contextlib.contextmanager
def file_logging(path, level=logging.DEBUG):
    """Copy log records into a plain-text file for the duration of a run"""
    handler = logging.FileHandler(path, mode="w")
    handler.setLevel(level)
    handler.setFormatter(logging.Formatter(RUN_LOG_FORMAT))
    root = logging.getLogger()
    # the root level gates the file too; open it up while the run lasts
    saved = root.level
    root.setLevel(min(saved, level) if saved else level)
    for h in root.handlers:
        if h.level == logging.NOTSET:
            h.setLevel(saved or logging.WARNING)
    root.addHandler(handler)
    try:
        yield handler
    finally:
        root.removeHandler(handler)
        root.setLevel(saved)
        handler.close()
