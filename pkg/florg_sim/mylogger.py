import logging
import contextvars
from contextlib import contextmanager
from typing import Iterator, Optional

# Run context for logging
run_id_context: contextvars.ContextVar[Optional[str]] = contextvars.ContextVar("run_id", default=None)
round_context: contextvars.ContextVar[Optional[int]] = contextvars.ContextVar("round_idx", default=None)


class RunContextFormatter(logging.Formatter):
    """Custom formatter that includes the run id and round index in log messages."""

    def format(self, record):
        """Format log record with run/round context."""
        run_id = run_id_context.get()
        round_idx = round_context.get()
        parts = []
        if run_id:
            parts.append(f"run={run_id}")
        if round_idx is not None:
            parts.append(f"round={round_idx}")
        record.run_ctx = f"[{' '.join(parts)}] " if parts else ""
        return super().format(record)


# Configure logging
logger = logging.getLogger("florg_sim")
if not logger.handlers:
    handler = logging.StreamHandler()
    formatter = RunContextFormatter("%(asctime)s - %(name)s - %(levelname)s - %(run_ctx)s%(message)s")
    handler.setFormatter(formatter)
    logger.addHandler(handler)
    logger.setLevel(logging.INFO)


def get_logger(name: Optional[str] = None) -> logging.Logger:
    if not name or name == "florg_sim":
        return logger
    return logger.getChild(name.removeprefix("florg_sim."))


def set_level(level: str) -> None:
    logger.setLevel(level.upper())


@contextmanager
def run_context(run_id: Optional[str] = None, round_idx: Optional[int] = None) -> Iterator[None]:
    """Tag every log record emitted inside the block with the run id and/or round index."""
    tokens = []
    if run_id is not None:
        tokens.append((run_id_context, run_id_context.set(run_id)))
    if round_idx is not None:
        tokens.append((round_context, round_context.set(round_idx)))
    try:
        yield
    finally:
        for var, token in reversed(tokens):
            var.reset(token)
