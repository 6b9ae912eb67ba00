import logging
import os
import sys


def setup_logging(level: str | None = None) -> None:
    """Log to stderr; stdout carries only command results."""
    level = (level or os.getenv("LOG_LEVEL", "INFO")).upper()
    logging.basicConfig(
        level=level,
        format="%(asctime)s %(levelname)s %(name)s %(message)s",
        stream=sys.stderr,
    )
    # scipy reports quadrature trouble through the warnings module.
    logging.captureWarnings(True)
