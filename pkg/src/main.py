import logging
import sys
import time
from dataclasses import asdict
from typing import Optional, Sequence

from .commands import EXIT_FAILURE, EXIT_INPUT, HANDLERS, CommandOutcome, flag_overrides, parse_command
from .config_loader import load_app_config
from .errors import (
    DivergentParameterError,
    InputError,
    InvalidSampleError,
    SingularSampleCovarianceError,
    ThetaNotPdError,
    TruncNormError,
)
from .logging_setup import setup_logging
from .output import RunManifest, manifest_path, to_plain, write_text

logger = logging.getLogger(__name__)

_INPUT_ERRORS = (
    InputError,
    InvalidSampleError,
    DivergentParameterError,
    ThetaNotPdError,
    SingularSampleCovarianceError,
    ValueError,
    OSError,
)


def _execute(argv: Sequence[str]) -> tuple[CommandOutcome, Optional[str], RunManifest]:
    parsed = parse_command(argv)
    args = parsed.args
    app_config = load_app_config(getattr(args, "config", None), flag_overrides(args))
    manifest = RunManifest(
        command=parsed.type.value,
        arguments=list(argv),
        config=to_plain(asdict(app_config)),
        seeds={"integrator": app_config.integrator.seed, "sampler": app_config.sampler.seed},
    )
    logger.info("执行命令 %s", parsed.type.value)
    started = time.perf_counter()
    outcome = HANDLERS[parsed.type](args, app_config)
    manifest.duration_seconds = time.perf_counter() - started
    logger.info("命令完成 %s exit=%s 耗时 %.2fs", parsed.type.value, outcome.exit_code, manifest.duration_seconds)
    return outcome, getattr(args, "output", None), manifest


def main(argv: Optional[Sequence[str]] = None) -> int:
    setup_logging()
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        outcome, output, manifest = _execute(argv)
    except _INPUT_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except TruncNormError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILURE

    write_text(outcome.text, output)
    # stdout carries only the primary result; the manifest goes beside it.
    if output is None:
        write_text(manifest.to_json(), None, sys.stderr)
    else:
        write_text(manifest.to_json(), manifest_path(output))
    return outcome.exit_code


if __name__ == "__main__":
    sys.exit(main())
