import argparse
import csv
import json
import math
from dataclasses import dataclass
from enum import Enum
from typing import Any, Optional, Sequence

import numpy as np

from .config import AppConfig, build_fit_config
from .config_loader import parse_float_list
from .errors import InputError, InvalidSampleError
from .expfam import DEFAULT_EPSILONS, ParamClass, classify_parameter, steepness_probe
from .matrix_core import DEFAULT_RANK_TOL, PsdClassification
from .mle import Sample, fit
from .models import FitStatus, ModelParams, NaturalParams
from .moments import covariance_matrix
from .orthant import normalizing_constant
from .output import dump_csv, dump_json
from .sampler import sample

SYMMETRY_TOL = 1e-12

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_MAX_ITERATIONS = 2
EXIT_NECESSARY_CONDITION = 3
EXIT_INPUT = 4
EXIT_INTEGRATION = 5

_FIT_EXIT_CODES = {
    FitStatus.CONVERGED: EXIT_OK,
    FitStatus.MAX_ITERATIONS: EXIT_MAX_ITERATIONS,
    FitStatus.NECESSARY_CONDITION_VIOLATED: EXIT_NECESSARY_CONDITION,
    FitStatus.INTEGRATION_FAILURE: EXIT_INTEGRATION,
}


class CommandType(str, Enum):
    FIT = "fit"
    MOMENTS = "moments"
    CLASSIFY = "classify"
    STEEPNESS_DEMO = "steepness-demo"
    SAMPLE = "sample"


@dataclass
class ParsedCommand:
    type: CommandType
    args: argparse.Namespace


@dataclass
class CommandOutcome:
    text: str
    exit_code: int = EXIT_OK


class _Parser(argparse.ArgumentParser):
    """argparse exits with status 2 on bad flags; that code belongs to fit status here."""

    def error(self, message: str) -> None:  # type: ignore[override]
        raise InputError(message)


def _common_flags() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    # SUPPRESS lets the same flag appear before or after the command name.
    common.add_argument("--config", default=argparse.SUPPRESS)
    common.add_argument("--output", default=argparse.SUPPRESS)
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS)
    common.add_argument("--qmc-points", dest="qmc_points", type=int, default=argparse.SUPPRESS)
    common.add_argument("--shifts", type=int, default=argparse.SUPPRESS)
    return common


def build_parser() -> argparse.ArgumentParser:
    common = _common_flags()
    parser = _Parser(prog="python -m src.main", parents=[common])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    fit_cmd = sub.add_parser(CommandType.FIT.value, parents=[common], help="fit (mu, Sigma) to a CSV sample")
    fit_cmd.add_argument("--input", required=True)
    fit_cmd.add_argument("--header", action="store_true", default=None)
    fit_cmd.add_argument("--lower")
    fit_cmd.add_argument("--tol", type=float)
    fit_cmd.add_argument("--max-iter", dest="max_iter", type=int)
    fit_cmd.add_argument("--solver", choices=["quasi-newton", "fixed-point"])

    moments_cmd = sub.add_parser(CommandType.MOMENTS.value, parents=[common], help="mean and covariance")
    moments_cmd.add_argument("--mu")
    moments_cmd.add_argument("--sigma")
    moments_cmd.add_argument("--params")
    moments_cmd.add_argument("--d", type=int)

    classify_cmd = sub.add_parser(CommandType.CLASSIFY.value, parents=[common], help="natural parameter space")
    classify_cmd.add_argument("--theta", required=True)
    classify_cmd.add_argument("--big-theta", dest="big_theta", required=True)
    classify_cmd.add_argument("--d", type=int)
    classify_cmd.add_argument("--tol", dest="rank_tol", type=float, default=DEFAULT_RANK_TOL)

    steep_cmd = sub.add_parser(CommandType.STEEPNESS_DEMO.value, parents=[common], help="gradient of K as Theta -> 0")
    steep_cmd.add_argument("--theta", required=True)
    steep_cmd.add_argument("--epsilons")

    sample_cmd = sub.add_parser(CommandType.SAMPLE.value, parents=[common], help="draw a seeded sample")
    sample_cmd.add_argument("--mu", required=True)
    sample_cmd.add_argument("--sigma", required=True)
    sample_cmd.add_argument("--n", type=int, required=True)
    sample_cmd.add_argument("--d", type=int)
    sample_cmd.add_argument("--method", choices=["rejection", "gibbs"])
    sample_cmd.add_argument("--burn-in", dest="burn_in", type=int)
    sample_cmd.add_argument("--thinning", type=int)
    sample_cmd.add_argument("--chains", type=int)
    return parser


def parse_command(argv: Sequence[str]) -> ParsedCommand:
    args = build_parser().parse_args(list(argv))
    return ParsedCommand(CommandType(args.command), args)


_CONFIG_FLAGS = (
    "seed",
    "qmc_points",
    "shifts",
    "tol",
    "max_iter",
    "solver",
    "header",
    "lower",
    "method",
    "burn_in",
    "thinning",
    "chains",
)


def flag_overrides(args: argparse.Namespace) -> dict[str, Any]:
    """Flags that override config-file values, keyed by flag name."""
    return {name: getattr(args, name) for name in _CONFIG_FLAGS if getattr(args, name, None) is not None}


def parse_vector(text: str, flag: str) -> np.ndarray:
    try:
        return np.array(parse_float_list(text), dtype=float)
    except ValueError as exc:
        raise InputError(f"--{flag}: expected comma-separated decimals ({exc})") from exc


def parse_matrix(text: str, dim: Optional[int], flag: str) -> np.ndarray:
    values = parse_vector(text, flag)
    if dim is None:
        dim = int(round(math.sqrt(values.shape[0])))
    if values.shape[0] != dim * dim:
        raise InputError(f"--{flag}: expected {dim * dim} entries for d={dim}, got {values.shape[0]}")
    return checked_symmetric(values.reshape(dim, dim), flag)


def checked_symmetric(matrix: np.ndarray, flag: str) -> np.ndarray:
    scale = max(1.0, float(np.max(np.abs(matrix))))
    if np.max(np.abs(matrix - matrix.T)) > SYMMETRY_TOL * scale:
        raise InputError(f"--{flag}: matrix is not symmetric")
    return matrix


def _vector_and_matrix(
    vector_text: str, matrix_text: str, dim: Optional[int], vector_flag: str, matrix_flag: str
) -> tuple[np.ndarray, np.ndarray]:
    vector = parse_vector(vector_text, vector_flag)
    dim = dim or vector.shape[0]
    if vector.shape[0] != dim:
        raise InputError(f"--{vector_flag}: expected {dim} entries, got {vector.shape[0]}")
    return vector, parse_matrix(matrix_text, dim, matrix_flag)


def read_sample_csv(path: str, header: bool) -> Sample:
    rows: list[list[float]] = []
    width: Optional[int] = None
    with open(path, "r", encoding="utf-8", newline="") as handle:
        reader = csv.reader(handle)
        if header:
            next(reader, None)
        for record in reader:
            if not record or all(not cell.strip() for cell in record):
                continue
            row_number = len(rows) + 1
            if width is None:
                width = len(record)
            elif len(record) != width:
                raise InvalidSampleError(
                    f"row {row_number}: expected {width} columns, got {len(record)}", row=row_number
                )
            values = []
            for col, cell in enumerate(record, start=1):
                try:
                    values.append(float(cell))
                except ValueError as exc:
                    raise InvalidSampleError(
                        f"row {row_number}, column {col}: {cell.strip()!r} is not a number",
                        row=row_number,
                        column=col,
                    ) from exc
            rows.append(values)
    if not rows:
        raise InvalidSampleError("no rows")
    return Sample(np.array(rows))


def run_fit(args: argparse.Namespace, app: AppConfig) -> CommandOutcome:
    data = read_sample_csv(args.input, app.header)
    lower = np.zeros(data.dim) if app.lower is None else np.array(app.lower, dtype=float)
    if lower.shape[0] != data.dim:
        raise InputError(f"--lower: expected {data.dim} entries, got {lower.shape[0]}")
    result = fit(data.shifted(lower) if app.lower is not None else data, build_fit_config(app))
    document = {
        "status": result.status,
        "converged": result.converged,
        "message": result.message,
        "n": data.n,
        "d": data.dim,
        "lower": lower,
        "iterations": result.iterations,
        "mu": result.mu + lower,
        "sigma": result.sigma.entries,
        "nu": result.moments.nu + lower,
        "nu_std_error": result.moments.nu_std_error,
        "lambda": result.moments.lam.entries,
        "lambda_std_error": result.moments.lam_std_error,
        "q": result.q,
        "score_norm_per_observation": result.score_norm,
        "residual_norms": list(result.residual_norms),
    }
    return CommandOutcome(dump_json(document), _FIT_EXIT_CODES[result.status])


def _load_params_file(path: str) -> tuple[np.ndarray, np.ndarray]:
    with open(path, "r", encoding="utf-8") as handle:
        try:
            raw = json.load(handle)
        except json.JSONDecodeError as exc:
            raise InputError(f"--params: invalid JSON ({exc})") from exc
    if not isinstance(raw, dict) or "mu" not in raw or "sigma" not in raw:
        raise InputError("--params: expected an object with 'mu' and 'sigma'")
    mu = np.asarray(raw["mu"], dtype=float).reshape(-1)
    dim = mu.shape[0]
    sigma = np.asarray(raw["sigma"], dtype=float)
    if sigma.size != dim * dim:
        raise InputError(f"--params: expected {dim * dim} sigma entries for d={dim}, got {sigma.size}")
    return mu, checked_symmetric(sigma.reshape(dim, dim), "params")


def run_moments(args: argparse.Namespace, app: AppConfig) -> CommandOutcome:
    if args.params:
        mu, sigma = _load_params_file(args.params)
    elif args.mu and args.sigma:
        mu, sigma = _vector_and_matrix(args.mu, args.sigma, args.d, "mu", "sigma")
    else:
        raise InputError("moments needs --mu and --sigma, or --params")
    params = ModelParams.create(mu, sigma)
    const = normalizing_constant(params, app.integrator)
    pair = covariance_matrix(params, app.integrator)
    document = {
        "mu": params.mu,
        "sigma": params.sigma.entries,
        "nu": pair.nu,
        "nu_std_error": pair.nu_std_error,
        "lambda": pair.lam.entries,
        "lambda_std_error": pair.lam_std_error,
        "log_normalizing_constant": const.log_value,
        "orthant_probability_method": const.method,
        "target_met": const.target_met,
    }
    return CommandOutcome(dump_json(document))


def _certificate(param_class: ParamClass) -> Any:
    cert = param_class.certificate
    if isinstance(cert, PsdClassification):
        return {"rank": cert.rank, "eigenvalues": cert.eigenvalues, "basis": cert.basis}
    return {"direction": cert}


def run_classify(args: argparse.Namespace, app: AppConfig) -> CommandOutcome:
    theta, big_theta = _vector_and_matrix(args.theta, args.big_theta, args.d, "theta", "big-theta")
    param_class = classify_parameter(NaturalParams.create(theta, big_theta), tol=args.rank_tol)
    document = {"tag": param_class.tag, "rank": param_class.rank, "certificate": _certificate(param_class)}
    return CommandOutcome(dump_json(document))


def run_steepness_demo(args: argparse.Namespace, app: AppConfig) -> CommandOutcome:
    theta = parse_vector(args.theta, "theta")
    epsilons = DEFAULT_EPSILONS if args.epsilons is None else parse_vector(args.epsilons, "epsilons")
    trace = steepness_probe(theta, app.integrator, epsilons=epsilons)
    header = [
        "epsilon",
        "norm_sq",
        "norm_sq_std_error",
        "theta_dot_grad",
        "increment",
        "limit_norm_sq",
        "limit_norm_sq_product_form",
        "limit_theta_dot_grad",
    ]
    rows = [
        [
            record.epsilon,
            record.norm_sq,
            record.norm_sq_std_error,
            record.theta_dot_grad,
            "" if record.increment is None else record.increment,
            trace.limit_norm_sq,
            trace.limit_norm_sq_product_form,
            trace.limit_theta_dot_grad,
        ]
        for record in trace.records
    ]
    return CommandOutcome(dump_csv(header, rows))


def run_sample(args: argparse.Namespace, app: AppConfig) -> CommandOutcome:
    mu, sigma = _vector_and_matrix(args.mu, args.sigma, args.d, "mu", "sigma")
    draws = sample(ModelParams.create(mu, sigma), args.n, app.sampler)
    header = [f"x{j + 1}" for j in range(draws.dim)]
    return CommandOutcome(dump_csv(header, draws.data.tolist()))


HANDLERS = {
    CommandType.FIT: run_fit,
    CommandType.MOMENTS: run_moments,
    CommandType.CLASSIFY: run_classify,
    CommandType.STEEPNESS_DEMO: run_steepness_demo,
    CommandType.SAMPLE: run_sample,
}
