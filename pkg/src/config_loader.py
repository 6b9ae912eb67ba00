import logging
import os
import re
try:
    import tomllib  # Python 3.11+
except ModuleNotFoundError:  # pragma: no cover - fallback for Python 3.10
    import tomli as tomllib
from dataclasses import dataclass, field, replace
from typing import Any, Callable, Mapping, Optional

from .config import AppConfig

_ENV_PATTERN = re.compile(r"\$\{ENV:([A-Z0-9_]+)\}")

logger = logging.getLogger(__name__)


def _parse_bool(value: Any) -> bool:
    if isinstance(value, bool):
        return value
    return str(value).strip().lower() in {"1", "true", "yes", "on"}


def _parse_int(value: Any) -> int:
    if isinstance(value, bool):
        raise ValueError(f"expected an integer, got {value!r}")
    if isinstance(value, int):
        return value
    return int(str(value).strip())


def _parse_float(value: Any) -> float:
    if isinstance(value, bool):
        raise ValueError(f"expected a number, got {value!r}")
    return float(str(value).strip()) if isinstance(value, str) else float(value)


def parse_float_list(value: Any) -> tuple[float, ...]:
    if isinstance(value, (list, tuple)):
        return tuple(_parse_float(item) for item in value)
    text = str(value).strip()
    if not text:
        raise ValueError("empty list")
    return tuple(float(part) for part in text.split(","))


def _parse_str(value: Any) -> str:
    return str(value).strip()


_FIELDS: dict[str, dict[str, Callable[[Any], Any]]] = {
    "integrator": {
        "qmc_points": _parse_int,
        "random_shifts": _parse_int,
        "seed": _parse_int,
        "target_rel_error": _parse_float,
        "max_points": _parse_int,
        "exact_max_dim": _parse_int,
        "workers": _parse_int,
    },
    "sampler": {
        "method": _parse_str,
        "seed": _parse_int,
        "burn_in": _parse_int,
        "thinning": _parse_int,
        "chains": _parse_int,
    },
    "fit": {
        "max_iterations": _parse_int,
        "tolerance": _parse_float,
        "max_backtracks": _parse_int,
        "backtrack_factor": _parse_float,
        "jacobian_step": _parse_float,
        "solver": _parse_str,
        "q_tolerance": _parse_float,
        "score_tolerance": _parse_float,
    },
    "cli": {
        "header": _parse_bool,
        "lower": parse_float_list,
    },
}

# Flat keys (CLI flag names) and the fields they set.
_FLAT_KEYS: dict[str, tuple[str, ...]] = {
    "qmc_points": ("integrator.qmc_points",),
    "shifts": ("integrator.random_shifts",),
    "seed": ("integrator.seed", "sampler.seed"),
    "tol": ("fit.tolerance",),
    "max_iter": ("fit.max_iterations",),
    "method": ("sampler.method",),
}
for _section, _fields in _FIELDS.items():
    for _name in _fields:
        _FLAT_KEYS.setdefault(_name, (f"{_section}.{_name}",))


@dataclass(frozen=True)
class ConfigLoadResult:
    overrides: dict[str, Any]
    errors: list[str] = field(default_factory=list)


def _normalize_key(key: str) -> str:
    return key.strip().lower().replace("-", "_")


def resolve_env_placeholders(value: str, env: Mapping[str, str]) -> str:
    def replace_match(match: re.Match[str]) -> str:
        key = match.group(1)
        if key not in env:
            raise KeyError(key)
        return env[key]

    return _ENV_PATTERN.sub(replace_match, value)


def _resolve_value(value: Any, env: Mapping[str, str]) -> Any:
    if isinstance(value, str):
        try:
            return resolve_env_placeholders(value, env)
        except KeyError as exc:
            raise ValueError(f"missing environment variable {exc.args[0]}") from exc
    if isinstance(value, list):
        return [_resolve_value(item, env) for item in value]
    return value


def _read_key_values(path: str) -> dict[str, str]:
    values: dict[str, str] = {}
    with open(path, "r", encoding="utf-8") as handle:
        for raw_line in handle:
            line = raw_line.strip()
            if not line or line.startswith("#"):
                continue
            if line.startswith("export "):
                line = line[len("export ") :].strip()
            if "=" not in line:
                continue
            key, value = line.split("=", 1)
            key = key.strip()
            value = value.strip()
            if not key:
                continue
            if value and value[0] in ("'", '"') and value[-1] == value[0]:
                value = value[1:-1]
            values[key] = value
    return values


def _assign(
    targets: tuple[str, ...], raw: Any, env: Mapping[str, str], label: str, result: ConfigLoadResult
) -> None:
    try:
        value = _resolve_value(raw, env)
        for target in targets:
            section, name = target.split(".", 1)
            result.overrides[target] = _FIELDS[section][name](value)
    except ValueError as exc:
        result.errors.append(f"{label}: {exc}")


def parse_flat(items: Mapping[str, Any], env: Mapping[str, str] | None = None) -> ConfigLoadResult:
    """Flat ``flag-name = value`` pairs; used for key=value files and command-line flags."""
    if env is None:
        env = os.environ
    result = ConfigLoadResult(overrides={})
    for key, raw in items.items():
        name = _normalize_key(key)
        targets = _FLAT_KEYS.get(name)
        if targets is None and "." in name:
            section, field_name = name.split(".", 1)
            if field_name in _FIELDS.get(section, {}):
                targets = (name,)
        if targets is None:
            result.errors.append(f"unknown key {key}")
            continue
        _assign(targets, raw, env, key, result)
    return result


def load_toml_config(path: str, env: Mapping[str, str] | None = None) -> ConfigLoadResult:
    if env is None:
        env = os.environ
    with open(path, "rb") as handle:
        data = tomllib.load(handle)

    flat = {key: value for key, value in data.items() if not isinstance(value, dict)}
    result = parse_flat(flat, env)
    for section, table in data.items():
        if not isinstance(table, dict):
            continue
        if section not in _FIELDS:
            result.errors.append(f"unknown section [{section}]")
            continue
        for key, raw in table.items():
            name = _normalize_key(key)
            if name not in _FIELDS[section]:
                # Flag-style aliases are accepted inside their own section.
                aliases = [t for t in _FLAT_KEYS.get(name, ()) if t.startswith(f"{section}.")]
                if not aliases:
                    result.errors.append(f"[{section}] unknown key {key}")
                    continue
                _assign(tuple(aliases), raw, env, f"[{section}] {key}", result)
                continue
            _assign((f"{section}.{name}",), raw, env, f"[{section}] {key}", result)
    return result


def load_config_file(path: str, env: Mapping[str, str] | None = None) -> ConfigLoadResult:
    if not os.path.exists(path):
        raise FileNotFoundError(f"config file not found: {path}")
    if path.endswith(".toml"):
        return load_toml_config(path, env)
    return parse_flat(_read_key_values(path), env)


def build_app_config(overrides: Mapping[str, Any], base: Optional[AppConfig] = None) -> AppConfig:
    """Apply ``section.field`` overrides; dataclass validation errors surface as ValueError."""
    base = base or AppConfig()
    grouped: dict[str, dict[str, Any]] = {section: {} for section in _FIELDS}
    for target, value in overrides.items():
        section, name = target.split(".", 1)
        grouped[section][name] = value
    integrator = replace(base.integrator, **grouped["integrator"]) if grouped["integrator"] else base.integrator
    sampler = replace(base.sampler, **grouped["sampler"]) if grouped["sampler"] else base.sampler
    fit = replace(base.fit, **grouped["fit"]) if grouped["fit"] else base.fit
    return AppConfig(
        integrator=integrator,
        sampler=sampler,
        fit=fit,
        header=grouped["cli"].get("header", base.header),
        lower=grouped["cli"].get("lower", base.lower),
    )


def load_app_config(
    path: Optional[str], flag_overrides: Mapping[str, Any], env: Mapping[str, str] | None = None
) -> AppConfig:
    """Defaults, then the config file, then command-line flags."""
    overrides: dict[str, Any] = {}
    if path:
        file_result = load_config_file(path, env)
        for err in file_result.errors:
            logger.warning("配置警告: %s", err)
        overrides.update(file_result.overrides)
    flag_result = parse_flat(flag_overrides, env)
    if flag_result.errors:
        raise ValueError("; ".join(flag_result.errors))
    overrides.update(flag_result.overrides)
    return build_app_config(overrides)

