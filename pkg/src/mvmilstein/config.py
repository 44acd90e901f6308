"""Run configuration: a flat TOML document with a ``schema_version`` key.

Example::

    schema_version = 1
    model = "gbm"
    T = 1.0
    n = 16
    N = 1
    M = 10
    seed = 7

    [model_params]
    a = 0.5
    nu = 0.3

Unknown keys are rejected.  Every violation is collected and reported at
once, each prefixed with the offending field path.
"""
import math
from dataclasses import dataclass, field, fields, replace
from typing import Optional

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
import tomli_w

from .experiments import INTEGRANDS
from .model import BUILTIN_NAMES, builtin_model
from .schemes import MODES, SCHEMES

SCHEMA_VERSION = 1
SUBCOMMANDS = ("simulate", "convergence", "quadrature", "consistency", "poc", "moments")


class ConfigError(ValueError):
    def __init__(self, violations):
        self.violations = list(violations)
        super().__init__("invalid configuration:\n  " + "\n  ".join(self.violations))


@dataclass(frozen=True)
class RunConfig:
    model: str
    model_params: dict = field(default_factory=dict)
    schema_version: int = SCHEMA_VERSION
    scheme: str = "milstein"
    mode: str = "auto"
    T: float = 1.0
    n: int = 16
    h_levels: tuple = ()
    h_ref: Optional[float] = None
    K: object = "auto"
    N: int = 1
    N_levels: tuple = ()
    N_ref: Optional[int] = None
    M: int = 10
    q: float = 2.0
    p: float = 2.0
    seed: int = 0
    x0: float = 1.0
    x0_std: float = 0.0
    integrand: str = "brownian"
    use_closed_form: bool = True
    slope_window: Optional[tuple] = None
    tolerance: float = 0.2
    out: str = "out"

    def to_mapping(self) -> dict:
        """Canonical mapping; ``None`` fields are omitted."""
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            if v is None:
                continue
            if isinstance(v, tuple):
                v = list(v)
            if isinstance(v, dict):
                v = dict(sorted(v.items()))
            out[f.name] = v
        return out

    def to_toml(self) -> str:
        mapping = self.to_mapping()
        params = mapping.pop("model_params")
        mapping["model_params"] = params
        return tomli_w.dumps(mapping)

    def build_model(self):
        return builtin_model(self.model, self.model_params)

    def with_overrides(self, **kw):
        return replace(self, **kw)


_FIELD_NAMES = tuple(f.name for f in fields(RunConfig))


def _is_int(v):
    return isinstance(v, int) and not isinstance(v, bool)


def _is_num(v):
    return (isinstance(v, (int, float)) and not isinstance(v, bool) and math.isfinite(v))


def _divides(small, big):
    ratio = big / small
    return ratio >= 1 - 1e-12 and abs(ratio - round(ratio)) <= 1e-9 * ratio


def config_from_mapping(raw: dict) -> RunConfig:
    """Validate a mapping (parsed TOML or a manifest's ``config``) into a RunConfig."""
    errs = []
    raw = dict(raw)
    for key in sorted(set(raw) - set(_FIELD_NAMES)):
        errs.append(f"{key}: unknown key")
    if "model" not in raw:
        errs.append("model: required key missing")
    version = raw.get("schema_version", SCHEMA_VERSION)
    if version != SCHEMA_VERSION:
        errs.append(f"schema_version: unsupported version {version!r} (expected {SCHEMA_VERSION})")

    kw = {k: raw[k] for k in _FIELD_NAMES if k in raw}
    n_structural = len(errs)

    def need(name, check, msg):
        if name in kw and not check(kw[name]):
            errs.append(f"{name}: {msg}, got {kw[name]!r}")
            return False
        return True

    for name in ("T", "q", "p", "x0", "x0_std", "tolerance"):
        need(name, _is_num, "must be a finite number")
    for name in ("n", "N", "M", "seed"):
        need(name, _is_int, "must be an integer")
    for name in ("h_ref",):
        need(name, _is_num, "must be a finite number")
    need("N_ref", _is_int, "must be an integer")
    need("use_closed_form", lambda v: isinstance(v, bool), "must be true or false")
    need("out", lambda v: isinstance(v, str) and v != "", "must be a non-empty path string")
    need("scheme", lambda v: v in SCHEMES, f"must be one of {', '.join(SCHEMES)}")
    need("mode", lambda v: v in MODES, f"must be one of {', '.join(MODES)}")
    need("integrand", lambda v: v in INTEGRANDS, f"must be one of {', '.join(INTEGRANDS)}")
    need("K", lambda v: v == "auto" or (_is_int(v) and v >= 1), "must be \"auto\" or an integer >= 1")
    need("model_params", lambda v: isinstance(v, dict), "must be a table")
    if need("h_levels", lambda v: isinstance(v, (list, tuple)), "must be a list"):
        for i, h in enumerate(kw.get("h_levels", ())):
            if not (_is_num(h) and h > 0):
                errs.append(f"h_levels[{i}]: must be a positive number, got {h!r}")
    if need("N_levels", lambda v: isinstance(v, (list, tuple)), "must be a list"):
        for i, v in enumerate(kw.get("N_levels", ())):
            if not (_is_int(v) and v >= 1):
                errs.append(f"N_levels[{i}]: must be a positive integer, got {v!r}")
    if need("slope_window", lambda v: isinstance(v, (list, tuple)) and len(v) == 2
            and all(_is_num(x) for x in v), "must be a pair of numbers"):
        sw = kw.get("slope_window")
        if sw is not None and not sw[0] < sw[1]:
            errs.append(f"slope_window: lower bound must be below upper bound, got {list(sw)!r}")
    # range checks below assume well-typed values
    if len(errs) > n_structural or "model" not in raw:
        raise ConfigError(errs)

    model = None
    if kw.get("model") not in BUILTIN_NAMES:
        errs.append(f"model: unknown model {kw.get('model')!r}; choose from {', '.join(BUILTIN_NAMES)}")
    else:
        try:
            model = builtin_model(kw["model"], kw.get("model_params", {}))
        except ValueError as exc:
            errs.append(f"model_params: {exc}")

    T = kw.get("T", 1.0)
    if T <= 0:
        errs.append(f"T: must be positive, got {T}")
    hcap = min(1.0, T) if T > 0 else 0.0
    n = kw.get("n", 16)
    if n < 1:
        errs.append(f"n: must be >= 1, got {n}")
    elif T > 0 and T / n > hcap:
        errs.append(f"n: step T/n = {T / n} exceeds min(1, T) = {hcap}")
    for i, h in enumerate(kw.get("h_levels", ())):
        if T > 0 and h > hcap:
            errs.append(f"h_levels[{i}]: step {h} exceeds min(1, T) = {hcap}")
        elif T > 0 and not _divides(h, T):
            errs.append(f"h_levels[{i}]: step {h} does not divide T={T}")
    h_ref = kw.get("h_ref")
    if h_ref is not None:
        if h_ref <= 0:
            errs.append(f"h_ref: must be positive, got {h_ref}")
        else:
            for i, h in enumerate(kw.get("h_levels", ())):
                if not _divides(h_ref, h):
                    errs.append(f"h_ref: {h_ref} does not divide h_levels[{i}]={h}")
    for name in ("N", "M"):
        if kw.get(name, 1) < 1:
            errs.append(f"{name}: must be >= 1, got {kw[name]}")
    N_ref = kw.get("N_ref")
    if N_ref is not None:
        for i, v in enumerate(kw.get("N_levels", ())):
            if N_ref <= v:
                errs.append(f"N_ref: {N_ref} must exceed N_levels[{i}]={v}")
            elif N_ref % v:
                errs.append(f"N_ref: N_levels[{i}]={v} does not divide N_ref={N_ref}")
    seed = kw.get("seed", 0)
    if not 0 <= seed < 2 ** 32:
        errs.append(f"seed: must lie in [0, 2^32), got {seed}")
    for name in ("q", "p"):
        if kw.get(name, 2.0) < 2:
            errs.append(f"{name}: must be >= 2, got {kw[name]}")
    if kw.get("x0_std", 0.0) < 0:
        errs.append(f"x0_std: must be non-negative, got {kw['x0_std']}")
    if kw.get("mode") == "commutative" and model is not None and model.m0 > 0:
        errs.append(f"mode: the commutative reduction requires no common noise, but model "
                    f"{model.name!r} has m0={model.m0} (set sigma0 = 0 or choose another mode)")
    if errs:
        raise ConfigError(errs)

    for name in ("T", "q", "p", "x0", "x0_std", "tolerance", "h_ref"):
        if name in kw:
            kw[name] = float(kw[name])
    if "h_levels" in kw:
        kw["h_levels"] = tuple(float(h) for h in kw["h_levels"])
    if "N_levels" in kw:
        kw["N_levels"] = tuple(int(v) for v in kw["N_levels"])
    if "slope_window" in kw:
        kw["slope_window"] = tuple(float(v) for v in kw["slope_window"])
    # canonicalise params through the model so defaults are explicit
    kw["model_params"] = {k: v for k, v in model.params.items()}
    return RunConfig(**kw)


def parse_config(text: str) -> RunConfig:
    """Parse and validate TOML configuration text."""
    try:
        raw = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError([f"<document>: not valid TOML ({exc})"]) from None
    return config_from_mapping(raw)


def require_for(cfg: RunConfig, subcommand: str):
    """Check that ``cfg`` carries what ``subcommand`` needs."""
    errs = []
    if subcommand not in SUBCOMMANDS:
        errs.append(f"<subcommand>: unknown subcommand {subcommand!r}")
    needs_levels = subcommand in ("convergence", "consistency", "quadrature", "moments")
    if needs_levels and len(cfg.h_levels) < 1:
        errs.append(f"h_levels: required by {subcommand}")
    if subcommand in ("convergence", "consistency", "quadrature") and 0 < len(cfg.h_levels) < 3:
        errs.append(f"h_levels: {subcommand} fits an order and needs at least 3 levels")
    if subcommand in ("convergence", "consistency", "poc", "moments") and cfg.M < 2:
        errs.append(f"M: {subcommand} needs at least 2 replicates, got {cfg.M}")
    if subcommand == "consistency" and cfg.h_ref is None:
        errs.append("h_ref: required by consistency")
    if subcommand == "convergence" and cfg.h_ref is None:
        model = cfg.build_model()
        if model.closed_form is None or not cfg.use_closed_form:
            errs.append(f"h_ref: required by convergence for model {cfg.model!r} "
                        "without a closed-form oracle")
    if subcommand == "poc":
        if not cfg.N_levels:
            errs.append("N_levels: required by poc")
        if cfg.N_ref is None:
            errs.append("N_ref: required by poc")
    if errs:
        raise ConfigError(errs)
