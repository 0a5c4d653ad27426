"""Experiment configuration: a flat ``key = value`` text format with typed keys.

Lines are ``key = value``; ``#`` starts a comment; blank lines are ignored.
Lists are comma separated. Unknown keys and unparsable values raise
``ConfigError``. Example::

    experiment = scaling
    N_grid = 4, 6, 8, 12
    d = 2
    beta = 1.0
    gamma = 0.5
    sweeps = 2000
    seed = 17
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from selfrepel.sampling import GibbsParams, MCMCConfig


class ConfigError(ValueError):
    """Raised for malformed or inconsistent experiment configuration."""


def _bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _int_list(s: str) -> tuple[int, ...]:
    return tuple(int(t) for t in s.replace(" ", "").split(",") if t)


def _float_list(s: str) -> tuple[float, ...]:
    return tuple(float(t) for t in s.replace(" ", "").split(",") if t)


# key -> (parser, ExperimentConfig attribute or "mcmc.<field>")
KEYS = {
    "experiment": (str, "experiment"),
    "N_grid": (_int_list, "N_grid"),
    "d": (int, "d"),
    "beta": (float, "beta"),
    "gamma": (float, "gamma"),
    "replicates": (int, "replicates"),
    "output_dir": (str, "output_dir"),
    "seed": (int, "seed"),
    "workers": (int, "workers"),
    "gamma_grid": (_float_list, "gamma_grid"),
    "min_ess": (float, "min_ess"),
    "max_sweeps": (int, "max_sweeps"),
    "sigma": (float, "mcmc.sigma"),
    "dilation_prob": (float, "mcmc.dilation_prob"),
    "dilation_width": (float, "mcmc.dilation_width"),
    "sweeps": (int, "mcmc.sweeps"),
    "burn_in": (int, "mcmc.burn_in"),
    "thin": (int, "mcmc.thin"),
    "adapt": (_bool, "mcmc.adapt"),
    "check_every": (int, "mcmc.check_every"),
}

EXPERIMENTS = ("scaling", "flory", "variance", "semigroup", "validate")


@dataclass(frozen=True)
class ExperimentConfig:
    experiment: str = "scaling"
    N_grid: tuple[int, ...] = (4, 6, 8, 12, 16, 24, 32)
    d: int = 2
    beta: float = 1.0
    gamma: float = 0.5
    replicates: int = 1
    output_dir: str = "runs"
    seed: int = 0
    workers: int = 1
    gamma_grid: tuple[float, ...] = ()
    min_ess: float = 50.0
    max_sweeps: int = 0
    mcmc: MCMCConfig = field(default_factory=MCMCConfig)

    def __post_init__(self):
        if self.experiment not in EXPERIMENTS:
            raise ConfigError(f"unknown experiment {self.experiment!r}; choose from {EXPERIMENTS}")
        if not self.N_grid or any(n < 1 for n in self.N_grid):
            raise ConfigError("N_grid must hold positive integers")
        if any(b <= a for a, b in zip(self.N_grid, self.N_grid[1:])):
            raise ConfigError(f"N_grid must be strictly increasing, got {self.N_grid}")
        if self.d < 1:
            raise ConfigError("d must be >= 1")
        if self.replicates < 1:
            raise ConfigError("replicates must be >= 1")
        if self.max_sweeps < 0:
            raise ConfigError("max_sweeps must be >= 0 (0 disables extension)")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")
        if not 0 <= self.seed < 2**64:
            raise ConfigError("seed must be a 64-bit unsigned integer")
        try:
            GibbsParams(self.beta, self.gamma)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        if self.mcmc.seed != self.seed:
            object.__setattr__(self, "mcmc", replace(self.mcmc, seed=self.seed))

    @property
    def params(self) -> GibbsParams:
        return GibbsParams(self.beta, self.gamma)

    def to_dict(self) -> dict:
        out = {f.name: getattr(self, f.name) for f in fields(self) if f.name != "mcmc"}
        out["N_grid"] = list(self.N_grid)
        out["gamma_grid"] = list(self.gamma_grid)
        out["mcmc"] = {f.name: getattr(self.mcmc, f.name) for f in fields(self.mcmc)}
        return out

    def with_overrides(self, overrides: dict[str, str]) -> "ExperimentConfig":
        return apply_overrides(self, overrides)


def parse_text(text: str) -> dict[str, str]:
    """Split config text into raw key/value strings, checking keys."""
    raw = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, value = (t.strip() for t in line.split("=", 1))
        if key not in KEYS:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if key in raw:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        raw[key] = value
    return raw


def apply_overrides(base: ExperimentConfig, raw: dict[str, str]) -> ExperimentConfig:
    top, mcmc = {}, {}
    for key, value in raw.items():
        if key not in KEYS:
            raise ConfigError(f"unknown key {key!r}")
        parser, target = KEYS[key]
        try:
            parsed = parser(value) if isinstance(value, str) else value
        except ValueError as exc:
            raise ConfigError(f"bad value for {key}: {value!r} ({exc})") from exc
        if target.startswith("mcmc."):
            mcmc[target[5:]] = parsed
        else:
            top[target] = parsed
    try:
        new_mcmc = replace(base.mcmc, **mcmc)
        return replace(base, mcmc=new_mcmc, **top)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path=None, overrides: dict[str, str] | None = None) -> ExperimentConfig:
    """Read a config file (if given) and apply command-line overrides on top."""
    raw = {}
    if path is not None:
        p = Path(path)
        try:
            raw = parse_text(p.read_text())
        except OSError as exc:
            raise ConfigError(f"cannot read config {p}: {exc}") from exc
    raw.update(overrides or {})
    return apply_overrides(ExperimentConfig(), raw)


def dump_config(cfg: ExperimentConfig) -> str:
    """Inverse of ``parse_text`` for every key."""
    lines = []
    for key, (_, target) in KEYS.items():
        obj = cfg.mcmc if target.startswith("mcmc.") else cfg
        v = getattr(obj, target.split(".")[-1])
        if isinstance(v, tuple):
            v = ", ".join(repr(x) for x in v)
        elif isinstance(v, bool):
            v = "true" if v else "false"
        lines.append(f"{key} = {v}")
    return "\n".join(lines) + "\n"
