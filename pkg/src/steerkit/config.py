"""Server configuration: one text file, every key overridable by a flag.

Grammar: one `key value` pair per line; blank lines and lines starting
with `#` are ignored.  Keys and defaults:

    tick_ms      5
    workers      1
    fanout       4
    listen       127.0.0.1:7420
    http         127.0.0.1:7421
    scenario     builtin
    max_iter     200000
    tolerance    1e-3
    levels       75x75,150x150,300x300
    tau_fast_ms  500
    tau_idle_ms  2000

`scenario` is a file path, or the word `builtin` for the packaged
reference scene.  `levels` is coarsest to finest.
"""

from __future__ import annotations

import importlib.resources
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Tuple

from .errors import StartupError
from .heat import Scenario
from .hierarchy import LevelPolicy, LevelSpec


def _parse_address(text: str) -> Tuple[str, int]:
    host, sep, port = text.rpartition(":")
    if not sep or not host:
        raise ValueError(f"address must be host:port, got {text!r}")
    return host, int(port)


@dataclass(frozen=True)
class ServerConfig:
    tick_ms: float = 5.0
    workers: int = 1
    fanout: int = 4
    listen: Tuple[str, int] = ("127.0.0.1", 7420)
    http: Tuple[str, int] = ("127.0.0.1", 7421)
    scenario: str = "builtin"
    max_iter: int = 200_000
    tolerance: float = 1e-3
    levels: LevelSpec = field(default_factory=LevelSpec)
    tau_fast_ms: float = 500.0
    tau_idle_ms: float = 2000.0

    def policy(self) -> LevelPolicy:
        return LevelPolicy(self.tau_fast_ms, self.tau_idle_ms)

    def load_scenario(self) -> Scenario:
        """Read and validate the configured scenario."""
        if self.scenario == "builtin":
            text = (importlib.resources.files("steerkit") / "data"
                    / "reference.scn").read_text()
        else:
            path = Path(self.scenario)
            if not path.is_file():
                raise StartupError(f"scenario file not found: {path}")
            text = path.read_text()
        try:
            return Scenario.parse(text)
        except ValueError as e:
            raise StartupError(f"bad scenario {self.scenario}: {e}") from e


_PARSERS = {
    "tick_ms": float,
    "workers": int,
    "fanout": int,
    "listen": _parse_address,
    "http": _parse_address,
    "scenario": str,
    "max_iter": int,
    "tolerance": float,
    "levels": LevelSpec.parse,
    "tau_fast_ms": float,
    "tau_idle_ms": float,
}


def parse_config(text: str) -> ServerConfig:
    """Parse the config file grammar; unknown keys and bad values are
    startup errors naming the offending line."""
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, _, rest = line.partition(" ")
        rest = rest.strip()
        parser = _PARSERS.get(key)
        if parser is None:
            raise StartupError(f"config line {lineno}: unknown key {key!r}")
        if not rest:
            raise StartupError(f"config line {lineno}: {key} needs a value")
        try:
            values[key] = parser(rest)
        except ValueError as e:
            raise StartupError(f"config line {lineno}: {e}") from e
    return validated(ServerConfig(**values))


def load_config(path: Optional[str], overrides: dict) -> ServerConfig:
    """Config file (if any) plus command line overrides, validated."""
    if path is not None:
        file = Path(path)
        if not file.is_file():
            raise StartupError(f"config file not found: {path}")
        config = parse_config(file.read_text())
    else:
        config = ServerConfig()
    cleaned = {}
    for key, value in overrides.items():
        if value is None:
            continue
        if key not in _PARSERS:
            raise StartupError(f"unknown config key {key!r}")
        try:
            cleaned[key] = (_PARSERS[key](value)
                            if isinstance(value, str) else value)
        except ValueError as e:
            raise StartupError(f"bad --{key}: {e}") from e
    return validated(replace(config, **cleaned))


def validated(config: ServerConfig) -> ServerConfig:
    if config.tick_ms <= 0:
        raise StartupError("tick_ms must be positive")
    if config.workers < 1:
        raise StartupError("workers must be at least 1")
    if config.fanout < 2:
        raise StartupError("fanout must be at least 2")
    if config.max_iter < 1:
        raise StartupError("max_iter must be at least 1")
    if config.tolerance <= 0:
        raise StartupError("tolerance must be positive")
    if not 0 < config.tau_fast_ms < config.tau_idle_ms:
        raise StartupError("need 0 < tau_fast_ms < tau_idle_ms")
    coarse_h = config.levels.dims(config.levels.coarsest)[1]
    if config.workers > coarse_h:
        raise StartupError(
            f"workers={config.workers} exceeds the coarsest grid height "
            f"{coarse_h}")
    return config
