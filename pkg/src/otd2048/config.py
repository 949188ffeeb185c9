"""Run configuration and manifests.

Config files are plain ``key = value`` lines under bracketed sections
([network], [train], [search], [output], plus [stage2], [stage3], ... for
per-stage hyperparameter overrides); lists are comma-separated. The same
format doubles as the run manifest: before training starts the fully
resolved configuration is written next to the outputs, together with a
[meta] section (seed, start time, code version), and is sufficient to
reproduce a single-threaded run bit-exactly.
"""

from __future__ import annotations

import configparser
import datetime as _dt
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional

from .geometry import TupleSpec, parse_tuples, resolve_tuples
from .learner import TrainConfig, default_stage_triggers
from .network import NetworkConfig
from .search import SearchConfig


class ConfigError(Exception):
    """Invalid configuration; the message names the offending key."""


@dataclass
class RunSetup:
    """Everything a training or evaluation run needs."""

    network: NetworkConfig
    train: TrainConfig
    stage_overrides: dict[int, dict]
    search: SearchConfig
    out_dir: Optional[Path]
    tuples_source: str

    def stage_train(self, stage: int) -> TrainConfig:
        """TrainConfig for 0-based stage, with [stageN] overrides applied."""
        overrides = self.stage_overrides.get(stage + 1, {})
        return replace(self.train, **overrides) if overrides else self.train


_TRAIN_KEYS = {
    "episodes": int,
    "v_init": float,
    "p_tc": float,
    "alpha_td": float,
    "alpha_tc": float,
    "eval_interval": int,
    "eval_episodes": int,
    "threads": int,
    "seed": int,
    "backward": bool,
}
_STAGE_KEYS = {"episodes", "v_init", "p_tc", "alpha_td", "alpha_tc", "seed"}


def _convert(section: str, key: str, conv, raw: str):
    try:
        if conv is bool:
            low = raw.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(f"not a boolean: {raw!r}")
        return conv(raw)
    except ValueError as exc:
        raise ConfigError(f"{section}.{key}: {exc}") from None


def _parse_triggers(section: str, raw: str) -> tuple[frozenset[int], ...]:
    triggers = []
    for part in raw.split(","):
        part = part.strip()
        if not part:
            continue
        try:
            triggers.append(frozenset(int(tok) for tok in part.split("+")))
        except ValueError:
            raise ConfigError(f"{section}.stage_triggers: bad trigger {part!r}") from None
    return tuple(triggers)


def load_setup(path: str | Path) -> RunSetup:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    parser = configparser.ConfigParser()
    try:
        parser.read(path)
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from None

    known = {"network", "train", "search", "output", "meta"}
    for section in parser.sections():
        if section in known or (section.startswith("stage") and section[5:].isdigit()):
            continue
        raise ConfigError(f"unknown section [{section}]")

    # network
    net = parser["network"] if parser.has_section("network") else {}
    for key in net:
        if key not in ("name", "tuples", "geometry", "cardinality", "stages"):
            raise ConfigError(f"network.{key}: unknown key")
    name = net.get("name", "net")
    tuples_source = net.get("tuples", "4x6")
    if "geometry" in net:
        text = "\n".join(part.strip() for part in net["geometry"].split(";"))
        tuples = parse_tuples(text, source=f"{path}:network.geometry")
    else:
        try:
            tuples = resolve_tuples(tuples_source)
        except FileNotFoundError as exc:
            raise ConfigError(f"network.tuples: {exc}") from None
        except ValueError as exc:
            raise ConfigError(f"network.tuples: {exc}") from None
    cardinality = _convert("network", "cardinality", int, net.get("cardinality", "16"))
    stages = _convert("network", "stages", int, net.get("stages", "1"))
    try:
        network = NetworkConfig(tuples, cardinality=cardinality, stages=stages, name=name)
    except ValueError as exc:
        raise ConfigError(f"network: {exc}") from None

    # train
    tr = parser["train"] if parser.has_section("train") else {}
    kwargs = {}
    for key in tr:
        if key == "stage_triggers":
            kwargs["stage_triggers"] = _parse_triggers("train", tr[key])
        elif key in _TRAIN_KEYS:
            kwargs[key] = _convert("train", key, _TRAIN_KEYS[key], tr[key])
        else:
            raise ConfigError(f"train.{key}: unknown key")
    kwargs.setdefault("episodes", 0)
    if "stage_triggers" not in kwargs and stages > 1:
        kwargs["stage_triggers"] = default_stage_triggers(stages)
    try:
        train = TrainConfig(**kwargs)
    except ValueError as exc:
        raise ConfigError(f"train: {exc}") from None
    if stages > 1 and len(train.stage_triggers) != stages - 1:
        raise ConfigError(f"train.stage_triggers: expected {stages - 1} triggers for {stages} stages")

    # per-stage overrides
    stage_overrides: dict[int, dict] = {}
    for section in parser.sections():
        if not (section.startswith("stage") and section[5:].isdigit()):
            continue
        idx = int(section[5:])
        if not 2 <= idx <= stages:
            raise ConfigError(f"[{section}]: network has {stages} stage(s)")
        overrides = {}
        for key in parser[section]:
            if key not in _STAGE_KEYS:
                raise ConfigError(f"{section}.{key}: unknown key")
            overrides[key] = _convert(section, key, _TRAIN_KEYS[key], parser[section][key])
        stage_overrides[idx] = overrides

    # search
    se = parser["search"] if parser.has_section("search") else {}
    for key in se:
        if key not in ("plies", "tt_mb", "downgrade"):
            raise ConfigError(f"search.{key}: unknown key")
    try:
        search = SearchConfig(
            plies=_convert("search", "plies", int, se.get("plies", "1")),
            tt_bytes=_convert("search", "tt_mb", int, se.get("tt_mb", "0")) << 20,
            downgrade=_convert("search", "downgrade", bool, se.get("downgrade", "false")),
        )
    except ValueError as exc:
        raise ConfigError(f"search: {exc}") from None

    out = parser["output"] if parser.has_section("output") else {}
    for key in out:
        if key != "dir":
            raise ConfigError(f"output.{key}: unknown key")
    out_dir = Path(out["dir"]) if "dir" in out else None

    return RunSetup(
        network=network,
        train=train,
        stage_overrides=stage_overrides,
        search=search,
        out_dir=out_dir,
        tuples_source=tuples_source,
    )


def manifest_text(setup: RunSetup, version: str, weight_paths: list[str]) -> str:
    """Fully resolved config plus provenance; loadable by load_setup."""
    cfg = configparser.ConfigParser()
    net = setup.network
    cfg["network"] = {
        "name": net.name,
        "tuples": setup.tuples_source,
        "geometry": "; ".join(str(t) for t in net.tuples),
        "cardinality": str(net.cardinality),
        "stages": str(net.stages),
    }
    tr = setup.train
    cfg["train"] = {
        "episodes": str(tr.episodes),
        "v_init": repr(tr.v_init),
        "p_tc": repr(tr.p_tc),
        "alpha_td": repr(tr.alpha_td),
        "alpha_tc": repr(tr.alpha_tc),
        "eval_interval": str(tr.eval_interval),
        "eval_episodes": str(tr.eval_episodes),
        "threads": str(tr.threads),
        "seed": str(tr.seed),
        "backward": str(tr.backward).lower(),
    }
    if tr.stage_triggers:
        cfg["train"]["stage_triggers"] = ", ".join(
            "+".join(str(v) for v in sorted(t, reverse=True)) for t in tr.stage_triggers
        )
    for idx, overrides in sorted(setup.stage_overrides.items()):
        cfg[f"stage{idx}"] = {k: repr(v) if isinstance(v, float) else str(v) for k, v in overrides.items()}
    cfg["search"] = {
        "plies": str(setup.search.plies),
        "tt_mb": str(setup.search.tt_bytes >> 20),
        "downgrade": str(setup.search.downgrade).lower(),
    }
    if setup.out_dir is not None:
        cfg["output"] = {"dir": str(setup.out_dir)}
    cfg["meta"] = {
        "version": version,
        "started": _dt.datetime.now(_dt.timezone.utc).isoformat(),
        "weights": ", ".join(weight_paths),
    }
    lines = []
    for section in cfg.sections():
        lines.append(f"[{section}]")
        for key, value in cfg[section].items():
            lines.append(f"{key} = {value}")
        lines.append("")
    return "\n".join(lines)
