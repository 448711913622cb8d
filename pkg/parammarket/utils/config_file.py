"""
Run configuration files.

This module reads the keyed text files describing a market or a sweep and
validates them against the configuration models. Every schema problem is
reported as a ConfigError naming the offending line and `section.key`.

Example:
    [market]
    seed = 0
    rounds = 100

    [agent.a]
    n = 500
    noise = 0.5

    [agent.b]
    n = 800
    noise = 0.5

    [broker]
    n = 10000
"""

import configparser
import logging
import re
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Type, Union

from pydantic import BaseModel, ValidationError

from parammarket.exceptions import ConfigError
from parammarket.models.config import AgentSpec, BrokerSpec, MarketConfig, MlpSpec, SweepAxis, SweepConfig

logger = logging.getLogger(__name__)

AGENT_PREFIX = "agent."
SECTION_MODELS: Dict[str, Type[BaseModel]] = {
    "market": MarketConfig,
    "broker": BrokerSpec,
    "mlp": MlpSpec,
    "sweep": SweepConfig,
}
# keys filled from sections rather than written inside [market] or [sweep]
NESTED_FIELDS = {"agents", "broker", "mlp", "market"}

_HEADER = re.compile(r"^\s*\[([^\]]+)\]")
_KEY = re.compile(r"^\s*([^=:#;\s][^=:]*?)\s*[=:]")


class ConfigSource:
    """Raw text of a configuration file with line lookup."""

    def __init__(self, text: str, name: str = "<config>"):
        self.text = text
        self.name = name
        self.lines = text.splitlines()

    def locate(self, section: Optional[str], key: Optional[str] = None) -> Optional[int]:
        """1-based line of a key inside a section, or of the section header."""
        current = None
        for number, line in enumerate(self.lines, start=1):
            header = _HEADER.match(line)
            if header:
                current = header.group(1).strip()
                if key is None and current == section:
                    return number
                continue
            match = _KEY.match(line)
            if match and current == section and match.group(1).strip().lower() == key:
                return number
        return None


def _parser(source: ConfigSource) -> configparser.ConfigParser:
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    try:
        parser.read_string(source.text, source=source.name)
    except configparser.DuplicateSectionError as e:
        raise ConfigError(f"duplicate section [{e.section}]", e.lineno, e.section)
    except configparser.DuplicateOptionError as e:
        raise ConfigError(f"duplicate key {e.option!r}", e.lineno, f"{e.section}.{e.option}")
    except configparser.MissingSectionHeaderError as e:
        raise ConfigError("key outside of any section", e.lineno)
    except configparser.ParsingError as e:
        line = e.errors[0][0] if e.errors else None
        raise ConfigError("unparsable line", line)
    return parser


def _check_keys(source: ConfigSource, section: str, keys, model: Type[BaseModel], skip=()) -> None:
    allowed = set(model.model_fields) - NESTED_FIELDS - set(skip)
    for key in keys:
        if key not in allowed:
            raise ConfigError(f"unknown key (expected one of {sorted(allowed)})", source.locate(section, key), f"{section}.{key}")


def _split(value: str, separator: str) -> List[str]:
    return [item.strip() for item in value.split(separator) if item.strip()]


def _sections(source: ConfigSource, parser: configparser.ConfigParser) -> Tuple[dict, List[str]]:
    """Raw market dictionary and the agent section names in file order."""
    market: dict = {}
    agents, agent_sections = [], []
    for section in parser.sections():
        values = dict(parser[section])
        if section.startswith(AGENT_PREFIX):
            agent_id = section[len(AGENT_PREFIX):].strip()
            _check_keys(source, section, values, AgentSpec, skip=("id",))
            agents.append({"id": agent_id, **values})
            agent_sections.append(section)
        elif section in ("market", "broker", "mlp"):
            _check_keys(source, section, values, SECTION_MODELS[section])
            if section == "market":
                market.update(values)
            else:
                if section == "mlp" and "layer_set" in values:
                    values["layer_set"] = _split(values["layer_set"], ",")
                market[section] = values
        elif section != "sweep":
            raise ConfigError(f"unknown section [{section}]", source.locate(section), section)
    if not agents:
        raise ConfigError("no [agent.<id>] sections", None, "agents")
    market["agents"] = agents
    return market, agent_sections


def _field_of(source: ConfigSource, loc: tuple, agent_sections: List[str], root: str) -> Tuple[str, Optional[int]]:
    """Map a validation error location to `section.key` and a line."""
    loc = tuple(loc)
    if loc and loc[0] == "market":
        loc, root = loc[1:], "market"
    if not loc:
        return root, source.locate(root)
    if loc[0] == "agents" and len(loc) >= 2 and isinstance(loc[1], int):
        # validated agents are not reordered until the list validator succeeds
        section = agent_sections[loc[1]] if loc[1] < len(agent_sections) else "agents"
        if len(loc) >= 3:
            return f"{section}.{loc[2]}", source.locate(section, str(loc[2]))
        return section, source.locate(section)
    if loc[0] in ("broker", "mlp"):
        if len(loc) >= 2:
            return f"{loc[0]}.{loc[1]}", source.locate(loc[0], str(loc[1]))
        return loc[0], source.locate(loc[0])
    key = str(loc[0])
    line = source.locate(root, key)
    return f"{root}.{key}", line if line is not None else source.locate(root)


def _validate(model: Type[BaseModel], payload: dict, source: ConfigSource, agent_sections: List[str], root: str):
    try:
        return model.model_validate(payload)
    except ValidationError as e:
        error = e.errors()[0]
        field, line = _field_of(source, error["loc"], agent_sections, root)
        message = error["msg"].removeprefix("Value error, ")
        raise ConfigError(message, line, field) from e


def parse_market_config(text: str, name: str = "<config>") -> MarketConfig:
    """
    Parse and validate a market configuration.

    Raises:
        ConfigError: If the text is malformed or violates the schema
    """
    source = ConfigSource(text, name)
    parser = _parser(source)
    if not parser.has_section("market"):
        raise ConfigError("missing [market] section", None, "market")
    market, agent_sections = _sections(source, parser)
    return _validate(MarketConfig, market, source, agent_sections, "market")


def parse_sweep_config(text: str, name: str = "<config>") -> SweepConfig:
    """
    Parse and validate a sweep: a [sweep] section on top of a market.

    Axis values are comma separated; layer sets are separated by '|'.

    Raises:
        ConfigError: If the text is malformed or violates the schema
    """
    source = ConfigSource(text, name)
    parser = _parser(source)
    if not parser.has_section("sweep"):
        raise ConfigError("missing [sweep] section", None, "sweep")
    if not parser.has_section("market"):
        raise ConfigError("missing [market] section", None, "market")
    market, agent_sections = _sections(source, parser)
    sweep = dict(parser["sweep"])
    _check_keys(source, "sweep", sweep, SweepConfig)
    separator = "|" if sweep.get("axis", "").strip() == SweepAxis.LAYERS.value else ","
    sweep["values"] = _split(sweep.get("values", ""), separator)
    sweep["market"] = market
    return _validate(SweepConfig, sweep, source, agent_sections, "sweep")


def _read(path: Union[str, Path]) -> Tuple[str, str]:
    path = Path(path)
    try:
        return path.read_text(encoding="utf-8"), str(path)
    except OSError as e:
        raise ConfigError(f"cannot read {path}: {e.strerror}")


def load_market_config(path: Union[str, Path]) -> MarketConfig:
    text, name = _read(path)
    config = parse_market_config(text, name)
    logger.info(f"Loaded market config {name} ({len(config.agents)} agents)")
    return config


def load_sweep_config(path: Union[str, Path]) -> SweepConfig:
    text, name = _read(path)
    config = parse_sweep_config(text, name)
    logger.info(f"Loaded sweep config {name} (axis {config.axis.value})")
    return config


def is_sweep_file(path: Union[str, Path]) -> bool:
    """Whether a config file carries a [sweep] section."""
    text, name = _read(path)
    return _parser(ConfigSource(text, name)).has_section("sweep")
