"""INI configuration, override merging, digests and seed derivation."""
from __future__ import annotations

import configparser
import hashlib
import json
from dataclasses import dataclass, field
from importlib import resources

import numpy as np

from .errors import ConfigError

REQUIRED_KEYS = {
    "data": ("period_s", "trip_gap_s", "scheme", "max_len", "min_len"),
    "split": ("train", "val", "test", "chronological"),
    "model": ("architecture", "pooling", "fixed_length"),
    "train": ("optimizer", "learning_rate", "weight_decay", "batch_size", "max_epochs",
              "patience", "pad_mode", "dtype"),
    "experiment": ("seed", "n_seeds"),
}

# Named streams hanging off the root seed.
SEED_STREAMS = {"split": 0, "init": 1, "shuffle": 2, "degrade": 3, "synth": 4}


def derive_seed(root: int, stream: str, *index: int) -> int:
    """Deterministic child seed: SeedSequence(root) spawned along (stream, *index)."""
    key = (SEED_STREAMS[stream], *(int(i) for i in index))
    seq = np.random.SeedSequence(int(root), spawn_key=key)
    return int(seq.generate_state(1, dtype=np.uint32)[0])


def default_config_text() -> str:
    return resources.files("tmdnet").joinpath("data/default.ini").read_text()


@dataclass
class RunConfig:
    sections: dict = field(default_factory=dict)

    @classmethod
    def load(cls, path=None, overrides: dict | None = None) -> "RunConfig":
        """Defaults, then ``path``, then ``overrides`` ({"section.key": value})."""
        parser = configparser.ConfigParser(interpolation=None)
        parser.read_string(default_config_text())
        if path is not None:
            with open(path) as fh:
                parser.read_file(fh)
        sections = {s: dict(parser.items(s)) for s in parser.sections()}
        for dotted, value in (overrides or {}).items():
            if value is None:
                continue
            section, _, key = dotted.rpartition(".")
            if not section:
                raise ConfigError(f"override {dotted!r} must be section.key")
            sections.setdefault(section, {})[key] = str(value)
        cfg = cls(sections)
        cfg.validate()
        return cfg

    def validate(self) -> None:
        for section, keys in REQUIRED_KEYS.items():
            for key in keys:
                if key not in self.sections.get(section, {}):
                    raise ConfigError(f"missing required config key {section}.{key}")

    def get(self, section: str, key: str, default=None) -> str:
        try:
            return self.sections[section][key]
        except KeyError:
            if default is not None:
                return default
            raise ConfigError(f"missing config key {section}.{key}") from None

    def getint(self, section, key, default=None) -> int:
        return int(float(self.get(section, key, default)))

    def getfloat(self, section, key, default=None) -> float:
        return float(self.get(section, key, default))

    def optional_int(self, section, key):
        raw = self.get(section, key, "none").strip().lower()
        return None if raw in ("", "none", "variable", "/") else int(float(raw))

    @property
    def seed(self) -> int:
        return self.getint("experiment", "seed")

    def limits(self) -> dict:
        out = {}
        for name, values in self.sections.items():
            if name.startswith("limits."):
                try:
                    out[name.split(".", 1)[1]] = (float(values["max_speed_mps"]),
                                                  float(values["max_accel_mps2"]))
                except KeyError as exc:
                    raise ConfigError(f"missing config key {name}.{exc.args[0]}") from None
        return out

    def canonical(self) -> str:
        return json.dumps(self.sections, sort_keys=True, separators=(",", ":"))

    def digest(self) -> str:
        return hashlib.sha256(self.canonical().encode()).hexdigest()[:16]
