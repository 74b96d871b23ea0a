"""Run configuration: one JSON tree per run, merged over package defaults.

CLI flags override file values; the fully resolved tree is written next to
every command's outputs so a run can always be reproduced from its artifacts.
"""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

from .augment import ALL_ACTIONS, AugAction, OperatorParams, action_preset
from .backbones import BackboneConfig
from .data import PopulationSpec, SyntheticSpec
from .engine import TtaConfig
from .policy import PpoConfig, RewardConfig
from .study import GroupSpec

OUT_DIR_ENV = "SEQTTA_OUT"


class UsageError(Exception):
    pass


@dataclass
class DataConfig:
    source: str = "synthetic"      # "synthetic" or "file"
    path: str = None
    format: str = "auto"
    k_core: int = 5
    synthetic: SyntheticSpec = field(default_factory=lambda: SyntheticSpec(
        populations=[PopulationSpec(num_users=300, transition_seed=1),
                     PopulationSpec(num_users=300, transition_seed=2, noise_rate=0.4)],
        num_items=100,
        rng_seed=0,
    ))

    def validate(self):
        if self.source not in ("synthetic", "file"):
            raise UsageError(f"data.source must be 'synthetic' or 'file', got {self.source!r}")
        if self.source == "file" and not self.path:
            raise UsageError("data.source='file' requires data.path")
        if self.k_core < 1:
            raise UsageError("data.k_core must be >= 1")
        return self


@dataclass
class RunConfig:
    seed: int = 0
    out_dir: str = None
    threads: int = 1
    eval_split: str = "test"
    actions: object = "all"        # "all", preset size 5..8, or a name list
    data: DataConfig = field(default_factory=DataConfig)
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    operators: OperatorParams = field(default_factory=OperatorParams)
    tta: TtaConfig = field(default_factory=TtaConfig)
    reward: RewardConfig = field(default_factory=RewardConfig)
    ppo: PpoConfig = field(default_factory=PpoConfig)
    study: GroupSpec = field(default_factory=GroupSpec)

    def resolve(self):
        if self.out_dir is None:
            self.out_dir = os.environ.get(OUT_DIR_ENV, "runs")
        if self.threads < 1:
            raise UsageError("threads must be >= 1")
        if self.eval_split not in ("test", "valid"):
            raise UsageError("eval_split must be 'test' or 'valid'")
        self.data.validate()
        self.backbone.validate()
        self.operators.validate()
        self.tta.validate()
        self.reward.validate()
        self.ppo.validate()
        self.study.validate()
        self.resolve_actions()
        return self

    def resolve_actions(self):
        spec = self.actions
        if spec == "all":
            return ALL_ACTIONS
        if isinstance(spec, int):
            return action_preset(spec)
        if isinstance(spec, (list, tuple)):
            return tuple(AugAction.from_name(a) for a in spec)
        raise UsageError(f"actions must be 'all', 5..8, or a list, got {spec!r}")

    def to_dict(self):
        return dataclasses.asdict(self)

    def dump(self):
        return json.dumps(self.to_dict(), sort_keys=True, indent=2, default=list) + "\n"

    def write_resolved(self, out_dir):
        path = Path(out_dir) / "resolved_config.json"
        path.write_text(self.dump(), encoding="utf-8")
        return path


def _assign(obj, key, raw, path):
    current = getattr(obj, key)
    where = f"{path}.{key}" if path else key
    if dataclasses.is_dataclass(current) and isinstance(raw, dict):
        _merge_into(current, raw, where)
    elif key == "populations":
        if not isinstance(raw, list):
            raise UsageError(f"{where} must be a list")
        pops = []
        for i, entry in enumerate(raw):
            pop = PopulationSpec(num_users=1)
            _merge_into(pop, entry, f"{where}[{i}]")
            pops.append(pop)
        setattr(obj, key, pops)
    elif key == "tiers":
        setattr(obj, key, tuple((float(t), float(r)) for t, r in raw))
    elif isinstance(current, tuple) and isinstance(raw, (list, tuple)):
        setattr(obj, key, tuple(raw))
    else:
        setattr(obj, key, raw)


def _merge_into(obj, data, path=""):
    if not isinstance(data, dict):
        raise UsageError(f"config section {path or '<root>'} must be an object")
    names = {f.name for f in dataclasses.fields(obj)}
    for key, raw in data.items():
        if key not in names:
            raise UsageError(f"unknown config key {path + '.' if path else ''}{key}")
        _assign(obj, key, raw, path)


def load_config(path=None, overrides=None):
    """Defaults <- optional JSON file <- optional dotted-key overrides."""
    cfg = RunConfig()
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise UsageError(f"config file not found: {p}")
        try:
            data = json.loads(p.read_text(encoding="utf-8"))
        except json.JSONDecodeError as e:
            raise UsageError(f"config file {p} is not valid JSON: {e}") from e
        _merge_into(cfg, data)
    for dotted, raw in (overrides or []):
        node = cfg
        parts = dotted.split(".")
        for part in parts[:-1]:
            if not hasattr(node, part):
                raise UsageError(f"unknown config key {dotted}")
            node = getattr(node, part)
        if not dataclasses.is_dataclass(node) or parts[-1] not in {
                f.name for f in dataclasses.fields(node)}:
            raise UsageError(f"unknown config key {dotted}")
        _assign(node, parts[-1], raw, ".".join(parts[:-1]))
    return cfg
