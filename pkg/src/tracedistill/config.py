"""Run configuration: one JSON document drives every pipeline stage.

Relative paths in the config resolve against the config file's directory,
so a config can travel with its data. Backend profiles are declared per
role (generation, embedding, reward, judge, and optionally one per cascade
agent); every backend is wrapped in the shared on-disk cache under the
working directory.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

from .backends import BackendProfile, ConfigError, make_backend
from .evalharness import EvalError, MatchPolicy
from .filtering import STRATEGIES

CONFIG_SCHEMA_VERSION = 1
REQUIRED_ROLES = ("generation", "embedding", "reward", "judge")
# agent roles default to the generation profile; "verifier_verify" lets the
# verification pass run on a different backend than the evidence pass
AGENT_ROLES = ("parser", "decomposer", "verifier", "verifier_verify")


@dataclass
class RunConfig:
    seed: int
    k: int
    n_candidates: int
    strategy: str
    temperature: float
    max_tokens: int
    held_out_fraction: float
    normalization: str
    reward_threshold: float
    leave_one_out: bool
    workers: int
    seed_path: Path
    pool_path: Path
    workdir: Path
    gold_path: Path | None
    policy: MatchPolicy
    profiles: dict[str, BackendProfile]
    config_path: Path
    config_hash: str
    raw: dict = field(repr=False, default_factory=dict)


def config_sha256(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _resolve(base, value):
    path = Path(value)
    return path if path.is_absolute() else (base / path)


def _parse_policy(raw):
    try:
        return MatchPolicy(**raw)
    except (TypeError, EvalError) as exc:
        raise ConfigError(f"invalid policy: {exc}") from exc


def _parse_profile(role, raw):
    try:
        return BackendProfile(**raw)
    except (TypeError, ConfigError) as exc:
        raise ConfigError(f"invalid backend profile {role!r}: {exc}") from exc


def load_config(path):
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except ValueError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from exc
    version = raw.get("schema_version")
    if version != CONFIG_SCHEMA_VERSION:
        raise ConfigError(
            f"unsupported config schema_version {version!r}; expected {CONFIG_SCHEMA_VERSION}"
        )

    base = path.parent
    paths = raw.get("paths") or {}
    for key in ("seed", "pool", "workdir"):
        if key not in paths:
            raise ConfigError(f"paths.{key} is required")
    seed_path = _resolve(base, paths["seed"])
    pool_path = _resolve(base, paths["pool"])
    workdir = _resolve(base, paths["workdir"])
    gold_path = _resolve(base, paths["gold"]) if paths.get("gold") else None
    for name, p in (("paths.seed", seed_path), ("paths.pool", pool_path)):
        if not p.exists():
            raise ConfigError(f"{name} does not exist: {p}")
    if gold_path is not None and not gold_path.exists():
        raise ConfigError(f"paths.gold does not exist: {gold_path}")

    k = int(raw.get("k", 5))
    if k < 0:
        raise ConfigError("k must be >= 0")
    strategy = raw.get("strategy", "average")
    if strategy not in STRATEGIES:
        raise ConfigError(f"unknown strategy {strategy!r}; expected one of {STRATEGIES}")

    backends_raw = raw.get("backends") or {}
    profiles = {}
    for role in REQUIRED_ROLES:
        if role not in backends_raw:
            raise ConfigError(f"backends.{role} is required")
        profiles[role] = _parse_profile(role, backends_raw[role])
    for role in AGENT_ROLES:
        if role in backends_raw:
            profiles[role] = _parse_profile(role, backends_raw[role])

    return RunConfig(
        seed=int(raw.get("seed", 0)),
        k=k,
        n_candidates=int(raw.get("n_candidates", 4)),
        strategy=strategy,
        temperature=float(raw.get("temperature", 0.1)),
        max_tokens=int(raw.get("max_tokens", 1024)),
        held_out_fraction=float(raw.get("held_out_fraction", 0.25)),
        normalization=raw.get("normalization", "zscore"),
        reward_threshold=float(raw.get("reward_threshold", 0.0)),
        leave_one_out=bool(raw.get("leave_one_out", True)),
        workers=int(raw.get("workers", 4)),
        seed_path=seed_path,
        pool_path=pool_path,
        workdir=workdir,
        gold_path=gold_path,
        policy=_parse_policy(raw.get("policy") or {}),
        profiles=profiles,
        config_path=path,
        config_hash=config_sha256(path),
        raw=raw,
    )


def build_backends(config):
    """One cached backend per declared role; agent roles default to generation."""
    backends = {}
    for role, profile in config.profiles.items():
        cache_dir = profile.cache_dir or str(config.workdir / "cache" / role)
        backends[role] = make_backend(profile, cache_dir=cache_dir)
    for role in ("parser", "decomposer", "verifier"):
        backends.setdefault(role, backends["generation"])
    backends.setdefault("verifier_verify", backends["verifier"])
    return backends
