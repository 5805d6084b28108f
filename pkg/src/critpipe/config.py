"""Run configuration: a JSON file of documented keys plus env-var overrides.

Top-level keys:
  seed           int, global seed (default 0)
  queries        path to a queries JSONL (id/text/gold_answer/source/difficulty)
  backends       map backend_id -> backend block (see below)
  roles          {actor, critic, annotator, refiner, smoother} -> backend_id
  flaws          {strategy, budget, temperature}
  critiques      {strategy_by_hint overrides}
  filter         {k, tau, mode}
  test_time      {mode, K, rounds, oracle_gated, context_mode, temperature}
  self_improve   {iterations, n_samples, l_critiques, temperature, beta,
                  vanilla, trainer_hook, refinements_per_critique,
                  include_new_refinements, d_reason, d_refine}
  self_talk      {max_iters, insert_affirmations}

Backend blocks by kind:
  http       {kind, endpoint, model, api_key_env?, endpoint_env?,
              max_concurrency?, max_retries?, timeout?}
             CRITPIPE_ENDPOINT / CRITPIPE_API_KEY override globally.
  scripted   {kind, table, default?}   table: JSONL of {match, completions}
  simulated-actor / simulated-critic
             {kind, world} where world names a block under "worlds":
             {level_accuracy | accuracy, dominant_mass, distractor_pool,
              flag_flawed_prob, pass_correct_prob, fix_prob, keep_correct_prob}
"""

from __future__ import annotations

import json
import os
from pathlib import Path
from typing import Optional, Sequence

from .backends import (
    Gateway,
    HttpChatBackend,
    ScriptedBackend,
    SimulatedWorld,
    StochasticActorSpec,
    StochasticCriticSpec,
)
from .core import Query, load_queries
from .errors import ConfigError
from .jsonl import read_jsonl

DEFAULT_ROLES = {
    "actor": "actor",
    "critic": "critic",
    "annotator": "critic",
    "refiner": "actor",
    "smoother": "actor",
}


def load_config(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        config = json.loads(path.read_text("utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from exc
    if not isinstance(config, dict):
        raise ConfigError("config root must be an object")
    config.setdefault("seed", 0)
    config.setdefault("backends", {})
    config.setdefault("roles", {})
    return config


def load_query_file(path) -> list[Query]:
    try:
        return load_queries(read_jsonl(path))
    except FileNotFoundError as exc:
        raise ConfigError(f"queries file not found: {path}") from exc
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def _world_specs(block: dict) -> tuple[StochasticActorSpec, StochasticCriticSpec]:
    if "level_accuracy" in block:
        levels = tuple(block["level_accuracy"])
    else:
        levels = (float(block.get("accuracy", 0.5)),) * 5
    try:
        actor = StochasticActorSpec(
            level_accuracy=levels,
            dominant_mass=float(block.get("dominant_mass", 0.5)),
            distractor_pool=int(block.get("distractor_pool", 4)),
        )
        critic = StochasticCriticSpec(
            flag_flawed_prob=float(block.get("flag_flawed_prob", 0.8)),
            pass_correct_prob=float(block.get("pass_correct_prob", 0.8)),
            fix_prob=float(block.get("fix_prob", 0.3)),
            keep_correct_prob=float(block.get("keep_correct_prob", 0.9)),
        )
    except ValueError as exc:
        raise ConfigError(f"bad simulated world spec: {exc}") from exc
    return actor, critic


def build_gateway(config: dict, queries: Sequence[Query], base_dir: Optional[Path] = None) -> Gateway:
    """Construct and register every configured backend."""
    base_dir = Path(base_dir) if base_dir else Path(".")
    gateway = Gateway()
    worlds: dict[str, SimulatedWorld] = {}

    def world_for(name: str) -> SimulatedWorld:
        if name not in worlds:
            block = (config.get("worlds") or {}).get(name)
            if block is None:
                raise ConfigError(f"no world block named {name!r}")
            actor_spec, critic_spec = _world_specs(block)
            worlds[name] = SimulatedWorld(queries, actor_spec, critic_spec)
        return worlds[name]

    for backend_id, block in (config.get("backends") or {}).items():
        kind = block.get("kind")
        if kind == "http":
            endpoint = os.environ.get("CRITPIPE_ENDPOINT") or block.get("endpoint")
            if block.get("endpoint_env"):
                endpoint = os.environ.get(block["endpoint_env"], endpoint)
            if not endpoint:
                raise ConfigError(f"backend {backend_id}: http kind requires an endpoint")
            api_key = os.environ.get("CRITPIPE_API_KEY")
            if block.get("api_key_env"):
                api_key = os.environ.get(block["api_key_env"], api_key)
            gateway.register(
                backend_id,
                HttpChatBackend(
                    endpoint=endpoint,
                    model=block.get("model", ""),
                    api_key=api_key,
                    max_concurrency=int(block.get("max_concurrency", 4)),
                    max_retries=int(block.get("max_retries", 3)),
                    timeout=float(block.get("timeout", 60.0)),
                ),
            )
        elif kind == "scripted":
            table = block.get("table")
            if not table:
                raise ConfigError(f"backend {backend_id}: scripted kind requires a table path")
            gateway.register(
                backend_id,
                ScriptedBackend.from_jsonl(base_dir / table, default=block.get("default")),
            )
        elif kind == "simulated-actor":
            world = world_for(block.get("world", "default"))
            gateway.register(backend_id, world.actor_backend(backend_id))
        elif kind == "simulated-critic":
            world = world_for(block.get("world", "default"))
            gateway.register(backend_id, world.critic_backend(backend_id))
        else:
            raise ConfigError(f"backend {backend_id}: unknown kind {kind!r}")
    return gateway


def role_backend(config: dict, role: str) -> str:
    roles = {**DEFAULT_ROLES, **(config.get("roles") or {})}
    backend_id = roles.get(role)
    if backend_id is None:
        raise ConfigError(f"no backend configured for role {role!r}")
    return backend_id
