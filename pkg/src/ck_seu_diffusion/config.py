"""
Campaign definition files.

---
name: down-sa-wv
seed: 7
trials: 50
threads: 4
metrics: [clip_score, relative_deviation]
model: {steps: 10}
targets:
  - {block: down, level: [0, 1], transformer: [0, 1], layer: [sa, ca], matrix: wv}
  - {block: mid, layer: ffn, matrix: w1, bit: 13, element: 5}

Selector fields and the bit of a target may be lists; the target expands to every
combination. `element` is an index or "random" (default).
"""
from dataclasses import replace
import itertools
import json
import logging
import os
from typing import Any

import yaml

from .campaign_runner import BUNDLED_PROMPTS, CampaignConfig
from .errors import InvalidSelector, ParseError, ValidationError
from .fault_injector import Explicit, InjectionSpec, UniformRandom
from .half16_codec import CRITICAL_BIT
from .naming_scheme import TensorSelector
from .quality_metrics import DEFAULT_TAU, MetricName
from .toy_diffusion_model import DiffuserConfig
from .util import canonical_json, check_integer, sha256_hex

TOP_LEVEL_KEYS = {'name', 'seed', 'trials', 'threads', 'prompts', 'metrics', 'tau', 'model', 'checkpoint', 'targets'}
TARGET_KEYS = {'block', 'level', 'transformer', 'layer', 'matrix', 'bit', 'element', 'element_seed'}

logger = logging.getLogger('config')


def read_structured_file(path: str) -> Any:
    file_extension = path.rsplit('.', 1)[-1].lower()
    with open(path, 'r') as f:
        try:
            match file_extension:
                case 'json':
                    return json.load(f)
                case 'yaml' | 'yml':
                    return yaml.safe_load(f)
                case _:
                    raise ParseError(f"{path}: unsupported file extension {file_extension!r}")
        except (yaml.YAMLError, json.JSONDecodeError) as e:
            raise ParseError(f"{path}: {e}") from e


def _check_keys(data: Any, allowed: set[str], path: str) -> None:
    if not isinstance(data, dict):
        raise ValidationError(path, 'expected a mapping')
    for key in data:
        if key not in allowed:
            raise ValidationError(f"{path}.{key}" if path else str(key), 'unknown key')


def _as_list(value: Any) -> list:
    return value if isinstance(value, list) else [value]


def _targets(entries: Any) -> list[InjectionSpec]:
    if not isinstance(entries, list) or not entries:
        raise ValidationError('targets', 'expected a non-empty list')
    specs = []
    for i, entry in enumerate(entries):
        path = f"targets[{i}]"
        _check_keys(entry, TARGET_KEYS, path)
        for key in ('block', 'layer', 'matrix'):
            if key not in entry:
                raise ValidationError(f"{path}.{key}", 'missing')
        bits = [check_integer(b, f"{path}.bit", 0) for b in _as_list(entry.get('bit', CRITICAL_BIT))]
        if any(b > 15 for b in bits):
            raise ValidationError(f"{path}.bit", 'must be <= 15')
        element = entry.get('element', 'random')
        if element == 'random':
            seed = entry.get('element_seed')
            policy = UniformRandom(None if seed is None else check_integer(seed, f"{path}.element_seed", 0))
        else:
            policy = Explicit(check_integer(element, f"{path}.element", 0))
        combos = itertools.product(*(_as_list(entry.get(key, 0)) for key in ('block', 'level', 'transformer', 'layer', 'matrix')))
        for block, level, transformer, layer, matrix in combos:
            try:
                selector = TensorSelector(block, check_integer(level, f"{path}.level", 0),
                                          check_integer(transformer, f"{path}.transformer", 0), layer, matrix)
            except InvalidSelector as e:
                raise ValidationError(path, str(e)) from e
            specs.extend(InjectionSpec(selector, bit, policy) for bit in bits)
    return specs


def config_from_dict(data: Any) -> CampaignConfig:
    _check_keys(data, TOP_LEVEL_KEYS, '')
    if 'targets' not in data:
        raise ValidationError('targets', 'missing')
    prompts = data.get('prompts', list(BUNDLED_PROMPTS))
    if not isinstance(prompts, list) or not all(isinstance(p, str) for p in prompts):
        raise ValidationError('prompts', 'expected a list of strings')
    try:
        metrics = tuple(MetricName(m) for m in data.get('metrics', list(MetricName)))
    except ValueError as e:
        raise ValidationError('metrics', str(e)) from e
    tau = data.get('tau', DEFAULT_TAU)
    if isinstance(tau, bool) or not isinstance(tau, (int, float)):
        raise ValidationError('tau', f"expected a number, got {tau!r}")
    model = data.get('model') or {}
    if not isinstance(model, dict):
        raise ValidationError('model', 'expected a mapping')
    checkpoint = data.get('checkpoint')
    if checkpoint is not None and not isinstance(checkpoint, str):
        raise ValidationError('checkpoint', 'expected a path')
    cfg = CampaignConfig(
        targets=tuple(_targets(data['targets'])),
        prompts=tuple(prompts),
        trials=check_integer(data.get('trials', 50), 'trials', 1),
        master_seed=check_integer(data.get('seed', 0), 'seed', 0),
        metrics=metrics,
        tau=float(tau),
        model=DiffuserConfig.from_dict(model),
        checkpoint=checkpoint,
        threads=check_integer(data.get('threads', 1), 'threads', 1),
        name=str(data.get('name', 'campaign')))
    return cfg.validate()


def load_config(path: str) -> CampaignConfig:
    """Parse and validate a YAML or JSON campaign file"""
    data = read_structured_file(path)
    cfg = config_from_dict(data)
    if cfg.checkpoint and not os.path.isabs(cfg.checkpoint):
        cfg = replace(cfg, checkpoint=os.path.join(os.path.dirname(path), cfg.checkpoint))
    logger.debug(f"{path}: {len(cfg.targets)} targets, {cfg.trials} trials, {len(cfg.prompts)} prompts")
    return cfg


def config_to_dict(cfg: CampaignConfig) -> dict:
    """Fully expanded form of cfg; one entry per target"""
    targets = []
    for spec in cfg.targets:
        target = spec.target.to_dict() | {'bit': spec.bit}
        match spec.element_policy:
            case Explicit(flat_index=flat_index):
                target['element'] = flat_index
            case UniformRandom(seed=seed) if seed is not None:
                target['element_seed'] = seed
        targets.append(target)
    return {
        'name': cfg.name,
        'seed': cfg.master_seed,
        'trials': cfg.trials,
        'threads': cfg.threads,
        'prompts': list(cfg.prompts),
        'metrics': [str(m) for m in cfg.metrics],
        'tau': cfg.tau,
        'model': cfg.model.to_dict(),
        'checkpoint': cfg.checkpoint,
        'targets': targets,
    }


def config_checksum(cfg: CampaignConfig) -> str:
    """sha256 over the expanded config; threads and name do not change results"""
    data = config_to_dict(cfg)
    del data['threads'], data['name']
    return sha256_hex(canonical_json(data))
