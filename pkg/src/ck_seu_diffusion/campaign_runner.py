"""
Fault-injection campaigns over the toy diffuser.

A campaign runs, for every target, `trials` injections; each injection is
held for the whole prompt list and every generation is scored against the
error-free baseline of its prompt. Trials are independent: each one owns a
copy-on-write view of the base checkpoint and a seed derived from
(master seed, target, trial), so the result does not depend on thread
count or target order.
"""
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
import logging
import math
from typing import Iterable

import numpy as np
from result import Err, Ok, Result

from .checkpoint_store import CkCheckpointStore, load_checkpoint
from .errors import CkSeuError, IsolationError, ValidationError, ZeroNorm
from .fault_injector import InjectionRecord, InjectionSpec, UniformRandom, derive_trial_seed, inject
from .half16_codec import NUM_BITS
from .naming_scheme import TensorSelector
from .quality_metrics import (DEFAULT_TAU, MetricName, clip_like_score, corruption_stats, pooled_text_embedding,
                              toy_image_embed)
from .toy_diffusion_model import CkToyDiffuser, DiffuserConfig

BUNDLED_PROMPTS = (
    'Blue Beach Umbrellas, Point Of Rocks, Crescent Beach, Siesta Key - Spiral Notebook',
    'BMW-M2-M-Performance-Dekor-Long-Beach-Blue-05',
    'Becoming More Than a Good Bible Study Girl: Living the Faith after Bible Class Is Over by Lysa TerKeurst Narrated by Lysa TerKeurst',
    '"Dynabrade 52632 4-1/2" Dia. Right Angle Depressed Center Wheel Grinder',
    'MANETTE XBOX ONE',
)

DEFAULT_METRICS = tuple(MetricName)


@dataclass(frozen=True)
class CampaignConfig:
    targets: tuple[InjectionSpec, ...]
    prompts: tuple[str, ...] = BUNDLED_PROMPTS
    trials: int = 50
    master_seed: int = 0
    metrics: tuple[MetricName, ...] = DEFAULT_METRICS
    tau: float = DEFAULT_TAU
    model: DiffuserConfig = field(default_factory=DiffuserConfig)
    checkpoint: str | None = None
    threads: int = 1
    name: str = 'campaign'

    def __post_init__(self):
        object.__setattr__(self, 'targets', tuple(self.targets))
        object.__setattr__(self, 'prompts', tuple(self.prompts))
        object.__setattr__(self, 'metrics', tuple(MetricName(m) for m in self.metrics))

    def validate(self, require_targets: bool = True) -> 'CampaignConfig':
        if self.trials < 1:
            raise ValidationError('trials', 'must be >= 1')
        if self.master_seed < 0:
            raise ValidationError('seed', 'must be >= 0')
        if not self.prompts:
            raise ValidationError('prompts', 'at least one prompt is required')
        if require_targets and not self.targets:
            raise ValidationError('targets', 'at least one target is required')
        if not self.metrics:
            raise ValidationError('metrics', 'at least one metric is required')
        if self.threads < 1:
            raise ValidationError('threads', 'must be >= 1')
        if not self.tau >= 0:
            raise ValidationError('tau', 'must be >= 0')
        seen = set()
        for i, spec in enumerate(self.targets):
            if spec.target_id in seen:
                raise ValidationError(f"targets[{i}]", f"duplicate target {spec.target_id}")
            seen.add(spec.target_id)
        self.model.validate()
        return self


@dataclass(frozen=True)
class MetricAggregate:
    n: int
    mean: float
    std: float

    def to_dict(self) -> dict:
        return {'n': self.n, 'mean': self.mean, 'std': self.std}


@dataclass
class TrialOutcome:
    target_id: str
    trial: int
    record: InjectionRecord
    values: dict[MetricName, tuple[float, ...]]
    non_finite: bool
    images: list[np.ndarray] | None = field(default=None, repr=False, compare=False)

    def to_dict(self) -> dict:
        return {
            'target_id': self.target_id,
            'trial': self.trial,
            'record': self.record.to_dict(),
            'non_finite': self.non_finite,
            'values': {str(m): list(v) for m, v in self.values.items()},
        }

    @classmethod
    def from_dict(cls, data: dict) -> 'TrialOutcome':
        return cls(
            target_id=data['target_id'],
            trial=int(data['trial']),
            record=InjectionRecord.from_dict(data['record']),
            values={MetricName(m): tuple(float(x) for x in v) for m, v in data['values'].items()},
            non_finite=bool(data['non_finite']))


@dataclass(frozen=True)
class TrialFailure:
    target_id: str
    trial: int
    message: str

    def to_dict(self) -> dict:
        return {'target_id': self.target_id, 'trial': self.trial, 'message': self.message}


@dataclass
class TargetSummary:
    target_id: str
    selector: TensorSelector
    bit: int
    aggregates: dict[MetricName, MetricAggregate] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            'target_id': self.target_id,
            'selector': self.selector.to_dict(),
            'bit': self.bit,
            'aggregates': {str(m): a.to_dict() for m, a in self.aggregates.items()},
        }

    @classmethod
    def from_dict(cls, data: dict) -> 'TargetSummary':
        return cls(
            target_id=data['target_id'],
            selector=TensorSelector.from_dict(data['selector']),
            bit=int(data['bit']),
            aggregates={MetricName(m): MetricAggregate(int(a['n']), float(a['mean']), float(a['std']))
                        for m, a in data['aggregates'].items()})


@dataclass
class BaselineResult:
    prompts: tuple[str, ...]
    values: dict[MetricName, tuple[float, ...]]
    images: list[np.ndarray] | None = field(default=None, repr=False, compare=False)

    def to_dict(self) -> dict:
        return {'prompts': list(self.prompts), 'values': {str(m): list(v) for m, v in self.values.items()}}

    @classmethod
    def from_dict(cls, data: dict) -> 'BaselineResult':
        return cls(prompts=tuple(data['prompts']),
                   values={MetricName(m): tuple(float(x) for x in v) for m, v in data['values'].items()})


@dataclass
class CampaignResult:
    name: str
    master_seed: int
    trials: int
    metrics: tuple[MetricName, ...]
    baseline: BaselineResult
    targets: dict[str, TargetSummary]
    outcomes: list[TrialOutcome]
    failures: list[TrialFailure] = field(default_factory=list)
    exemplars: dict[str, list[np.ndarray]] = field(default_factory=dict, repr=False, compare=False)

    @property
    def prompts(self) -> tuple[str, ...]:
        return self.baseline.prompts

    def to_dict(self) -> dict:
        return {
            'name': self.name,
            'master_seed': self.master_seed,
            'trials': self.trials,
            'metrics': [str(m) for m in self.metrics],
            'baseline': self.baseline.to_dict(),
            'targets': [self.targets[k].to_dict() for k in sorted(self.targets)],
            'outcomes': [o.to_dict() for o in self.outcomes],
            'failures': [f.to_dict() for f in self.failures],
        }

    @classmethod
    def from_dict(cls, data: dict) -> 'CampaignResult':
        targets = [TargetSummary.from_dict(t) for t in data['targets']]
        return cls(
            name=data['name'],
            master_seed=int(data['master_seed']),
            trials=int(data['trials']),
            metrics=tuple(MetricName(m) for m in data['metrics']),
            baseline=BaselineResult.from_dict(data['baseline']),
            targets={t.target_id: t for t in targets},
            outcomes=[TrialOutcome.from_dict(o) for o in data['outcomes']],
            failures=[TrialFailure(**f) for f in data.get('failures', [])])


@dataclass
class BitSweepResult:
    target: TensorSelector
    prompt: str
    campaign: CampaignResult
    config: CampaignConfig | None = None

    def scores(self, metric: MetricName = MetricName.RELATIVE_DEVIATION) -> list[float]:
        """Mean of metric per bit position, index 0 = LSB; NaN where every trial failed"""
        by_bit = {s.bit: s.aggregates.get(MetricName(metric)) for s in self.campaign.targets.values()}
        return [by_bit[b].mean if by_bit.get(b) is not None else math.nan for b in range(NUM_BITS)]


def aggregate(values: Iterable[float]) -> MetricAggregate:
    values = list(values)
    n = len(values)
    mean = math.fsum(values) / n
    std = math.sqrt(math.fsum((v - mean) ** 2 for v in values) / n)
    return MetricAggregate(n, mean, std)


def recompute_aggregates(result: CampaignResult) -> dict[str, dict[MetricName, MetricAggregate]]:
    """Aggregates re-derived from the stored outcomes, keyed like result.targets"""
    by_target: dict[str, list[TrialOutcome]] = {k: [] for k in result.targets}
    for outcome in result.outcomes:
        by_target.setdefault(outcome.target_id, []).append(outcome)
    aggregates = {}
    for target_id, outcomes in sorted(by_target.items()):
        aggregates[target_id] = {
            metric: aggregate(v for o in outcomes for v in o.values[metric])
            for metric in result.metrics if outcomes
        }
    return aggregates


class CkCampaignRunner:

    def __init__(self, cfg: CampaignConfig, store: CkCheckpointStore | None = None) -> None:
        self.cfg = cfg.validate(require_targets=False)
        self.logger = logging.getLogger('CkCampaignRunner')
        self.diffuser = CkToyDiffuser(cfg.model)
        if store is None:
            store = load_checkpoint(cfg.checkpoint) if cfg.checkpoint else self.diffuser.init_checkpoint()
        self.store = store.base()
        self.diffuser.load_weights(self.store)
        self._text = {}
        self._baseline: BaselineResult | None = None

    def _text_embedding(self, prompt: str) -> tuple[np.ndarray, np.ndarray]:
        if prompt not in self._text:
            embedding = self.diffuser.embed_prompt(prompt)
            self._text[prompt] = (embedding, pooled_text_embedding(embedding))
        return self._text[prompt]

    def _score(self, image: np.ndarray, prompt: str, baseline: np.ndarray | None,
               metrics: tuple[MetricName, ...]) -> dict[MetricName, float]:
        values = {}
        if MetricName.CLIP_SCORE in metrics:
            model = self.cfg.model
            try:
                values[MetricName.CLIP_SCORE] = clip_like_score(
                    toy_image_embed(image, model.embedding_width, model.seed), self._text_embedding(prompt)[1])
            except ZeroNorm:
                self.logger.warning(f"zero-norm image embedding for {prompt!r}, scored 0.0")
                values[MetricName.CLIP_SCORE] = 0.0
        stats = corruption_stats(image, image if baseline is None else baseline, self.cfg.tau).to_dict()
        for metric in metrics:
            if metric != MetricName.CLIP_SCORE:
                values[metric] = float(stats[str(metric)])
        return values

    def run_baseline(self, prompts: tuple[str, ...] | None = None) -> BaselineResult:
        """Error-free images and scores, cached per prompt list"""
        prompts = tuple(self.cfg.prompts if prompts is None else prompts)
        if self._baseline is not None and self._baseline.prompts == prompts:
            return self._baseline
        weights = self.diffuser.load_weights(self.store)
        images = []
        values = {m: [] for m in self.cfg.metrics}
        for prompt in prompts:
            image = self.diffuser.generate(prompt, weights, self._text_embedding(prompt)[0]).image
            images.append(image)
            for metric, value in self._score(image, prompt, None, self.cfg.metrics).items():
                values[metric].append(value)
        self._baseline = BaselineResult(prompts, {m: tuple(v) for m, v in values.items()}, images)
        self.logger.info(f"baseline over {len(prompts)} prompts")
        return self._baseline

    def _run_trial(self, spec: InjectionSpec, trial: int, baseline: BaselineResult) -> Result[TrialOutcome, str]:
        try:
            seed = derive_trial_seed(self.cfg.master_seed, spec.target.label, trial)
            view, record = inject(self.store, spec, seed, self.diffuser.scheme)
            weights = self.diffuser.load_weights(view)
            values = {m: [] for m in self.cfg.metrics}
            images = []
            non_finite = False
            for prompt, reference in zip(baseline.prompts, baseline.images):
                generation = self.diffuser.generate(prompt, weights, self._text_embedding(prompt)[0])
                non_finite |= not generation.finite
                images.append(generation.image)
                for metric, value in self._score(generation.image, prompt, reference, self.cfg.metrics).items():
                    values[metric].append(value)
        except (CkSeuError, ArithmeticError) as e:
            return Err(f"{spec.target_id} trial {trial}: {e}")
        if non_finite:
            self.logger.warning(f"{record.target_id} trial {trial}: non-finite activations from "
                                f"{record.tensor}[{record.flat_index}] {record.original} -> {record.flipped}")
        self.logger.debug(f"{record.target_id} trial {trial} {record.tensor}[{record.flat_index}] "
                          f"{record.original} -> {record.flipped} {non_finite=}")
        return Ok(TrialOutcome(spec.target_id, trial, record, {m: tuple(v) for m, v in values.items()},
                               non_finite, images if trial == 0 else None))

    def _execute(self, cfg: CampaignConfig) -> CampaignResult:
        cfg.validate()
        targets = sorted(cfg.targets, key=lambda s: s.target_id)
        for spec in targets:
            # UnknownTarget is a configuration error and aborts before any trial
            self.diffuser.scheme.resolve(spec.target)
        before = self.store.checksum()
        baseline = self.run_baseline(cfg.prompts)
        jobs = [(spec, trial) for spec in targets for trial in range(cfg.trials)]
        self.logger.info(f"{cfg.name}: {len(targets)} targets x {cfg.trials} trials x {len(cfg.prompts)} prompts "
                         f"on {cfg.threads} threads")
        if cfg.threads > 1:
            with ThreadPoolExecutor(max_workers=cfg.threads, thread_name_prefix='trial') as pool:
                results = list(pool.map(lambda job: self._run_trial(*job, baseline), jobs))
        else:
            results = [self._run_trial(*job, baseline) for job in jobs]

        outcomes, failures, exemplars = [], [], {}
        for (spec, trial), res in zip(jobs, results):
            if isinstance(res, Ok):
                outcome = res.ok_value
                if outcome.images is not None:
                    exemplars[outcome.target_id] = outcome.images
                    outcome.images = None
                outcomes.append(outcome)
            elif isinstance(res, Err):
                self.logger.warning(f"trial failed: {res.err_value}")
                failures.append(TrialFailure(spec.target_id, trial, res.err_value))

        result = CampaignResult(
            name=cfg.name,
            master_seed=cfg.master_seed,
            trials=cfg.trials,
            metrics=cfg.metrics,
            baseline=baseline,
            targets={s.target_id: TargetSummary(s.target_id, s.target, s.bit) for s in targets},
            outcomes=outcomes,
            failures=failures,
            exemplars=exemplars)
        for target_id, aggregates in recompute_aggregates(result).items():
            result.targets[target_id].aggregates = aggregates
            summary = ', '.join(f"{m}={a.mean:.4g}" for m, a in aggregates.items())
            self.logger.info(f"{target_id}: {summary or 'no successful trials'}")

        if self.store.checksum() != before:
            raise IsolationError('base checkpoint changed during the campaign')
        return result

    def run_campaign(self) -> CampaignResult:
        return self._execute(self.cfg)

    def bit_sweep(self,
                  target: TensorSelector,
                  prompt: str | None = None,
                  trials: int | None = None,
                  element_policy=None) -> BitSweepResult:
        """
        The same trial protocol for each of the 16 bit positions of one
        matrix. Trial seeds ignore the bit, so every bit is flipped in the
        same elements.
        """
        prompt = self.cfg.prompts[0] if prompt is None else prompt
        policy = UniformRandom() if element_policy is None else element_policy
        specs = tuple(InjectionSpec(target, bit, policy) for bit in range(NUM_BITS))
        cfg = replace(self.cfg, targets=specs, prompts=(prompt,), trials=self.cfg.trials if trials is None else trials,
                      name=f"{self.cfg.name}-bit-sweep").validate()
        return BitSweepResult(target, prompt, self._execute(cfg), cfg)
