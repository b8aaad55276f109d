from dataclasses import replace
import json
import os

import click

from . import EnvEnum, cliVar, exit_on_error
from .checkpoint import selector_options
from ck_seu_diffusion.campaign_runner import BUNDLED_PROMPTS, CampaignConfig, CkCampaignRunner
from ck_seu_diffusion.config import config_checksum, load_config
from ck_seu_diffusion.errors import CkSeuError
from ck_seu_diffusion.fault_injector import Explicit, UniformRandom
from ck_seu_diffusion.naming_scheme import TensorSelector
from ck_seu_diffusion.quality_metrics import MetricName
from ck_seu_diffusion.reports import (Grouping, OutputFormat, RunManifest, baseline_table, emit_results,
                                      export_baseline_images, export_images, summary_table, utc_now, write_manifest,
                                      write_report)

FORMAT_CHOICES = click.Choice([str(f) for f in OutputFormat])
METRIC_CHOICES = click.Choice([str(m) for m in MetricName])


def campaign_config(config_path: str | None, seed: int | None, checkpoint: str | None = None) -> CampaignConfig:
    '''Load the campaign file (or defaults with no targets) and apply the command line overrides'''
    cfg = load_config(config_path) if config_path else CampaignConfig(targets=())
    overrides = {}
    if seed is not None:
        overrides['master_seed'] = seed
    if cliVar.threads:
        overrides['threads'] = cliVar.threads
    if checkpoint:
        overrides['checkpoint'] = checkpoint
    return replace(cfg, **overrides) if overrides else cfg


def finish(result, command: str, out_folder: str, formats, manifest: RunManifest, logger) -> None:
    '''Write results, images, manifest and report of a finished campaign'''
    outputs = emit_results(result, out_folder, formats)
    images_folder = os.path.join(out_folder, 'images')
    outputs += export_images(result, 'baseline', images_folder)
    if result.exemplars:
        outputs += export_images(result, 'exemplar', images_folder)
    manifest.finished = utc_now()
    manifest.outputs = [os.path.relpath(p, out_folder) for p in outputs]
    write_manifest(manifest, out_folder)
    write_report(result, out_folder, manifest)
    logger.info(f"{command}: {len(result.outcomes)} trials, {len(result.failures)} failures, results in {out_folder}")


@click.command()
@click.option('--config', 'config_path', type=str, envvar=EnvEnum.CONFIG, help='Campaign file (prompts, model, checkpoint)')
@click.option('--checkpoint', type=str, envvar=EnvEnum.CHECKPOINT, help='Checkpoint to load instead of the seeded toy weights')
def baseline(config_path: str | None, checkpoint: str | None):
    """
    Error-free images and scores for every prompt

    Writes baseline.json and images/baseline_p<i>.ppm under the output folder.
    """
    logger = cliVar.gen_logger('INFO', 'baseline()')
    try:
        cfg = campaign_config(config_path, None, checkpoint)
        result = CkCampaignRunner(cfg).run_baseline()
        with open(cliVar.out_path('baseline.json'), 'w') as f:
            f.write(json.dumps(result.to_dict(), indent=2) + '\n')
        export_baseline_images(result, cliVar.out_path('images'))
    except (CkSeuError, OSError) as e:
        exit_on_error(logger, e)
    click.echo(baseline_table(result), nl=False)


@click.command()
@click.option('--config', 'config_path', type=str, envvar=EnvEnum.CONFIG, required=True, help='Campaign file (YAML or JSON)')
@click.option('--seed', type=click.IntRange(min=0), envvar=EnvEnum.SEED, default=None, help='Master seed (overrides the config)')
@click.option('--checkpoint', type=str, envvar=EnvEnum.CHECKPOINT, help='Checkpoint to load instead of the seeded toy weights')
@click.option('--format', 'formats', type=FORMAT_CHOICES, multiple=True, default=['csv', 'json'], help='Result formats to write')
def campaign(config_path: str, seed: int | None, checkpoint: str | None, formats: tuple[str, ...]):
    """
    Run a fault-injection campaign

    \b
    For every target: trials x prompts generations, one injected bit per
    trial, scored against the error-free baseline. Writes
    campaign_result.json, aggregates.csv, trials.csv, manifest.json,
    report.md and images/ under the output folder.
    """
    logger = cliVar.gen_logger('INFO', 'campaign()')
    try:
        cfg = campaign_config(config_path, seed, checkpoint).validate()
        runner = CkCampaignRunner(cfg)
        manifest = RunManifest(config_checksum(cfg), runner.store.checksum(), cfg.master_seed, 'campaign')
        result = runner.run_campaign()
        finish(result, 'campaign', cliVar.out_path(cfg.name), formats, manifest, logger)
    except (CkSeuError, OSError) as e:
        exit_on_error(logger, e)
    click.echo(summary_table(result, Grouping.BY_BLOCK, cfg.metrics[0]), nl=False)


@click.command()
@click.option('--config', 'config_path', type=str, envvar=EnvEnum.CONFIG, help='Campaign file for model, metrics and seed (targets are ignored)')
@selector_options
@click.option('--prompt', type=str, default=BUNDLED_PROMPTS[1], help='Prompt to generate for every trial')
@click.option('--trials', type=click.IntRange(min=1), default=None, help='Trials per bit (default: the config, or 50)')
@click.option('--element', type=click.IntRange(min=0), default=None, help='Fixed flat element index instead of a random draw')
@click.option('--seed', type=click.IntRange(min=0), envvar=EnvEnum.SEED, default=None, help='Master seed (overrides the config)')
@click.option('--metric', type=METRIC_CHOICES, default=str(MetricName.RELATIVE_DEVIATION), help='Metric to tabulate')
@click.option('--format', 'formats', type=FORMAT_CHOICES, multiple=True, default=['csv', 'json'], help='Result formats to write')
def bit_sweep(config_path: str | None, selector: TensorSelector, prompt: str, trials: int | None,
              element: int | None, seed: int | None, metric: str, formats: tuple[str, ...]):
    """
    Flip each of the 16 bits of one weight matrix in turn

    Every bit position is flipped in the same elements; the table lists the
    mean metric per bit from bit 15 (sign) down to bit 0.
    """
    logger = cliVar.gen_logger('INFO', 'bit_sweep()')
    try:
        cfg = campaign_config(config_path, seed)
        runner = CkCampaignRunner(cfg)
        policy = UniformRandom() if element is None else Explicit(element)
        sweep = runner.bit_sweep(selector, prompt, trials, policy)
        manifest = RunManifest(config_checksum(sweep.config), runner.store.checksum(), cfg.master_seed,
                               f"bit-sweep {selector.label}")
        finish(sweep.campaign, 'bit-sweep', cliVar.out_path(f"bit-sweep-{selector.label}"), formats,
               manifest, logger)
    except (CkSeuError, OSError) as e:
        exit_on_error(logger, e)
    click.echo(summary_table(sweep.campaign, Grouping.BY_BIT, metric), nl=False)
