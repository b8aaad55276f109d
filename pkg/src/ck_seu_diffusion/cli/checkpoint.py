from dataclasses import replace
import functools
import json
import os

import click

from . import EnvEnum, cliVar, exit_on_error
from ck_seu_diffusion.checkpoint_store import bit_statistics, load_checkpoint, save_checkpoint
from ck_seu_diffusion.config import load_config
from ck_seu_diffusion.errors import CkSeuError, InvalidSelector
from ck_seu_diffusion.fault_injector import Explicit, InjectionSpec, UniformRandom, derive_trial_seed, inject
from ck_seu_diffusion.half16_codec import CRITICAL_BIT
from ck_seu_diffusion.naming_scheme import BlockKind, LayerKind, MatrixRole, TensorSelector, load_scheme
from ck_seu_diffusion.reports import bit_statistics_table
from ck_seu_diffusion.toy_diffusion_model import CkToyDiffuser, DiffuserConfig


def selector_options(f):
    '''--block/--level/--transformer/--layer/--matrix, defaulting to Wv of SA in the first down transformer'''
    @click.option('--block', type=click.Choice([str(b) for b in BlockKind]), default='down', help='UNet block')
    @click.option('--level', type=click.IntRange(min=0), default=0, help='Block level, 0 is full resolution')
    @click.option('--transformer', type=click.IntRange(min=0), default=0, help='Transformer index inside the block')
    @click.option('--layer', type=click.Choice([str(k) for k in LayerKind]), default='sa', help='Sublayer')
    @click.option('--matrix', type=click.Choice([str(m) for m in MatrixRole]), default='wv', help='Weight matrix')
    @functools.wraps(f)
    def wrapper(*args, block, level, transformer, layer, matrix, **kwargs):
        try:
            selector = TensorSelector(block, level, transformer, layer, matrix)
        except InvalidSelector as e:
            raise click.UsageError(str(e)) from e
        return f(*args, selector=selector, **kwargs)
    return wrapper


def model_config(config_path: str | None, seed: int | None = None) -> DiffuserConfig:
    '''Model section of a campaign file, or the defaults'''
    model = load_config(config_path).model if config_path else DiffuserConfig()
    return model if seed is None else replace(model, seed=seed)


@click.command()
@click.option('--config', 'config_path', type=str, envvar=EnvEnum.CONFIG, help='Campaign file whose model section sizes the checkpoint')
@click.option('--seed', type=click.IntRange(min=0), envvar=EnvEnum.SEED, default=None, help='Model seed (overrides the config)')
@click.option('--output', type=str, default='toy_checkpoint.safetensors', help='File name under the output folder')
def init_checkpoint(config_path: str | None, seed: int | None, output: str):
    """
    Write seeded untrained weights of the toy diffuser

    Every weight has magnitude below 1, so the exponent MSB of every stored
    pattern is 0.
    """
    logger = cliVar.gen_logger('INFO', 'init_checkpoint()')
    try:
        store = CkToyDiffuser(model_config(config_path, seed)).init_checkpoint()
        path = cliVar.out_path(output)
        save_checkpoint(store, path)
    except (CkSeuError, OSError) as e:
        exit_on_error(logger, e)
    logger.info(f"{path=} {len(store.names())} tensors")
    click.echo(f"{path} sha256:{store.checksum()}")


@click.command()
@click.option('--checkpoint', type=str, envvar=EnvEnum.CHECKPOINT, help='Checkpoint to read; the seeded toy weights when omitted')
@click.option('--config', 'config_path', type=str, envvar=EnvEnum.CONFIG, help='Campaign file giving the model topology')
@click.option('--scheme', type=str, default='canonical', help='canonical, sd2, or a YAML naming table')
@click.option('--format', 'output_format', type=click.Choice(['table', 'json']), default='table', help='Output format')
def bit_stats(checkpoint: str | None, config_path: str | None, scheme: str, output_format: str):
    """
    Fraction of transformer weights with each bit set

    Averages are over every SA, CA and FFN matrix the naming scheme resolves.
    """
    logger = cliVar.gen_logger('INFO', 'bit_stats()')
    try:
        model = model_config(config_path)
        store = load_checkpoint(checkpoint, require_f16=False) if checkpoint else CkToyDiffuser(model).init_checkpoint()
        names = load_scheme(scheme, model.topology).tensor_names()
        means = bit_statistics(store, names)
    except (CkSeuError, OSError) as e:
        exit_on_error(logger, e)
    logger.info(f"{len(names)} tensors from {checkpoint or 'toy initialisation'}")
    match output_format:
        case 'json':
            click.echo(json.dumps({'tensors': len(names), 'bit_means': [float(m) for m in means]}, indent=2))
        case _:
            click.echo(bit_statistics_table(means), nl=False)


@click.command()
@click.option('--checkpoint', type=str, envvar=EnvEnum.CHECKPOINT, required=True, help='Checkpoint to corrupt')
@click.option('--output', type=str, required=True, help='Corrupted checkpoint file, relative to the output folder')
@click.option('--scheme', type=str, default='canonical', help='canonical, sd2, or a YAML naming table')
@click.option('--config', 'config_path', type=str, envvar=EnvEnum.CONFIG, help='Campaign file giving the canonical topology')
@selector_options
@click.option('--bit', type=click.IntRange(0, 15), default=CRITICAL_BIT, help='Bit position, 0 is the mantissa LSB')
@click.option('--element', type=str, default='random', help='Flat element index, or random')
@click.option('--seed', type=click.IntRange(min=0), envvar=EnvEnum.SEED, default=0, help='Seed for the random element')
@click.option('--record', 'record_file', type=str, default=None, help='Also write the injection record to this JSON file')
def corrupt(checkpoint: str, output: str, scheme: str, config_path: str | None, selector: TensorSelector,
            bit: int, element: str, seed: int, record_file: str | None):
    """
    Flip one bit of one transformer weight in a checkpoint file

    \b
    Works on real Stable Diffusion 2.x UNet checkpoints with --scheme sd2:
      ck-seu corrupt --checkpoint unet.safetensors --output unet_seu.safetensors \\
        --scheme sd2 --block up --level 1 --layer ca --matrix wv
    """
    logger = cliVar.gen_logger('INFO', 'corrupt()')
    if element == 'random':
        policy = UniformRandom()
    elif element.isdigit():
        policy = Explicit(int(element))
    else:
        raise click.BadParameter(f"expected an index or random, got {element!r}", param_hint='--element')
    try:
        naming = load_scheme(scheme, model_config(config_path).topology)
        spec = InjectionSpec(selector, bit, policy)
        store = load_checkpoint(checkpoint, require_f16=False)
        view, record = inject(store, spec, derive_trial_seed(seed, selector.label, 0), naming)
        path = cliVar.out_path(output)
        save_checkpoint(view, path)
        if record_file:
            with open(cliVar.out_path(record_file), 'w') as f:
                f.write(json.dumps(record.to_dict(), indent=2) + '\n')
    except (CkSeuError, OSError) as e:
        exit_on_error(logger, e)
    logger.info(f"{record.tensor}[{record.flat_index}] {record.original} -> {record.flipped} written to {os.path.abspath(path)}")
    click.echo(json.dumps(record.to_dict(), indent=2))
