import click

from . import EnvEnum, cliVar

from .checkpoint import init_checkpoint, bit_stats, corrupt
from .campaign import baseline, campaign, bit_sweep
from .report import report


@click.group()
@click.option('--out', 'out_folder', type=str, envvar=EnvEnum.OUT_FOLDER, help='Folder to write results, images and checkpoints to', default='.')
@click.option('--log-folder', type=str, envvar=EnvEnum.LOG_FOLDER, help='Folder path to write log files to', default='.')
@click.option('--threads', type=click.IntRange(min=1), envvar=EnvEnum.THREADS, help='Worker threads for campaigns (overrides the config file)', default=None)
@click.version_option(package_name='ck-seu-diffusion', message='%(package)s, %(version)s')
@click.pass_context
def cli(ctx, out_folder: str, log_folder: str, threads: int | None):
    """
    Single-event-upset fault injection into the transformer weights of a
    toy text-to-image diffuser.

    The options that can be specified in .env file: SEU_OUT_FOLDER, SEU_LOG_FOLDER, SEU_THREADS, SEU_CONFIG, SEU_SEED, SEU_CHECKPOINT
    """
    ctx.ensure_object(dict)
    ctx.obj['OUT_FOLDER'] = out_folder
    ctx.obj['THREADS'] = threads

    cliVar.update(out_folder=out_folder, log_folder=log_folder, threads=threads)


# Register checkpoint-related commands
cli.add_command(init_checkpoint)
cli.add_command(bit_stats)
cli.add_command(corrupt)

# Register campaign-related commands
cli.add_command(baseline)
cli.add_command(campaign)
cli.add_command(bit_sweep)

cli.add_command(report)


if __name__ == "__main__":
    cli()
