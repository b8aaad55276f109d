import os

import click

from . import cliVar, exit_on_error
from ck_seu_diffusion.errors import CkSeuError
from ck_seu_diffusion.quality_metrics import MetricName
from ck_seu_diffusion.reports import Grouping, load_result, render_report, summary_table


@click.command()
@click.option('--result', 'result_path', type=str, required=True, help='campaign_result.json, or the folder holding it')
@click.option('--grouping', type=str, default=str(Grouping.BY_BLOCK), help='by-block, by-layer or by-bit')
@click.option('--metric', type=click.Choice([str(m) for m in MetricName]), default=str(MetricName.CLIP_SCORE), help='Metric to tabulate')
@click.option('--full', is_flag=True, default=False, help='Write the markdown report to report.md in the output folder')
def report(result_path: str, grouping: str, metric: str, full: bool):
    """
    Tabulate a stored campaign result

    \b
    Rows and columns follow the block/layer presentation:
      by-block  rows DB1.., MB, UB1..; columns SA, CA, FC1, FC2
      by-layer  the transpose
      by-bit    16 columns, bit 15 first
    """
    logger = cliVar.gen_logger('INFO', 'report()')
    try:
        result = load_result(os.path.expanduser(result_path))
        table = summary_table(result, grouping, MetricName(metric))
        if full:
            path = cliVar.out_path('report.md')
            with open(path, 'w') as f:
                f.write(render_report(result))
            logger.info(f"report written to {path}")
    except (CkSeuError, OSError) as e:
        exit_on_error(logger, e)
    click.echo(table, nl=False)
