"""
Persisting and presenting campaign results.

Files written into the output folder:

    campaign_result.json   full result, InjectionRecords included
    aggregates.csv         one row per (target, metric)
    trials.csv             one row per (target, trial, prompt, metric)
    manifest.json          RunManifest
    report.md              markdown summary
    images/*.ppm           baseline_p<i>.ppm and <target_id>.ppm
"""
import csv
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from enum import StrEnum
from functools import cache
import importlib.metadata
import json
import logging
import os

import jinja2
import numpy as np
from PIL import Image

from .campaign_runner import BaselineResult, CampaignResult
from .errors import MissingCache, ParseError, UnknownGrouping, ValidationError
from .naming_scheme import BlockKind, LayerKind, MatrixRole, TensorSelector
from .quality_metrics import MetricName

CSV_SCHEMA_VERSION = 1
AGGREGATE_COLUMNS = ['schema', 'target_id', 'block', 'level', 'transformer', 'layer', 'matrix', 'bit', 'metric',
                     'n', 'mean', 'std']
TRIAL_COLUMNS = ['schema', 'target_id', 'trial', 'tensor', 'flat_index', 'bit', 'original', 'flipped', 'non_finite',
                 'prompt_index', 'metric', 'value']

RESULT_FILE = 'campaign_result.json'
MANIFEST_FILE = 'manifest.json'

logger = logging.getLogger('reports')


class Grouping(StrEnum):
    BY_BLOCK = 'by-block'
    BY_LAYER = 'by-layer'
    BY_BIT = 'by-bit'


class OutputFormat(StrEnum):
    CSV = 'csv'
    JSON = 'json'


@dataclass
class RunManifest:
    config_checksum: str
    checkpoint_checksum: str
    master_seed: int
    command: str
    version: str = field(default_factory=lambda: package_version())
    started: str = field(default_factory=lambda: utc_now())
    finished: str = ''
    outputs: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)


def package_version() -> str:
    try:
        return importlib.metadata.version('ck-seu-diffusion')
    except importlib.metadata.PackageNotFoundError:
        return '0+unknown'


def utc_now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec='seconds')


@cache
def _environment() -> jinja2.Environment:
    return jinja2.Environment(loader=jinja2.PackageLoader('ck_seu_diffusion', 'templates'),
                              undefined=jinja2.StrictUndefined, autoescape=False)


# labels
def block_label(selector: TensorSelector) -> str:
    """DB<l+1> / UB<l+1> for down / up level l, MB for the middle block"""
    match selector.block:
        case BlockKind.DOWN:
            return f"DB{selector.level + 1}"
        case BlockKind.UP:
            return f"UB{selector.level + 1}"
        case _:
            return 'MB'


def layer_label(selector: TensorSelector) -> str:
    if selector.layer == LayerKind.FFN:
        return 'FC1' if selector.matrix == MatrixRole.WF1 else 'FC2'
    label = str(selector.layer).upper()
    return label if selector.matrix == MatrixRole.WV else f"{label}/{selector.matrix}"


def _block_key(selector: TensorSelector) -> tuple:
    order = {BlockKind.DOWN: 0, BlockKind.MID: 1, BlockKind.UP: 2}
    return order[selector.block], selector.level


def _layer_key(selector: TensorSelector, bit: int) -> tuple:
    layers = list(LayerKind)
    matrices = list(MatrixRole)
    return layers.index(selector.layer), matrices.index(selector.matrix), -bit, selector.transformer_index


def _format(value: float | None) -> str:
    return '-' if value is None else f"{value:.2f}"


def _render_table(corner: str, columns: list[str], rows: list[tuple[str, list[str]]]) -> str:
    template = _environment().get_template('summary_table.md.j2')
    return template.render(corner=corner, columns=columns, rows=[{'label': r, 'cells': c} for r, c in rows])


def _block_matrix(result: CampaignResult, metric: MetricName):
    summaries = list(result.targets.values())
    several = any(s.selector.transformer_index > 0 for s in summaries)
    several_bits = len({s.bit for s in summaries}) > 1
    cells, row_keys, col_keys = {}, {}, {}
    for s in summaries:
        row = block_label(s.selector)
        col = layer_label(s.selector)
        if several:
            col += f"-T{s.selector.transformer_index + 1}"
        if several_bits:
            col += f"@b{s.bit}"
        row_keys[row] = _block_key(s.selector)
        col_keys.setdefault(col, _layer_key(s.selector, s.bit))
        aggregate = s.aggregates.get(metric)
        cells[row, col] = aggregate.mean if aggregate else None
    rows = sorted(row_keys, key=lambda r: row_keys[r])
    columns = sorted(col_keys, key=lambda c: col_keys[c])
    return rows, columns, cells


def summary_table(result: CampaignResult, grouping: str = Grouping.BY_BLOCK,
                  metric: MetricName = MetricName.CLIP_SCORE) -> str:
    """
    Markdown pipe table of aggregate means.

    by-block: one row per block (DB1.., MB, UB1..), one column per layer
    (SA, CA, FC1, FC2, suffixed -T<i> when blocks hold several transformers).
    by-layer is its transpose. by-bit: one row per matrix, 16 columns from
    bit 15 down to bit 0.
    """
    try:
        grouping = Grouping(grouping)
    except ValueError:
        raise UnknownGrouping(f"unknown grouping {grouping!r}, expected one of {[str(g) for g in Grouping]}") from None
    metric = MetricName(metric)
    match grouping:
        case Grouping.BY_BLOCK:
            rows, columns, cells = _block_matrix(result, metric)
            return _render_table('Block', columns, [(r, [_format(cells.get((r, c))) for c in columns]) for r in rows])
        case Grouping.BY_LAYER:
            rows, columns, cells = _block_matrix(result, metric)
            return _render_table('Layer', rows, [(c, [_format(cells.get((r, c))) for r in rows]) for c in columns])
        case Grouping.BY_BIT:
            by_matrix: dict[str, dict[int, float | None]] = {}
            keys = {}
            for s in result.targets.values():
                label = f"{block_label(s.selector)} {layer_label(s.selector)}-T{s.selector.transformer_index + 1}"
                keys[label] = (_block_key(s.selector), _layer_key(s.selector, 0))
                aggregate = s.aggregates.get(metric)
                by_matrix.setdefault(label, {})[s.bit] = aggregate.mean if aggregate else None
            bits = list(range(15, -1, -1))
            rows = [(label, [_format(by_matrix[label].get(b)) for b in bits]) for label in sorted(keys, key=keys.get)]
            return _render_table('Target', [f"b{b}" for b in bits], rows)


def baseline_table(baseline: BaselineResult) -> str:
    """Error-free scores, one row per prompt"""
    metrics = list(baseline.values)
    rows = [
        (str(i + 1), [prompt.replace('|', '\\|')] + [_format(baseline.values[m][i]) for m in metrics])
        for i, prompt in enumerate(baseline.prompts)
    ]
    return _render_table('Index', ['Prompt'] + [str(m) for m in metrics], rows)


def bit_statistics_table(means) -> str:
    """Fraction of weights with each bit set, bit 15 first"""
    return _render_table('Bit', ['mean'], [(str(b), [f"{means[b]:.4f}"]) for b in range(15, -1, -1)])


def render_report(result: CampaignResult, manifest: RunManifest | None = None) -> str:
    metrics = list(result.metrics)
    baseline = baseline_table(result.baseline)
    tables = {str(m): summary_table(result, Grouping.BY_BLOCK, m) for m in metrics}
    template = _environment().get_template('campaign_report.md.j2')
    return template.render(result=result, manifest=manifest, baseline=baseline, tables=tables)


# files
def _write_aggregates_csv(result: CampaignResult, path: str) -> None:
    with open(path, 'w', newline='') as csvfile:
        writer = csv.writer(csvfile, lineterminator='\n')
        writer.writerow(AGGREGATE_COLUMNS)
        for target_id in sorted(result.targets):
            s = result.targets[target_id]
            selector = s.selector.to_dict()
            for metric in result.metrics:
                aggregate = s.aggregates.get(metric)
                if aggregate is None:
                    continue
                writer.writerow([CSV_SCHEMA_VERSION, target_id, selector['block'], selector['level'],
                                 selector['transformer'], selector['layer'], selector['matrix'], s.bit, str(metric),
                                 aggregate.n, repr(aggregate.mean), repr(aggregate.std)])


def _write_trials_csv(result: CampaignResult, path: str) -> None:
    with open(path, 'w', newline='') as csvfile:
        writer = csv.writer(csvfile, lineterminator='\n')
        writer.writerow(TRIAL_COLUMNS)
        for outcome in result.outcomes:
            record = outcome.record
            for metric in result.metrics:
                for prompt_index, value in enumerate(outcome.values[metric]):
                    writer.writerow([CSV_SCHEMA_VERSION, outcome.target_id, outcome.trial, record.tensor,
                                     record.flat_index, record.bit, str(record.original), str(record.flipped),
                                     int(outcome.non_finite), prompt_index, str(metric), repr(value)])


def result_json(result: CampaignResult) -> str:
    return json.dumps(result.to_dict(), indent=2) + '\n'


def emit_results(result: CampaignResult, out_folder: str, formats=(OutputFormat.CSV, OutputFormat.JSON)) -> list[str]:
    """Write the result files; returns their paths in a fixed order"""
    os.makedirs(out_folder, exist_ok=True)
    written = []
    for file_format in sorted(OutputFormat(f) for f in formats):
        match file_format:
            case OutputFormat.CSV:
                for name, writer in (('aggregates.csv', _write_aggregates_csv), ('trials.csv', _write_trials_csv)):
                    path = os.path.join(out_folder, name)
                    writer(result, path)
                    written.append(path)
            case OutputFormat.JSON:
                path = os.path.join(out_folder, RESULT_FILE)
                with open(path, 'w') as f:
                    f.write(result_json(result))
                written.append(path)
    logger.info(f"wrote {', '.join(written)}")
    return written


def load_result(path: str) -> CampaignResult:
    """Parse campaign_result.json (or the folder holding it) back into a CampaignResult"""
    if os.path.isdir(path):
        path = os.path.join(path, RESULT_FILE)
    with open(path, 'r') as f:
        try:
            data = json.load(f)
        except json.JSONDecodeError as e:
            raise ParseError(f"{path}: {e}") from e
    if not isinstance(data, dict):
        raise ValidationError(path, 'expected a campaign result object')
    try:
        return CampaignResult.from_dict(data)
    except KeyError as e:
        raise ValidationError(path, f"missing key {e}") from e
    except (TypeError, ValueError, AttributeError) as e:
        raise ValidationError(path, f"malformed campaign result: {e}") from e


def write_manifest(manifest: RunManifest, out_folder: str) -> str:
    os.makedirs(out_folder, exist_ok=True)
    path = os.path.join(out_folder, MANIFEST_FILE)
    with open(path, 'w') as f:
        f.write(json.dumps(manifest.to_dict(), indent=2) + '\n')
    return path


def write_report(result: CampaignResult, out_folder: str, manifest: RunManifest | None = None) -> str:
    os.makedirs(out_folder, exist_ok=True)
    path = os.path.join(out_folder, 'report.md')
    with open(path, 'w') as f:
        f.write(render_report(result, manifest))
    return path


def save_ppm(image: np.ndarray, path: str) -> None:
    """Binary PPM (P6) of a 3 x N x N image in [0, 1]"""
    pixels = np.round(np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0) * 255).astype(np.uint8)
    Image.fromarray(np.ascontiguousarray(pixels.transpose(1, 2, 0))).save(path, format='PPM')


def export_baseline_images(baseline: BaselineResult, out_folder: str) -> list[str]:
    """baseline_p<i>.ppm, one per prompt, i counted from 1"""
    if not baseline.images:
        raise MissingCache('no baseline images cached in this result')
    os.makedirs(out_folder, exist_ok=True)
    written = []
    for i, image in enumerate(baseline.images):
        path = os.path.join(out_folder, f"baseline_p{i + 1}.ppm")
        save_ppm(image, path)
        written.append(path)
    return written


def export_images(result: CampaignResult, which: str, out_folder: str, prompt_index: int = 0) -> list[str]:
    """
    which is 'baseline' (one file per prompt) or 'exemplar' (first trial of
    every target, for prompts[prompt_index]).
    """
    os.makedirs(out_folder, exist_ok=True)
    written = []
    match which:
        case 'baseline':
            written = export_baseline_images(result.baseline, out_folder)
        case 'exemplar':
            if not result.exemplars:
                raise MissingCache('no exemplar images cached in this result')
            for target_id in sorted(result.exemplars):
                path = os.path.join(out_folder, f"{target_id}.ppm")
                save_ppm(result.exemplars[target_id][prompt_index], path)
                written.append(path)
        case _:
            raise ValueError(f"which must be 'baseline' or 'exemplar', got {which!r}")
    return written
