import json
import os

import numpy as np
import pytest
from PIL import Image

from ck_seu_diffusion.campaign_runner import (BaselineResult, CampaignResult, CkCampaignRunner, MetricAggregate,
                                              TargetSummary, recompute_aggregates)
from ck_seu_diffusion.errors import MissingCache, ParseError, UnknownGrouping, ValidationError
from ck_seu_diffusion.naming_scheme import TensorSelector
from ck_seu_diffusion.quality_metrics import MetricName
from ck_seu_diffusion.reports import (RunManifest, baseline_table, block_label, emit_results, export_images, layer_label,
                                      load_result, render_report, save_ppm, summary_table, write_manifest)

CLIP = MetricName.CLIP_SCORE


def hand_result(cells: dict[tuple[TensorSelector, int], float]) -> CampaignResult:
    targets = {}
    for (selector, bit), mean in cells.items():
        target_id = f"{selector.label}.b{bit}"
        targets[target_id] = TargetSummary(target_id, selector, bit, {CLIP: MetricAggregate(50, mean, 1.0)})
    return CampaignResult(name='hand', master_seed=0, trials=50, metrics=(CLIP,),
                          baseline=BaselineResult(('p',), {CLIP: (31.0,)}), targets=targets, outcomes=[])


@pytest.fixture(scope="module")
def middle_block_result():
    return hand_result({
        (TensorSelector('mid', 0, 0, 'ffn', 'w2'), 14): 30.08,
        (TensorSelector('mid', 0, 0, 'ca', 'wv'), 14): 28.81,
        (TensorSelector('mid', 0, 0, 'ffn', 'w1'), 14): 30.05,
        (TensorSelector('mid', 0, 0, 'sa', 'wv'), 14): 29.57,
    })


@pytest.fixture(scope="module")
def small_result(small_campaign_cfg, toy_store):
    return CkCampaignRunner(small_campaign_cfg, toy_store).run_campaign()


def test_70_middle_block_table(middle_block_result):
    assert summary_table(middle_block_result, 'by-block', CLIP) == (
        "| Block | SA | CA | FC1 | FC2 |\n"
        "|---|---|---|---|---|\n"
        "| MB | 29.57 | 28.81 | 30.05 | 30.08 |\n"
    )
    assert summary_table(middle_block_result, 'by-layer', CLIP) == (
        "| Layer | MB |\n"
        "|---|---|\n"
        "| SA | 29.57 |\n"
        "| CA | 28.81 |\n"
        "| FC1 | 30.05 |\n"
        "| FC2 | 30.08 |\n"
    )


def test_71_single_cell_and_missing_values():
    one = hand_result({(TensorSelector('down', 0, 0, 'sa', 'wv'), 14): 12.3456})
    assert summary_table(one) == "| Block | SA |\n|---|---|\n| DB1 | 12.35 |\n"
    # a metric that was not aggregated shows as '-'
    assert summary_table(one, metric=MetricName.RELATIVE_DEVIATION).endswith("| DB1 | - |\n")
    grid = hand_result({
        (TensorSelector('up', 1, 2, 'ca', 'wv'), 14): 3.0,
        (TensorSelector('down', 1, 0, 'sa', 'wv'), 14): 1.0,
        (TensorSelector('mid', 0, 0, 'sa', 'wv'), 14): 2.0,
    })
    lines = summary_table(grid).splitlines()
    assert lines[0] == "| Block | SA-T1 | CA-T3 |"
    assert [line.split(' | ')[0] for line in lines[2:]] == ['| DB2', '| MB', '| UB2']
    assert lines[4] == "| UB2 | - | 3.00 |"
    with pytest.raises(UnknownGrouping):
        summary_table(grid, 'by-prompt')


def test_72_bit_table():
    selector = TensorSelector('down', 0, 0, 'sa', 'wv')
    sweep = hand_result({(selector, bit): float(bit) for bit in range(16)})
    lines = summary_table(sweep, 'by-bit', CLIP).splitlines()
    assert lines[0] == "| Target | " + ' | '.join(f"b{b}" for b in range(15, -1, -1)) + " |"
    assert lines[1] == "|---|" + "---|" * 16
    assert lines[2] == "| DB1 SA-T1 | " + ' | '.join(f"{b}.00" for b in range(15, -1, -1)) + " |"
    assert len(lines) == 3
    assert block_label(TensorSelector('up', 0, 0, 'sa', 'wq')) == 'UB1'
    assert layer_label(TensorSelector('up', 0, 0, 'sa', 'wq')) == 'SA/wq'


def test_73_emitted_files(small_result, tmp_path):
    first = emit_results(small_result, str(tmp_path / 'a'))
    second = emit_results(small_result, str(tmp_path / 'b'))
    assert [os.path.basename(p) for p in first] == ['aggregates.csv', 'trials.csv', 'campaign_result.json']
    for a, b in zip(first, second):
        with open(a, 'rb') as fa, open(b, 'rb') as fb:
            assert fa.read() == fb.read()

    with open(first[0]) as f:
        rows = f.read().splitlines()
    assert rows[0] == 'schema,target_id,block,level,transformer,layer,matrix,bit,metric,n,mean,std'
    assert len(rows) == 1 + len(small_result.targets) * len(small_result.metrics)
    with open(first[1]) as f:
        assert len(f.read().splitlines()) == 1 + 2 * 2 * len(small_result.metrics) * 2

    loaded = load_result(str(tmp_path / 'a'))
    assert loaded == small_result
    assert recompute_aggregates(loaded) == {k: s.aggregates for k, s in small_result.targets.items()}
    assert emit_results(small_result, str(tmp_path / 'c'), ['json']) == [str(tmp_path / 'c' / 'campaign_result.json')]


def test_74_image_export(small_result, tmp_path):
    baseline = export_images(small_result, 'baseline', str(tmp_path / 'one'))
    assert [os.path.basename(p) for p in baseline] == ['baseline_p1.ppm', 'baseline_p2.ppm']
    exemplars = export_images(small_result, 'exemplar', str(tmp_path / 'one'))
    assert [os.path.basename(p) for p in exemplars] == ['down.0.t0.sa.wv.b14.ppm', 'up.0.t1.ca.wv.b14.ppm']
    for path in baseline + exemplars:
        with open(path, 'rb') as f:
            assert f.read(2) == b'P6'
        with Image.open(path) as image:
            assert (image.mode, image.size) == ('RGB', (64, 64))
    with open(baseline[0], 'rb') as f, open(exemplars[0], 'rb') as g:
        assert f.read() != g.read()

    again = export_images(small_result, 'baseline', str(tmp_path / 'two'))
    for a, b in zip(baseline, again):
        with open(a, 'rb') as fa, open(b, 'rb') as fb:
            assert fa.read() == fb.read()

    loaded = CampaignResult.from_dict(small_result.to_dict())
    with pytest.raises(MissingCache):
        export_images(loaded, 'baseline', str(tmp_path / 'three'))
    with pytest.raises(MissingCache):
        export_images(loaded, 'exemplar', str(tmp_path / 'three'))
    with pytest.raises(ValueError):
        export_images(small_result, 'latent', str(tmp_path / 'three'))


def test_75_save_ppm_clamps(tmp_path):
    image = np.zeros((3, 4, 4))
    image[0] = -1.0
    image[1] = 2.0
    image[2] = 0.5
    path = str(tmp_path / 'clamped.ppm')
    save_ppm(image, path)
    with Image.open(path) as saved:
        assert saved.getpixel((0, 0)) == (0, 255, 128)


def test_76_report_and_manifest(small_result, tmp_path):
    manifest = RunManifest('c' * 64, 'd' * 64, small_result.master_seed, 'campaign')
    text = render_report(small_result, manifest)
    assert text.startswith('# small\n')
    assert '- trials per target: 2' in text
    assert f"- checkpoint sha256: `{'d' * 64}`" in text
    assert '## Error-free baseline' in text
    assert '| Index | Prompt |' in text
    for metric in small_result.metrics:
        assert f"## {metric} by block" in text
    assert '## Failed trials' not in text
    assert render_report(small_result).count('sha256') == 0

    manifest.outputs = ['campaign_result.json']
    path = write_manifest(manifest, str(tmp_path))
    with open(path) as f:
        stored = json.load(f)
    assert stored['config_checksum'] == 'c' * 64
    assert stored['master_seed'] == small_result.master_seed
    assert stored['outputs'] == ['campaign_result.json']
    assert set(stored) == {'config_checksum', 'checkpoint_checksum', 'master_seed', 'command', 'version', 'started',
                           'finished', 'outputs'}


def test_77_baseline_table():
    baseline = BaselineResult(('a red car', 'x|y'), {CLIP: (33.96, 30.0)})
    assert baseline_table(baseline) == (
        "| Index | Prompt | clip_score |\n"
        "|---|---|---|\n"
        "| 1 | a red car | 33.96 |\n"
        "| 2 | x\\|y | 30.00 |\n"
    )


def test_78_malformed_result_files(small_result, tmp_path):
    broken = tmp_path / 'broken.json'
    broken.write_text('{not json')
    with pytest.raises(ParseError):
        load_result(str(broken))
    for name, text in (('empty.json', '{}'), ('list.json', '[]'), ('metric.json', None)):
        if text is None:
            data = small_result.to_dict()
            data['metrics'] = ['fid']
            text = json.dumps(data)
        path = tmp_path / name
        path.write_text(text)
        with pytest.raises(ValidationError) as e:
            load_result(str(path))
        assert e.value.path == str(path)
