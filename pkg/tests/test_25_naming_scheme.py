import pytest

from ck_seu_diffusion.errors import InvalidSelector, UnknownTarget, ValidationError
from ck_seu_diffusion.naming_scheme import (SD2_TOPOLOGY, BlockKind, LayerKind, MatrixRole, NamingScheme,
                                            TensorSelector, load_scheme, resolve_selector)


def test_25_canonical_names(toy_cfg):
    scheme = NamingScheme.canonical(toy_cfg.topology)
    assert resolve_selector(TensorSelector('down', 0, 0, 'sa', 'wv'), scheme) == 'down.0.t0.sa.wv'
    assert resolve_selector(TensorSelector('mid', 0, 0, 'ffn', 'w1'), scheme) == 'mid.t0.ffn.w1'
    assert resolve_selector(TensorSelector('up', 1, 2, 'ca', 'wk'), scheme) == 'up.1.t2.ca.wk'
    # the deepest level holds ResNets only
    with pytest.raises(UnknownTarget):
        scheme.resolve(TensorSelector('down', 2, 0, 'sa', 'wv'))
    with pytest.raises(UnknownTarget):
        scheme.resolve(TensorSelector('down', 0, 2, 'sa', 'wv'))
    with pytest.raises(UnknownTarget):
        scheme.resolve(TensorSelector('mid', 0, 1, 'sa', 'wv'))


def test_26_sd2_names():
    scheme = NamingScheme.sd2()
    assert scheme.resolve(TensorSelector('down', 0, 0, 'sa', 'wv')) == \
        'down_blocks.0.attentions.0.transformer_blocks.0.attn1.to_v.weight'
    assert scheme.resolve(TensorSelector('mid', 0, 0, 'ffn', 'w1')) == \
        'mid_block.attentions.0.transformer_blocks.0.ff.net.0.proj.weight'
    # up_blocks are numbered from the bottom; the full-resolution up block is up_blocks.3
    assert scheme.resolve(TensorSelector('up', 0, 2, 'ca', 'wv')) == \
        'up_blocks.3.attentions.2.transformer_blocks.0.attn2.to_v.weight'
    assert scheme.resolve(TensorSelector('up', 2, 0, 'sa', 'wo')) == \
        'up_blocks.1.attentions.0.transformer_blocks.0.attn1.to_out.0.weight'
    with pytest.raises(UnknownTarget):
        scheme.resolve(TensorSelector('down', 3, 0, 'sa', 'wv'))
    with pytest.raises(UnknownTarget):
        scheme.resolve(TensorSelector('up', 3, 0, 'ca', 'wv'))


def test_27_names_are_injective(toy_cfg):
    for scheme in (NamingScheme.canonical(toy_cfg.topology), NamingScheme.sd2()):
        selectors = list(scheme.selectors())
        names = scheme.tensor_names()
        assert len(selectors) == len(set(selectors))
        assert len(names) == len(set(names))
    # 2 down levels x 2, 1 mid, 2 up levels x 3 transformers, 10 matrices each
    assert len(NamingScheme.canonical(toy_cfg.topology).tensor_names()) == (2 * 2 + 1 + 2 * 3) * 10
    assert len(NamingScheme.sd2().tensor_names()) == (3 * 2 + 1 + 3 * 3) * 10
    assert NamingScheme.sd2().topology == SD2_TOPOLOGY


def test_28_invalid_selectors():
    with pytest.raises(InvalidSelector):
        TensorSelector('down', 0, 0, 'ffn', 'wv')
    with pytest.raises(InvalidSelector):
        TensorSelector('down', 0, 0, 'sa', 'w1')
    with pytest.raises(InvalidSelector):
        TensorSelector('left', 0, 0, 'sa', 'wv')
    with pytest.raises(InvalidSelector):
        TensorSelector('down', -1, 0, 'sa', 'wv')
    selector = TensorSelector('up', 1, 2, 'ffn', 'w2')
    assert (selector.block, selector.layer, selector.matrix) == (BlockKind.UP, LayerKind.FFN, MatrixRole.WF2)
    assert selector.label == 'up.1.t2.ffn.w2'
    assert TensorSelector('mid', 0, 0, 'ca', 'wq').label == 'mid.t0.ca.wq'
    assert TensorSelector.from_dict(selector.to_dict()) == selector


def test_29_scheme_tables_from_files(toy_cfg, naming_scheme_path, tmp_path):
    scheme = load_scheme(naming_scheme_path, toy_cfg.topology)
    assert scheme.name == 'flat-unet'
    assert scheme.resolve(TensorSelector('down', 0, 0, 'sa', 'wq')) == 'enc0_0/self_q'
    assert scheme.resolve(TensorSelector('up', 0, 0, 'ffn', 'w2')) == 'dec1_0/fc2'
    assert scheme.resolve(TensorSelector('mid', 0, 0, 'ca', 'wv')) == 'bottleneck_0/cross_v'
    assert len(scheme.tensor_names()) == 3 * 10
    assert load_scheme('canonical', toy_cfg.topology).name == 'canonical'
    assert load_scheme('sd2', toy_cfg.topology).name == 'sd2'

    incomplete = tmp_path / 'incomplete.yaml'
    incomplete.write_text("topology: {num_levels: 2, attention_levels: 1}\n"
                          "prefixes: {down: 'd{level}', mid: 'm', up: 'u{level}'}\n"
                          "suffixes: {sa.wq: q}\n")
    with pytest.raises(ValidationError) as e:
        NamingScheme.from_yaml(str(incomplete))
    assert e.value.path == 'sa.wk'
    unknown = tmp_path / 'unknown.yaml'
    unknown.write_text("topology: {num_levels: 2, attention_levels: 1}\nprefix: {}\n")
    with pytest.raises(ValidationError) as e:
        NamingScheme.from_yaml(str(unknown))
    assert e.value.path == 'prefix'
