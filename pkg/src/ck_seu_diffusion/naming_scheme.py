"""
Structural addressing of transformer weight matrices.

A TensorSelector names a matrix by where it sits in the UNet. A NamingScheme
is a data table turning selectors into tensor names for one checkpoint
layout; the canonical table matches the toy model and the sd2 table the
diffusers layout of a Stable Diffusion 2.x UNet.
"""
from dataclasses import dataclass
from enum import StrEnum
from typing import Iterator

import yaml

from .errors import InvalidSelector, UnknownTarget, ValidationError


class BlockKind(StrEnum):
    DOWN = 'down'
    MID = 'mid'
    UP = 'up'


class LayerKind(StrEnum):
    SA = 'sa'
    CA = 'ca'
    FFN = 'ffn'


class MatrixRole(StrEnum):
    WQ = 'wq'
    WK = 'wk'
    WV = 'wv'
    WO = 'wo'
    WF1 = 'w1'
    WF2 = 'w2'


ATTENTION_MATRICES = (MatrixRole.WQ, MatrixRole.WK, MatrixRole.WV, MatrixRole.WO)
FFN_MATRICES = (MatrixRole.WF1, MatrixRole.WF2)


@dataclass(frozen=True)
class TensorSelector:
    block: BlockKind
    level: int
    transformer_index: int
    layer: LayerKind
    matrix: MatrixRole

    def __post_init__(self):
        try:
            object.__setattr__(self, 'block', BlockKind(self.block))
            object.__setattr__(self, 'layer', LayerKind(self.layer))
            object.__setattr__(self, 'matrix', MatrixRole(self.matrix))
        except ValueError as e:
            raise InvalidSelector(str(e)) from e
        if self.level < 0 or self.transformer_index < 0:
            raise InvalidSelector(f"negative level or transformer index: {self}")
        if self.layer == LayerKind.FFN and self.matrix not in FFN_MATRICES:
            raise InvalidSelector(f"{self.matrix} is not an FFN matrix")
        if self.layer != LayerKind.FFN and self.matrix not in ATTENTION_MATRICES:
            raise InvalidSelector(f"{self.matrix} is not an attention matrix")

    @property
    def label(self) -> str:
        """Scheme-independent id, e.g. down.0.t1.sa.wv or mid.t0.ffn.w1"""
        if self.block == BlockKind.MID:
            return f"mid.t{self.transformer_index}.{self.layer}.{self.matrix}"
        return f"{self.block}.{self.level}.t{self.transformer_index}.{self.layer}.{self.matrix}"

    def to_dict(self) -> dict:
        return {
            'block': str(self.block),
            'level': self.level,
            'transformer': self.transformer_index,
            'layer': str(self.layer),
            'matrix': str(self.matrix),
        }

    @classmethod
    def from_dict(cls, data: dict) -> 'TensorSelector':
        return cls(data['block'], int(data.get('level', 0)), int(data.get('transformer', 0)),
                   data['layer'], data['matrix'])


@dataclass(frozen=True)
class UNetTopology:
    """
    Which blocks hold transformers.

    Levels count from the top (full resolution). The first attention_levels
    down/up levels are cross-attention blocks; deeper levels are ResNet-only.
    """
    num_levels: int
    attention_levels: int
    transformers_per_down_block: int = 2
    transformers_per_up_block: int = 3
    transformers_per_mid_block: int = 1

    def transformer_count(self, block: BlockKind, level: int) -> int:
        if block == BlockKind.MID:
            return self.transformers_per_mid_block if level == 0 else 0
        if not 0 <= level < self.num_levels or level >= self.attention_levels:
            return 0
        if block == BlockKind.DOWN:
            return self.transformers_per_down_block
        return self.transformers_per_up_block

    def contains(self, selector: TensorSelector) -> bool:
        return selector.transformer_index < self.transformer_count(selector.block, selector.level)


SD2_TOPOLOGY = UNetTopology(num_levels=4, attention_levels=3)


@dataclass(frozen=True)
class NamingScheme:
    """
    Tensor-name table for one checkpoint layout.

    prefixes map a block kind to a format string over {level}, {up_level}
    (levels counted from the bottom, as diffusers numbers up blocks) and
    {index}; suffixes map "layer.matrix" to the tail of the name.
    """
    name: str
    topology: UNetTopology
    prefixes: dict[str, str]
    suffixes: dict[str, str]
    separator: str = '.'

    def resolve(self, selector: TensorSelector) -> str:
        if not self.topology.contains(selector):
            raise UnknownTarget(f"{selector.label} is outside the {self.name} topology")
        prefix = self.prefixes[str(selector.block)].format(
            level=selector.level,
            up_level=self.topology.num_levels - 1 - selector.level,
            index=selector.transformer_index)
        suffix = self.suffixes[f"{selector.layer}.{selector.matrix}"]
        return f"{prefix}{self.separator}{suffix}"

    def selectors(self) -> Iterator[TensorSelector]:
        """Every valid selector, down blocks first, then mid, then up"""
        for block in (BlockKind.DOWN, BlockKind.MID, BlockKind.UP):
            levels = [0] if block == BlockKind.MID else range(self.topology.num_levels)
            for level in levels:
                for index in range(self.topology.transformer_count(block, level)):
                    for layer in LayerKind:
                        matrices = FFN_MATRICES if layer == LayerKind.FFN else ATTENTION_MATRICES
                        for matrix in matrices:
                            yield TensorSelector(block, level, index, layer, matrix)

    def tensor_names(self) -> list[str]:
        return [self.resolve(s) for s in self.selectors()]

    @classmethod
    def canonical(cls, topology: UNetTopology) -> 'NamingScheme':
        return cls(name='canonical', topology=topology, prefixes=dict(CANONICAL_PREFIXES),
                   suffixes=dict(CANONICAL_SUFFIXES))

    @classmethod
    def sd2(cls) -> 'NamingScheme':
        return cls(name='sd2', topology=SD2_TOPOLOGY, prefixes=dict(SD2_PREFIXES), suffixes=dict(SD2_SUFFIXES))

    @classmethod
    def from_yaml(cls, path: str) -> 'NamingScheme':
        """
        Load a scheme table

        ---
        name: my-unet
        topology: {num_levels: 4, attention_levels: 3}
        prefixes: {down: ..., mid: ..., up: ...}
        suffixes: {sa.wq: ..., ...}
        """
        with open(path, 'r') as f:
            data = yaml.safe_load(f)
        if not isinstance(data, dict):
            raise ValidationError('', f"{path} does not hold a mapping")
        unknown = set(data) - {'name', 'topology', 'prefixes', 'suffixes', 'separator'}
        if unknown:
            raise ValidationError(sorted(unknown)[0], 'unknown key')
        try:
            topology = UNetTopology(**data['topology'])
            prefixes = data['prefixes']
            suffixes = data['suffixes']
        except (KeyError, TypeError) as e:
            raise ValidationError('', f"incomplete naming scheme: {e}") from e
        missing = [b.value for b in BlockKind if b.value not in prefixes]
        missing += [k for k in CANONICAL_SUFFIXES if k not in suffixes]
        if missing:
            raise ValidationError(missing[0], 'missing entry')
        return cls(name=data.get('name', path), topology=topology, prefixes=prefixes, suffixes=suffixes,
                   separator=data.get('separator', '.'))


CANONICAL_PREFIXES = {
    'down': 'down.{level}.t{index}',
    'mid': 'mid.t{index}',
    'up': 'up.{level}.t{index}',
}
CANONICAL_SUFFIXES = {
    f"{layer}.{matrix}": f"{layer}.{matrix}"
    for layer in LayerKind
    for matrix in (FFN_MATRICES if layer == LayerKind.FFN else ATTENTION_MATRICES)
}

SD2_PREFIXES = {
    'down': 'down_blocks.{level}.attentions.{index}.transformer_blocks.0',
    'mid': 'mid_block.attentions.{index}.transformer_blocks.0',
    'up': 'up_blocks.{up_level}.attentions.{index}.transformer_blocks.0',
}
SD2_SUFFIXES = {
    'sa.wq': 'attn1.to_q.weight',
    'sa.wk': 'attn1.to_k.weight',
    'sa.wv': 'attn1.to_v.weight',
    'sa.wo': 'attn1.to_out.0.weight',
    'ca.wq': 'attn2.to_q.weight',
    'ca.wk': 'attn2.to_k.weight',
    'ca.wv': 'attn2.to_v.weight',
    'ca.wo': 'attn2.to_out.0.weight',
    'ffn.w1': 'ff.net.0.proj.weight',
    'ffn.w2': 'ff.net.2.weight',
}

BUILTIN_SCHEMES = ('canonical', 'sd2')


def resolve_selector(selector: TensorSelector, scheme: NamingScheme) -> str:
    return scheme.resolve(selector)


def load_scheme(name: str, topology: UNetTopology) -> NamingScheme:
    """'canonical' over topology, the built-in 'sd2' table, or a YAML table path"""
    match name:
        case 'canonical':
            return NamingScheme.canonical(topology)
        case 'sd2':
            return NamingScheme.sd2()
        case _:
            return NamingScheme.from_yaml(name)
