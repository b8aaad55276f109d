#!/usr/bin/env python3
"""
Named binary16 tensor container with copy-on-write bit flips.

The on-disk layout is the one used by diffusion-model distributions:

    [u64 little-endian header length][UTF-8 JSON header][raw data]

with header entries name -> {"dtype": "F16", "shape": [...],
"data_offsets": [begin, end]} relative to the data region, plus an
optional "__metadata__" map of strings.
"""
from dataclasses import dataclass
import json
import logging
import math
import struct
from typing import BinaryIO, Iterable, Mapping

import numpy as np

from .errors import DtypeError, ElementIndexError, MalformedHeader, RangeError, UnknownTensor
from .half16_codec import Half16, bit_means, check_bit_position
from .util import sha256_hex

F16 = 'F16'
METADATA_KEY = '__metadata__'
HEADER_ALIGNMENT = 8

DTYPE_SIZES = {
    'BOOL': 1, 'U8': 1, 'I8': 1, 'F8_E4M3': 1, 'F8_E5M2': 1,
    'U16': 2, 'I16': 2, 'F16': 2, 'BF16': 2,
    'U32': 4, 'I32': 4, 'F32': 4,
    'U64': 8, 'I64': 8, 'F64': 8,
}

logger = logging.getLogger('CkCheckpointStore')


@dataclass(frozen=True)
class TensorEntry:
    name: str
    dtype: str
    shape: tuple[int, ...]
    begin: int
    end: int

    @property
    def element_count(self) -> int:
        return math.prod(self.shape)

    @property
    def nbytes(self) -> int:
        return self.end - self.begin

    def to_json(self) -> dict:
        return {'dtype': self.dtype, 'shape': list(self.shape), 'data_offsets': [self.begin, self.end]}


@dataclass(frozen=True)
class CheckpointHeader:
    entries: dict[str, TensorEntry]
    metadata: dict[str, str] | None = None
    raw: bytes = b''    # header text as read, padding included

    def encode(self) -> bytes:
        """Header bytes; a parsed header is written back unchanged"""
        if self.raw:
            return self.raw
        header = {}
        if self.metadata is not None:
            header[METADATA_KEY] = self.metadata
        for name, entry in self.entries.items():
            header[name] = entry.to_json()
        text = json.dumps(header, separators=(',', ':')).encode('utf-8')
        return text + b' ' * (-len(text) % HEADER_ALIGNMENT)

    def validate(self, data_length: int, require_f16: bool = True) -> None:
        for entry in self.entries.values():
            if entry.dtype not in DTYPE_SIZES:
                raise DtypeError(f"{entry.name}: unknown dtype {entry.dtype}")
            if require_f16 and entry.dtype != F16:
                raise DtypeError(f"{entry.name}: dtype {entry.dtype} is not binary16")
            if not 0 <= entry.begin <= entry.end <= data_length:
                raise RangeError(f"{entry.name}: range [{entry.begin}, {entry.end}) outside data of {data_length} bytes")
            expected = entry.element_count * DTYPE_SIZES[entry.dtype]
            if entry.nbytes != expected:
                raise RangeError(f"{entry.name}: range holds {entry.nbytes} bytes, shape {list(entry.shape)} needs {expected}")
        previous = None
        for entry in sorted(self.entries.values(), key=lambda e: (e.begin, e.end)):
            if entry.nbytes == 0:
                continue
            if previous and entry.begin < previous.end:
                raise RangeError(f"{entry.name} overlaps {previous.name}")
            previous = entry


def _unique_keys(pairs: list) -> dict:
    keys = [k for k, _ in pairs]
    if len(keys) != len(set(keys)):
        raise MalformedHeader(f"duplicate keys in header object: {sorted(k for k in set(keys) if keys.count(k) > 1)}")
    return dict(pairs)


def _parse_entry(name: str, spec) -> TensorEntry:
    if not isinstance(spec, dict):
        raise MalformedHeader(f"{name}: entry is not an object")
    missing = [k for k in ('dtype', 'shape', 'data_offsets') if k not in spec]
    if missing:
        raise MalformedHeader(f"{name}: missing {', '.join(missing)}")
    dtype, shape, offsets = spec['dtype'], spec['shape'], spec['data_offsets']
    if not isinstance(dtype, str):
        raise MalformedHeader(f"{name}: dtype must be a string")
    if not isinstance(shape, list) or not all(isinstance(d, int) and not isinstance(d, bool) and d >= 0 for d in shape):
        raise MalformedHeader(f"{name}: shape must be a list of non-negative integers")
    if (not isinstance(offsets, list) or len(offsets) != 2
            or not all(isinstance(o, int) and not isinstance(o, bool) for o in offsets)):
        raise MalformedHeader(f"{name}: data_offsets must be [begin, end]")
    return TensorEntry(name, dtype, tuple(shape), offsets[0], offsets[1])


class CkCheckpointStore:
    """
    An immutable container plus a sparse overlay of flipped elements.

    Views produced by flip_element share the base bytes and the decoded-array
    cache; only the overlay is per view, so a view is cheap and owned by one
    trial.
    """

    def __init__(self,
                 header: CheckpointHeader,
                 data: bytes,
                 overlay: Mapping[str, Mapping[int, int]] | None = None,
                 _cache: dict | None = None) -> None:
        self.header = header
        self.data = bytes(data)
        self._overlay = {name: dict(elements) for name, elements in (overlay or {}).items() if elements}
        self._cache = {} if _cache is None else _cache

    def __repr__(self) -> str:
        return f"CkCheckpointStore({len(self.header.entries)} tensors, {self.modified_count} modified)"

    @classmethod
    def from_arrays(cls, arrays: Mapping[str, np.ndarray], metadata: dict[str, str] | None = None) -> 'CkCheckpointStore':
        """Build a container from float16-compatible arrays, laid out in mapping order"""
        entries = {}
        chunks = []
        offset = 0
        for name, array in arrays.items():
            half = np.asarray(array).astype('<f2')
            chunk = half.tobytes()
            entries[name] = TensorEntry(name, F16, tuple(half.shape), offset, offset + len(chunk))
            chunks.append(chunk)
            offset += len(chunk)
        header = CheckpointHeader(entries, metadata)
        header = CheckpointHeader(entries, metadata, header.encode())
        return cls(header, b''.join(chunks))

    # lookup
    def names(self) -> list[str]:
        return list(self.header.entries)

    def entry(self, name: str) -> TensorEntry:
        try:
            return self.header.entries[name]
        except KeyError:
            raise UnknownTensor(f"no tensor named {name!r}") from None

    def element_count(self, name: str) -> int:
        return self.entry(name).element_count

    def shape(self, name: str) -> tuple[int, ...]:
        return self.entry(name).shape

    def _f16_entry(self, name: str) -> TensorEntry:
        entry = self.entry(name)
        if entry.dtype != F16:
            raise DtypeError(f"{name}: dtype {entry.dtype} is not binary16")
        return entry

    def _check_index(self, entry: TensorEntry, flat_index: int) -> int:
        if isinstance(flat_index, bool) or not isinstance(flat_index, (int, np.integer)):
            raise ElementIndexError(f"{entry.name}: index must be an integer, got {flat_index!r}")
        if not 0 <= flat_index < entry.element_count:
            raise ElementIndexError(f"{entry.name}: index {flat_index} outside [0, {entry.element_count})")
        return int(flat_index)

    # reads
    def base_bits(self, name: str) -> np.ndarray:
        """Read-only uint16 patterns of the unmodified tensor"""
        entry = self._f16_entry(name)
        key = (name, 'bits')
        if key not in self._cache:
            if entry.element_count == 0:
                bits = np.zeros(0, dtype='<u2')
                bits.flags.writeable = False
            else:
                bits = np.frombuffer(self.data, dtype='<u2', count=entry.element_count, offset=entry.begin)
            self._cache[key] = bits
        return self._cache[key]

    def bits(self, name: str) -> np.ndarray:
        """uint16 patterns with this view's flips applied"""
        base = self.base_bits(name)
        elements = self._overlay.get(name)
        if not elements:
            return base
        patched = base.copy()
        for flat_index, pattern in elements.items():
            patched[flat_index] = pattern
        patched.flags.writeable = False
        return patched

    def read(self, name: str, flat_index: int) -> Half16:
        entry = self._f16_entry(name)
        flat_index = self._check_index(entry, flat_index)
        elements = self._overlay.get(name, {})
        if flat_index in elements:
            return Half16(elements[flat_index])
        return Half16(int(self.base_bits(name)[flat_index]))

    def as_array(self, name: str, dtype=np.float32) -> np.ndarray:
        """Decoded tensor in its declared shape; unmodified tensors are converted once per base"""
        dtype = np.dtype(dtype)
        shape = self.shape(name)
        if name in self._overlay:
            return self.bits(name).view('<f2').astype(dtype).reshape(shape)
        key = (name, dtype.str)
        if key not in self._cache:
            array = self.base_bits(name).view('<f2').astype(dtype).reshape(shape)
            array.flags.writeable = False
            self._cache[key] = array
        return self._cache[key]

    # copy-on-write mutation
    @property
    def modified_count(self) -> int:
        return sum(len(v) for v in self._overlay.values())

    def modified_elements(self) -> list[tuple[str, int]]:
        return sorted((name, i) for name, elements in self._overlay.items() for i in elements)

    def with_pattern(self, name: str, flat_index: int, pattern: int) -> 'CkCheckpointStore':
        """A new view reading pattern at (name, flat_index); the receiver is unchanged"""
        entry = self._f16_entry(name)
        flat_index = self._check_index(entry, flat_index)
        overlay = dict(self._overlay)
        elements = dict(overlay.get(name, {}))
        if pattern == int(self.base_bits(name)[flat_index]):
            elements.pop(flat_index, None)
        else:
            elements[flat_index] = pattern
        overlay[name] = elements
        return CkCheckpointStore(self.header, self.data, overlay, self._cache)

    def flip_element(self, name: str, flat_index: int, p: int) -> 'CkCheckpointStore':
        p = check_bit_position(p)
        current = self.read(name, flat_index)
        return self.with_pattern(name, flat_index, current.bits ^ (1 << p))

    def base(self) -> 'CkCheckpointStore':
        """The unmodified store this view derives from"""
        return CkCheckpointStore(self.header, self.data, None, self._cache)

    # persistence
    def materialize(self) -> bytes:
        if not self._overlay:
            return self.data
        buffer = bytearray(self.data)
        for name, elements in self._overlay.items():
            begin = self.header.entries[name].begin
            for flat_index, pattern in elements.items():
                offset = begin + 2 * flat_index
                buffer[offset:offset + 2] = struct.pack('<H', pattern)
        return bytes(buffer)

    def checksum(self) -> str:
        return sha256_hex(self.materialize())


def parse_checkpoint(stream: bytes | bytearray | memoryview | BinaryIO, require_f16: bool = True) -> CkCheckpointStore:
    """
    Parse a container.

    With require_f16 the container may hold binary16 tensors only; without it
    other dtypes are kept as opaque entries so a real checkpoint can be
    corrupted and written back.
    """
    if hasattr(stream, 'read'):
        stream = stream.read()
    stream = bytes(stream)
    if len(stream) < 8:
        raise MalformedHeader(f"stream of {len(stream)} bytes has no header length")
    (header_length,) = struct.unpack('<Q', stream[:8])
    if 8 + header_length > len(stream):
        raise MalformedHeader(f"header length {header_length} exceeds stream of {len(stream)} bytes")
    raw = stream[8:8 + header_length]
    try:
        decoded = json.loads(raw.decode("utf-8"), object_pairs_hook=_unique_keys)
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise MalformedHeader(f"header is not JSON: {e}") from e
    if not isinstance(decoded, dict):
        raise MalformedHeader("header is not a JSON object")

    metadata = decoded.pop(METADATA_KEY, None)
    if metadata is not None and (not isinstance(metadata, dict)
                                 or not all(isinstance(k, str) and isinstance(v, str) for k, v in metadata.items())):
        raise MalformedHeader(f"{METADATA_KEY} must map strings to strings")
    entries = {name: _parse_entry(name, spec) for name, spec in decoded.items()}
    header = CheckpointHeader(entries, metadata, raw)
    data = stream[8 + header_length:]
    header.validate(len(data), require_f16)
    logger.debug(f"parsed {len(entries)} tensors, {len(data)} data bytes")
    return CkCheckpointStore(header, data)


def write_checkpoint(store: CkCheckpointStore) -> bytes:
    header = store.header.encode()
    return struct.pack('<Q', len(header)) + header + store.materialize()


def load_checkpoint(path: str, require_f16: bool = True) -> CkCheckpointStore:
    with open(path, 'rb') as f:
        return parse_checkpoint(f, require_f16)


def save_checkpoint(store: CkCheckpointStore, path: str) -> None:
    with open(path, 'wb') as f:
        f.write(write_checkpoint(store))
    logger.info(f"checkpoint written to {path}")


def flip_element(store: CkCheckpointStore, name: str, flat_index: int, p: int) -> CkCheckpointStore:
    return store.flip_element(name, flat_index, p)


def bit_statistics(store: CkCheckpointStore, names: Iterable[str]) -> np.ndarray:
    """Average of each bit over every element of the named tensors, indexed by bit position"""
    names = list(names)
    if not names:
        return bit_means(np.zeros(0, dtype=np.uint16))
    return bit_means(np.concatenate([store.bits(name) for name in names]))


def diff(a: CkCheckpointStore, b: CkCheckpointStore) -> list[tuple[str, int]]:
    """(tensor, flat index) pairs whose patterns differ between two views of one container"""
    differing = []
    for name, entry in a.header.entries.items():
        if entry.dtype != F16:
            continue
        for flat_index in np.flatnonzero(a.bits(name) != b.bits(name)):
            differing.append((name, int(flat_index)))
    return differing


def checksum(store: CkCheckpointStore) -> str:
    return store.checksum()
