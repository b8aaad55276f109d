"""
Single-event-upset injection into a checkpoint store.

One injection picks one element of one transformer matrix and flips one
bit of its binary16 pattern. The returned view carries the flip as an
overlay; the base store is never touched.
"""
from dataclasses import dataclass, field
import hashlib
import logging

import numpy as np

from .checkpoint_store import CkCheckpointStore
from .errors import InjectionError, RecordMismatch
from .half16_codec import CRITICAL_BIT, Half16, check_bit_position, flip_bit
from .naming_scheme import NamingScheme, TensorSelector

logger = logging.getLogger('fault_injector')


@dataclass(frozen=True)
class UniformRandom:
    """Draw the element uniformly; seed, when set, is mixed into every trial seed"""
    seed: int | None = None


@dataclass(frozen=True)
class Explicit:
    flat_index: int


ElementPolicy = UniformRandom | Explicit


@dataclass(frozen=True)
class InjectionSpec:
    target: TensorSelector
    bit: int = CRITICAL_BIT
    element_policy: ElementPolicy = field(default_factory=UniformRandom)

    def __post_init__(self):
        object.__setattr__(self, 'bit', check_bit_position(self.bit))

    @property
    def target_id(self) -> str:
        return f"{self.target.label}.b{self.bit}"


@dataclass(frozen=True)
class InjectionRecord:
    target_id: str
    tensor: str
    flat_index: int
    bit: int
    original: Half16
    flipped: Half16

    def __post_init__(self):
        if flip_bit(self.original, self.bit) != self.flipped:
            raise RecordMismatch(f"{self.tensor}[{self.flat_index}]: {self.flipped} is not {self.original} with bit {self.bit} flipped")

    def to_dict(self) -> dict:
        return {
            'target_id': self.target_id,
            'tensor': self.tensor,
            'flat_index': self.flat_index,
            'bit': self.bit,
            'original': str(self.original),
            'flipped': str(self.flipped),
        }

    @classmethod
    def from_dict(cls, data: dict) -> 'InjectionRecord':
        return cls(
            target_id=data['target_id'],
            tensor=data['tensor'],
            flat_index=int(data['flat_index']),
            bit=int(data['bit']),
            original=Half16(int(data['original'], 16)),
            flipped=Half16(int(data['flipped'], 16)))


def derive_trial_seed(master_seed: int, target_key: str, trial: int) -> int:
    """
    64-bit seed for one (target, trial) pair, independent of which worker
    runs it or in which order.
    """
    digest = hashlib.blake2b(target_key.encode('utf-8'), digest_size=16).digest()
    key_words = [int.from_bytes(digest[i:i + 4], 'little') for i in range(0, len(digest), 4)]
    sequence = np.random.SeedSequence([int(master_seed), int(trial), *key_words])
    return int(sequence.generate_state(1, np.uint64)[0])


def select_element(policy: ElementPolicy, element_count: int, trial_seed: int) -> int:
    if element_count < 1:
        raise InjectionError(f"no element to select among {element_count}")
    match policy:
        case Explicit(flat_index=flat_index):
            return flat_index
        case UniformRandom(seed=None):
            bit_generator = np.random.Philox(trial_seed)
        case UniformRandom(seed=seed):
            bit_generator = np.random.Philox(np.random.SeedSequence([int(seed), int(trial_seed)]))
        case _:
            raise TypeError(f"unknown element policy {policy!r}")
    return int(np.random.Generator(bit_generator).integers(element_count))


def inject(store: CkCheckpointStore,
           spec: InjectionSpec,
           trial_seed: int,
           scheme: NamingScheme) -> tuple[CkCheckpointStore, InjectionRecord]:
    """
    Flip spec.bit of one element of the resolved tensor.

    Raises UnknownTarget when the selector is outside the scheme's topology
    and ElementIndexError for an explicit index out of bounds.
    """
    tensor = scheme.resolve(spec.target)
    flat_index = select_element(spec.element_policy, store.element_count(tensor), trial_seed)
    original = store.read(tensor, flat_index)
    view = store.with_pattern(tensor, flat_index, flip_bit(original, spec.bit).bits)
    record = InjectionRecord(spec.target_id, tensor, flat_index, spec.bit, original, view.read(tensor, flat_index))
    logger.debug(f"inject {record.target_id} {tensor}[{flat_index}] {record.original} -> {record.flipped}")
    return view, record


def apply_record(store: CkCheckpointStore, record: InjectionRecord) -> CkCheckpointStore:
    """Replay an audited injection onto the store it was taken from"""
    current = store.read(record.tensor, record.flat_index)
    if current != record.original:
        raise RecordMismatch(f"{record.tensor}[{record.flat_index}] holds {current}, record expects {record.original}")
    return store.with_pattern(record.tensor, record.flat_index, record.flipped.bits)


def revert(view: CkCheckpointStore, record: InjectionRecord) -> CkCheckpointStore:
    current = view.read(record.tensor, record.flat_index)
    if current != record.flipped:
        raise RecordMismatch(f"{record.tensor}[{record.flat_index}] holds {current}, record expects {record.flipped}")
    return view.with_pattern(record.tensor, record.flat_index, record.original.bits)
