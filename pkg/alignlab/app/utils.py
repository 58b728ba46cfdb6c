import csv
import datetime
import hashlib
import json
from decimal import Decimal
from enum import Enum
from pathlib import Path
from types import GeneratorType
from typing import Any, Dict, Iterable, List, Sequence

import numpy as np
from pydantic import BaseModel

MASK64 = (1 << 64) - 1


def isoformat(o):
    return o.isoformat()


class UniversalEncoder(json.JSONEncoder):
    ENCODER_BY_TYPE = {
        datetime.datetime: isoformat,
        datetime.date: isoformat,
        set: list,
        frozenset: list,
        GeneratorType: list,
        bytes: lambda o: o.decode(),
        Decimal: str,
    }

    def default(self, obj):
        if isinstance(obj, Enum):
            return obj.value
        if isinstance(obj, np.ndarray):
            return obj.tolist()
        if isinstance(obj, np.integer):
            return int(obj)
        if isinstance(obj, np.floating):
            return float(obj)
        if isinstance(obj, np.bool_):
            return bool(obj)
        if isinstance(obj, Path):
            return str(obj)
        if isinstance(obj, BaseModel):
            return json.loads(obj.json())
        try:
            encoder = self.ENCODER_BY_TYPE[type(obj)]
        except KeyError:
            return super().default(obj)
        return encoder(obj)


def pretty_lenient_json(data):
    return json.dumps(data, indent=2, sort_keys=True, cls=UniversalEncoder) + '\n'


def canonical_json(data) -> str:
    """
    compact, key-sorted json used for fingerprints and checksums
    """
    return json.dumps(data, sort_keys=True, separators=(',', ':'), cls=UniversalEncoder)


def sha256_hex(data) -> str:
    return hashlib.sha256(canonical_json(data).encode()).hexdigest()


class AlignLabError(RuntimeError):
    status = 'error'

    def __init__(self, details: str = None, **data):
        self.details = details or self.status
        self.data = data
        super().__init__(self.details)

    def as_dict(self) -> Dict[str, Any]:
        return dict(status=self.status, details=self.details, **self.data)


class ConfigError(AlignLabError):
    status = 'config_error'


class SpecError(AlignLabError):
    status = 'invalid_spec'


class DimensionMismatch(SpecError):
    status = 'dimension_mismatch'


class NoClosedForm(AlignLabError):
    status = 'no_closed_form'


class EmptyBatch(AlignLabError):
    status = 'empty_batch'


class NonFiniteGradient(AlignLabError):
    status = 'non_finite_gradient'


class TrainingDiverged(AlignLabError):
    status = 'diverged'


class CheckpointError(AlignLabError):
    status = 'checkpoint_error'


class CheckpointVersionError(CheckpointError):
    status = 'checkpoint_version'


class CheckpointCorrupted(CheckpointError):
    status = 'checkpoint_corrupted'


class CheckpointMismatch(CheckpointError):
    status = 'checkpoint_mismatch'


class EnumerationBudgetExceeded(AlignLabError):
    status = 'budget_exceeded'


class OlsError(AlignLabError):
    status = 'ols_error'


class PlotError(AlignLabError):
    status = 'plot_error'


class RunFailure(AlignLabError):
    status = 'run_failure'


def tag_word(tag: str) -> int:
    return int.from_bytes(hashlib.sha256(tag.encode()).digest()[:8], 'little')


def rng_stream(seed: int, tag: str) -> np.random.Generator:
    """
    Independent counter-based random stream for the purpose `tag` under the master `seed`.

    The same (seed, tag) always gives the same stream, different tags give statistically independent streams.
    """
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed & MASK64, tag_word(tag)])))


def derive_seed(seed: int, tag: str) -> int:
    """
    64 bit child seed, used when a seed has to be recorded (eg. a dataset seed derived from a run seed)
    """
    return int(np.random.SeedSequence([seed & MASK64, tag_word(tag)]).generate_state(1, dtype=np.uint64)[0])


def rng_state(rng: np.random.Generator) -> Dict[str, Any]:
    return json.loads(json.dumps(rng.bit_generator.state, cls=UniversalEncoder))


def restore_rng(state: Dict[str, Any]) -> np.random.Generator:
    if state.get('bit_generator') != 'Philox':
        raise CheckpointCorrupted(f'unsupported bit generator {state.get("bit_generator")!r}')
    bit_generator = np.random.Philox()
    bit_generator.state = state
    return np.random.Generator(bit_generator)


class CsvStream:
    """
    csv file written a row at a time, each row is flushed so a run that dies keeps everything written before it
    """

    def __init__(self, path: Path, header: Sequence[str]):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._file = self.path.open('w', newline='')
        self._writer = csv.writer(self._file)
        self._writer.writerow(header)
        self._file.flush()

    def write(self, row: Sequence[Any]):
        self._writer.writerow([_csv_cell(v) for v in row])
        self._file.flush()

    def close(self):
        self._file.close()

    def __enter__(self) -> 'CsvStream':
        return self

    def __exit__(self, *args):
        self.close()


def write_csv(path: Path, header: Sequence[str], rows: Iterable[Sequence[Any]]) -> Path:
    with CsvStream(path, header) as stream:
        for row in rows:
            stream.write(row)
    return stream.path


def _csv_cell(v):
    if v is None:
        return ''
    if isinstance(v, (bool, np.bool_)):
        return int(v)
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, Enum):
        return v.value
    return v


def read_csv(path: Path) -> List[Dict[str, str]]:
    with Path(path).open(newline='') as f:
        return list(csv.DictReader(f))
