import json
import logging
import math
from enum import Enum, unique
from itertools import combinations, product
from pathlib import Path
from typing import Dict, Iterable, Iterator, List, NamedTuple, Optional, Tuple, Union

import numpy as np
from scipy.linalg import null_space

from .data import Dataset, population_D, sigma_beta, split_signs
from .network import ActivationPattern, NetParams, pattern_array, predict
from .utils import DimensionMismatch, EnumerationBudgetExceeded, SpecError, canonical_json, rng_stream
from .validation import CellMode, InputSpec, TeacherSpec

logger = logging.getLogger('alignlab.geometry')

DEFAULT_ZETA = 1e-12
DEFAULT_TOL = 1e-9
MAX_BOUNDARY = 12
EXACT_MAX_D = 4
EXACT_MAX_N = 64
PERTURBATION = 1e-7
SAMPLED_BUDGET = 100_000
_CHUNK_ELEMENTS = 1 << 22


@unique
class Verdict(str, Enum):
    extremal = 'extremal'
    not_extremal = 'not_extremal'
    boundary_ambiguous = 'boundary_ambiguous'


class PatternCell(NamedTuple):
    pattern: ActivationPattern
    representative: np.ndarray


class ExtremalCandidate(NamedTuple):
    w: np.ndarray
    D: np.ndarray
    pattern: ActivationPattern
    eta: np.ndarray
    verdict: Verdict
    residual: float
    iterations: int = 0

    def record(self) -> dict:
        return dict(
            w=self.w,
            D=self.D,
            pattern=self.pattern.signs,
            eta=self.eta,
            verdict=self.verdict,
            residual=self.residual,
        )


def _as_X(dataset: Union[Dataset, np.ndarray]) -> np.ndarray:
    return dataset.X if isinstance(dataset, Dataset) else np.asarray(dataset, dtype=float)


def _vector(w, d: int) -> np.ndarray:
    w = np.asarray(w, dtype=float)
    if w.shape != (d,):
        raise DimensionMismatch(f'w has shape {w.shape}, expected ({d},)')
    return w


def _unit(w) -> np.ndarray:
    norm = np.linalg.norm(w)
    if norm == 0:
        raise SpecError('direction must be nonzero')
    return w / norm


def D_n(w, dataset: Dataset, params: Optional[NetParams] = None) -> np.ndarray:
    """
    D_n(w, θ) = (1/n)·Σ_k 1{x_k^⊤w > 0}·(y_k − h_θ(x_k))·x_k, params=None is the zero network.
    """
    w = _vector(w, dataset.d)
    r = dataset.y if params is None else dataset.y - predict(params, dataset.X)
    active = dataset.X @ w > 0
    return (r * active) @ dataset.X / dataset.n


def G_n(w, dataset: Dataset) -> float:
    w = _vector(w, dataset.d)
    return float(w @ D_n(w, dataset))


def max_cell_count(n: int, d: int) -> int:
    """
    Upper bound 2·Σ_{k<d} C(n−1, k) on the number of cells of a central arrangement of n hyperplanes in R^d.
    """
    return 2 * sum(math.comb(n - 1, k) for k in range(d))


class CellSet:
    """
    Strict activation patterns of a dataset, bit packed one row per cell with bit k set where x_k^⊤w > 0, sorted by
    pattern, with a unit representative direction for each.

    Work over the cells goes through `chunks()` so at most a few million pattern entries are unpacked at a time.
    """

    def __init__(self, packed: np.ndarray, representatives: np.ndarray, n: int, exact: bool):
        self.packed = packed
        self.representatives = representatives
        self.n = n
        self.exact = exact

    def __len__(self) -> int:
        return self.packed.shape[0]

    def __iter__(self) -> Iterator[PatternCell]:
        for start, stop in self.chunks():
            for row, w in zip(self.signs(start, stop), self.representatives[start:stop]):
                yield PatternCell(ActivationPattern.from_array(row), w)

    def chunks(self) -> Iterator[Tuple[int, int]]:
        size = _chunk_rows(self.n)
        for start in range(0, len(self), size):
            yield start, min(start + size, len(self))

    def active(self, start: int = 0, stop: int = None) -> np.ndarray:
        return np.unpackbits(self.packed[start:stop], axis=1, count=self.n).astype(bool)

    def signs(self, start: int = 0, stop: int = None) -> np.ndarray:
        return np.where(self.active(start, stop), 1, -1).astype(np.int8)


def _chunk_rows(n: int) -> int:
    return max(1, _CHUNK_ELEMENTS // max(n, 1))


def iter_cell_fields(cells: CellSet, dataset: Dataset) -> Iterator[Tuple[int, np.ndarray]]:
    """
    D_n(w, 0) of the cells chunk by chunk, one row per cell, with the index of the first cell of the chunk.
    """
    weighted = dataset.y[:, None] * dataset.X / dataset.n
    for start, stop in cells.chunks():
        yield start, cells.active(start, stop).astype(float) @ weighted


class _NonGeneric(Exception):
    pass


class _CellCollector:
    """
    Distinct strict patterns of the unit directions added, the first representative of each pattern is kept.
    """

    def __init__(self, X: np.ndarray, zeta: float):
        self.X = X
        self.band = zeta * np.linalg.norm(X, axis=1)
        self.packed: List[np.ndarray] = []
        self.representatives: List[np.ndarray] = []

    def add(self, W: np.ndarray):
        size = _chunk_rows(self.X.shape[0])
        for start in range(0, W.shape[0], size):
            chunk = W[start : start + size]
            margins = chunk @ self.X.T
            strict = np.all(np.abs(margins) > self.band, axis=1)
            if not np.any(strict):
                continue
            packed, first = np.unique(np.packbits(margins[strict] > 0, axis=1), axis=0, return_index=True)
            self.packed.append(packed)
            self.representatives.append(chunk[strict][first])

    def cells(self, exact: bool) -> CellSet:
        n, d = self.X.shape
        if not self.packed:
            return CellSet(np.zeros((0, (n + 7) // 8), dtype=np.uint8), np.zeros((0, d)), n, exact)
        packed, first = np.unique(np.concatenate(self.packed), axis=0, return_index=True)
        return CellSet(packed, np.concatenate(self.representatives)[first], n, exact)


def _exact_cells(X: np.ndarray, zeta: float, delta: float) -> CellSet:
    n, d = X.shape
    norms = np.linalg.norm(X, axis=1)
    if np.any(norms == 0):
        raise _NonGeneric('zero input')
    collector = _CellCollector(X, zeta)
    if d == 1:
        collector.add(np.array([[1.0], [-1.0]]))
        return collector.cells(exact=True)
    if n <= d:
        if np.linalg.matrix_rank(X) < n:
            raise _NonGeneric('linearly dependent inputs')
        W = np.array(list(product((1.0, -1.0), repeat=n))) @ np.linalg.pinv(X).T
        collector.add(W / np.linalg.norm(W, axis=1, keepdims=True))
        return collector.cells(exact=True)

    signs = np.array(list(product((1.0, -1.0), repeat=d - 1)))
    directions = []
    for subset in combinations(range(n), d - 1):
        A = X[list(subset)]
        u = null_space(A)
        if u.shape[1] != 1:
            raise _NonGeneric(f'inputs {subset} are linearly dependent')
        u = u[:, 0]
        rest = np.ones(n, dtype=bool)
        rest[list(subset)] = False
        margin = np.min(np.abs(X[rest] @ u) / norms[rest])
        if margin <= max(zeta, delta):
            raise _NonGeneric(f'more than {d - 1} hyperplanes meet at the ray through inputs {subset}')
        V = signs @ np.linalg.pinv(A).T
        V /= np.linalg.norm(V, axis=1, keepdims=True)
        step = delta * min(1.0, margin / 2)
        for ray in (u, -u):
            W = ray[None, :] + step * V
            directions.append(W / np.linalg.norm(W, axis=1, keepdims=True))
    collector.add(np.concatenate(directions))
    return collector.cells(exact=True)


def _sampled_cells(X: np.ndarray, budget: int, zeta: float, seed: int) -> CellSet:
    rng = rng_stream(seed, 'sampled-cells')
    collector = _CellCollector(X, zeta)
    size = _chunk_rows(X.shape[0])
    for start in range(0, budget, size):
        W = rng.standard_normal((min(size, budget - start), X.shape[1]))
        collector.add(W / np.linalg.norm(W, axis=1, keepdims=True))
    return collector.cells(exact=False)


def arrangement(
    dataset: Union[Dataset, np.ndarray],
    mode: CellMode = CellMode.auto,
    *,
    budget: int = SAMPLED_BUDGET,
    zeta: float = DEFAULT_ZETA,
    delta: float = PERTURBATION,
    max_d: int = EXACT_MAX_D,
    max_n: int = EXACT_MAX_N,
    seed: int = 0,
) -> CellSet:
    """
    Strict activation patterns realizable by some direction, each with a unit representative.

    Exact mode perturbs the rays where d−1 of the hyperplanes x_k^⊤w = 0 meet into every neighbouring cell, so it
    needs inputs in general position; degenerate inputs fall back to sampling `budget` random directions.
    Auto mode is exact within the (max_d, max_n) budget and sampled otherwise.
    """
    X = _as_X(dataset)
    n, d = X.shape
    within_budget = d <= max_d and n <= max_n
    if mode == CellMode.exact and not within_budget:
        raise EnumerationBudgetExceeded(
            f'exact enumeration is limited to d <= {max_d} and n <= {max_n}, got d={d} n={n}', d=d, n=n
        )
    if mode == CellMode.exact or (mode == CellMode.auto and within_budget):
        try:
            return _exact_cells(X, zeta, delta)
        except _NonGeneric as e:
            logger.warning('inputs not in general position (%s), falling back to %d sampled directions', e, budget)
    return _sampled_cells(X, budget, zeta, seed)


def enumerate_cells(dataset: Union[Dataset, np.ndarray], mode: CellMode = CellMode.auto, **kwargs) -> List[PatternCell]:
    return list(arrangement(dataset, mode, **kwargs))


def _vertex_fields(X: np.ndarray, y: np.ndarray, active: np.ndarray, boundary: np.ndarray):
    n = X.shape[0]
    for etas in product((0.0, 1.0), repeat=len(boundary)):
        eta = active.astype(float)
        eta[boundary] = etas
        yield eta, (eta * y) @ X / n


def _pattern_residual(X: np.ndarray, D: np.ndarray, target: np.ndarray, band: float) -> float:
    """
    largest normalized margin |x_k^⊤D|/(‖x_k‖·‖D‖) over coordinates where the pattern of D disagrees with
    target, entries of D inside the band match either sign but a zero target needs a zero entry
    """
    norms = np.linalg.norm(X, axis=1)
    cos = X @ D / (np.where(norms > 0, norms, 1.0) * np.linalg.norm(D))
    zero = np.abs(cos) <= band
    signs = np.where(zero, 0, np.sign(cos))
    mismatch = np.where(target == 0, ~zero, ~zero & (signs != target))
    return float(np.max(np.abs(cos[mismatch]), initial=0.0))


def certify_extremal(
    dataset: Dataset,
    w,
    tol: float = DEFAULT_TOL,
    *,
    zeta: float = DEFAULT_ZETA,
    max_boundary: int = MAX_BOUNDARY,
) -> ExtremalCandidate:
    """
    Check whether some D in the set of subgradient fields at w (θ = 0) is extremal: D = 0 or its activation pattern
    equals ±A_n(w).

    Coordinates on the boundary (|x_k^⊤w| <= ζ‖x_k‖) take every vertex η_k ∈ {0, 1}, when there are more than
    `max_boundary` of them the verdict is boundary_ambiguous.
    """
    X, y = dataset.X, dataset.y
    w = _unit(_vector(w, dataset.d))
    norms = np.linalg.norm(X, axis=1)
    margins = X @ w
    on_boundary = np.abs(margins) <= zeta * norms
    pattern = np.where(on_boundary, 0, np.sign(margins)).astype(int)
    active = pattern > 0
    boundary = np.flatnonzero(on_boundary & (norms > 0))
    scale = float(np.mean(np.abs(y) * norms)) or 1.0

    if len(boundary) > max_boundary:
        eta = active.astype(float)
        D = (eta * y) @ X / dataset.n
        return ExtremalCandidate(w, D, ActivationPattern.from_array(pattern), eta, Verdict.boundary_ambiguous, math.nan)

    best = None
    for eta, D in _vertex_fields(X, y, active, boundary):
        size = np.linalg.norm(D) / scale
        if size <= tol:
            residual = size
        else:
            residual = min(_pattern_residual(X, D, s * pattern, tol) for s in (1, -1))
        if best is None or residual < best[0]:
            best = residual, eta, D
        if residual <= tol:
            break
    residual, eta, D = best
    verdict = Verdict.extremal if residual <= tol else Verdict.not_extremal
    return ExtremalCandidate(w, D, ActivationPattern.from_array(pattern), eta, verdict, residual)


def find_extremal(
    dataset: Dataset,
    w0,
    max_iter: int = 100,
    tol: float = DEFAULT_TOL,
    *,
    zeta: float = DEFAULT_ZETA,
    max_boundary: int = MAX_BOUNDARY,
) -> ExtremalCandidate:
    """
    Pattern fixpoint iteration w ← ±D_n(w, 0)/‖D_n(w, 0)‖, the sign follows G_n(w0) so negative starts look for
    minimizers. A repeated pattern is certified, a cycle or running out of iterations is boundary_ambiguous.
    """
    w = _unit(_vector(w0, dataset.d))
    direction = -1.0 if G_n(w, dataset) < 0 else 1.0
    seen = [tuple(pattern_array(w, dataset, zeta))]
    for i in range(1, max_iter + 1):
        D = D_n(w, dataset)
        if not np.any(D):
            return certify_extremal(dataset, w, tol, zeta=zeta, max_boundary=max_boundary)._replace(iterations=i)
        w = _unit(direction * D)
        pattern = tuple(pattern_array(w, dataset, zeta))
        if pattern == seen[-1]:
            return certify_extremal(dataset, w, tol, zeta=zeta, max_boundary=max_boundary)._replace(iterations=i)
        if pattern in seen:
            logger.debug('pattern iteration cycled after %d steps', i)
            break
        seen.append(pattern)
    candidate = certify_extremal(dataset, w, tol, zeta=zeta, max_boundary=max_boundary)
    return candidate._replace(verdict=Verdict.boundary_ambiguous, iterations=len(seen))


def _screen(fields: np.ndarray, signs: np.ndarray, X: np.ndarray, scale: float, tol: float) -> np.ndarray:
    """
    Cells whose field is zero or carries ± the pattern of the cell, the same test certify_extremal makes at a
    representative strictly inside the cell.
    """
    norms = np.linalg.norm(X, axis=1)
    size = np.linalg.norm(fields, axis=1)
    zero = size / scale <= tol
    cos = fields @ X.T / (np.where(norms > 0, norms, 1.0)[None, :] * np.where(zero, 1.0, size)[:, None])
    loud = np.abs(cos) > tol
    side = np.sign(cos)
    plus = np.max(np.where(loud & (side != signs), np.abs(cos), 0.0), axis=1)
    minus = np.max(np.where(loud & (side != -signs), np.abs(cos), 0.0), axis=1)
    return zero | (np.minimum(plus, minus) <= tol)


def extremal_set(
    dataset: Dataset,
    mode: CellMode = CellMode.auto,
    tol: float = DEFAULT_TOL,
    *,
    zeta: float = DEFAULT_ZETA,
    max_boundary: int = MAX_BOUNDARY,
    cells: CellSet = None,
    **cell_kwargs,
) -> List[ExtremalCandidate]:
    """
    Certify one representative per strict cell and keep the distinct extremal vectors D, in pattern order.

    Cells are screened a chunk at a time and only those passing are certified one by one.
    """
    if cells is None:
        cells = arrangement(dataset, mode, zeta=zeta, **cell_kwargs)
    found: List[ExtremalCandidate] = []
    scale = float(np.mean(np.abs(dataset.y) * np.linalg.norm(dataset.X, axis=1))) or 1.0
    for start, fields in iter_cell_fields(cells, dataset):
        signs = cells.signs(start, start + len(fields))
        for i in np.flatnonzero(_screen(fields, signs, dataset.X, scale, tol)):
            w = cells.representatives[start + i]
            candidate = certify_extremal(dataset, w, tol, zeta=zeta, max_boundary=max_boundary)
            if candidate.verdict != Verdict.extremal:
                continue
            if found and np.min(np.linalg.norm(np.array([c.D for c in found]) - candidate.D, axis=1)) <= tol * scale:
                continue
            found.append(candidate)
    return found


class SupDeviation(NamedTuple):
    value: float
    normalized: float
    cells: int
    exact: bool


def sup_deviation(
    dataset: Dataset,
    input_spec: InputSpec,
    teacher: TeacherSpec,
    mode: CellMode = CellMode.auto,
    **cell_kwargs,
) -> SupDeviation:
    """
    max over strict cells of ‖D_n(cell, 0) − D(w)‖ with the closed form population field D(w) = Σβ*/2.

    `normalized` divides by √(d·log n / n · mean‖y_k x_k‖²).
    """
    target = population_D(input_spec, teacher, np.ones(dataset.d))
    cells = arrangement(dataset, mode, **cell_kwargs)
    value = 0.0 if len(cells) else float(np.linalg.norm(target))
    for _, fields in iter_cell_fields(cells, dataset):
        value = max(value, float(np.max(np.linalg.norm(fields - target, axis=1))))
    n, d = dataset.n, dataset.d
    energy = float(np.mean((dataset.y * np.linalg.norm(dataset.X, axis=1)) ** 2))
    rate = math.sqrt(d * math.log(max(n, 2)) / n * energy)
    return SupDeviation(value, value / rate if rate else math.nan, len(cells), cells.exact)


class NeuronAlignment(NamedTuple):
    cos_to_plus: float
    cos_to_minus: float
    norm: float
    a_sign: int
    zero_norm: bool
    norm_ratio: Optional[float] = None


class AlignmentReport(NamedTuple):
    neurons: List[NeuronAlignment]
    tau: Optional[float]
    target: np.ndarray
    bounds_hold: Optional[bool]

    @property
    def min_target_cos(self) -> float:
        """
        smallest cosine between a neuron and the target of its output sign, +Σβ* for a_i > 0 and −Σβ* otherwise
        """
        cos = [n.cos_to_plus if n.a_sign > 0 else n.cos_to_minus for n in self.neurons if not n.zero_norm]
        return min(cos, default=math.nan)


def alignment_tau(epsilon: float, lam: float, target: np.ndarray) -> float:
    return epsilon * math.log(1 / lam) / np.linalg.norm(target)


def alignment_probe(
    params: NetParams,
    input_spec: InputSpec,
    teacher: TeacherSpec,
    *,
    epsilon: float = None,
    lam: float = None,
    params_0: NetParams = None,
) -> AlignmentReport:
    """
    Per neuron cosines of w_i with ±Σβ*, the early alignment time τ = ε·ln(1/λ)/‖Σβ*‖ when ε and λ are given,
    and with the initial parameters whether every |a_i(t)|/|a_i(0)| lies in [λ^(2ε), λ^(−2ε)].
    """
    target = sigma_beta(input_spec, teacher)
    target_norm = np.linalg.norm(target)
    norms = np.linalg.norm(params.W, axis=1)
    ratios = None
    if params_0 is not None:
        ratios = np.abs(params.a) / np.abs(params_0.a)
    neurons = []
    for i, (w, norm) in enumerate(zip(params.W, norms)):
        cos = float(w @ target / (norm * target_norm)) if norm > 0 and target_norm > 0 else 0.0
        neurons.append(
            NeuronAlignment(
                cos_to_plus=cos,
                cos_to_minus=-cos,
                norm=float(norm),
                a_sign=int(np.sign(params.a[i])),
                zero_norm=bool(norm == 0),
                norm_ratio=None if ratios is None else float(ratios[i]),
            )
        )
    tau = bounds_hold = None
    if epsilon is not None and lam is not None:
        tau = alignment_tau(epsilon, lam, target)
        if ratios is not None:
            bounds_hold = bool(np.all((lam ** (2 * epsilon) <= ratios) & (ratios <= lam ** (-2 * epsilon))))
    return AlignmentReport(neurons, tau, target, bounds_hold)


def decoupled_fields(params: NetParams, dataset: Dataset, beta) -> Tuple[np.ndarray, np.ndarray]:
    """
    Residual correlations restricted to the sign split of `beta`: D+ over S+ and D- over S-.
    """
    split = split_signs(dataset, beta)
    r = dataset.y - predict(params, dataset.X)
    fields = []
    for idx in (split.pos_indices, split.neg_indices):
        fields.append(r[idx] @ dataset.X[idx] / dataset.n)
    return fields[0], fields[1]


def sector_violations(params: NetParams, dataset: Dataset, beta) -> Dict[str, int]:
    """
    Number of (neuron, sample) pairs where a positive neuron's activation differs from membership of S+, or a
    negative neuron's from membership of S-.
    """
    split = split_signs(dataset, beta)
    in_plus = np.zeros(dataset.n, dtype=bool)
    in_plus[split.pos_indices] = True
    active = dataset.X @ params.W.T > 0
    moving = np.linalg.norm(params.W, axis=1) > 0
    plus = moving & (params.a > 0)
    minus = moving & (params.a < 0)
    return dict(
        plus=int(np.count_nonzero(active[:, plus] != in_plus[:, None])),
        minus=int(np.count_nonzero(active[:, minus] != ~in_plus[:, None])),
    )


def write_extremal_jsonl(candidates: Iterable[ExtremalCandidate], path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open('w') as f:
        for c in candidates:
            f.write(canonical_json(c.record()) + '\n')
    return path


def read_extremal_jsonl(path: Union[str, Path]) -> List[dict]:
    with Path(path).open() as f:
        return [json.loads(line) for line in f if line.strip()]
