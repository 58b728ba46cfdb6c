import logging
import math
from typing import Callable, List, NamedTuple, Tuple, Union

import numpy as np
from scipy import linalg

from .data import Dataset, gen_dataset, split_signs, teacher_fn
from .network import NetParams, predict, train_mse
from .utils import OlsError, SpecError, derive_seed
from .validation import InputSpec, KReluTeacher, LinearTeacher, TeacherSpec

logger = logging.getLogger('alignlab.analysis')

RANK_RTOL = 1e-12


class OlsResult(NamedTuple):
    beta: np.ndarray
    gram_condition: float
    residual_mse: float
    rank_deficient: bool
    n: int


def ols(X, y) -> OlsResult:
    """
    Least squares through a QR factorization of X, the minimum norm solution when X has deficient column rank.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    if X.ndim != 2 or X.shape[0] == 0:
        raise OlsError('empty design')
    n, d = X.shape
    s = linalg.svdvals(X)
    rank_deficient = n < d or s[-1] <= RANK_RTOL * s[0]
    if rank_deficient:
        beta = linalg.lstsq(X, y)[0]
        gram_condition = math.inf
    else:
        Q, R = linalg.qr(X, mode='economic')
        beta = linalg.solve_triangular(R, Q.T @ y)
        gram_condition = float((s[0] / s[-1]) ** 2)
    r = y - X @ beta
    return OlsResult(beta, gram_condition, float(r @ r / n), bool(rank_deficient), n)


def ols_split(dataset: Dataset, beta_ref) -> Tuple[OlsResult, OlsResult]:
    """
    OLS restricted to S+ = {x_k^⊤β_ref >= 0} and to S-.
    """
    split = split_signs(dataset, beta_ref)
    results = []
    for name, idx in (('S+', split.pos_indices), ('S-', split.neg_indices)):
        if len(idx) == 0:
            raise OlsError(f'{name} is empty for this reference direction', half=name)
        result = ols(dataset.X[idx], dataset.y[idx])
        if result.rank_deficient:
            logger.info('%s has %d points in d=%d, using the minimum norm solution', name, len(idx), dataset.d)
        results.append(result)
    return results[0], results[1]


class LimitPredictor(NamedTuple):
    beta_plus: np.ndarray
    beta_minus: np.ndarray

    @classmethod
    def from_split(cls, plus: OlsResult, minus: OlsResult) -> 'LimitPredictor':
        return cls(plus.beta, minus.beta)


def limit_predict(lp: LimitPredictor, x) -> Union[float, np.ndarray]:
    """
    h(x) = (β+^⊤x)₊ − (−β-^⊤x)₊
    """
    x = np.asarray(x, dtype=float)
    value = np.maximum(x @ lp.beta_plus, 0) - np.maximum(-(x @ lp.beta_minus), 0)
    return float(value) if x.ndim == 1 else value


Predictor = Union[NetParams, LimitPredictor, OlsResult, LinearTeacher, KReluTeacher, Callable[[np.ndarray], np.ndarray]]


def as_function(predictor: Predictor) -> Callable[[np.ndarray], np.ndarray]:
    if isinstance(predictor, NetParams):
        return lambda X: predict(predictor, X)
    if isinstance(predictor, LimitPredictor):
        return lambda X: limit_predict(predictor, X)
    if isinstance(predictor, OlsResult):
        return lambda X: X @ predictor.beta
    if isinstance(predictor, (LinearTeacher, KReluTeacher)):
        return lambda X: teacher_fn(predictor, X)
    return predictor


class HeldOutMetrics(NamedTuple):
    test_loss_half: float
    test_mse: float
    excess_risk: float
    std_err: float


def held_out_set(input_spec: InputSpec, teacher: TeacherSpec, n_test: int, seed: int) -> Dataset:
    """
    Fresh noisy sample, the same (seed, n_test) gives the same sample so comparisons between predictors are paired.
    """
    return gen_dataset(input_spec, teacher, n_test, derive_seed(seed, 'test'))


def test_metrics(
    predictor: Predictor,
    input_spec: InputSpec,
    teacher: TeacherSpec,
    n_test: int,
    seed: int,
    *,
    dataset: Dataset = None,
) -> HeldOutMetrics:
    """
    Monte Carlo test loss with the ½ convention of the training loss and as a plain MSE, excess risk is the MSE
    minus σ². Pass `dataset` to reuse a sample already drawn by `held_out_set`.
    """
    if dataset is None:
        dataset = held_out_set(input_spec, teacher, n_test, seed)
    sq = (as_function(predictor)(dataset.X) - dataset.y) ** 2
    mse = float(np.mean(sq))
    std_err = float(np.std(sq) / math.sqrt(dataset.n))
    return HeldOutMetrics(mse / 2, mse, mse - teacher.noise_std ** 2, std_err)


class CosineHistogram(NamedTuple):
    edges: np.ndarray
    counts: np.ndarray
    cosines: np.ndarray
    zero_norm: int

    def fraction_above(self, t: float) -> float:
        if len(self.cosines) == 0:
            return math.nan
        return float(np.mean(self.cosines > t))


def abs_cosines(params: NetParams, reference) -> Tuple[np.ndarray, int]:
    reference = np.asarray(reference, dtype=float)
    ref_norm = np.linalg.norm(reference)
    if ref_norm == 0:
        raise SpecError('reference direction must be nonzero')
    norms = np.linalg.norm(params.W, axis=1)
    moving = norms > 0
    cos = np.abs(params.W[moving] @ reference) / (norms[moving] * ref_norm)
    return np.minimum(cos, 1.0), int(np.count_nonzero(~moving))


def cosine_histogram(params: NetParams, reference, bins: int = 20) -> CosineHistogram:
    """
    Histogram of |cos(w_i, reference)| on [0, 1], neurons with w_i = 0 are left out and counted in `zero_norm`.
    """
    cos, zero_norm = abs_cosines(params, reference)
    counts, edges = np.histogram(cos, bins=bins, range=(0.0, 1.0))
    return CosineHistogram(edges, counts, cos, zero_norm)


def effective_width(params: NetParams, cos_threshold: float = 0.95, dormant_ratio: float = 1e-3) -> int:
    """
    Number of direction clusters among the neurons that carry weight, by greedy leader clustering on the signed
    cosine of w_i/‖w_i‖ visiting neurons by decreasing |a_i|·‖w_i‖.

    Neurons below `dormant_ratio` of the largest weight are ignored.
    """
    norms = np.linalg.norm(params.W, axis=1)
    weight = np.abs(params.a) * norms
    if not np.any(weight > 0):
        return 0
    order = np.argsort(-weight, kind='stable')
    leaders: List[np.ndarray] = []
    for i in order:
        if weight[i] < dormant_ratio * weight[order[0]]:
            break
        u = params.W[i] / norms[i]
        if not any(u @ leader >= cos_threshold for leader in leaders):
            leaders.append(u)
    return len(leaders)


def interpolation_check(
    params: NetParams, dataset: Dataset, tol: float = 1 / 3, abs_tol: float = 1e-4, sigma2: float = None
) -> bool:
    """
    Whether the training MSE is below tol·σ², or below `abs_tol` for noiseless data.
    """
    sigma2 = dataset.sigma2 if sigma2 is None else sigma2
    mse = train_mse(params, dataset)
    if sigma2:
        return mse <= tol * sigma2
    return mse <= abs_tol


def l2_rel_gap(f, g, X) -> float:
    """
    √(mean (f − g)² / mean g²) over the rows of X
    """
    X = np.asarray(X, dtype=float)
    fx, gx = as_function(f)(X), as_function(g)(X)
    denom = float(np.mean(gx ** 2))
    if denom == 0:
        return math.inf if np.any(fx != gx) else 0.0
    return math.sqrt(float(np.mean((fx - gx) ** 2)) / denom)
