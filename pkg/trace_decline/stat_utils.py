import collections
import math

import numpy as np
from scipy import stats
from sklearn.metrics import cohen_kappa_score

from trace_decline.errors import DegenerateInput, DegenerateMarginals, ShapeError

SpearmanResult = collections.namedtuple('SpearmanResult', ['rho', 'p_two_sided'])

MAX_EXACT_N = 10


def cohen_kappa(labels_a, labels_b):
  """
  Cohen's kappa between two annotators.

  Args:
    labels_a: Labels of the first annotator
    labels_b: Labels of the second annotator, same length

  Returns:
    kappa = (p_o - p_e) / (1 - p_e); 1.0 when both annotators use one and the
    same label throughout

  Raises:
    ShapeError: If the lists are empty or differ in length
    DegenerateMarginals: If chance agreement is 1 but observed agreement is not
  """
  labels_a, labels_b = list(labels_a), list(labels_b)
  if len(labels_a) != len(labels_b) or not labels_a:
    raise ShapeError(f'Label lists must be non-empty and equal in length, got {len(labels_a)} and {len(labels_b)}')
  a, b = np.array(labels_a, dtype=object), np.array(labels_b, dtype=object)
  alphabet = sorted(set(labels_a) | set(labels_b), key=str)
  p_o = float(np.mean(a == b))
  p_e = sum(float(np.mean(a == l)) * float(np.mean(b == l)) for l in alphabet)
  if math.isclose(p_e, 1.0):
    if p_o == 1.0:
      return 1.0
    raise DegenerateMarginals(f'Chance agreement is 1 but observed agreement is {p_o}')
  return float(cohen_kappa_score(labels_a, labels_b, labels=alphabet))


def _rank_pearson(rx, ry, axis=-1):
  rx = rx - rx.mean(axis=axis, keepdims=True)
  ry = ry - ry.mean()
  return (rx * ry).sum(axis=axis) / np.sqrt((rx ** 2).sum(axis=axis) * (ry ** 2).sum())


def spearman_rho(x, y, exact=False):
  """
  Spearman rank correlation with a two-sided p-value.

  Ties get average ranks and rho is the Pearson correlation of the ranks. The
  p-value uses the Student-t approximation with n-2 degrees of freedom, or an
  exact permutation test when exact is set and n <= 10.

  Args:
    x: A list of numbers
    y: A list of numbers, same length, at least 3

  Returns:
    A SpearmanResult

  Raises:
    ShapeError: If the lengths differ or are below 3
    DegenerateInput: If either rank vector is constant
  """
  if len(x) != len(y):
    raise ShapeError(f'Inputs differ in length: {len(x)} and {len(y)}')
  n = len(x)
  if n < 3:
    raise ShapeError(f'Spearman correlation needs at least 3 pairs, got {n}')
  rx = stats.rankdata(np.asarray(x, dtype=float))
  ry = stats.rankdata(np.asarray(y, dtype=float))
  if np.ptp(rx) == 0 or np.ptp(ry) == 0:
    raise DegenerateInput('Spearman correlation is undefined for constant input')
  rho = float(_rank_pearson(rx, ry))
  if exact and n <= MAX_EXACT_N:
    res = stats.permutation_test((rx,), lambda r, axis=-1: _rank_pearson(r, ry, axis=axis),
                                 permutation_type='pairings', vectorized=True,
                                 n_resamples=np.inf, alternative='two-sided', batch=50000)
    return SpearmanResult(rho, float(min(1.0, res.pvalue)))
  if abs(rho) >= 1.0 - 1e-12:
    return SpearmanResult(math.copysign(1.0, rho), 0.0)
  t = rho * math.sqrt((n - 2) / (1 - rho ** 2))
  p = 2 * stats.t.sf(abs(t), n - 2)
  return SpearmanResult(rho, float(p))
