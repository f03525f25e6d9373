import collections

import numpy as np
from absl import logging

from trace_decline import artifacts
from trace_decline import corpus_utils
from trace_decline import stat_utils
from trace_decline.artifacts import GRANULARITIES
from trace_decline.errors import EmptyInput, MissingLabel

OVERALL = 'overall'
METRICS = ('ga', 'precision', 'recall', 'f1')

LinkScores = collections.namedtuple('LinkScores', ['tp', 'fp', 'fn', 'precision', 'recall', 'f1'])
PerProposalScores = collections.namedtuple('PerProposalScores', [
  'proposal_id', 'ga', 'tp', 'fp', 'fn', 'precision', 'recall', 'f1',
  'predicted_granularity', 'truth_granularity'])
GroupRow = collections.namedtuple('GroupRow', ['group', 'n', 'ga', 'precision', 'recall', 'f1'])
AggregateReport = collections.namedtuple('AggregateReport', ['title', 'rows'])
_Prediction = collections.namedtuple('_Prediction', ['granularity', 'links'])


def score_links(predicted, truth):
  """
  Score a predicted link set against a truth set of the same kind.

  Conventions for empty sets: nothing predicted for an empty truth scores 1 on
  every metric, nothing predicted for a non-empty truth has precision 0, and a
  non-empty prediction for an empty truth has recall 0.

  Args:
    predicted: A set of CodeArtifactId
    truth: A set of CodeArtifactId

  Returns:
    A LinkScores tuple

  Raises:
    KindMismatch: If the ids are of more than one kind
  """
  predicted, truth = set(predicted), set(truth)
  artifacts.check_same_kind(predicted | truth)
  tp = len(predicted & truth)
  fp = len(predicted - truth)
  fn = len(truth - predicted)
  if not predicted:
    precision = 1.0 if not truth else 0.0
  else:
    precision = tp / len(predicted)
  if not truth:
    recall = 1.0 if not predicted else 0.0
  else:
    recall = tp / len(truth)
  f1 = 0.0 if precision + recall == 0 else 2 * precision * recall / (precision + recall)
  return LinkScores(tp, fp, fn, precision, recall, f1)


def score_proposal(link_set, truth):
  """
  Score one proposal, gating on granularity.

  A prediction at the wrong granularity scores 0 on precision, recall and F1
  whatever its links are.

  Args:
    link_set: A LinkSet, or None when the proposal failed
    truth: A GroundTruth

  Returns:
    A PerProposalScores tuple
  """
  predicted = link_set.links if link_set is not None else frozenset()
  predicted_granularity = link_set.granularity if link_set is not None else None
  if predicted_granularity != truth.granularity:
    return PerProposalScores(truth.proposal_id, 0, 0, len(predicted), len(truth.links), 0.0, 0.0, 0.0,
                             predicted_granularity, truth.granularity)
  s = score_links(predicted, truth.links)
  return PerProposalScores(truth.proposal_id, 1, s.tp, s.fp, s.fn, s.precision, s.recall, s.f1,
                           predicted_granularity, truth.granularity)


def _group_row(group, scores):
  return GroupRow(group, len(scores), *[float(np.mean([getattr(s, m) for s in scores])) for m in METRICS])


def macro_aggregate(scores, title='Link Scores'):
  """
  Macro averages by truth granularity and overall.

  Args:
    scores: A non-empty list of PerProposalScores
    title: The report title

  Returns:
    An AggregateReport with one row per truth granularity present, in
    directory/file/function order, followed by the overall row

  Raises:
    EmptyInput: If there are no scores
  """
  if not scores:
    raise EmptyInput('Cannot aggregate zero scores')
  rows = []
  for g in GRANULARITIES:
    group = [s for s in scores if s.truth_granularity == g]
    if group:
      rows.append(_group_row(g, group))
  rows.append(_group_row(OVERALL, scores))
  return AggregateReport(title, rows)


def group_by_label(scores, labels, correct_granularity_only=False, title='Scores by Label'):
  """
  Mean metrics per auxiliary label value.

  Args:
    scores: A list of PerProposalScores
    labels: A dict mapping proposal ids to label values
    correct_granularity_only: Only keep proposals whose granularity was right
    title: The report title

  Returns:
    An AggregateReport with one row per label, ordered bytewise

  Raises:
    MissingLabel: If a scored proposal has no label
  """
  groups = collections.defaultdict(list)
  for s in scores:
    if s.proposal_id not in labels:
      raise MissingLabel(s.proposal_id)
    if correct_granularity_only and not s.ga:
      continue
    groups[str(labels[s.proposal_id])].append(s)
  rows = [_group_row(label, groups[label]) for label in sorted(groups, key=lambda x: x.encode('utf-8'))]
  return AggregateReport(title, rows)


def score_link_sets(link_sets, ground_truths):
  """
  Score every proposal that has a ground truth.

  Args:
    link_sets: A dict mapping proposal ids to LinkSet
    ground_truths: A list of GroundTruth (one is selected per proposal)

  Returns:
    A list of PerProposalScores by proposal id; proposals without a link set
    are scored as failed predictions
  """
  scores = []
  for pid, truth in corpus_utils.select_truths(ground_truths).items():
    link_set = link_sets.get(pid)
    if link_set is None:
      logging.warning('No links for proposal %d; scoring it as a failed prediction.', pid)
    scores.append(score_proposal(link_set, truth))
  return scores


def score_candidates(candidate_rows, ground_truths):
  """
  Localization-only scores of retrieval candidates, one report per k.

  Args:
    candidate_rows: A list of baseline CandidateRow
    ground_truths: A list of GroundTruth

  Returns:
    A dict mapping k to an AggregateReport
  """
  truths = corpus_utils.select_truths(ground_truths)
  by_k = collections.defaultdict(list)
  for row in candidate_rows:
    truth = truths.get(row.proposal_id)
    if truth is None:
      logging.debug('No ground truth for proposal %d.', row.proposal_id)
      continue
    predicted = frozenset(a for a, _ in row.ranked)
    by_k[row.k].append(score_proposal(_Prediction(row.granularity, predicted), truth))
  return {k: macro_aggregate(by_k[k], title=f'Top-{k} Localization') for k in sorted(by_k)}


def length_correlation(scores, lengths, exact=False):
  """
  Spearman correlation between discussion length and each metric.

  Args:
    scores: A list of PerProposalScores
    lengths: A dict mapping proposal ids to discussion lengths
    exact: Use the exact permutation p-value (n <= 10)

  Returns:
    A dict mapping precision, recall and f1 to SpearmanResult
  """
  kept = [s for s in scores if s.proposal_id in lengths]
  x = [lengths[s.proposal_id] for s in kept]
  return {m: stat_utils.spearman_rho(x, [getattr(s, m) for s in kept], exact=exact)
          for m in ('precision', 'recall', 'f1')}
