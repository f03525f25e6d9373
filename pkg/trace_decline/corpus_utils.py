import collections
import json
import os
import re

from absl import logging

from trace_decline import artifacts
from trace_decline.artifacts import CodeArtifactId, DIRECTORY, FILE, GRANULARITIES
from trace_decline.errors import IoError, ParseError, ValidationError

ACCEPTED = 'accepted'
DECLINED = 'declined'
MANUAL = 'manual'
GERRIT = 'gerrit'
MERGED = 'MERGED'

PROPOSALS_FILE = 'proposals.jsonl'
GROUND_TRUTH_FILE = 'ground_truth.jsonl'
AUX_LABELS_FILE = 'aux_labels.jsonl'
GERRIT_CHANGES_FILE = 'gerrit_changes.jsonl'
META_FILE = 'dataset.json'

Message = collections.namedtuple('Message', ['author', 'body', 'created_at'])
Proposal = collections.namedtuple('Proposal', ['id', 'title', 'status', 'messages', 'url'])
GroundTruth = collections.namedtuple('GroundTruth', ['proposal_id', 'granularity', 'links', 'label_source'])
GerritChange = collections.namedtuple('GerritChange', ['change_key', 'status', 'commit_message', 'changed_files'])
Dataset = collections.namedtuple('Dataset', ['repo_commit', 'proposals', 'ground_truths', 'aux_labels'])
Discussion = collections.namedtuple('Discussion', ['text', 'length'])
ValidationReport = collections.namedtuple('ValidationReport', ['findings', 'counts'])

UNKNOWN_ARTIFACT = 'unknown_artifact'
KIND_MISMATCH = 'kind_mismatch'
MISSING_LABEL = 'missing_label'


def iterate_jsonl(filename):
  """
  Iterate over the JSON objects of a JSONL file, skipping blank lines.

  Returns:
    An iterator over (line number, object)

  Raises:
    ParseError: On a line that is not a JSON object
  """
  try:
    with open(filename, 'r', encoding='utf-8') as f:
      for line_no, line in enumerate(f, start=1):
        if not line.strip():
          continue
        try:
          obj = json.loads(line)
        except ValueError as e:
          raise ParseError(f'Malformed JSON in {filename} line {line_no}: {e}', path=filename, line=line_no)
        if not isinstance(obj, dict):
          raise ParseError(f'Expected a JSON object in {filename} line {line_no}', path=filename, line=line_no)
        yield line_no, obj
  except OSError as e:
    raise IoError(f'Cannot read {filename}: {e}')


def write_jsonl(filename, objs):
  with open(filename, 'w', encoding='utf-8') as f:
    for obj in objs:
      f.write(json.dumps(obj, sort_keys=True, ensure_ascii=False))
      f.write('\n')


def _field(obj, key, types, filename, line_no, optional=False):
  if key not in obj or obj[key] is None:
    if optional:
      return None
    raise ParseError(f'Missing field "{key}" in {filename} line {line_no}', path=filename, line=line_no)
  value = obj[key]
  # bool is an int subclass
  if not isinstance(value, types) or (isinstance(value, bool) and types is int):
    raise ParseError(f'Field "{key}" has the wrong type in {filename} line {line_no}', path=filename, line=line_no)
  return value


def _proposal_id(obj, key, filename, line_no):
  value = _field(obj, key, int, filename, line_no)
  if value <= 0:
    raise ParseError(f'Proposal id must be positive in {filename} line {line_no}', path=filename, line=line_no)
  return value


def iterate_proposals(filename):
  for line_no, obj in iterate_jsonl(filename):
    status = _field(obj, 'status', str, filename, line_no).lower()
    if status not in (ACCEPTED, DECLINED):
      raise ParseError(f'Unknown status "{status}" in {filename} line {line_no}', path=filename, line=line_no)
    messages = []
    for m in _field(obj, 'messages', list, filename, line_no):
      if not isinstance(m, dict):
        raise ParseError(f'Malformed message in {filename} line {line_no}', path=filename, line=line_no)
      messages.append(Message(author=_field(m, 'author', str, filename, line_no),
                              body=_field(m, 'body', str, filename, line_no),
                              created_at=_field(m, 'created_at', str, filename, line_no, optional=True)))
    if not messages:
      raise ValidationError(f'Proposal in {filename} line {line_no} has no messages')
    yield Proposal(id=_proposal_id(obj, 'id', filename, line_no),
                   title=_field(obj, 'title', str, filename, line_no),
                   status=status,
                   messages=tuple(messages),
                   url=_field(obj, 'url', str, filename, line_no, optional=True))


def iterate_ground_truths(filename):
  for line_no, obj in iterate_jsonl(filename):
    granularity = artifacts.normalize_granularity(_field(obj, 'granularity', str, filename, line_no))
    if granularity is None:
      raise ParseError(f'Unknown granularity in {filename} line {line_no}', path=filename, line=line_no)
    source = _field(obj, 'source', str, filename, line_no, optional=True) or MANUAL
    if source not in (MANUAL, GERRIT):
      raise ParseError(f'Unknown label source "{source}" in {filename} line {line_no}', path=filename, line=line_no)
    try:
      links = frozenset(artifacts.parse_artifact_id(x) for x in _field(obj, 'links', list, filename, line_no))
    except ValueError as e:
      raise ParseError(f'{e} in {filename} line {line_no}', path=filename, line=line_no)
    if source == GERRIT and not links:
      raise ValidationError(f'Gerrit-derived ground truth without links in {filename} line {line_no}')
    yield GroundTruth(proposal_id=_proposal_id(obj, 'proposal_id', filename, line_no),
                      granularity=granularity, links=links, label_source=source)


def iterate_gerrit_changes(filename):
  for line_no, obj in iterate_jsonl(filename):
    files = _field(obj, 'changed_files', list, filename, line_no)
    yield GerritChange(change_key=_field(obj, 'change_key', str, filename, line_no),
                       status=_field(obj, 'status', str, filename, line_no),
                       commit_message=_field(obj, 'commit_message', str, filename, line_no),
                       changed_files=tuple(str(x).replace('\\', '/') for x in files))


def iterate_aux_labels(filename):
  for line_no, obj in iterate_jsonl(filename):
    yield (_proposal_id(obj, 'proposal_id', filename, line_no),
           _field(obj, 'label', str, filename, line_no),
           _field(obj, 'value', str, filename, line_no))


def load_proposals(filename):
  return list(iterate_proposals(filename))


def load_ground_truths(filename):
  return list(iterate_ground_truths(filename))


def load_gerrit_changes(filename):
  return list(iterate_gerrit_changes(filename))


def _truth_sort_key(truth):
  return (truth.proposal_id, GRANULARITIES.index(truth.granularity), truth.label_source)


def load_dataset(path):
  """
  Load a dataset directory.

  The directory holds proposals.jsonl and optionally ground_truth.jsonl,
  aux_labels.jsonl and dataset.json ({"repo_commit": ...}).

  Args:
    path: The dataset directory

  Returns:
    A Dataset with proposals sorted by id

  Raises:
    ParseError: On a malformed line (the message names the line number)
    ValidationError: On duplicate proposal ids or dangling references
  """
  if not os.path.isdir(path):
    raise IoError(f'Dataset directory {path} does not exist')
  logging.info('Reading dataset from %s.', path)
  proposals = load_proposals(os.path.join(path, PROPOSALS_FILE))
  ids = set()
  for p in proposals:
    if p.id in ids:
      raise ValidationError(f'Duplicate proposal id {p.id}')
    ids.add(p.id)

  truths = []
  truth_file = os.path.join(path, GROUND_TRUTH_FILE)
  if os.path.exists(truth_file):
    truths = load_ground_truths(truth_file)
  seen = set()
  for t in truths:
    if t.proposal_id not in ids:
      raise ValidationError(f'Ground truth references unknown proposal {t.proposal_id}')
    if (t.proposal_id, t.granularity) in seen:
      raise ValidationError(f'Duplicate {t.granularity} ground truth for proposal {t.proposal_id}')
    seen.add((t.proposal_id, t.granularity))

  aux_labels = collections.defaultdict(dict)
  aux_file = os.path.join(path, AUX_LABELS_FILE)
  if os.path.exists(aux_file):
    for pid, label, value in iterate_aux_labels(aux_file):
      if pid not in ids:
        raise ValidationError(f'Aux label references unknown proposal {pid}')
      aux_labels[pid][label] = value

  repo_commit = None
  meta_file = os.path.join(path, META_FILE)
  if os.path.exists(meta_file):
    with open(meta_file, 'r', encoding='utf-8') as f:
      repo_commit = json.load(f).get('repo_commit')

  logging.info('Read %d proposals and %d ground truths.', len(proposals), len(truths))
  return Dataset(repo_commit=repo_commit,
                 proposals=sorted(proposals, key=lambda p: p.id),
                 ground_truths=sorted(truths, key=_truth_sort_key),
                 aux_labels={k: dict(v) for k, v in sorted(aux_labels.items())})


def proposal_to_dict(p):
  obj = {
    'id': p.id,
    'title': p.title,
    'status': p.status,
    'messages': [{'author': m.author, 'body': m.body, 'created_at': m.created_at} for m in p.messages],
  }
  if p.url is not None:
    obj['url'] = p.url
  return obj


def ground_truth_to_dict(t):
  return {
    'proposal_id': t.proposal_id,
    'granularity': t.granularity,
    'links': [x.canonical for x in artifacts.sorted_ids(t.links)],
    'source': t.label_source,
  }


def save_dataset(dataset, path):
  """Write a dataset directory in canonical order, the inverse of load_dataset."""
  os.makedirs(path, exist_ok=True)
  logging.info('Writing dataset to %s.', path)
  write_jsonl(os.path.join(path, PROPOSALS_FILE),
              [proposal_to_dict(p) for p in sorted(dataset.proposals, key=lambda p: p.id)])
  write_jsonl(os.path.join(path, GROUND_TRUTH_FILE),
              [ground_truth_to_dict(t) for t in sorted(dataset.ground_truths, key=_truth_sort_key)])
  write_jsonl(os.path.join(path, AUX_LABELS_FILE),
              [{'proposal_id': pid, 'label': label, 'value': value}
               for pid in sorted(dataset.aux_labels)
               for label, value in sorted(dataset.aux_labels[pid].items())])
  if dataset.repo_commit is not None:
    with open(os.path.join(path, META_FILE), 'w', encoding='utf-8') as f:
      json.dump({'repo_commit': dataset.repo_commit}, f, sort_keys=True)
      f.write('\n')


def concat_discussion(proposal):
  """
  Render a proposal thread as one text.

  The title comes first on its own line, then every message as
  "--- <author> ---\\n<body>\\n" in the given order.

  Returns:
    A Discussion(text, length) where length counts whitespace-delimited tokens
  """
  parts = [proposal.title, '\n']
  for m in proposal.messages:
    parts.append(f'--- {m.author} ---\n{m.body}\n')
  text = ''.join(parts)
  return Discussion(text=text, length=len(text.split()))


def _reference_pattern(proposal_id, match_issue_urls):
  alternatives = [rf'(?<!\d)#{proposal_id}(?!\d)']
  if match_issue_urls:
    alternatives.append(rf'(?:github\.com/golang/go/issues/|go\.dev/issue/){proposal_id}(?!\d)')
  return re.compile('|'.join(alternatives))


def extract_ground_truth(changes, proposals, snapshot, match_issue_urls=False):
  """
  Derive file and directory ground truth for accepted proposals from Gerrit changes.

  A change contributes when it is MERGED and its commit message references the
  proposal as "#<id>" at a digit boundary. Only changed .go files present in the
  snapshot become links.

  Args:
    changes: A list of GerritChange
    proposals: A list of Proposal; only accepted ones are considered
    snapshot: A RepoSnapshot
    match_issue_urls: Also accept issue URLs ending in the proposal id

  Returns:
    A list of GroundTruth (directory then file per proposal, ascending id)
  """
  merged = []
  for change in changes:
    if change.status.upper() != MERGED:
      logging.debug('Skipping change %s with status %s.', change.change_key, change.status)
      continue
    merged.append(change)

  truths = []
  for proposal in sorted(proposals, key=lambda p: p.id):
    if proposal.status != ACCEPTED:
      continue
    pattern = _reference_pattern(proposal.id, match_issue_urls)
    files = set()
    for change in merged:
      if not pattern.search(change.commit_message):
        continue
      for path in change.changed_files:
        if not path.endswith('.go'):
          continue
        file_id = CodeArtifactId(FILE, path)
        if not snapshot.has(file_id):
          logging.warning('Change %s touches %s, which is not in the snapshot.', change.change_key, path)
          continue
        files.add(file_id)
    if not files:
      logging.info('No merged change references proposal %d.', proposal.id)
      continue
    dirs = {CodeArtifactId(DIRECTORY, artifacts.parent_directory(f.canonical)) for f in files}
    truths.append(GroundTruth(proposal.id, DIRECTORY, frozenset(dirs), GERRIT))
    truths.append(GroundTruth(proposal.id, FILE, frozenset(files), GERRIT))
  return truths


def select_truths(ground_truths):
  """
  Pick the truth each proposal is scored against.

  A manual record wins over Gerrit-derived ones; among Gerrit-derived records
  the file-level one is used.

  Returns:
    A dict mapping proposal id to GroundTruth
  """
  def rank(t):
    return (0 if t.label_source == MANUAL else 1, 0 if t.granularity == FILE else 1)
  selected = {}
  for t in ground_truths:
    if t.proposal_id not in selected or rank(t) < rank(selected[t.proposal_id]):
      selected[t.proposal_id] = t
  return dict(sorted(selected.items()))


def validate_dataset(dataset, snapshot):
  """
  Check a dataset against a snapshot.

  Returns:
    A ValidationReport: findings is a list of (issue class, proposal id, detail)
    and counts maps each issue class found to its number of findings
  """
  findings = []
  labelled = set()
  for t in dataset.ground_truths:
    labelled.add(t.proposal_id)
    for link in artifacts.sorted_ids(t.links):
      if link.kind != t.granularity:
        findings.append((KIND_MISMATCH, t.proposal_id, f'{link.canonical} is a {link.kind}, truth is {t.granularity}'))
      elif not snapshot.has(link):
        findings.append((UNKNOWN_ARTIFACT, t.proposal_id, link.canonical))
  for p in dataset.proposals:
    if p.id not in labelled:
      findings.append((MISSING_LABEL, p.id, 'no ground truth'))
  findings.sort(key=lambda x: (x[1], x[0], x[2]))
  counts = collections.Counter(f[0] for f in findings)
  return ValidationReport(findings=findings, counts=dict(sorted(counts.items())))


def granularity_distribution(ground_truths, proposals=None, status=None):
  """
  Count proposals per ground-truth granularity.

  Args:
    ground_truths: A list of GroundTruth (one is selected per proposal)
    proposals: Optional proposals, needed to filter by status
    status: Optional proposal status to restrict to

  Returns:
    A dict mapping each granularity to {'count', 'share'}, plus 'total'
  """
  truths = select_truths(ground_truths)
  if status is not None:
    if proposals is None:
      raise ValueError('Filtering by status requires the proposals')
    keep = {p.id for p in proposals if p.status == status}
    truths = {k: v for k, v in truths.items() if k in keep}
  counts = collections.Counter(t.granularity for t in truths.values())
  total = sum(counts.values())
  dist = {g: {'count': counts[g], 'share': counts[g] / total if total else 0.0} for g in GRANULARITIES}
  dist['total'] = total
  return dist
