"""Granularity-aware traceability link generation.

A proposal goes through three phases:
  1. decide the granularity (directory, file or function) from the discussion
  2. localize candidates top-down: directories from the repository map, files
     from the map scoped to those directories, functions from file skeletons
  3. ask a Yes/No link decision for every candidate at the chosen granularity

Directory-level proposals stop after the first localization step.
"""
import collections
import concurrent.futures
import json
import os
import re

from absl import logging

from trace_decline import artifacts
from trace_decline import corpus_utils
from trace_decline import repo_model
from trace_decline.artifacts import DIRECTORY, FILE, FUNCTION, GRANULARITIES
from trace_decline.errors import (ConfigError, EmptyInput, GatewayError, MalformedId,
                                  MalformedModelOutput, ParseError)
from trace_decline.llm_gateway import PromptRequest

PHASE_GRANULARITY = 'granularity'
PHASE_DIRECTORIES = 'localize_directories'
PHASE_FILES = 'localize_files'
PHASE_FUNCTIONS = 'localize_functions'
PHASE_LINK = 'link_decision'
STEPS = (PHASE_GRANULARITY, PHASE_DIRECTORIES, PHASE_FILES, PHASE_FUNCTIONS, PHASE_LINK)

REQUIRED_PLACEHOLDERS = {
  PHASE_GRANULARITY: ('DISCUSSION',),
  PHASE_DIRECTORIES: ('DISCUSSION', 'REPO_MAP'),
  PHASE_FILES: ('DISCUSSION', 'REPO_MAP', 'CANDIDATES'),
  PHASE_FUNCTIONS: ('DISCUSSION', 'FILE_SKELETON'),
  PHASE_LINK: ('DISCUSSION', 'ELEMENT'),
}

DEFAULT_TEMPLATE_DIR = os.path.join(os.path.dirname(os.path.abspath(__file__)), 'prompts')
DEFAULT_SYSTEM_PROMPT = ('You are an expert Go developer who traces proposals for the Go project '
                         'to the source code they concern.')

_LABEL_SUFFIX = '\n\nYour previous answer could not be understood. Answer with exactly one word: {choices}.'
_ARRAY_SUFFIX = '\n\nYour previous answer could not be understood. Reply with only a JSON array of strings.'

DROP_UNKNOWN = 'unknown'
DROP_OUT_OF_SCOPE = 'out_of_scope'
DROP_AMBIGUOUS = 'ambiguous'
DROP_MALFORMED = 'malformed'

OK = 'ok'
FAILED = 'failed'

_PLACEHOLDER_RE = re.compile(r'\{\{([A-Z_]+)\}\}')
_FENCE_RE = re.compile(r'```[A-Za-z]*')

PipelineConfig = collections.namedtuple('PipelineConfig', [
  'templates', 'system_prompt', 'model_name', 'temperature', 'max_output_tokens',
  'parse_retries', 'localization_only', 'forced_granularity'])

LinkSet = collections.namedtuple('LinkSet', ['proposal_id', 'granularity', 'links', 'provenance'])
LinkRun = collections.namedtuple('LinkRun', ['proposal_id', 'link_set', 'status', 'failure_phase', 'error'])


class _Unparseable(Exception):
  pass


def load_templates(template_paths=None):
  """
  Read the prompt templates of every step and check their placeholders.

  Args:
    template_paths: Optional dict mapping step names to files; missing steps
                    use the packaged defaults

  Returns:
    A dict mapping step names to template text

  Raises:
    ConfigError: If a file is missing or lacks a required placeholder
  """
  template_paths = dict(template_paths or {})
  unknown = set(template_paths) - set(STEPS)
  if unknown:
    raise ConfigError(f'Unknown template steps: {sorted(unknown)}')
  templates = {}
  for step in STEPS:
    path = template_paths.get(step) or os.path.join(DEFAULT_TEMPLATE_DIR, f'{step}.txt')
    try:
      with open(path, 'r', encoding='utf-8') as f:
        text = f.read()
    except OSError as e:
      raise ConfigError(f'Cannot read template for {step} at {path}: {e}')
    found = set(_PLACEHOLDER_RE.findall(text))
    missing = [p for p in REQUIRED_PLACEHOLDERS[step] if p not in found]
    if missing:
      raise ConfigError(f'Template {path} for {step} lacks placeholders {missing}')
    templates[step] = text
  return templates


def create_pipeline_config(template_paths=None, system_prompt=DEFAULT_SYSTEM_PROMPT, model_name='gpt-4o',
                           temperature=0.0, max_output_tokens=1024, parse_retries=2,
                           localization_only=False, forced_granularity=None):
  if parse_retries < 0:
    raise ConfigError(f'parse_retries must be >= 0, got {parse_retries}')
  if not 0.0 <= float(temperature) <= 2.0:
    raise ConfigError(f'temperature must lie in [0, 2], got {temperature}')
  if forced_granularity is not None and forced_granularity not in GRANULARITIES:
    raise ConfigError(f'Unknown forced granularity {forced_granularity}')
  return PipelineConfig(templates=load_templates(template_paths), system_prompt=system_prompt,
                        model_name=model_name, temperature=float(temperature),
                        max_output_tokens=max_output_tokens, parse_retries=parse_retries,
                        localization_only=localization_only, forced_granularity=forced_granularity)


def render_template(template, fills):
  return _PLACEHOLDER_RE.sub(lambda m: fills.get(m.group(1), m.group(0)), template)


def normalize_reply(text):
  """Trim, lowercase and strip punctuation: " FUNCTION.\\n" -> "function"."""
  return re.sub(r'[^\w\s]', '', text.strip().lower()).strip()


def parse_json_array(text):
  """
  Extract a JSON array of strings from a reply, tolerating code fences and
  surrounding prose.
  """
  text = _FENCE_RE.sub('', text)
  start = text.find('[')
  end = text.rfind(']')
  if start == -1 or end < start:
    raise _Unparseable(f'No JSON array in reply: {text[:200]}')
  try:
    value = json.loads(text[start:end + 1])
  except ValueError as e:
    raise _Unparseable(f'Invalid JSON array: {e}')
  if not all(isinstance(x, str) for x in value):
    raise _Unparseable('JSON array holds non-string items')
  return value


def _ask(gateway, config, step, fills, parse, suffix, scope=None):
  """Render a step's prompt, query the gateway and re-ask on unparseable replies."""
  user = render_template(config.templates[step], fills)
  replies = []
  for attempt in range(config.parse_retries + 1):
    prompt = user if attempt == 0 else user + suffix
    request = PromptRequest(system=config.system_prompt, user=prompt, model_name=config.model_name,
                            temperature=config.temperature, max_output_tokens=config.max_output_tokens)
    reply = gateway.complete(request).text
    replies.append(reply)
    try:
      return parse(reply)
    except _Unparseable as e:
      logging.warning('Unparseable %s reply (attempt %d): %s', step, attempt + 1, e)
  raise MalformedModelOutput(f'No parseable {step} reply after {len(replies)} attempts',
                             raw_replies=replies, scope=scope)


def _parse_granularity(reply):
  label = artifacts.normalize_granularity(normalize_reply(reply))
  if label is None:
    raise _Unparseable(f'Not a granularity: {reply!r}')
  return label


def _parse_yes_no(reply):
  answer = normalize_reply(reply)
  if answer not in ('yes', 'no'):
    raise _Unparseable(f'Not yes/no: {reply!r}')
  return answer == 'yes'


def new_provenance():
  return {'granularity': None, 'directories': [], 'files': [], 'functions': [],
          'decisions': {}, 'dropped': [], 'errors': [], 'partial': False}


def _drop(provenance, phase, candidate, reason, scope=None):
  logging.warning('Dropping %s candidate %r (%s).', phase, candidate, reason)
  if provenance is not None:
    record = {'phase': phase, 'candidate': candidate, 'reason': reason}
    if scope is not None:
      record['scope'] = scope
    provenance['dropped'].append(record)


def _discussion(proposal):
  return corpus_utils.concat_discussion(proposal).text


def decide_granularity(proposal, config, gateway):
  """
  Phase 0: ask for the granularity the proposal should be traced at.

  Returns:
    One of "directory", "file" or "function"

  Raises:
    MalformedModelOutput: If no reply names a granularity
  """
  return _ask(gateway, config, PHASE_GRANULARITY, {'DISCUSSION': _discussion(proposal)},
              _parse_granularity, _LABEL_SUFFIX.format(choices='directory, file, or function'))


def _clean_path(text):
  path = text.strip()
  while path.startswith('./') and path != './':
    path = path[2:]
  return path.lstrip('/') if path != './' else path


def localize_directories(proposal, snapshot, config, gateway, provenance=None):
  """
  Phase 1a: pick relevant directories from the full repository map.

  Returns:
    Directory ids present in the snapshot, sorted and deduplicated
  """
  if snapshot.is_empty():
    raise EmptyInput('Cannot localize in an empty snapshot')
  fills = {'DISCUSSION': _discussion(proposal), 'REPO_MAP': repo_model.render_tree_map(snapshot)}
  replies = _ask(gateway, config, PHASE_DIRECTORIES, fills, parse_json_array, _ARRAY_SUFFIX)
  found = set()
  for raw in replies:
    try:
      dir_id = artifacts.directory_id(_clean_path(raw))
    except MalformedId:
      _drop(provenance, PHASE_DIRECTORIES, raw, DROP_MALFORMED)
      continue
    if not snapshot.has(dir_id):
      _drop(provenance, PHASE_DIRECTORIES, raw, DROP_UNKNOWN)
      continue
    found.add(dir_id)
  return artifacts.sorted_ids(found)


def localize_files(proposal, snapshot, candidate_dirs, config, gateway, provenance=None):
  """
  Phase 1b: pick relevant files within the candidate directories.

  The prompt carries the tree map scoped to the candidate directories. An empty
  candidate set returns no files without asking the model.

  Returns:
    File ids that exist and lie under a candidate directory, sorted
  """
  candidate_dirs = artifacts.sorted_ids(candidate_dirs)
  if not candidate_dirs:
    return []
  fills = {
    'DISCUSSION': _discussion(proposal),
    'REPO_MAP': repo_model.render_tree_map(snapshot, scope=candidate_dirs),
    'CANDIDATES': '\n'.join(d.canonical for d in candidate_dirs),
  }
  replies = _ask(gateway, config, PHASE_FILES, fills, parse_json_array, _ARRAY_SUFFIX)
  found = set()
  for raw in replies:
    try:
      file_id = artifacts.parse_artifact_id(_clean_path(raw))
    except MalformedId:
      file_id = None
    if file_id is None or file_id.kind != FILE:
      _drop(provenance, PHASE_FILES, raw, DROP_MALFORMED)
    elif not snapshot.has(file_id):
      _drop(provenance, PHASE_FILES, raw, DROP_UNKNOWN)
    elif not any(artifacts.is_under(file_id.canonical, d.canonical) for d in candidate_dirs):
      _drop(provenance, PHASE_FILES, raw, DROP_OUT_OF_SCOPE)
    else:
      found.add(file_id)
  return artifacts.sorted_ids(found)


def match_function_name(snapshot, file_id, reply_name):
  """
  Resolve a callable name from a model reply against one file's functions.

  Accepted forms are "Name", "(Recv).Name" (whitespace ignored), an optional
  leading "func " and an optional "<file>::" prefix. A bare name must belong to
  exactly one callable of the file.

  Returns:
    A tuple (function id or None, drop reason or None)
  """
  name = reply_name.strip()
  if name.startswith('func '):
    name = name[len('func '):]
  if artifacts.FUNCTION_SEP in name:
    prefix, name = name.split(artifacts.FUNCTION_SEP, 1)
    if prefix.strip() and _clean_path(prefix) != file_id.canonical:
      return None, DROP_OUT_OF_SCOPE
  name = re.sub(r'\s+', '', name)
  sigs = snapshot.functions[file_id]
  exact = {s.artifact_id for s in sigs if s.callable_name == name}
  if exact:
    return exact.pop(), None
  bare = {s.artifact_id for s in sigs if s.name == name}
  if len(bare) == 1:
    return bare.pop(), None
  if len(bare) > 1:
    return None, DROP_AMBIGUOUS
  return None, DROP_UNKNOWN


def localize_functions(proposal, snapshot, candidate_files, config, gateway, provenance=None):
  """
  Phase 1c: one prompt per candidate file, carrying that file's skeleton.

  A file whose replies stay unparseable is recorded in the provenance (which is
  flagged partial) and the remaining files are still processed.

  Returns:
    The union of matched function ids, sorted
  """
  discussion = _discussion(proposal)
  found = set()
  for file_id in artifacts.sorted_ids(candidate_files):
    fills = {'DISCUSSION': discussion, 'FILE_SKELETON': repo_model.render_file_skeleton(snapshot, file_id)}
    try:
      replies = _ask(gateway, config, PHASE_FUNCTIONS, fills, parse_json_array, _ARRAY_SUFFIX,
                     scope=file_id.canonical)
    except MalformedModelOutput as e:
      logging.warning('Function localization failed for %s: %s', file_id.canonical, e)
      if provenance is None:
        raise
      provenance['errors'].append({'phase': PHASE_FUNCTIONS, 'scope': file_id.canonical,
                                   'message': str(e), 'raw_replies': e.raw_replies})
      provenance['partial'] = True
      continue
    for raw in replies:
      fn_id, reason = match_function_name(snapshot, file_id, raw)
      if fn_id is None:
        _drop(provenance, PHASE_FUNCTIONS, raw, reason, scope=file_id.canonical)
      else:
        found.add(fn_id)
  return artifacts.sorted_ids(found)


def element_text(snapshot, artifact_id):
  """The text shown for an artifact in a link decision."""
  if artifact_id.kind == FILE:
    return snapshot.file_contents[artifact_id]
  if artifact_id.kind == FUNCTION:
    return snapshot.function_source(artifact_id)
  return repo_model.render_tree_map(snapshot, scope=[artifact_id])


def decide_link(proposal, artifact, element, config, gateway):
  """
  Phase 2: ask whether one code element is relevant to the proposal.

  Args:
    proposal: A Proposal
    artifact: The CodeArtifactId being judged
    element: Its text (file content, function span or scoped map)

  Returns:
    True for "yes", False for "no"
  """
  fills = {'DISCUSSION': _discussion(proposal), 'ELEMENT': f'### {artifact.canonical}\n{element}'}
  return _ask(gateway, config, PHASE_LINK, fills, _parse_yes_no,
              _LABEL_SUFFIX.format(choices='Yes or No'), scope=artifact.canonical)


def _in_phase(phase, fn, *args, **kwargs):
  try:
    return fn(*args, **kwargs)
  except (ValueError, GatewayError) as e:
    e.phase = phase
    raise


def run_pipeline(proposal, snapshot, config, gateway):
  """
  Generate the traceability links of one proposal.

  Args:
    proposal: A Proposal
    snapshot: A RepoSnapshot
    config: A PipelineConfig
    gateway: A Gateway

  Returns:
    A LinkSet whose links all have the chosen granularity

  Raises:
    MalformedModelOutput, GatewayError: With a `phase` attribute naming the failing phase
  """
  provenance = new_provenance()
  granularity = config.forced_granularity
  if granularity is None:
    granularity = _in_phase(PHASE_GRANULARITY, decide_granularity, proposal, config, gateway)
  provenance['granularity'] = granularity

  def finish(links):
    return LinkSet(proposal.id, granularity, frozenset(links), provenance)

  dirs = _in_phase(PHASE_DIRECTORIES, localize_directories, proposal, snapshot, config, gateway, provenance)
  provenance['directories'] = [d.canonical for d in dirs]
  if granularity == DIRECTORY:
    return finish(dirs)

  files = _in_phase(PHASE_FILES, localize_files, proposal, snapshot, dirs, config, gateway, provenance)
  provenance['files'] = [f.canonical for f in files]
  candidates = files
  if granularity == FUNCTION and files:
    candidates = _in_phase(PHASE_FUNCTIONS, localize_functions, proposal, snapshot, files, config, gateway,
                           provenance)
    provenance['functions'] = [f.canonical for f in candidates]
  elif granularity == FUNCTION:
    candidates = []
  if config.localization_only:
    return finish(candidates)

  links = []
  for artifact in candidates:
    accepted = _in_phase(PHASE_LINK, decide_link, proposal, artifact, element_text(snapshot, artifact),
                         config, gateway)
    provenance['decisions'][artifact.canonical] = accepted
    if accepted:
      links.append(artifact)
  return finish(links)


def _run_one(proposal, snapshot, config, gateway):
  try:
    return LinkRun(proposal.id, run_pipeline(proposal, snapshot, config, gateway), OK, None, None)
  except (ValueError, GatewayError) as e:
    phase = getattr(e, 'phase', None)
    logging.warning('Proposal %d failed in %s: %s', proposal.id, phase, e)
    return LinkRun(proposal.id, None, FAILED, phase, e)


def run_batch(proposals, snapshot, config, gateway, max_workers=4):
  """
  Run the pipeline over many proposals with a bounded worker pool.

  Failures are recorded per proposal and do not stop the batch.

  Returns:
    A list of LinkRun sorted by proposal id
  """
  logging.info('Linking %d proposals with %d workers.', len(proposals), max_workers)
  with concurrent.futures.ThreadPoolExecutor(max_workers=max(1, max_workers)) as pool:
    rows = list(pool.map(lambda p: _run_one(p, snapshot, config, gateway), proposals))
  rows.sort(key=lambda r: r.proposal_id)
  failed = sum(1 for r in rows if r.status == FAILED)
  logging.info('Linked %d proposals (%d failed).', len(rows) - failed, failed)
  return rows


def link_set_to_dict(row):
  link_set = row.link_set
  obj = {
    'proposal_id': row.proposal_id,
    'granularity': link_set.granularity if link_set else None,
    'links': [x.canonical for x in artifacts.sorted_ids(link_set.links)] if link_set else [],
    'status': row.status,
  }
  if row.status == FAILED:
    obj['failure_phase'] = row.failure_phase
  return obj


def write_links(rows, path):
  """Write links.jsonl, one row per proposal in id order."""
  logging.info('Writing links to %s.', path)
  corpus_utils.write_jsonl(path, [link_set_to_dict(r) for r in sorted(rows, key=lambda r: r.proposal_id)])


def write_provenance(rows, path):
  """Write provenance.jsonl beside links.jsonl."""
  objs = []
  for r in sorted(rows, key=lambda r: r.proposal_id):
    obj = {'proposal_id': r.proposal_id, 'status': r.status,
           'provenance': r.link_set.provenance if r.link_set else None}
    if r.error is not None:
      obj['error'] = {'type': type(r.error).__name__, 'message': str(r.error), 'phase': r.failure_phase}
      if isinstance(r.error, MalformedModelOutput):
        obj['error']['raw_replies'] = r.error.raw_replies
    objs.append(obj)
  corpus_utils.write_jsonl(path, objs)


def load_links(path):
  """
  Read links.jsonl back.

  Returns:
    A dict mapping proposal id to LinkSet; failed rows are skipped
  """
  link_sets = {}
  for line_no, obj in corpus_utils.iterate_jsonl(path):
    if obj.get('status', OK) != OK:
      continue
    granularity = artifacts.normalize_granularity(obj.get('granularity'))
    if granularity is None:
      raise ParseError(f'Missing granularity in {path} line {line_no}', path=path, line=line_no)
    try:
      links = frozenset(artifacts.parse_artifact_id(x) for x in obj.get('links', []))
    except MalformedId as e:
      raise ParseError(f'{e} in {path} line {line_no}', path=path, line=line_no)
    link_sets[obj['proposal_id']] = LinkSet(obj['proposal_id'], granularity, links, None)
  return link_sets
