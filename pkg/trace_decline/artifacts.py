import collections
import re

from trace_decline.errors import KindMismatch, MalformedId

# Granularity labels, also used as artifact kinds. Serialized lowercase.
DIRECTORY = 'directory'
FILE = 'file'
FUNCTION = 'function'
GRANULARITIES = (DIRECTORY, FILE, FUNCTION)

ROOT = './'
FUNCTION_SEP = '::'

_CALLABLE_RE = re.compile(r'^(?:\((\*?[^\s()]+)\)\.)?([^\W\d]\w*)$')


class CodeArtifactId(collections.namedtuple('CodeArtifactId', ['kind', 'canonical'])):
  """A directory, file, or function of a repository snapshot.

  Ordering and equality follow (kind, canonical); use `sort_key` when
  bytewise ordering by canonical id alone is needed.
  """

  def __str__(self):
    return self.canonical

  @property
  def file_path(self):
    """The file part of a function id (or the file id itself)."""
    if self.kind == FUNCTION:
      return self.canonical.split(FUNCTION_SEP, 1)[0]
    return self.canonical

  @property
  def callable_name(self):
    if self.kind != FUNCTION:
      return None
    return self.canonical.split(FUNCTION_SEP, 1)[1]


def sort_key(artifact_id):
  return artifact_id.canonical.encode('utf-8')


def sorted_ids(ids):
  """Sort artifact ids ascending bytewise by canonical id, dropping duplicates."""
  return sorted(set(ids), key=sort_key)


def normalize_granularity(value):
  """
  Normalize a granularity label.

  Args:
    value: A string such as "File" or " directory "

  Returns:
    One of GRANULARITIES, or None if the value names no granularity
  """
  if value is None:
    return None
  value = value.strip().lower()
  return value if value in GRANULARITIES else None


def _check_segments(text, path):
  segments = path.split('/')
  for seg in segments:
    if seg in ('', '.', '..') or '\\' in seg:
      raise MalformedId(f'Invalid path segment {seg!r} in artifact id {text!r}')


def parse_artifact_id(text):
  """
  Parse a canonical artifact id, inferring its kind from its syntax.

  Args:
    text: A canonical id such as "src/net/http/", "src/net/http/server.go" or
          "src/net/http/server.go::(*Server).Serve"

  Returns:
    A CodeArtifactId

  Raises:
    MalformedId: If the text matches none of the three syntactic forms
  """
  if not isinstance(text, str) or not text:
    raise MalformedId(f'Empty or non-text artifact id: {text!r}')
  if FUNCTION_SEP in text:
    if text.count(FUNCTION_SEP) != 1:
      raise MalformedId(f'Function id must contain exactly one "{FUNCTION_SEP}": {text!r}')
    file_part, callable_part = text.split(FUNCTION_SEP)
    if not file_part.endswith('.go'):
      raise MalformedId(f'Function id must name a .go file: {text!r}')
    _check_segments(text, file_part)
    if not _CALLABLE_RE.match(callable_part):
      raise MalformedId(f'Invalid callable name {callable_part!r} in {text!r}')
    return CodeArtifactId(FUNCTION, text)
  if text.endswith('/'):
    if text != ROOT:
      _check_segments(text, text[:-1])
    return CodeArtifactId(DIRECTORY, text)
  if text.endswith('.go'):
    _check_segments(text, text)
    return CodeArtifactId(FILE, text)
  raise MalformedId(f'Artifact id is neither a directory, a .go file nor a function: {text!r}')


def format_artifact_id(artifact_id):
  """Format an artifact id as its canonical text, checking that kind and text agree."""
  parsed = parse_artifact_id(artifact_id.canonical)
  if parsed.kind != artifact_id.kind:
    raise MalformedId(f'Kind {artifact_id.kind} does not match id {artifact_id.canonical!r}')
  return parsed.canonical


def directory_id(path):
  """Build a directory id from a repo-relative path ("" or "." is the root)."""
  path = path.strip('/')
  if path in ('', '.'):
    return CodeArtifactId(DIRECTORY, ROOT)
  return parse_artifact_id(path + '/')


def function_id(file_path, callable_name):
  return parse_artifact_id(f'{file_path}{FUNCTION_SEP}{callable_name}')


def parent_directory(path):
  """
  The canonical parent directory of a repo-relative file or directory path.

  Args:
    path: "a/b/x.go" or "a/b/"

  Returns:
    "a/b/" resp. "a/"; top-level entries return the root "./"
  """
  stripped = path.rstrip('/')
  if '/' not in stripped:
    return ROOT
  return stripped.rsplit('/', 1)[0] + '/'


def ancestor_directories(path):
  """All ancestor directories of a path, root first, excluding the path itself."""
  ancestors = []
  current = path
  while current != ROOT:
    current = parent_directory(current)
    ancestors.append(current)
  return list(reversed(ancestors))


def is_under(path, directory):
  """Whether a file/directory path lies (transitively) under a canonical directory."""
  if directory == ROOT:
    return True
  return path.startswith(directory)


def check_same_kind(ids):
  """Return the single kind shared by all ids (None for no ids) or raise KindMismatch."""
  kinds = {x.kind for x in ids}
  if len(kinds) > 1:
    raise KindMismatch(f'Mixed artifact kinds: {sorted(kinds)}')
  return kinds.pop() if kinds else None
