import concurrent.futures
import fnmatch
import json
import os
import subprocess
import types

from absl import logging

from trace_decline import artifacts
from trace_decline.artifacts import CodeArtifactId, DIRECTORY, FILE, ROOT
from trace_decline.errors import IoError, ParseError, UnknownArtifact
from trace_decline.go_lexer import FunctionSig, extract_function_signatures

INDENT = '    '


class RepoSnapshot(object):
  """
  An immutable index of a scanned Go codebase.

  Args:
    root_label: A display name for the repository root
    commit_id: The commit the snapshot was taken at, if known
    directories: Directory ids
    files: File ids
    functions: A dict mapping each file id to its FunctionSig list (source order)
    file_contents: A dict mapping each file id to its text
    errors: A list of (file canonical id, message) for files whose signatures
            could not be extracted
    duplicates: A list of (file canonical id, callable name, line) for functions
                left out because an earlier one in the file has the same id
  """
  def __init__(self, root_label, commit_id, directories, files, functions, file_contents, errors=(),
               duplicates=()):
    self._root_label = root_label
    self._commit_id = commit_id
    self._directories = tuple(artifacts.sorted_ids(directories))
    self._files = tuple(artifacts.sorted_ids(files))
    self._functions = types.MappingProxyType(
        {f: tuple(functions.get(f, ())) for f in self._files})
    self._file_contents = types.MappingProxyType({f: file_contents.get(f, '') for f in self._files})
    self._errors = tuple(sorted((str(f), str(m)) for f, m in errors))
    self._duplicates = tuple(sorted((str(f), str(c), int(l)) for f, c, l in duplicates))
    self._dir_set = frozenset(self._directories)
    self._file_set = frozenset(self._files)
    self._function_index = types.MappingProxyType(
        {sig.artifact_id: sig for sigs in self._functions.values() for sig in sigs})
    self._children = None

  root_label = property(lambda self: self._root_label)
  commit_id = property(lambda self: self._commit_id)
  directories = property(lambda self: self._directories)
  files = property(lambda self: self._files)
  functions = property(lambda self: self._functions)
  file_contents = property(lambda self: self._file_contents)
  errors = property(lambda self: self._errors)
  duplicates = property(lambda self: self._duplicates)

  def __eq__(self, other):
    return (isinstance(other, RepoSnapshot) and
            snapshot_to_dict(self) == snapshot_to_dict(other))

  def __hash__(self):
    return hash((self._root_label, self._commit_id, self._files))

  @property
  def function_total(self):
    return sum(len(sigs) for sigs in self._functions.values())

  def is_empty(self):
    return not self._directories

  def has(self, artifact_id):
    if artifact_id.kind == DIRECTORY:
      return artifact_id in self._dir_set
    if artifact_id.kind == FILE:
      return artifact_id in self._file_set
    return artifact_id in self._function_index

  def function(self, artifact_id):
    """The FunctionSig behind a function id, or None."""
    return self._function_index.get(artifact_id)

  def function_ids(self):
    return artifacts.sorted_ids(self._function_index.keys())

  def artifacts_at(self, granularity):
    """All artifact ids of one granularity, sorted bytewise."""
    if granularity == DIRECTORY:
      return list(self._directories)
    if granularity == FILE:
      return list(self._files)
    return self.function_ids()

  def children(self, directory):
    """
    Immediate children of a directory.

    Returns:
      A tuple (subdirectories, files), each sorted bytewise
    """
    if self._children is None:
      children = {d: ([], []) for d in self._directories}
      for d in self._directories:
        if d.canonical != ROOT:
          parent = CodeArtifactId(DIRECTORY, artifacts.parent_directory(d.canonical))
          if parent in children:
            children[parent][0].append(d)
      for f in self._files:
        parent = CodeArtifactId(DIRECTORY, artifacts.parent_directory(f.canonical))
        if parent in children:
          children[parent][1].append(f)
      self._children = {d: (tuple(s), tuple(f)) for d, (s, f) in children.items()}
    return self._children.get(directory, ((), ()))

  def files_under(self, directory):
    return [f for f in self._files if artifacts.is_under(f.canonical, directory.canonical)]

  def function_source(self, artifact_id):
    """The source lines spanned by a function, joined with newlines."""
    sig = self._function_index.get(artifact_id)
    if sig is None:
      raise UnknownArtifact(f'Unknown function {artifact_id.canonical}')
    lines = self._file_contents[sig.file].split('\n')
    return '\n'.join(lines[sig.line_start - 1:sig.line_end])


def _is_excluded(rel_path, exclude_globs, is_dir=False):
  if not exclude_globs:
    return False
  candidates = [rel_path + '/' if is_dir else rel_path]
  candidates += artifacts.ancestor_directories(candidates[0])[1:]
  for pattern in exclude_globs:
    for candidate in candidates:
      if fnmatch.fnmatchcase(candidate, pattern) or fnmatch.fnmatchcase(candidate.rstrip('/'), pattern):
        return True
  return False


def _read_and_extract(abs_path, file_id):
  """
  Read one file and extract its signatures.

  Returns:
    A tuple (content, sigs, error, duplicates); error is None on success and
    duplicates lists (callable name, line) of functions skipped for sharing an id
  """
  with open(abs_path, 'rb') as f:
    content = f.read().decode('utf-8', errors='replace')
  try:
    sigs = extract_function_signatures(content, file_id)
    # Several init functions in one file share an id; the first one is kept
    kept, seen, duplicates = [], set(), []
    for sig in sigs:
      if sig.artifact_id in seen:
        logging.warning('Skipping duplicate function %s at line %d.', sig.artifact_id.canonical, sig.line_start)
        duplicates.append((sig.callable_name, sig.line_start))
        continue
      seen.add(sig.artifact_id)
      kept.append(sig)
  except ValueError as e:
    return content, [], str(e), []
  return content, kept, None, duplicates


def detect_commit_id(root_path):
  """The HEAD commit of a git checkout, or None if it cannot be determined."""
  try:
    out = subprocess.run(['git', '-C', root_path, 'rev-parse', 'HEAD'],
                         capture_output=True, text=True, check=True, timeout=30)
  except (OSError, subprocess.SubprocessError):
    return None
  return out.stdout.strip() or None


def scan_repository(root_path, exclude_globs=(), include_all_dirs=False, commit_id=None, max_workers=8):
  """
  Scan a Go codebase into a RepoSnapshot.

  Args:
    root_path: The repository root
    exclude_globs: fnmatch patterns matched against repo-relative file paths and
                   against every ancestor directory path (with trailing "/")
    include_all_dirs: Keep directories that hold no .go file (transitively);
                      off by default so only Go directories are counted
    commit_id: The commit id to record; detected with git when None
    max_workers: Number of threads reading and parsing files

  Returns:
    A RepoSnapshot

  Raises:
    IoError: If the root cannot be read
  """
  if not os.path.isdir(root_path) or not os.access(root_path, os.R_OK | os.X_OK):
    raise IoError(f'Cannot read repository root {root_path}')
  exclude_globs = list(exclude_globs or [])
  logging.info('Scanning %s (exclude_globs=%s).', root_path, exclude_globs)

  file_paths = {}
  directories = set()
  for dirpath, dirnames, filenames in os.walk(root_path):
    rel_dir = os.path.relpath(dirpath, root_path).replace(os.sep, '/')
    rel_dir = '' if rel_dir == '.' else rel_dir
    dirnames[:] = sorted(d for d in dirnames
                         if not _is_excluded(f'{rel_dir}/{d}'.lstrip('/'), exclude_globs, is_dir=True))
    if include_all_dirs:
      directories.add(artifacts.directory_id(rel_dir))
    for name in sorted(filenames):
      if not name.endswith('.go'):
        continue
      abs_path = os.path.join(dirpath, name)
      if not os.path.isfile(abs_path) or os.path.islink(abs_path):
        continue
      rel_path = f'{rel_dir}/{name}'.lstrip('/')
      if _is_excluded(rel_path, exclude_globs):
        continue
      file_id = CodeArtifactId(FILE, rel_path)
      file_paths[file_id] = abs_path
      for d in artifacts.ancestor_directories(rel_path):
        directories.add(CodeArtifactId(DIRECTORY, d))

  functions, contents, errors, duplicates = {}, {}, [], []
  with concurrent.futures.ThreadPoolExecutor(max_workers=max_workers) as pool:
    futures = {f: pool.submit(_read_and_extract, p, f) for f, p in file_paths.items()}
    for file_id, future in futures.items():
      try:
        content, sigs, error, skipped = future.result()
      except OSError as e:
        content, sigs, error, skipped = '', [], f'{file_id.canonical}: {e}', []
      duplicates += [(file_id.canonical, name, line) for name, line in skipped]
      contents[file_id] = content
      functions[file_id] = sigs
      if error:
        logging.warning('Signature extraction failed: %s', error)
        errors.append((file_id.canonical, error))

  if commit_id is None:
    commit_id = detect_commit_id(root_path)
  root_label = os.path.basename(os.path.abspath(root_path))
  snapshot = RepoSnapshot(root_label, commit_id, directories, file_paths.keys(), functions, contents, errors,
                          duplicates=duplicates)
  logging.info('Scanned %d directories, %d files, %d functions (%d files with errors).',
               len(snapshot.directories), len(snapshot.files), snapshot.function_total, len(errors))
  return snapshot


def snapshot_counts(snapshot):
  """
  Corpus statistics of a snapshot.

  Returns:
    A dict with directories, files, functions, package_directories (directories
    directly holding at least one .go file) and duplicate_functions (functions
    left out for sharing an id with an earlier one, such as a second init)
  """
  package_dirs = {artifacts.parent_directory(f.canonical) for f in snapshot.files}
  return {
    'directories': len(snapshot.directories),
    'files': len(snapshot.files),
    'functions': snapshot.function_total,
    'package_directories': len(package_dirs),
    'duplicate_functions': len(snapshot.duplicates),
  }


def _basename(artifact_id):
  if artifact_id.kind == DIRECTORY:
    return artifact_id.canonical.rstrip('/').rsplit('/', 1)[-1] + '/'
  return artifact_id.canonical.rsplit('/', 1)[-1]


def render_tree_map(snapshot, scope=None):
  """
  Render the repository map: one line per directory or file, indented by depth.

  Subdirectories come before files inside each directory, both sorted bytewise.
  With a scope, only the scoped subtrees and the lines of their ancestors are
  rendered, starting from the top-level directories (no root line) unless the
  root itself is in scope.

  Args:
    snapshot: A RepoSnapshot
    scope: Optional iterable of directory ids

  Returns:
    The map as text, every line ending in "\\n"

  Raises:
    UnknownArtifact: If a scope id is not a directory of the snapshot
  """
  if snapshot.is_empty():
    return ''
  root = CodeArtifactId(DIRECTORY, ROOT)
  lines = []

  def render(directory, depth, full, keep, scoped):
    subdirs, files = snapshot.children(directory)
    for sub in subdirs:
      sub_full = full or sub in scoped
      if sub_full or sub in keep:
        lines.append(INDENT * depth + _basename(sub))
        render(sub, depth + 1, sub_full, keep, scoped)
    if full:
      for f in files:
        lines.append(INDENT * depth + _basename(f))

  if scope is not None:
    scope = set(scope)
    for d in scope:
      if d.kind != DIRECTORY or not snapshot.has(d):
        raise UnknownArtifact(f'Scope directory {d.canonical} is not in the snapshot')
  if scope is None or root in scope:
    lines.append(ROOT)
    render(root, 1, True, set(), set())
  else:
    keep = set()
    for d in scope:
      keep.add(d)
      keep.update(CodeArtifactId(DIRECTORY, a) for a in artifacts.ancestor_directories(d.canonical))
    render(root, 0, False, keep, scope)
  return ''.join(line + '\n' for line in lines)


def render_file_skeleton(snapshot, file_id):
  """
  Compress a file into its signature lines.

  Returns:
    A header line "### <path>" followed by one skeleton line per function, in
    source order

  Raises:
    UnknownArtifact: If the file is not in the snapshot
  """
  if file_id.kind != FILE or not snapshot.has(file_id):
    raise UnknownArtifact(f'Unknown file {file_id.canonical}')
  lines = [f'### {file_id.canonical}']
  lines += [sig.skeleton_line for sig in snapshot.functions[file_id]]
  return '\n'.join(lines) + '\n'


def snapshot_to_dict(snapshot):
  return {
    'root_label': snapshot.root_label,
    'commit_id': snapshot.commit_id,
    'directories': [d.canonical for d in snapshot.directories],
    'files': [f.canonical for f in snapshot.files],
    'functions': {f.canonical: [{
        'name': s.name,
        'receiver_type': s.receiver_type,
        'receiver': s.receiver,
        'line_start': s.line_start,
        'line_end': s.line_end,
        'skeleton_line': s.skeleton_line,
      } for s in sigs] for f, sigs in snapshot.functions.items()},
    'file_contents': {f.canonical: c for f, c in snapshot.file_contents.items()},
    'errors': [list(e) for e in snapshot.errors],
    'duplicates': [list(d) for d in snapshot.duplicates],
  }


def save_snapshot(snapshot, path):
  """Write a snapshot as one JSON document with a stable field order."""
  logging.info('Writing snapshot to %s.', path)
  with open(path, 'w', encoding='utf-8') as f:
    json.dump(snapshot_to_dict(snapshot), f, sort_keys=True, ensure_ascii=False)
    f.write('\n')


def load_snapshot(path):
  """Read a snapshot written by save_snapshot."""
  logging.info('Reading snapshot from %s.', path)
  try:
    with open(path, 'r', encoding='utf-8') as f:
      data = json.load(f)
  except OSError as e:
    raise IoError(f'Cannot read snapshot {path}: {e}')
  except ValueError as e:
    raise ParseError(f'Malformed snapshot {path}: {e}', path=path)
  files = [artifacts.parse_artifact_id(x) for x in data['files']]
  by_path = {f.canonical: f for f in files}
  functions = {}
  for path_text, sigs in data['functions'].items():
    file_id = by_path[path_text]
    functions[file_id] = [FunctionSig(file=file_id, **s) for s in sigs]
  return RepoSnapshot(
    data['root_label'], data.get('commit_id'),
    [artifacts.parse_artifact_id(x) for x in data['directories']],
    files, functions,
    {by_path[k]: v for k, v in data['file_contents'].items()},
    [tuple(e) for e in data.get('errors', [])],
    [tuple(d) for d in data.get('duplicates', [])])
