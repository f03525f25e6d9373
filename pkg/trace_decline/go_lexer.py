"""A small lexer that finds top-level Go function and method declarations.

This is not a Go parser. It tokenizes just enough (comments, interpreted and
raw strings, rune literals, brackets) to follow declarations at the top level
and to match the braces of their bodies, so it also works on files that do not
compile.
"""
import collections
import re

from trace_decline import artifacts
from trace_decline.errors import ParseError

_TOKEN_RE = re.compile(r'''
    (?P<newline>\n)
  | (?P<space>[ \t\r\f\v]+)
  | (?P<line_comment>//[^\n]*)
  | (?P<block_comment>/\*.*?\*/)
  | (?P<raw_string>`[^`]*`)
  | (?P<string>"(?:[^"\\\n]|\\.)*")
  | (?P<rune>'(?:[^'\\\n]|\\.)*')
  | (?P<word>[^\W\d]\w*)
  | (?P<number>\d\w*(?:\.\w*)?)
  | (?P<op>.)
''', re.VERBOSE | re.DOTALL)

_Token = collections.namedtuple('_Token', ['kind', 'text', 'line', 'start', 'end'])

_OPENERS = {'{': '}', '(': ')', '[': ']'}
_CLOSERS = {'}', ')', ']'}
_VALUE_KINDS = {'word', 'number', 'string', 'raw_string', 'rune'}
_RECEIVER_VAR_RE = re.compile(r'^([^\W\d]\w*)\s+(\S.*)$', re.DOTALL)
_COMMENT_RE = re.compile(r'//[^\n]*|/\*.*?\*/', re.DOTALL)


class FunctionSig(collections.namedtuple('FunctionSig', [
    'file', 'name', 'receiver_type', 'receiver', 'line_start', 'line_end', 'skeleton_line'])):
  """
  A top-level function or method with an executable body.

  Fields:
    file: CodeArtifactId of the containing file
    name: The bare callable name
    receiver_type: Canonical receiver type ("*Server", "Map[K,V]"), None for functions
    receiver: The receiver text as written, None for functions
    line_start: 1-based line of the `func` keyword
    line_end: 1-based line of the closing brace of the body
    skeleton_line: "func Name(...) { ... }" or "func (recv) Name(...) { ... }"
  """

  @property
  def callable_name(self):
    if self.receiver_type is None:
      return self.name
    return f'({self.receiver_type}).{self.name}'

  @property
  def artifact_id(self):
    return artifacts.function_id(self.file.canonical, self.callable_name)


def tokenize(text):
  """
  Split Go source into significant tokens.

  Whitespace and comments are dropped, except that newlines (including those
  inside block comments) are kept as "newline" tokens because they end
  statements.

  Args:
    text: Go source text

  Returns:
    An iterator over _Token tuples
  """
  pos = 0
  line = 1
  n = len(text)
  while pos < n:
    m = _TOKEN_RE.match(text, pos)
    kind = m.lastgroup
    value = m.group()
    if kind == 'block_comment':
      if '\n' in value:
        yield _Token('newline', '\n', line, m.start(), m.end())
    elif kind not in ('space', 'line_comment'):
      yield _Token(kind, value, line, m.start(), m.end())
    line += value.count('\n')
    pos = m.end()


def canonical_receiver_type(receiver):
  """
  Reduce a receiver to the type used in canonical function ids.

  The receiver variable is removed and all whitespace deleted, while pointer
  stars and type parameters are kept: "s *Server" -> "*Server",
  "m *Map[K, V]" -> "*Map[K,V]", "Buffer" -> "Buffer". Redundant parentheses
  around the type are dropped: "t (*T)" -> "*T", "t *(T)" -> "*T".
  """
  text = _COMMENT_RE.sub(' ', receiver).strip()
  m = _RECEIVER_VAR_RE.match(text)
  type_text = m.group(2) if m else text
  return _strip_parens(re.sub(r'\s+', '', type_text))


def _wrapped(text):
  """Whether text is one parenthesized group, "(...)"."""
  if not (text.startswith('(') and text.endswith(')')):
    return False
  depth = 0
  for pos, c in enumerate(text):
    depth += {'(': 1, ')': -1}.get(c, 0)
    if depth == 0:
      return pos == len(text) - 1
  return False


def _strip_parens(type_text):
  while True:
    if _wrapped(type_text):
      type_text = type_text[1:-1]
    elif type_text.startswith('*') and _wrapped(type_text[1:]):
      type_text = '*' + type_text[2:-1]
    else:
      return type_text


def _ends_statement(tok):
  return tok.kind in _VALUE_KINDS or tok.text in _CLOSERS


def _match(tokens, i, path):
  """Index of the token closing the bracket opened at tokens[i]."""
  open_text = tokens[i].text
  close_text = _OPENERS[open_text]
  depth = 0
  for j in range(i, len(tokens)):
    t = tokens[j].text
    if tokens[j].kind != 'op':
      continue
    if t == open_text:
      depth += 1
    elif t == close_text:
      depth -= 1
      if depth == 0:
        return j
  raise ParseError(f'{path}: unbalanced "{open_text}" opened at line {tokens[i].line}',
                   path=path, line=max(1, tokens[i].line - 1))


def _parse_func_decl(text, tokens, i, file_id):
  """
  Parse a top-level declaration starting at the `func` token tokens[i].

  Returns:
    A tuple (sig, next_index). sig is None for bodyless declarations.
    If the tokens do not form a function declaration at all, (None, None).
  """
  path = file_id.canonical
  n = len(tokens)
  j = i + 1
  receiver = None
  if j < n and tokens[j].text == '(':
    k = _match(tokens, j, path)
    receiver = text[tokens[j].end:tokens[k].start]
    j = k + 1
  if j >= n or tokens[j].kind != 'word':
    return None, None
  name = tokens[j].text
  j += 1
  if j < n and tokens[j].text == '[':
    j = _match(tokens, j, path) + 1
  if j >= n or tokens[j].text != '(':
    return None, None
  j = _match(tokens, j, path) + 1
  # Result types, then either the body or the end of a bodyless declaration
  while j < n:
    tok = tokens[j]
    if tok.kind == 'newline' or tok.text == ';':
      return None, j
    if tok.kind == 'op' and tok.text in ('(', '['):
      j = _match(tokens, j, path) + 1
      continue
    if tok.kind == 'word' and tok.text in ('struct', 'interface'):
      k = j + 1
      while k < n and tokens[k].kind == 'newline':
        k += 1
      if k < n and tokens[k].text == '{':
        j = _match(tokens, k, path) + 1
        continue
    if tok.kind == 'op' and tok.text == '{':
      k = _match(tokens, j, path)
      if receiver is None:
        receiver_type = None
        skeleton = f'func {name}(...) {{ ... }}'
      else:
        receiver_type = canonical_receiver_type(receiver)
        skeleton = f'func ({" ".join(receiver.split())}) {name}(...) {{ ... }}'
      sig = FunctionSig(file=file_id, name=name, receiver_type=receiver_type,
                        receiver=receiver.strip() if receiver is not None else None,
                        line_start=tokens[i].line, line_end=tokens[k].line,
                        skeleton_line=skeleton)
      return sig, k + 1
    j += 1
  return None, j


def extract_function_signatures(file_content, file_id):
  """
  Extract every top-level function and method that has a brace-delimited body.

  Interface methods, bodyless (assembly-backed) declarations and function
  literals are not reported; closures belong to their enclosing function.

  Args:
    file_content: Go source text (need not compile)
    file_id: The CodeArtifactId of the file, used in ids and error messages

  Returns:
    A list of FunctionSig in source order

  Raises:
    ParseError: If braces are unbalanced at end of file
  """
  tokens = list(tokenize(file_content))
  sigs = []
  depth = 0
  prev = None
  newline_since_prev = False
  last_good_line = 0
  i = 0
  n = len(tokens)
  while i < n:
    tok = tokens[i]
    if tok.kind == 'newline':
      newline_since_prev = True
      if depth == 0:
        last_good_line = tok.line
      i += 1
      continue
    if (depth == 0 and tok.kind == 'word' and tok.text == 'func' and
        (prev is None or prev.text == ';' or (newline_since_prev and _ends_statement(prev)))):
      sig, next_i = _parse_func_decl(file_content, tokens, i, file_id)
      if next_i is not None:
        if sig is not None:
          sigs.append(sig)
          last_good_line = sig.line_end
        prev = tokens[next_i - 1]
        newline_since_prev = False
        i = next_i
        continue
    if tok.kind == 'op':
      if tok.text in _OPENERS:
        depth += 1
      elif tok.text in _CLOSERS:
        if depth == 0:
          raise ParseError(f'{file_id.canonical}: unmatched "{tok.text}" at line {tok.line}, '
                           f'last good line {last_good_line}', path=file_id.canonical, line=last_good_line)
        depth -= 1
    prev = tok
    newline_since_prev = False
    i += 1
  if depth != 0:
    raise ParseError(f'{file_id.canonical}: unbalanced braces at end of file, last good line {last_good_line}',
                     path=file_id.canonical, line=last_good_line)
  return sigs
