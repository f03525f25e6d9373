"""A single completion interface over live, recorded and replayed model calls.

Replay mode answers from a transcript store only, so a pipeline run recorded
once can be reproduced offline. A scripted provider gives canned replies for
tests.
"""
import collections
import datetime
import hashlib
import json
import math
import os
import threading
import time

import requests
from absl import logging

from trace_decline.errors import (ApiError, CacheMiss, ConfigError, IoError,
                                  ParseError, PromptTooLarge, TransportError)

LIVE = 'live'
RECORD = 'record'
REPLAY = 'replay'
SCRIPTED = 'scripted'
MODES = (LIVE, RECORD, REPLAY, SCRIPTED)

SOURCE_LIVE = 'live'
SOURCE_CACHE = 'cache'
SOURCE_SCRIPTED = 'scripted'

API_KEY_ENV = 'TRACE_LLM_API_KEY'
RETRYABLE_STATUS = frozenset([429, 500, 502, 503, 504])


class PromptRequest(collections.namedtuple('PromptRequest', [
    'system', 'user', 'model_name', 'temperature', 'max_output_tokens'])):
  """A single system+user exchange with its sampling settings."""
  __slots__ = ()

  def __new__(cls, system, user, model_name, temperature=0.0, max_output_tokens=1024):
    temperature = float(temperature)
    if not 0.0 <= temperature <= 2.0:
      raise ValueError(f'temperature must lie in [0, 2], got {temperature}')
    if int(max_output_tokens) < 1:
      raise ValueError(f'max_output_tokens must be positive, got {max_output_tokens}')
    return super().__new__(cls, system, user, model_name, temperature, int(max_output_tokens))


Completion = collections.namedtuple('Completion', ['text', 'usage', 'source'])


def request_fingerprint(request):
  """
  A stable hash of a request.

  The request is serialized as compact JSON with sorted keys and the
  temperature as a float, then hashed with sha256.

  Returns:
    A hex digest
  """
  payload = {
    'system': request.system,
    'user': request.user,
    'model_name': request.model_name,
    'temperature': float(request.temperature),
    'max_output_tokens': int(request.max_output_tokens),
  }
  canonical = json.dumps(payload, sort_keys=True, separators=(',', ':'), ensure_ascii=False)
  return hashlib.sha256(canonical.encode('utf-8')).hexdigest()


def estimate_tokens(request):
  return math.ceil((len(request.system) + len(request.user)) / 4)


def _now():
  return datetime.datetime.now(datetime.timezone.utc).replace(microsecond=0).isoformat()


class TranscriptStore(object):
  """
  Recorded completions keyed by request fingerprint, optionally backed by a JSONL file.

  Later lines for the same fingerprint replace earlier ones on load. Writes are
  serialized so the store can be shared across workers.
  """

  def __init__(self, path=None):
    self.path = path
    self._entries = {}
    self._lock = threading.Lock()
    if path is not None and os.path.exists(path):
      self._load()

  def _load(self):
    logging.info('Reading transcript store %s.', self.path)
    try:
      with open(self.path, 'r', encoding='utf-8') as f:
        for line_no, line in enumerate(f, start=1):
          if not line.strip():
            continue
          try:
            entry = json.loads(line)
            self._entries[entry['fingerprint']] = entry
          except (ValueError, KeyError) as e:
            raise ParseError(f'Malformed transcript entry in {self.path} line {line_no}: {e}',
                             path=self.path, line=line_no)
    except OSError as e:
      raise IoError(f'Cannot read transcript store {self.path}: {e}')
    logging.info('Read %d transcript entries.', len(self._entries))

  def __len__(self):
    return len(self._entries)

  def __contains__(self, fingerprint):
    return fingerprint in self._entries

  def get(self, fingerprint):
    """The recorded Completion for a fingerprint, or None."""
    entry = self._entries.get(fingerprint)
    if entry is None:
      return None
    c = entry['completion']
    return Completion(text=c['text'], usage=c.get('usage'), source=SOURCE_CACHE)

  def put(self, request, completion):
    fingerprint = request_fingerprint(request)
    entry = {
      'fingerprint': fingerprint,
      'request': request._asdict(),
      'completion': {'text': completion.text, 'usage': completion.usage, 'source': completion.source},
      'recorded_at': _now(),
    }
    with self._lock:
      old = self._entries.get(fingerprint)
      if old is not None and old['request'] == entry['request'] and old['completion'] == entry['completion']:
        return fingerprint
      self._entries[fingerprint] = entry
      if self.path is not None:
        with open(self.path, 'a', encoding='utf-8') as f:
          f.write(json.dumps(entry, sort_keys=True, ensure_ascii=False))
          f.write('\n')
    return fingerprint


class ScriptedProvider(object):
  """
  Canned replies for tests and offline demos.

  Args:
    replies: Replies handed out in call order
    by_fingerprint: A dict mapping request fingerprints to replies, consulted first
    responder: A callable taking a PromptRequest and returning the reply text,
               used when neither of the above applies
  """

  def __init__(self, replies=None, by_fingerprint=None, responder=None):
    self._replies = collections.deque(replies or [])
    self._by_fingerprint = dict(by_fingerprint or {})
    self._responder = responder
    self._lock = threading.Lock()

  def complete(self, request):
    fingerprint = request_fingerprint(request)
    if fingerprint in self._by_fingerprint:
      return Completion(self._by_fingerprint[fingerprint], None, SOURCE_SCRIPTED)
    with self._lock:
      if self._replies:
        return Completion(self._replies.popleft(), None, SOURCE_SCRIPTED)
    if self._responder is not None:
      return Completion(self._responder(request), None, SOURCE_SCRIPTED)
    raise TransportError(f'No scripted reply left for request {fingerprint}')

  def embed(self, texts, model_name=None):
    raise TransportError('The scripted provider has no embedding endpoint')


class HttpProvider(object):
  """
  A chat-completion style HTTP endpoint.

  Args:
    endpoint: URL receiving {model, messages, temperature, max_tokens}
    api_key: Bearer token; never logged
    retries: Number of retries after the first attempt for 429/5xx and timeouts
    backoff_seconds: Base delay, doubled after each retry
    timeout_seconds: Per-request timeout
    embedding_endpoint: Optional URL receiving {model, input} for embeddings
    session: An optional requests.Session
    sleep: The sleep function used between retries
  """

  def __init__(self, endpoint, api_key, retries=3, backoff_seconds=1.0, timeout_seconds=120.0,
               embedding_endpoint=None, session=None, sleep=time.sleep):
    self.endpoint = endpoint
    self.embedding_endpoint = embedding_endpoint
    self.retries = retries
    self.backoff_seconds = backoff_seconds
    self.timeout_seconds = timeout_seconds
    self._api_key = api_key
    self._session = session or requests.Session()
    self._sleep = sleep

  def _post(self, url, body):
    headers = {'Content-Type': 'application/json'}
    if self._api_key:
      headers['Authorization'] = f'Bearer {self._api_key}'
    last_error = None
    for attempt in range(self.retries + 1):
      if attempt:
        delay = self.backoff_seconds * (2 ** (attempt - 1))
        logging.warning('Retrying %s in %.1fs (attempt %d of %d): %s',
                        url, delay, attempt + 1, self.retries + 1, last_error)
        self._sleep(delay)
      try:
        resp = self._session.post(url, json=body, headers=headers, timeout=self.timeout_seconds)
      except (requests.Timeout, requests.ConnectionError) as e:
        last_error = f'{type(e).__name__}: {e}'
        continue
      if resp.status_code in RETRYABLE_STATUS:
        last_error = f'HTTP {resp.status_code}'
        continue
      if not 200 <= resp.status_code < 300:
        raise ApiError(resp.status_code, resp.text)
      try:
        return resp.json()
      except ValueError:
        raise ApiError(resp.status_code, f'Response is not JSON: {resp.text}')
    raise TransportError(f'Giving up on {url} after {self.retries + 1} attempts: {last_error}')

  def complete(self, request):
    body = {
      'model': request.model_name,
      'messages': [{'role': 'system', 'content': request.system},
                   {'role': 'user', 'content': request.user}],
      'temperature': request.temperature,
      'max_tokens': request.max_output_tokens,
    }
    data = self._post(self.endpoint, body)
    try:
      choice = data['choices'][0]
      text = choice['message']['content'] if 'message' in choice else choice['text']
    except (KeyError, IndexError, TypeError):
      raise ApiError(200, f'No completion choice in response: {json.dumps(data)[:200]}')
    usage = data.get('usage')
    if usage is not None:
      usage = {k: usage.get(k) for k in ('prompt_tokens', 'completion_tokens')}
    return Completion(text=text or '', usage=usage, source=SOURCE_LIVE)

  def embed(self, texts, model_name=None):
    """
    Embed a batch of texts.

    Returns:
      A list of float lists, one per text
    """
    if not self.embedding_endpoint:
      raise TransportError('No embedding endpoint configured')
    data = self._post(self.embedding_endpoint, {'model': model_name, 'input': list(texts)})
    try:
      return [item['embedding'] for item in data['data']]
    except (KeyError, TypeError):
      raise TransportError('Malformed embedding response')


class Gateway(object):
  """
  Routes completion requests according to the mode.

  Args:
    mode: live, record, replay or scripted
    store: A TranscriptStore (required for record and replay)
    provider: An HttpProvider or ScriptedProvider (unused in replay)
    token_budget: Maximum estimated prompt tokens, None for no limit
    max_in_flight: Maximum concurrent provider calls
    record_calls: Keep the fingerprint of every request in `calls`; otherwise
      only `call_count` is kept
  """

  def __init__(self, mode, store=None, provider=None, token_budget=None, max_in_flight=4, record_calls=False):
    if mode not in MODES:
      raise ConfigError(f'Unknown gateway mode {mode}, expected one of {MODES}')
    if mode in (RECORD, REPLAY) and store is None:
      raise ConfigError(f'Gateway mode {mode} needs a transcript store')
    if mode != REPLAY and provider is None:
      raise ConfigError(f'Gateway mode {mode} needs a provider')
    self.mode = mode
    self.store = store
    self.provider = provider
    self.token_budget = token_budget
    self._throttle = threading.BoundedSemaphore(max(1, max_in_flight))
    self._lock = threading.Lock()
    self.call_count = 0
    self.calls = [] if record_calls else None

  def complete(self, request):
    """
    Get the completion for a request.

    Raises:
      PromptTooLarge: If the prompt estimate exceeds the token budget
      CacheMiss: In replay mode when the store has no entry
      TransportError: When retries are exhausted
      ApiError: On a non-retryable HTTP status
    """
    fingerprint = request_fingerprint(request)
    with self._lock:
      self.call_count += 1
      if self.calls is not None:
        self.calls.append(fingerprint)
    if self.token_budget is not None:
      estimate = estimate_tokens(request)
      if estimate > self.token_budget:
        raise PromptTooLarge(estimate, self.token_budget)
    if self.mode == REPLAY:
      completion = self.store.get(fingerprint)
      if completion is None:
        raise CacheMiss(fingerprint)
      return completion
    logging.debug('Calling provider for request %s.', fingerprint)
    with self._throttle:
      completion = self.provider.complete(request)
    if self.mode == RECORD:
      self.store.put(request, completion)
    return completion

  def embed(self, texts, model_name=None):
    if self.mode == REPLAY or self.provider is None:
      raise TransportError('Embeddings are not available in replay mode')
    with self._throttle:
      return self.provider.embed(texts, model_name)


def complete(request, mode, store, provider=None, token_budget=None):
  """Complete one request without a long-lived Gateway."""
  return Gateway(mode, store=store, provider=provider, token_budget=token_budget).complete(request)


def load_scripted_replies(path):
  """
  Read scripted replies: a JSON list (ordered) or an object mapping fingerprints to replies.
  """
  try:
    with open(path, 'r', encoding='utf-8') as f:
      data = json.load(f)
  except OSError as e:
    raise IoError(f'Cannot read scripted replies {path}: {e}')
  except ValueError as e:
    raise ParseError(f'Malformed scripted replies {path}: {e}', path=path)
  if isinstance(data, list):
    return ScriptedProvider(replies=data)
  if isinstance(data, dict):
    return ScriptedProvider(by_fingerprint=data)
  raise ParseError(f'Scripted replies in {path} must be a list or an object', path=path)


def create_gateway_from_config(settings, environ=None, session=None):
  """
  Build a Gateway from the "gateway" section of a run configuration.

  Args:
    settings: A dict with mode, endpoint, retries, backoff_seconds, timeout_seconds,
              store_path, max_in_flight, token_budget, scripted_replies and
              embedding_endpoint
    environ: The environment to read the API key from (os.environ by default)
    session: An optional requests.Session

  Returns:
    A Gateway
  """
  environ = os.environ if environ is None else environ
  mode = settings['mode']
  if mode in (RECORD, REPLAY) and not settings.get('store_path'):
    raise ConfigError(f'Gateway mode {mode} needs gateway.store_path')
  store = TranscriptStore(settings.get('store_path')) if mode in (RECORD, REPLAY) else None
  provider = None
  if mode == SCRIPTED:
    if not settings.get('scripted_replies'):
      raise ConfigError('Scripted mode needs gateway.scripted_replies')
    provider = load_scripted_replies(settings['scripted_replies'])
  elif mode in (LIVE, RECORD):
    if not settings.get('endpoint'):
      raise ConfigError(f'Gateway mode {mode} needs gateway.endpoint')
    api_key = environ.get(API_KEY_ENV)
    if not api_key:
      raise ConfigError(f'Gateway mode {mode} needs the {API_KEY_ENV} environment variable')
    provider = HttpProvider(settings['endpoint'], api_key,
                            retries=settings.get('retries', 3),
                            backoff_seconds=settings.get('backoff_seconds', 1.0),
                            timeout_seconds=settings.get('timeout_seconds', 120.0),
                            embedding_endpoint=settings.get('embedding_endpoint'),
                            session=session)
  return Gateway(mode, store=store, provider=provider,
                 token_budget=settings.get('token_budget'),
                 max_in_flight=settings.get('max_in_flight', 4))
