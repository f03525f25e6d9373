"""Run configuration: built-in defaults, one JSON file, then command-line overrides."""
import copy
import hashlib
import json

from absl import logging

from trace_decline import arg_utils
from trace_decline import pipeline
from trace_decline.artifacts import GRANULARITIES
from trace_decline.baseline import DEFAULT_K, DEFAULT_SWEEP, WEIGHTINGS
from trace_decline.errors import ConfigError
from trace_decline.llm_gateway import MODES, REPLAY
from trace_decline.reporters import FORMATS

DEFAULTS = {
  'repo': {
    'root': None,
    'exclude_globs': [],
    'include_all_dirs': False,
    'snapshot_path': None,
  },
  'dataset': {
    'path': None,
    'gerrit_changes': None,
    'match_issue_urls': False,
  },
  'gateway': {
    'mode': REPLAY,
    'endpoint': None,
    'embedding_endpoint': None,
    'model_name': 'gpt-4o',
    'embedding_model': None,
    'temperature': 0.0,
    'max_output_tokens': 1024,
    'retries': 3,
    'backoff_seconds': 1.0,
    'timeout_seconds': 120.0,
    'store_path': None,
    'max_in_flight': 4,
    'token_budget': 120000,
    'scripted_replies': None,
  },
  'pipeline': {
    'templates': {},
    'system_prompt': pipeline.DEFAULT_SYSTEM_PROMPT,
    'parse_retries': 2,
    'localization_only': False,
    'forced_granularity': None,
  },
  'baseline': {
    'weighting': 'tfidf',
    'k': DEFAULT_K,
    'sweep': list(DEFAULT_SWEEP),
    'granularity': None,
    'with_link_decision': False,
  },
  'eval': {
    'label': 'explicitness',
    'correct_granularity_only': False,
    'format': 'csv',
    'exact_p': False,
  },
  'output_dir': 'out',
}


class RunConfig(object):
  """
  The effective configuration of one run.

  Sections are plain dicts: repo, dataset, gateway, pipeline, baseline and
  eval; output_dir is a path.
  """

  def __init__(self, data):
    self._data = data

  def __getattr__(self, name):
    try:
      return self._data[name]
    except KeyError:
      raise AttributeError(name)

  def canonical_json(self):
    return json.dumps(self._data, sort_keys=True, separators=(',', ':'))

  def sha256(self):
    return hashlib.sha256(self.canonical_json().encode('utf-8')).hexdigest()

  def create_pipeline_config(self):
    p, g = self.pipeline, self.gateway
    return pipeline.create_pipeline_config(
      template_paths=p['templates'], system_prompt=p['system_prompt'], model_name=g['model_name'],
      temperature=g['temperature'], max_output_tokens=g['max_output_tokens'],
      parse_retries=p['parse_retries'], localization_only=p['localization_only'],
      forced_granularity=p['forced_granularity'])


def _merge(base, update, path=''):
  for key, value in update.items():
    if key not in base:
      raise ConfigError(f'Unknown config key {path}{key}')
    if isinstance(base[key], dict) and key != 'templates':
      if not isinstance(value, dict):
        raise ConfigError(f'Config key {path}{key} must be an object')
      _merge(base[key], value, f'{path}{key}.')
    else:
      base[key] = value


def apply_override(data, dotted_key, value):
  """Set one "section.key" (or top-level key) in a config dict."""
  parts = dotted_key.split('.')
  target = data
  for part in parts[:-1]:
    if not isinstance(target.get(part), dict):
      raise ConfigError(f'Unknown config key {dotted_key}')
    target = target[part]
  if parts[-1] not in target and not (len(parts) == 3 and parts[1] == 'templates'):
    raise ConfigError(f'Unknown config key {dotted_key}')
  target[parts[-1]] = value


def validate(data):
  g, p, b, e = data['gateway'], data['pipeline'], data['baseline'], data['eval']
  if g['mode'] not in MODES:
    raise ConfigError(f'gateway.mode must be one of {MODES}, got {g["mode"]}')
  try:
    temperature = float(g['temperature'])
  except (TypeError, ValueError):
    raise ConfigError(f'gateway.temperature must be a number, got {g["temperature"]}')
  if not 0.0 <= temperature <= 2.0:
    raise ConfigError(f'gateway.temperature must lie in [0, 2], got {temperature}')
  for key in ('retries', 'max_in_flight', 'max_output_tokens'):
    if not isinstance(g[key], int) or g[key] < 0 or (key != 'retries' and g[key] < 1):
      raise ConfigError(f'gateway.{key} must be a non-negative integer, got {g[key]}')
  if g['token_budget'] is not None and (not isinstance(g['token_budget'], int) or g['token_budget'] < 1):
    raise ConfigError(f'gateway.token_budget must be a positive integer or null, got {g["token_budget"]}')
  if not isinstance(p['parse_retries'], int) or p['parse_retries'] < 0:
    raise ConfigError(f'pipeline.parse_retries must be >= 0, got {p["parse_retries"]}')
  if p['forced_granularity'] is not None and p['forced_granularity'] not in GRANULARITIES:
    raise ConfigError(f'pipeline.forced_granularity must be one of {GRANULARITIES}')
  if b['weighting'] not in WEIGHTINGS:
    raise ConfigError(f'baseline.weighting must be one of {WEIGHTINGS}, got {b["weighting"]}')
  if not isinstance(b['k'], int) or b['k'] < 1:
    raise ConfigError(f'baseline.k must be >= 1, got {b["k"]}')
  if isinstance(b['sweep'], int):
    b['sweep'] = [b['sweep']]
  if not b['sweep'] or not all(isinstance(k, int) and k >= 1 for k in b['sweep']):
    raise ConfigError(f'baseline.sweep must be a list of integers >= 1, got {b["sweep"]}')
  if b['granularity'] is not None and b['granularity'] not in GRANULARITIES:
    raise ConfigError(f'baseline.granularity must be one of {GRANULARITIES}')
  if e['format'] not in FORMATS:
    raise ConfigError(f'eval.format must be one of {FORMATS}, got {e["format"]}')
  pipeline.load_templates(p['templates'])


def load_config(path=None, overrides=None):
  """
  Build the effective RunConfig.

  Args:
    path: Optional JSON config file merged over the defaults
    overrides: Optional dict of dotted keys to values, applied last

  Returns:
    A validated RunConfig

  Raises:
    ConfigError: On unreadable files, unknown keys or invalid values
  """
  data = copy.deepcopy(DEFAULTS)
  if path is not None:
    logging.info('Reading config from %s.', path)
    try:
      with open(path, 'r', encoding='utf-8') as f:
        loaded = json.load(f)
    except OSError as e:
      raise ConfigError(f'Cannot read config {path}: {e}')
    except ValueError as e:
      raise ConfigError(f'Malformed config {path}: {e}')
    if not isinstance(loaded, dict):
      raise ConfigError(f'Config {path} must hold a JSON object')
    _merge(data, loaded)
  for key, value in (overrides or {}).items():
    apply_override(data, key, value)
  validate(data)
  return RunConfig(data)


def parse_overrides(profiles):
  """Turn --set profiles ("gateway.temperature=0.1,baseline.k=10") into override dicts."""
  overrides = {}
  for profile in profiles or []:
    try:
      items = arg_utils.parse_profile(profile)
    except ValueError as e:
      raise ConfigError(str(e))
    for key, value in items.items():
      overrides[key] = arg_utils.parse_value(value)
  return overrides
