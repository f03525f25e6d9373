# Overall imports
import argparse
import datetime
import json
import os
import sys

from absl import logging

# In-package imports
from trace_decline import baseline
from trace_decline import config as config_utils
from trace_decline import corpus_utils
from trace_decline import llm_gateway
from trace_decline import pipeline
from trace_decline import repo_model
from trace_decline import reporters
from trace_decline import scorers
from trace_decline import arg_utils
from trace_decline.errors import CacheMiss, ConfigError, GatewayError, IoError, ParseError, ValidationError
from trace_decline.version_info import __version__

EXIT_OK = 0
EXIT_FINDINGS = 1
EXIT_CONFIG = 2
EXIT_GATEWAY = 3

SNAPSHOT_FILE = 'snapshot.json'
LINKS_FILE = 'links.jsonl'
PROVENANCE_FILE = 'provenance.jsonl'
CANDIDATES_FILE = 'candidates.jsonl'
BASELINE_LINKS_FILE = 'baseline_links.jsonl'
MANIFEST_FILE = 'manifest.json'

# Flags that override a config key when given
FLAG_OVERRIDES = {
  'repo': 'repo.root',
  'exclude': 'repo.exclude_globs',
  'include_all_dirs': 'repo.include_all_dirs',
  'snapshot': 'repo.snapshot_path',
  'dataset': 'dataset.path',
  'gerrit': 'dataset.gerrit_changes',
  'match_issue_urls': 'dataset.match_issue_urls',
  'mode': 'gateway.mode',
  'store': 'gateway.store_path',
  'replies': 'gateway.scripted_replies',
  'workers': 'gateway.max_in_flight',
  'localization_only': 'pipeline.localization_only',
  'forced_granularity': 'pipeline.forced_granularity',
  'granularity': 'baseline.granularity',
  'k': 'baseline.k',
  'sweep': 'baseline.sweep',
  'weighting': 'baseline.weighting',
  'link_decision': 'baseline.with_link_decision',
  'label': 'eval.label',
  'format': 'eval.format',
  'output_dir': 'output_dir',
}


def write_manifest(output_dir, command, run_config, snapshot_commit):
  """Write manifest.json; created_at is its only time-dependent field."""
  manifest = {
    'version': __version__,
    'command': command,
    'config_sha256': run_config.sha256(),
    'snapshot_commit': snapshot_commit,
    'gateway_mode': run_config.gateway['mode'],
    'created_at': datetime.datetime.now(datetime.timezone.utc).replace(microsecond=0).isoformat(),
  }
  with open(os.path.join(output_dir, MANIFEST_FILE), 'w', encoding='utf-8') as f:
    json.dump(manifest, f, sort_keys=True, indent=2)
    f.write('\n')


def get_snapshot(run_config):
  """Load the cached snapshot if one is configured and present, else scan the repository."""
  path = run_config.repo['snapshot_path']
  if path and os.path.isfile(path):
    return repo_model.load_snapshot(path)
  if not run_config.repo['root']:
    raise ConfigError('Need --repo (or repo.root) or an existing --snapshot')
  return repo_model.scan_repository(run_config.repo['root'], run_config.repo['exclude_globs'],
                                    include_all_dirs=run_config.repo['include_all_dirs'])


def get_dataset(run_config):
  if not run_config.dataset['path']:
    raise ConfigError('Need --dataset (or dataset.path)')
  return corpus_utils.load_dataset(run_config.dataset['path'])


def _id_list(text):
  try:
    return arg_utils.parse_id_list(text)
  except ValueError as e:
    raise ConfigError(f'--proposals: {e}')


def select_proposals(dataset, ids=None, status=None):
  return [p for p in dataset.proposals
          if (ids is None or p.id in ids) and (status is None or p.status == status)]


def output_dir(run_config):
  path = run_config.output_dir
  os.makedirs(path, exist_ok=True)
  return path


def run_scan(args, run_config):
  if not run_config.repo['root']:
    raise ConfigError('Need --repo (or repo.root)')
  snapshot = repo_model.scan_repository(run_config.repo['root'], run_config.repo['exclude_globs'],
                                        include_all_dirs=run_config.repo['include_all_dirs'])
  out = output_dir(run_config)
  snapshot_path = run_config.repo['snapshot_path'] or os.path.join(out, SNAPSHOT_FILE)
  repo_model.save_snapshot(snapshot, snapshot_path)
  counts = repo_model.snapshot_counts(snapshot)
  with open(os.path.join(out, 'counts.json'), 'w', encoding='utf-8') as f:
    json.dump(counts, f, sort_keys=True, indent=2)
    f.write('\n')
  print(f'directories={counts["directories"]} files={counts["files"]} functions={counts["functions"]}')
  if snapshot.errors:
    print(f'files_with_parse_errors={len(snapshot.errors)}')
  if counts['duplicate_functions']:
    print(f'duplicate_functions={counts["duplicate_functions"]}')
  write_manifest(out, 'scan', run_config, snapshot.commit_id)
  return EXIT_OK


def run_dataset(args, run_config):
  dataset = get_dataset(run_config)
  if args.dataset_command == 'stats':
    dist = corpus_utils.granularity_distribution(dataset.ground_truths, dataset.proposals, status=args.status)
    reporters.DistributionReport(dist).print()
    return EXIT_OK
  snapshot = get_snapshot(run_config)
  if args.dataset_command == 'validate':
    validation = corpus_utils.validate_dataset(dataset, snapshot)
    reporters.ValidationSummaryReport(validation).print()
    return EXIT_FINDINGS if validation.findings and args.strict else EXIT_OK
  # extract-truth
  if not run_config.dataset['gerrit_changes']:
    raise ConfigError('Need --gerrit (or dataset.gerrit_changes)')
  changes = corpus_utils.load_gerrit_changes(run_config.dataset['gerrit_changes'])
  truths = corpus_utils.extract_ground_truth(changes, dataset.proposals, snapshot,
                                             match_issue_urls=run_config.dataset['match_issue_urls'])
  out = output_dir(run_config)
  corpus_utils.write_jsonl(os.path.join(out, corpus_utils.GROUND_TRUTH_FILE),
                           [corpus_utils.ground_truth_to_dict(t) for t in truths])
  print(f'ground_truths={len(truths)} proposals={len({t.proposal_id for t in truths})}')
  write_manifest(out, 'dataset extract-truth', run_config, snapshot.commit_id)
  return EXIT_OK


def _report_failures(rows):
  """Print gateway failures; returns True if any failure came from the gateway."""
  gateway_failure = False
  for row in rows:
    if isinstance(row.error, GatewayError):
      gateway_failure = True
      if isinstance(row.error, CacheMiss):
        print(f'CacheMiss: proposal {row.proposal_id} fingerprint {row.error.fingerprint}', file=sys.stderr)
      else:
        print(f'{type(row.error).__name__}: proposal {row.proposal_id}: {row.error}', file=sys.stderr)
  return gateway_failure


def run_link(args, run_config):
  dataset = get_dataset(run_config)
  snapshot = get_snapshot(run_config)
  pipeline_config = run_config.create_pipeline_config()
  gateway = llm_gateway.create_gateway_from_config(run_config.gateway)
  proposals = select_proposals(dataset, _id_list(args.proposals), args.status)
  rows = pipeline.run_batch(proposals, snapshot, pipeline_config, gateway,
                            max_workers=run_config.gateway['max_in_flight'])
  out = output_dir(run_config)
  pipeline.write_links(rows, os.path.join(out, LINKS_FILE))
  pipeline.write_provenance(rows, os.path.join(out, PROVENANCE_FILE))
  write_manifest(out, 'link', run_config, snapshot.commit_id)
  failed = [r for r in rows if r.status == pipeline.FAILED]
  print(f'proposals={len(rows)} ok={len(rows) - len(failed)} failed={len(failed)}')
  if _report_failures(failed):
    return EXIT_GATEWAY
  return EXIT_FINDINGS if failed and args.strict else EXIT_OK


def run_baseline(args, run_config):
  dataset = get_dataset(run_config)
  snapshot = get_snapshot(run_config)
  b = run_config.baseline
  truths = corpus_utils.select_truths(dataset.ground_truths)
  proposals = select_proposals(dataset, _id_list(args.proposals), args.status)
  gateway = None
  pipeline_config = None
  if b['with_link_decision'] or b['weighting'] == baseline.EXTERNAL:
    gateway = llm_gateway.create_gateway_from_config(run_config.gateway)
  if b['with_link_decision']:
    pipeline_config = run_config.create_pipeline_config()

  indexes = {}
  def index_for(granularity):
    if granularity not in indexes:
      indexes[granularity] = baseline.build_index(snapshot, granularity, b['weighting'], gateway=gateway,
                                                  embedding_model=run_config.gateway['embedding_model'])
    return indexes[granularity]

  candidate_rows, link_rows = [], []
  for proposal in proposals:
    # Evaluated at ground-truth granularity unless one is fixed
    granularity = b['granularity'] or (truths[proposal.id].granularity if proposal.id in truths else 'file')
    index = index_for(granularity)
    if args.sweep_all:
      for k, ranked in baseline.run_sweep(proposal, index, b['sweep']).items():
        candidate_rows.append(baseline.CandidateRow(proposal.id, k, granularity, ranked))
      continue
    try:
      result = baseline.run_baseline(proposal, snapshot, granularity, b['k'], b['with_link_decision'],
                                     pipeline_config, gateway, index=index)
    except (ValueError, GatewayError) as e:
      logging.warning('Baseline failed for proposal %d: %s', proposal.id, e)
      link_rows.append(pipeline.LinkRun(proposal.id, None, pipeline.FAILED, pipeline.PHASE_LINK, e))
      continue
    candidate_rows.append(baseline.CandidateRow(proposal.id, b['k'], granularity, result.candidates))
    if result.links is not None:
      link_rows.append(pipeline.LinkRun(proposal.id, result.links, pipeline.OK, None, None))

  out = output_dir(run_config)
  baseline.write_candidates(candidate_rows, os.path.join(out, CANDIDATES_FILE))
  if b['with_link_decision']:
    pipeline.write_links(link_rows, os.path.join(out, BASELINE_LINKS_FILE))
  write_manifest(out, 'baseline', run_config, snapshot.commit_id)
  print(f'proposals={len(proposals)} candidate_rows={len(candidate_rows)}')
  failed = [r for r in link_rows if r.status == pipeline.FAILED]
  if _report_failures(failed):
    return EXIT_GATEWAY
  return EXIT_FINDINGS if failed and args.strict else EXIT_OK


def run_eval(args, run_config):
  dataset = get_dataset(run_config)
  e = run_config.eval
  out = output_dir(run_config)
  ext = e['format']
  if args.candidates:
    reports = scorers.score_candidates(baseline.load_candidates(args.candidates), dataset.ground_truths)
    if not reports:
      raise ValidationError('No candidate row has a ground truth')
    merged = reporters.merge_reports({f'top-{k}': r for k, r in reports.items()})
    for report in reports.values():
      reporters.ScoreReport(report).print()
    with open(os.path.join(out, f'report.{ext}'), 'w', encoding='utf-8') as f:
      f.write(reporters.emit_report(merged._replace(title='Baseline Localization'), ext))
    write_manifest(out, 'eval', run_config, dataset.repo_commit)
    return EXIT_OK

  links_path = args.links or os.path.join(out, LINKS_FILE)
  scores = scorers.score_link_sets(pipeline.load_links(links_path), dataset.ground_truths)
  report = scorers.macro_aggregate(scores)
  reporters.ScoreReport(report).print()
  with open(os.path.join(out, f'report.{ext}'), 'w', encoding='utf-8') as f:
    f.write(reporters.emit_report(report, ext))

  label = e['label']
  labels = {pid: values[label] for pid, values in dataset.aux_labels.items() if label in values}
  labelled = [s for s in scores if s.proposal_id in labels]
  if labelled:
    grouped = scorers.group_by_label(labelled, labels, correct_granularity_only=e['correct_granularity_only'],
                                     title=f'Scores by {label}')
    reporters.ScoreReport(grouped).print()
    with open(os.path.join(out, f'report_by_{label}.{ext}'), 'w', encoding='utf-8') as f:
      f.write(reporters.emit_report(grouped, ext))

  lengths = {p.id: corpus_utils.concat_discussion(p).length for p in dataset.proposals}
  if len(scores) >= 3:
    try:
      correlation = scorers.length_correlation(scores, lengths, exact=e['exact_p'])
    except ValueError as err:
      logging.warning('Skipping length correlation: %s', err)
    else:
      reporters.CorrelationReport(correlation).print()
      with open(os.path.join(out, 'length_correlation.json'), 'w', encoding='utf-8') as f:
        json.dump({'length_unit': 'whitespace_tokens',
                   'metrics': {m: {'rho': round(r.rho, 6), 'p_two_sided': round(r.p_two_sided, 6)}
                               for m, r in correlation.items()}}, f, sort_keys=True, indent=2)
        f.write('\n')
  write_manifest(out, 'eval', run_config, dataset.repo_commit)
  failed = [s for s in scores if s.predicted_granularity is None]
  return EXIT_FINDINGS if failed and args.strict else EXIT_OK


def run_report(args, run_config):
  in_format = reporters.JSON if args.input.endswith('.json') else reporters.CSV
  try:
    with open(args.input, 'r', encoding='utf-8') as f:
      report = reporters.load_report(f.read(), in_format, title=os.path.basename(args.input))
  except OSError as e:
    raise IoError(f'Cannot read report {args.input}: {e}')
  text = reporters.emit_report(report, run_config.eval['format'])
  if args.out:
    with open(args.out, 'w', encoding='utf-8') as f:
      f.write(text)
  else:
    sys.stdout.write(text)
  return EXIT_OK


def _add_common(p):
  p.add_argument('--config', type=str, default=None, help='A JSON config file')
  p.add_argument('--set', type=str, action='append', default=None, dest='overrides',
                 help='Config overrides in "section.key=value,section.key=value" format; lists use ";"')
  p.add_argument('--output_dir', '--output-dir', type=str, default=None, help='Directory for outputs and the manifest')
  p.add_argument('--verbosity', type=str, default='warning', choices=['debug', 'info', 'warning', 'error'],
                 help='Logging verbosity')
  p.add_argument('--strict', action='store_true', help='Exit 1 when findings or failed proposals remain')


def _add_repo(p):
  p.add_argument('--repo', type=str, default=None, help='The repository root to scan')
  p.add_argument('--snapshot', type=str, default=None, help='A snapshot cache file')
  p.add_argument('--exclude', type=str, action='append', default=None,
                 help='A glob of paths to exclude (repeatable)')
  p.add_argument('--include_all_dirs', '--include-all-dirs', action='store_true', default=None,
                 help='Keep directories without .go files')


def _add_dataset(p):
  p.add_argument('--dataset', type=str, default=None, help='The dataset directory')


def _add_selection(p):
  p.add_argument('--proposals', type=str, default=None, help='Proposal ids to process, e.g. "12;57"')
  p.add_argument('--status', type=str, default=None, choices=[corpus_utils.ACCEPTED, corpus_utils.DECLINED],
                 help='Only process proposals with this status')


def _add_gateway(p):
  p.add_argument('--mode', type=str, default=None, choices=list(llm_gateway.MODES), help='The gateway mode')
  p.add_argument('--store', type=str, default=None, help='The transcript store (JSONL)')
  p.add_argument('--replies', type=str, default=None, help='Scripted replies (JSON) for scripted mode')
  p.add_argument('--workers', type=int, default=None, help='Maximum concurrent proposals and model calls')


def build_parser():
  parser = argparse.ArgumentParser(
      prog='trace-decline',
      description='Granularity-aware traceability links between proposals and Go source code')
  parser.add_argument('-v', '--version', action='version', version=f'%(prog)s {__version__}')
  sub = parser.add_subparsers(dest='command', required=True)

  p = sub.add_parser('scan', help='Scan a repository and cache its snapshot')
  _add_common(p)
  _add_repo(p)

  p = sub.add_parser('dataset', help='Dataset utilities')
  dsub = p.add_subparsers(dest='dataset_command', required=True)
  for name, help_text in (('validate', 'Check ground truth against a snapshot'),
                          ('extract-truth', 'Derive ground truth from merged Gerrit changes'),
                          ('stats', 'Granularity distribution of the ground truth')):
    dp = dsub.add_parser(name, help=help_text)
    _add_common(dp)
    _add_dataset(dp)
    if name != 'stats':
      _add_repo(dp)
    if name == 'extract-truth':
      dp.add_argument('--gerrit', type=str, default=None, help='gerrit_changes.jsonl')
      dp.add_argument('--match_issue_urls', '--match-issue-urls', action='store_true', default=None,
                      help='Also accept issue URLs as proposal references')
    if name == 'stats':
      dp.add_argument('--status', type=str, default=None,
                      choices=[corpus_utils.ACCEPTED, corpus_utils.DECLINED])

  p = sub.add_parser('link', help='Run the linking pipeline over proposals')
  _add_common(p)
  _add_repo(p)
  _add_dataset(p)
  _add_selection(p)
  _add_gateway(p)
  p.add_argument('--localization_only', '--localization-only', action='store_true', default=None,
                 help='Skip the link decision and keep the localized candidates')
  p.add_argument('--forced_granularity', '--forced-granularity', type=str, default=None,
                 choices=['directory', 'file', 'function'], help='Skip the granularity decision')

  p = sub.add_parser('baseline', help='Run the retrieval baseline')
  _add_common(p)
  _add_repo(p)
  _add_dataset(p)
  _add_selection(p)
  _add_gateway(p)
  p.add_argument('--granularity', type=str, default=None, choices=['directory', 'file', 'function'],
                 help='Retrieval granularity (default: the ground-truth granularity)')
  p.add_argument('--k', type=int, default=None, help='Number of candidates')
  p.add_argument('--sweep', type=str, default=None, help='k values for --sweep_all, e.g. "1;5;10"')
  p.add_argument('--sweep_all', '--sweep-all', action='store_true', help='Emit one candidate list per sweep k')
  p.add_argument('--weighting', type=str, default=None, choices=list(baseline.WEIGHTINGS), help='Vector weighting')
  p.add_argument('--link_decision', '--link-decision', action='store_true', default=None,
                 help='Apply the Yes/No link decision to every candidate')

  p = sub.add_parser('eval', help='Score links or candidates against the ground truth')
  _add_common(p)
  _add_dataset(p)
  p.add_argument('--links', type=str, default=None, help='links.jsonl to score')
  p.add_argument('--candidates', type=str, default=None, help='candidates.jsonl to score per k')
  p.add_argument('--label', type=str, default=None, help='Aux label to group by')
  p.add_argument('--format', type=str, default=None, choices=list(reporters.FORMATS), help='Report format')

  p = sub.add_parser('report', help='Render an eval report as CSV or JSON')
  _add_common(p)
  p.add_argument('input', type=str, help='report.csv or report.json')
  p.add_argument('--out', type=str, default=None, help='Output file (default: stdout)')
  p.add_argument('--format', type=str, default=None, choices=list(reporters.FORMATS), help='Output format')
  return parser


def collect_overrides(args):
  overrides = config_utils.parse_overrides(args.overrides)
  for flag, key in FLAG_OVERRIDES.items():
    value = getattr(args, flag, None)
    if value is None:
      continue
    if flag == 'sweep':
      try:
        value = arg_utils.parse_int_list(value)
      except ValueError as e:
        raise ConfigError(f'--sweep: {e}')
    overrides[key] = value
  return overrides


COMMANDS = {
  'scan': run_scan,
  'dataset': run_dataset,
  'link': run_link,
  'baseline': run_baseline,
  'eval': run_eval,
  'report': run_report,
}


def run_command(argv):
  """
  Run one subcommand.

  Returns:
    0 on success, 1 on findings treated as failures, 2 on config, usage or input data
    errors, 3 on gateway errors
  """
  parser = build_parser()
  try:
    args = parser.parse_args(argv)
  except SystemExit as e:
    return e.code if isinstance(e.code, int) else EXIT_CONFIG
  logging.set_verbosity(args.verbosity)
  try:
    run_config = config_utils.load_config(args.config, collect_overrides(args))
    return COMMANDS[args.command](args, run_config)
  except (ConfigError, ParseError, ValidationError, IoError) as e:
    print(f'{type(e).__name__}: {e}', file=sys.stderr)
    return EXIT_CONFIG
  except GatewayError as e:
    if isinstance(e, CacheMiss):
      print(f'CacheMiss: fingerprint {e.fingerprint}', file=sys.stderr)
    else:
      print(f'{type(e).__name__}: {e}', file=sys.stderr)
    return EXIT_GATEWAY
  except ValueError as e:
    # Malformed input data that no narrower handler claims
    print(f'{type(e).__name__}: {e}', file=sys.stderr)
    return EXIT_CONFIG


def main():
  sys.exit(run_command(sys.argv[1:]))


if __name__ == '__main__':
  main()
