import csv
import io
import json

from trace_decline.formatting import fmt
from trace_decline.scorers import AggregateReport, GroupRow

COLUMNS = ('group', 'n', 'ga', 'precision', 'recall', 'f1')
CSV = 'csv'
JSON = 'json'
FORMATS = (CSV, JSON)


class Report:

  def print(self):
    raise NotImplementedError('print must be implemented in subclasses of Report')

  def print_header(self, header):
    print(f'********************** {header} ************************')

  def print_tabbed_table(self, tab):
    for x in tab:
      print('\t'.join([fmt(y) if y is not None else '' for y in x]))
    print()


class ScoreReport(Report):
  def __init__(self, report):
    self.report = report

  def print(self):
    self.print_header(self.report.title)
    self.print_tabbed_table([list(COLUMNS)] + [list(row) for row in self.report.rows])


class CorrelationReport(Report):
  def __init__(self, results, title='Discussion Length Correlation'):
    self.results = results
    self.title = title

  def print(self):
    self.print_header(self.title)
    print('Length unit: whitespace tokens of the rendered discussion')
    self.print_tabbed_table([['metric', 'rho', 'p']] +
                            [[m, r.rho, r.p_two_sided] for m, r in self.results.items()])


class DistributionReport(Report):
  def __init__(self, distribution, title='Granularity Distribution'):
    self.distribution = distribution
    self.title = title

  def print(self):
    self.print_header(self.title)
    rows = [['granularity', 'count', 'share']]
    rows += [[g, v['count'], v['share']] for g, v in self.distribution.items() if g != 'total']
    rows.append(['total', self.distribution['total'], None])
    self.print_tabbed_table(rows)


class ValidationSummaryReport(Report):
  def __init__(self, validation, title='Dataset Validation'):
    self.validation = validation
    self.title = title

  def print(self):
    self.print_header(self.title)
    if not self.validation.findings:
      print('No findings.')
      print()
      return
    self.print_tabbed_table([['issue', 'proposal', 'detail']] + [list(f) for f in self.validation.findings])
    self.print_tabbed_table([['issue', 'count']] + [[k, v] for k, v in self.validation.counts.items()])


def _row_values(row):
  return [row.group, f'{row.n:d}'] + [f'{getattr(row, m):.6f}' for m in COLUMNS[2:]]


def emit_report(report, format=CSV):
  """
  Render an AggregateReport as CSV or JSON.

  Columns are group, n, ga, precision, recall, f1 with floats at 6 decimals.

  Args:
    report: An AggregateReport
    format: "csv" or "json"

  Returns:
    The rendered text
  """
  if format == CSV:
    out = io.StringIO()
    writer = csv.writer(out, lineterminator='\n')
    writer.writerow(COLUMNS)
    for row in report.rows:
      writer.writerow(_row_values(row))
    return out.getvalue()
  if format == JSON:
    rows = [dict(zip(COLUMNS, [row.group, row.n] + [round(getattr(row, m), 6) for m in COLUMNS[2:]]))
            for row in report.rows]
    return json.dumps({'title': report.title, 'columns': list(COLUMNS), 'rows': rows},
                      sort_keys=True, indent=2) + '\n'
  raise ValueError(f'Unknown report format {format}, expected one of {FORMATS}')


def load_report(text, format=CSV, title=None):
  """Parse text written by emit_report back into an AggregateReport."""
  if format == JSON:
    data = json.loads(text)
    return AggregateReport(data['title'], [GroupRow(**r) for r in data['rows']])
  reader = csv.reader(io.StringIO(text))
  header = next(reader)
  if tuple(header) != COLUMNS:
    raise ValueError(f'Unexpected report columns {header}')
  rows = [GroupRow(r[0], int(r[1]), *[float(x) for x in r[2:]]) for r in reader if r]
  return AggregateReport(title, rows)


def merge_reports(reports):
  """
  Merge reports keyed by a prefix into one report, prefixing group names.

  Args:
    reports: A dict mapping prefixes (such as "top-5") to AggregateReport

  Returns:
    An AggregateReport
  """
  rows = []
  for prefix, report in reports.items():
    rows += [row._replace(group=f'{prefix}/{row.group}') for row in report.rows]
  return AggregateReport('Merged', rows)
