import os
import os.path
import shutil
import sys
import tempfile
import unittest

trace_decline_root = os.path.join(os.path.dirname(os.path.realpath(__file__)), "..")
sys.path.append(trace_decline_root)

from trace_decline import corpus_utils
from trace_decline import repo_model
from trace_decline.artifacts import CodeArtifactId, DIRECTORY, FILE, FUNCTION, parse_artifact_id
from trace_decline.corpus_utils import GerritChange, GroundTruth, Message, Proposal
from trace_decline.errors import IoError, ParseError, ValidationError


def _get_example_data():
  example_path = os.path.join(trace_decline_root, "example")
  dataset = corpus_utils.load_dataset(os.path.join(example_path, "toy_dataset"))
  snapshot = repo_model.scan_repository(os.path.join(example_path, "tiny"), commit_id="c0ffee")
  return dataset, snapshot


def _proposal(pid, status="accepted", title="T", bodies=("a b", "c")):
  return Proposal(pid, title, status, tuple(Message(f"u{i}", b, None) for i, b in enumerate(bodies)), None)


class TestLoadDataset(unittest.TestCase):

  @classmethod
  def setUpClass(self):
    self.dataset, self.snapshot = _get_example_data()

  def test_contents(self):
    self.assertEqual([p.id for p in self.dataset.proposals], [101, 102, 103, 104])
    self.assertEqual(self.dataset.proposals[0].status, corpus_utils.DECLINED)
    self.assertEqual(self.dataset.repo_commit, "0" * 40)
    self.assertEqual(self.dataset.aux_labels[101], {"explicitness": "implicit"})
    truth = self.dataset.ground_truths[2]
    self.assertEqual(truth.granularity, FUNCTION)
    self.assertEqual(truth.links, frozenset([parse_artifact_id("a/x.go::(*Server).Serve")]))

  def test_round_trip(self):
    tmp = tempfile.mkdtemp()
    try:
      corpus_utils.save_dataset(self.dataset, tmp)
      self.assertEqual(corpus_utils.load_dataset(tmp), self.dataset)
    finally:
      shutil.rmtree(tmp)

  def test_validate_clean(self):
    report = corpus_utils.validate_dataset(self.dataset, self.snapshot)
    self.assertEqual(report.findings, [])
    self.assertEqual(report.counts, {})


class TestDatasetErrors(unittest.TestCase):

  def setUp(self):
    self.tmp = tempfile.mkdtemp()

  def tearDown(self):
    shutil.rmtree(self.tmp)

  def _write(self, name, lines):
    with open(os.path.join(self.tmp, name), "w", encoding="utf-8") as f:
      f.write("\n".join(lines) + "\n")

  def test_malformed_line_number(self):
    self._write("proposals.jsonl", [
      '{"id": 1, "title": "t", "status": "declined", "messages": [{"author": "a", "body": "b"}]}',
      '{"id": 2, "title": ',
    ])
    with self.assertRaises(ParseError) as cm:
      corpus_utils.load_dataset(self.tmp)
    self.assertEqual(cm.exception.line, 2)

  def test_duplicate_id(self):
    line = '{"id": 1, "title": "t", "status": "declined", "messages": [{"author": "a", "body": "b"}]}'
    self._write("proposals.jsonl", [line, line])
    self.assertRaises(ValidationError, corpus_utils.load_dataset, self.tmp)

  def test_dangling_truth(self):
    self._write("proposals.jsonl",
                ['{"id": 1, "title": "t", "status": "declined", "messages": [{"author": "a", "body": "b"}]}'])
    self._write("ground_truth.jsonl", ['{"proposal_id": 7, "granularity": "file", "links": ["a.go"]}'])
    self.assertRaises(ValidationError, corpus_utils.load_dataset, self.tmp)

  def test_bool_is_not_an_id(self):
    self._write("proposals.jsonl",
                ['{"id": true, "title": "t", "status": "declined", "messages": [{"author": "a", "body": "b"}]}'])
    self.assertRaises(ParseError, corpus_utils.load_dataset, self.tmp)

  def test_missing_directory(self):
    self.assertRaises(IoError, corpus_utils.load_dataset, os.path.join(self.tmp, "nope"))


class TestDiscussion(unittest.TestCase):

  def test_concat(self):
    d = corpus_utils.concat_discussion(_proposal(1))
    self.assertEqual(d.text, "T\n--- u0 ---\na b\n--- u1 ---\nc\n")
    self.assertEqual(d.length, 10)

  def test_message_order_kept(self):
    d = corpus_utils.concat_discussion(_proposal(1, bodies=("second", "first")))
    self.assertLess(d.text.index("second"), d.text.index("first"))


class TestGerritTruth(unittest.TestCase):

  @classmethod
  def setUpClass(self):
    self.dataset, self.snapshot = _get_example_data()
    self.changes = corpus_utils.load_gerrit_changes(
        os.path.join(trace_decline_root, "example", "toy_dataset", "gerrit_changes.jsonl"))

  def test_toy_changes(self):
    truths = corpus_utils.extract_ground_truth(self.changes, self.dataset.proposals, self.snapshot)
    self.assertEqual(truths, [
      GroundTruth(103, DIRECTORY, frozenset([CodeArtifactId(DIRECTORY, "a/")]), corpus_utils.GERRIT),
      GroundTruth(103, FILE, frozenset([CodeArtifactId(FILE, "a/x.go")]), corpus_utils.GERRIT),
    ])

  def test_only_merged(self):
    changes = [GerritChange("k", "ABANDONED", "Fixes #103", ("a/x.go",))]
    self.assertEqual(corpus_utils.extract_ground_truth(changes, self.dataset.proposals, self.snapshot), [])

  def test_digit_boundary(self):
    proposals = [_proposal(123)]
    changes = [GerritChange("k", "MERGED", "Fixes #1234", ("a/x.go",))]
    self.assertEqual(corpus_utils.extract_ground_truth(changes, proposals, self.snapshot), [])
    changes = [GerritChange("k", "MERGED", "Fixes #123.", ("a/x.go",))]
    self.assertEqual(len(corpus_utils.extract_ground_truth(changes, proposals, self.snapshot)), 2)

  def test_issue_urls(self):
    proposals = [_proposal(55)]
    changes = [GerritChange("k", "MERGED", "See https://go.dev/issue/55", ("a/b/y.go",))]
    self.assertEqual(corpus_utils.extract_ground_truth(changes, proposals, self.snapshot), [])
    truths = corpus_utils.extract_ground_truth(changes, proposals, self.snapshot, match_issue_urls=True)
    self.assertEqual(truths[0].links, frozenset([CodeArtifactId(DIRECTORY, "a/b/")]))

  def test_declined_ignored(self):
    proposals = [_proposal(9, status="declined")]
    changes = [GerritChange("k", "MERGED", "Fixes #9", ("a/x.go",))]
    self.assertEqual(corpus_utils.extract_ground_truth(changes, proposals, self.snapshot), [])


class TestSelectAndValidate(unittest.TestCase):

  def test_select_truths(self):
    manual = GroundTruth(1, FUNCTION, frozenset(), corpus_utils.MANUAL)
    gerrit_dir = GroundTruth(1, DIRECTORY, frozenset([CodeArtifactId(DIRECTORY, "a/")]), corpus_utils.GERRIT)
    gerrit_file = GroundTruth(2, FILE, frozenset([CodeArtifactId(FILE, "a/x.go")]), corpus_utils.GERRIT)
    gerrit_dir2 = GroundTruth(2, DIRECTORY, frozenset([CodeArtifactId(DIRECTORY, "a/")]), corpus_utils.GERRIT)
    selected = corpus_utils.select_truths([gerrit_dir, manual, gerrit_dir2, gerrit_file])
    self.assertEqual(selected, {1: manual, 2: gerrit_file})

  def test_validate_findings(self):
    _, snapshot = _get_example_data()
    proposals = [_proposal(1), _proposal(2), _proposal(3)]
    truths = [
      GroundTruth(1, FILE, frozenset([CodeArtifactId(FILE, "a/gone.go")]), corpus_utils.MANUAL),
      GroundTruth(2, FILE, frozenset([CodeArtifactId(DIRECTORY, "a/")]), corpus_utils.MANUAL),
    ]
    report = corpus_utils.validate_dataset(corpus_utils.Dataset(None, proposals, truths, {}), snapshot)
    self.assertEqual([(f[0], f[1]) for f in report.findings],
                     [(corpus_utils.UNKNOWN_ARTIFACT, 1), (corpus_utils.KIND_MISMATCH, 2),
                      (corpus_utils.MISSING_LABEL, 3)])
    self.assertEqual(report.counts, {"kind_mismatch": 1, "missing_label": 1, "unknown_artifact": 1})


class TestDistribution(unittest.TestCase):

  def test_shares(self):
    truths = ([GroundTruth(i, DIRECTORY, frozenset(), corpus_utils.MANUAL) for i in range(1, 24)] +
              [GroundTruth(i, FILE, frozenset(), corpus_utils.MANUAL) for i in range(24, 315)] +
              [GroundTruth(i, FUNCTION, frozenset(), corpus_utils.MANUAL) for i in range(315, 342)])
    dist = corpus_utils.granularity_distribution(truths)
    self.assertEqual(dist["total"], 341)
    self.assertEqual([dist[g]["count"] for g in (DIRECTORY, FILE, FUNCTION)], [23, 291, 27])
    self.assertAlmostEqual(dist[FILE]["share"], 291 / 341)
    self.assertAlmostEqual(sum(dist[g]["share"] for g in (DIRECTORY, FILE, FUNCTION)), 1.0)

  def test_status_filter(self):
    dataset, _ = _get_example_data()
    dist = corpus_utils.granularity_distribution(dataset.ground_truths, dataset.proposals, corpus_utils.DECLINED)
    self.assertEqual(dist["total"], 3)
    self.assertEqual(dist[FUNCTION]["count"], 1)
    self.assertRaises(ValueError, corpus_utils.granularity_distribution, dataset.ground_truths, None, "declined")


if __name__ == "__main__":
  unittest.main()
