import os
import os.path
import shutil
import sys
import tempfile
import unittest

trace_decline_root = os.path.join(os.path.dirname(os.path.realpath(__file__)), "..")
sys.path.append(trace_decline_root)

from trace_decline import repo_model
from trace_decline.artifacts import CodeArtifactId, DIRECTORY, FILE, FUNCTION, parse_artifact_id
from trace_decline.errors import IoError, UnknownArtifact


def _get_example_data():
  return repo_model.scan_repository(os.path.join(trace_decline_root, "example", "tiny"), commit_id="c0ffee")


def _write(root, rel_path, text):
  path = os.path.join(root, rel_path)
  os.makedirs(os.path.dirname(path), exist_ok=True)
  with open(path, "w", encoding="utf-8") as f:
    f.write(text)


class TestScanRepository(unittest.TestCase):

  @classmethod
  def setUpClass(self):
    self.snapshot = _get_example_data()

  def test_counts(self):
    self.assertEqual(repo_model.snapshot_counts(self.snapshot),
                     {"directories": 3, "files": 2, "functions": 3, "package_directories": 2,
                      "duplicate_functions": 0})

  def test_ids(self):
    self.assertEqual([d.canonical for d in self.snapshot.directories], ["./", "a/", "a/b/"])
    self.assertEqual([f.canonical for f in self.snapshot.files], ["a/b/y.go", "a/x.go"])
    self.assertEqual([f.canonical for f in self.snapshot.function_ids()],
                     ["a/b/y.go::Parse", "a/x.go::(*Server).Serve", "a/x.go::Hello"])
    self.assertEqual(self.snapshot.commit_id, "c0ffee")
    self.assertEqual(self.snapshot.root_label, "tiny")

  def test_has(self):
    self.assertTrue(self.snapshot.has(parse_artifact_id("a/b/")))
    self.assertTrue(self.snapshot.has(parse_artifact_id("a/x.go::Hello")))
    self.assertFalse(self.snapshot.has(parse_artifact_id("a/README.go")))
    self.assertFalse(self.snapshot.has(parse_artifact_id("a/x.go::Missing")))

  def test_artifacts_at(self):
    self.assertEqual(len(self.snapshot.artifacts_at(DIRECTORY)), 3)
    self.assertEqual(len(self.snapshot.artifacts_at(FILE)), 2)
    self.assertEqual(len(self.snapshot.artifacts_at(FUNCTION)), 3)

  def test_function_source(self):
    source = self.snapshot.function_source(parse_artifact_id("a/x.go::(*Server).Serve"))
    self.assertEqual(source, "func (s *Server) Serve() error {\n    return nil\n}")
    self.assertRaises(UnknownArtifact, self.snapshot.function_source, parse_artifact_id("a/x.go::Nope"))

  def test_children(self):
    subdirs, files = self.snapshot.children(CodeArtifactId(DIRECTORY, "a/"))
    self.assertEqual([d.canonical for d in subdirs], ["a/b/"])
    self.assertEqual([f.canonical for f in files], ["a/x.go"])

  def test_missing_root(self):
    self.assertRaises(IoError, repo_model.scan_repository, os.path.join(trace_decline_root, "no", "such", "dir"))


class TestScanOptions(unittest.TestCase):

  def setUp(self):
    self.root = tempfile.mkdtemp()
    _write(self.root, "main.go", "package main\n\nfunc main() {\n}\n")
    _write(self.root, "vendor/dep/dep.go", "package dep\n\nfunc Dep() {}\n")
    _write(self.root, "pkg/broken.go", "package pkg\n\nfunc Good() {\n}\n\nfunc Bad() {\n")
    _write(self.root, "docs/notes.txt", "no go here\n")

  def tearDown(self):
    shutil.rmtree(self.root)

  def test_exclude_globs(self):
    snapshot = repo_model.scan_repository(self.root, exclude_globs=["vendor/*"], commit_id="x")
    self.assertEqual([f.canonical for f in snapshot.files], ["main.go", "pkg/broken.go"])
    self.assertNotIn(CodeArtifactId(DIRECTORY, "vendor/"), snapshot.directories)

  def test_include_all_dirs(self):
    default = repo_model.scan_repository(self.root, commit_id="x")
    self.assertNotIn(CodeArtifactId(DIRECTORY, "docs/"), default.directories)
    everything = repo_model.scan_repository(self.root, include_all_dirs=True, commit_id="x")
    self.assertIn(CodeArtifactId(DIRECTORY, "docs/"), everything.directories)

  def test_parse_error_is_recorded(self):
    snapshot = repo_model.scan_repository(self.root, commit_id="x")
    broken = CodeArtifactId(FILE, "pkg/broken.go")
    self.assertTrue(snapshot.has(broken))
    self.assertEqual(snapshot.functions[broken], ())
    self.assertEqual([e[0] for e in snapshot.errors], ["pkg/broken.go"])

  def test_duplicate_init_keeps_first(self):
    _write(self.root, "setup/setup.go", "package setup\n\nfunc init() {\n}\n\nfunc init() {\n}\n")
    snapshot = repo_model.scan_repository(self.root, commit_id="x")
    sigs = snapshot.functions[CodeArtifactId(FILE, "setup/setup.go")]
    self.assertEqual([(s.name, s.line_start) for s in sigs], [("init", 3)])
    self.assertEqual(snapshot.duplicates, (("setup/setup.go", "init", 6),))
    self.assertEqual(repo_model.snapshot_counts(snapshot)["duplicate_functions"], 1)
    saved = os.path.join(self.root, "snapshot.json")
    repo_model.save_snapshot(snapshot, saved)
    self.assertEqual(repo_model.load_snapshot(saved).duplicates, snapshot.duplicates)

  def test_parenthesized_receiver(self):
    _write(self.root, "odd/odd.go", "package odd\n\ntype T struct{}\n\nfunc (t (*T)) M() {}\n")
    snapshot = repo_model.scan_repository(self.root, commit_id="x")
    self.assertTrue(snapshot.has(CodeArtifactId(FUNCTION, "odd/odd.go::(*T).M")))

  def test_bad_function_id_is_recorded(self):
    _write(self.root, "odd/weird.go", "package odd\n\nfunc (m Map[K, (V)]) M() {}\n")
    snapshot = repo_model.scan_repository(self.root, commit_id="x")
    weird = CodeArtifactId(FILE, "odd/weird.go")
    self.assertEqual(snapshot.functions[weird], ())
    self.assertEqual([e[0] for e in snapshot.errors], ["odd/weird.go", "pkg/broken.go"])
    self.assertTrue(snapshot.has(CodeArtifactId(FILE, "main.go")))


class TestRender(unittest.TestCase):

  @classmethod
  def setUpClass(self):
    self.snapshot = _get_example_data()

  def test_full_map(self):
    self.assertEqual(repo_model.render_tree_map(self.snapshot),
                     "./\n    a/\n        b/\n            y.go\n        x.go\n")

  def test_scoped_map(self):
    scoped = repo_model.render_tree_map(self.snapshot, scope=[CodeArtifactId(DIRECTORY, "a/b/")])
    self.assertEqual(scoped, "a/\n    b/\n        y.go\n")

  def test_scoped_map_with_root(self):
    self.assertEqual(repo_model.render_tree_map(self.snapshot, scope=[CodeArtifactId(DIRECTORY, "./")]),
                     repo_model.render_tree_map(self.snapshot))

  def test_scope_must_exist(self):
    self.assertRaises(UnknownArtifact, repo_model.render_tree_map, self.snapshot,
                      [CodeArtifactId(DIRECTORY, "c/")])

  def test_every_line_ends_with_newline(self):
    text = repo_model.render_tree_map(self.snapshot)
    self.assertTrue(text.endswith("\n"))
    self.assertEqual(len(text.splitlines()), 5)

  def test_empty_snapshot(self):
    empty = repo_model.RepoSnapshot("empty", None, [], [], {}, {})
    self.assertTrue(empty.is_empty())
    self.assertEqual(repo_model.render_tree_map(empty), "")

  def test_file_skeleton(self):
    self.assertEqual(repo_model.render_file_skeleton(self.snapshot, CodeArtifactId(FILE, "a/x.go")),
                     "### a/x.go\nfunc Hello(...) { ... }\nfunc (s *Server) Serve(...) { ... }\n")
    self.assertRaises(UnknownArtifact, repo_model.render_file_skeleton, self.snapshot,
                      CodeArtifactId(FILE, "a/z.go"))


class TestSnapshotFiles(unittest.TestCase):

  def test_save_and_load(self):
    snapshot = _get_example_data()
    tmp = tempfile.mkdtemp()
    try:
      path = os.path.join(tmp, "snapshot.json")
      repo_model.save_snapshot(snapshot, path)
      loaded = repo_model.load_snapshot(path)
      self.assertEqual(loaded, snapshot)
      self.assertEqual(loaded.function(parse_artifact_id("a/b/y.go::Parse")).line_start, 3)
    finally:
      shutil.rmtree(tmp)


if __name__ == "__main__":
  unittest.main()
