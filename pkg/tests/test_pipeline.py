import json
import os
import os.path
import re
import shutil
import sys
import tempfile
import unittest

trace_decline_root = os.path.join(os.path.dirname(os.path.realpath(__file__)), "..")
sys.path.append(trace_decline_root)

from trace_decline import corpus_utils
from trace_decline import llm_gateway
from trace_decline import pipeline
from trace_decline import repo_model
from trace_decline import scorers
from trace_decline.artifacts import CodeArtifactId, DIRECTORY, FILE, FUNCTION, parse_artifact_id
from trace_decline.errors import CacheMiss, ConfigError, EmptyInput, MalformedModelOutput
from trace_decline.go_lexer import extract_function_signatures
from trace_decline.llm_gateway import Gateway, ScriptedProvider, TranscriptStore


def _get_example_data():
  example_path = os.path.join(trace_decline_root, "example")
  dataset = corpus_utils.load_dataset(os.path.join(example_path, "toy_dataset"))
  snapshot = repo_model.scan_repository(os.path.join(example_path, "tiny"), commit_id="c0ffee")
  return dataset, snapshot


def _snapshot_from_sources(sources):
  files = [CodeArtifactId(FILE, p) for p in sources]
  dirs = {CodeArtifactId(DIRECTORY, "./")}
  for p in sources:
    parts = p.split("/")[:-1]
    for i in range(1, len(parts) + 1):
      dirs.add(CodeArtifactId(DIRECTORY, "/".join(parts[:i]) + "/"))
  functions = {f: extract_function_signatures(sources[f.canonical], f) for f in files}
  return repo_model.RepoSnapshot("mem", None, dirs, files, functions, {f: sources[f.canonical] for f in files})


class _Oracle(object):
  """Answers every pipeline step for one proposal."""

  def __init__(self, granularity, directories=(), files=(), functions=None, links=()):
    self.granularity = granularity
    self.directories = list(directories)
    self.files = list(files)
    self.functions = functions or {}
    self.links = set(links)

  def __call__(self, request):
    user = request.user
    if "Answer with exactly one word: directory" in user:
      return self.granularity
    if "### Repository Structure ###" in user:
      return json.dumps(self.directories)
    if "### Candidate Directories ###" in user:
      return json.dumps(self.files)
    if "### File Skeleton ###" in user:
      file_path = re.search(r"^### (\S+\.go)$", user, re.M).group(1)
      return json.dumps(self.functions.get(file_path, []))
    if "### Source Code Element ###" in user:
      element = re.search(r"### Source Code Element ###\n### (\S+)", user).group(1)
      return "Yes" if element in self.links else "No"
    raise AssertionError(f"Unexpected prompt: {user[:80]}")


class _ByTitle(object):
  """Routes requests to the oracle of the proposal whose title appears in the prompt."""

  def __init__(self, oracles, fallback=None):
    self.oracles = oracles
    self.fallback = fallback

  def __call__(self, request):
    for fragment, oracle in self.oracles.items():
      if fragment in request.user:
        return oracle(request)
    if self.fallback is not None:
      return self.fallback
    raise AssertionError("No oracle for prompt")


TOY_ORACLES = {
  "add a streaming parser": _Oracle(DIRECTORY, directories=["a/b/"]),
  "greetings in other languages": _Oracle(FILE, directories=["a/"], files=["a/x.go"], links=["a/x.go"]),
  "typed error": _Oracle(FUNCTION, directories=["a/"], files=["a/x.go"],
                         functions={"a/x.go": ["(*Server).Serve"]}, links=["a/x.go::(*Server).Serve"]),
  "accept a byte slice": _Oracle(FUNCTION, directories=["a/b/"], files=["a/b/y.go"],
                                 functions={"a/b/y.go": ["func Parse"]}, links=["a/b/y.go::Parse"]),
}


def _scripted(responder=None, replies=None):
  return Gateway(llm_gateway.SCRIPTED, provider=ScriptedProvider(replies=replies, responder=responder))


class TestReplyParsing(unittest.TestCase):

  def test_normalize_reply(self):
    self.assertEqual(pipeline.normalize_reply(" FUNCTION.\n"), "function")
    self.assertEqual(pipeline.normalize_reply("Yes!"), "yes")

  def test_parse_json_array(self):
    self.assertEqual(pipeline.parse_json_array('```json\n["a/"]\n```'), ["a/"])
    self.assertEqual(pipeline.parse_json_array('Sure, here: ["a/x.go", "b.go"]. Done.'), ["a/x.go", "b.go"])
    self.assertEqual(pipeline.parse_json_array("[]"), [])

  def test_render_template(self):
    self.assertEqual(pipeline.render_template("{{A}} and {{B}}", {"A": "{{B}}", "B": "b"}), "{{B}} and b")


class TestTemplates(unittest.TestCase):

  def test_defaults_load(self):
    templates = pipeline.load_templates()
    self.assertEqual(set(templates), set(pipeline.STEPS))

  def test_missing_placeholder(self):
    tmp = tempfile.mkdtemp()
    try:
      path = os.path.join(tmp, "granularity.txt")
      with open(path, "w", encoding="utf-8") as f:
        f.write("No placeholder here.\n")
      self.assertRaises(ConfigError, pipeline.load_templates, {pipeline.PHASE_GRANULARITY: path})
      self.assertRaises(ConfigError, pipeline.load_templates, {pipeline.PHASE_GRANULARITY: path + ".missing"})
      self.assertRaises(ConfigError, pipeline.load_templates, {"summarize": path})
    finally:
      shutil.rmtree(tmp)


class TestPhases(unittest.TestCase):

  @classmethod
  def setUpClass(self):
    self.dataset, self.snapshot = _get_example_data()
    self.config = pipeline.create_pipeline_config()
    self.proposal = self.dataset.proposals[0]

  def test_granularity_retry(self):
    gateway = _scripted(replies=["maybe a package?", "File."])
    self.assertEqual(pipeline.decide_granularity(self.proposal, self.config, gateway), FILE)
    self.assertEqual(gateway.call_count, 2)

  def test_granularity_gives_up(self):
    gateway = _scripted(replies=["x", "y", "z", "file"])
    with self.assertRaises(MalformedModelOutput) as cm:
      pipeline.decide_granularity(self.proposal, self.config, gateway)
    self.assertEqual(cm.exception.raw_replies, ["x", "y", "z"])
    self.assertEqual(gateway.call_count, self.config.parse_retries + 1)

  def test_localize_directories(self):
    provenance = pipeline.new_provenance()
    gateway = _scripted(replies=['["a/", "a/", "./a/b", "zzz/", "../x"]'])
    dirs = pipeline.localize_directories(self.proposal, self.snapshot, self.config, gateway, provenance)
    self.assertEqual([d.canonical for d in dirs], ["a/", "a/b/"])
    self.assertEqual([(d["candidate"], d["reason"]) for d in provenance["dropped"]],
                     [("zzz/", pipeline.DROP_UNKNOWN), ("../x", pipeline.DROP_MALFORMED)])

  def test_localize_directories_empty_snapshot(self):
    empty = repo_model.RepoSnapshot("empty", None, [], [], {}, {})
    self.assertRaises(EmptyInput, pipeline.localize_directories, self.proposal, empty, self.config,
                      _scripted(replies=["[]"]))

  def test_localize_files_no_candidates(self):
    gateway = _scripted(replies=[])
    self.assertEqual(pipeline.localize_files(self.proposal, self.snapshot, [], self.config, gateway), [])
    self.assertEqual(gateway.call_count, 0)

  def test_localize_files_scope(self):
    seen = []

    def respond(request):
      seen.append(request.user)
      return '["a/b/y.go", "a/x.go", "a/b/nope.go", "a/b/"]'

    provenance = pipeline.new_provenance()
    files = pipeline.localize_files(self.proposal, self.snapshot, [CodeArtifactId(DIRECTORY, "a/b/")],
                                    self.config, _scripted(respond), provenance)
    self.assertEqual([f.canonical for f in files], ["a/b/y.go"])
    self.assertEqual([d["reason"] for d in provenance["dropped"]],
                     [pipeline.DROP_OUT_OF_SCOPE, pipeline.DROP_UNKNOWN, pipeline.DROP_MALFORMED])
    self.assertIn("a/\n    b/\n        y.go\n", seen[0])
    self.assertNotIn("x.go", seen[0])

  def test_localize_functions_partial(self):
    def respond(request):
      if "### a/x.go" in request.user:
        return "I cannot tell."
      return '["Parse"]'

    provenance = pipeline.new_provenance()
    files = [CodeArtifactId(FILE, "a/b/y.go"), CodeArtifactId(FILE, "a/x.go")]
    found = pipeline.localize_functions(self.proposal, self.snapshot, files, self.config, _scripted(respond),
                                        provenance)
    self.assertEqual(found, [parse_artifact_id("a/b/y.go::Parse")])
    self.assertTrue(provenance["partial"])
    self.assertEqual(provenance["errors"][0]["scope"], "a/x.go")
    self.assertEqual(len(provenance["errors"][0]["raw_replies"]), 3)

  def test_decide_link(self):
    artifact = parse_artifact_id("a/x.go")
    seen = []

    def respond(request):
      seen.append(request.user)
      return "No."

    self.assertFalse(pipeline.decide_link(self.proposal, artifact, "package a\n", self.config, _scripted(respond)))
    self.assertIn("### a/x.go\npackage a\n", seen[0])


class TestMatchFunctionName(unittest.TestCase):

  @classmethod
  def setUpClass(self):
    self.snapshot = _snapshot_from_sources({
      "p/m.go": ("package p\n\nfunc New() {}\n\nfunc (s *Server) Close() {}\n\n"
                 "func (c *Client) Close() {}\n\nfunc (s *Server) Serve() {}\n"),
    })
    self.file_id = CodeArtifactId(FILE, "p/m.go")

  def _match(self, name):
    fn_id, reason = pipeline.match_function_name(self.snapshot, self.file_id, name)
    return fn_id.canonical if fn_id is not None else reason

  def test_forms(self):
    self.assertEqual(self._match("New"), "p/m.go::New")
    self.assertEqual(self._match("func New"), "p/m.go::New")
    self.assertEqual(self._match("(*Server).Close"), "p/m.go::(*Server).Close")
    self.assertEqual(self._match("( *Server ).Close"), "p/m.go::(*Server).Close")
    self.assertEqual(self._match("p/m.go::(*Client).Close"), "p/m.go::(*Client).Close")
    self.assertEqual(self._match("Serve"), "p/m.go::(*Server).Serve")

  def test_drops(self):
    self.assertEqual(self._match("Close"), pipeline.DROP_AMBIGUOUS)
    self.assertEqual(self._match("Open"), pipeline.DROP_UNKNOWN)
    self.assertEqual(self._match("q/other.go::New"), pipeline.DROP_OUT_OF_SCOPE)


class TestRunPipeline(unittest.TestCase):

  @classmethod
  def setUpClass(self):
    self.dataset, self.snapshot = _get_example_data()
    self.config = pipeline.create_pipeline_config()
    self.proposals = {p.id: p for p in self.dataset.proposals}

  def _run(self, pid, config=None):
    gateway = _scripted(_ByTitle(TOY_ORACLES))
    return pipeline.run_pipeline(self.proposals[pid], self.snapshot, config or self.config, gateway), gateway

  def test_directory_stops_early(self):
    link_set, gateway = self._run(101)
    self.assertEqual(link_set.granularity, DIRECTORY)
    self.assertEqual(link_set.links, frozenset([CodeArtifactId(DIRECTORY, "a/b/")]))
    self.assertEqual(gateway.call_count, 2)

  def test_file(self):
    link_set, gateway = self._run(102)
    self.assertEqual(link_set.links, frozenset([CodeArtifactId(FILE, "a/x.go")]))
    self.assertEqual(link_set.provenance["decisions"], {"a/x.go": True})
    self.assertEqual(gateway.call_count, 4)

  def test_function(self):
    link_set, gateway = self._run(103)
    self.assertEqual(link_set.links, frozenset([parse_artifact_id("a/x.go::(*Server).Serve")]))
    self.assertEqual(link_set.provenance["functions"], ["a/x.go::(*Server).Serve"])
    self.assertEqual(gateway.call_count, 5)

  def test_links_share_granularity(self):
    for pid in self.proposals:
      link_set, _ = self._run(pid)
      self.assertTrue(all(x.kind == link_set.granularity for x in link_set.links))

  def test_localization_only(self):
    link_set, gateway = self._run(102, self.config._replace(localization_only=True))
    self.assertEqual(link_set.links, frozenset([CodeArtifactId(FILE, "a/x.go")]))
    self.assertEqual(link_set.provenance["decisions"], {})
    self.assertEqual(gateway.call_count, 3)

  def test_forced_granularity(self):
    link_set, gateway = self._run(102, self.config._replace(forced_granularity=DIRECTORY))
    self.assertEqual(link_set.granularity, DIRECTORY)
    self.assertEqual(link_set.links, frozenset([CodeArtifactId(DIRECTORY, "a/")]))
    self.assertEqual(gateway.call_count, 1)

  def test_no_directories_means_no_links(self):
    oracle = _Oracle(FUNCTION, directories=[])
    gateway = _scripted(oracle)
    link_set = pipeline.run_pipeline(self.proposals[104], self.snapshot, self.config, gateway)
    self.assertEqual(link_set.links, frozenset())
    self.assertEqual(gateway.call_count, 2)


class TestRunBatch(unittest.TestCase):

  @classmethod
  def setUpClass(self):
    self.dataset, self.snapshot = _get_example_data()
    self.config = pipeline.create_pipeline_config()

  def setUp(self):
    self.tmp = tempfile.mkdtemp()

  def tearDown(self):
    shutil.rmtree(self.tmp)

  def test_perfect_oracle_scores(self):
    rows = pipeline.run_batch(self.dataset.proposals, self.snapshot, self.config,
                              _scripted(_ByTitle(TOY_ORACLES)), max_workers=4)
    self.assertEqual([r.proposal_id for r in rows], [101, 102, 103, 104])
    self.assertTrue(all(r.status == pipeline.OK for r in rows))
    scores = scorers.score_link_sets({r.proposal_id: r.link_set for r in rows}, self.dataset.ground_truths)
    report = scorers.macro_aggregate(scores)
    self.assertEqual(report.rows[-1], scorers.GroupRow("overall", 4, 1.0, 1.0, 1.0, 1.0))

  def test_empty_store_fails_every_proposal(self):
    gateway = Gateway(llm_gateway.REPLAY, store=TranscriptStore(os.path.join(self.tmp, "empty.jsonl")))
    rows = pipeline.run_batch(self.dataset.proposals, self.snapshot, self.config, gateway)
    self.assertTrue(all(r.status == pipeline.FAILED for r in rows))
    self.assertTrue(all(isinstance(r.error, CacheMiss) for r in rows))
    self.assertEqual({r.failure_phase for r in rows}, {pipeline.PHASE_GRANULARITY})

  def test_record_then_replay_is_identical(self):
    store_path = os.path.join(self.tmp, "transcripts.jsonl")
    recorder = Gateway(llm_gateway.RECORD, store=TranscriptStore(store_path),
                       provider=ScriptedProvider(responder=_ByTitle(TOY_ORACLES)))
    recorded = pipeline.run_batch(self.dataset.proposals, self.snapshot, self.config, recorder)
    replayer = Gateway(llm_gateway.REPLAY, store=TranscriptStore(store_path))
    replayed = pipeline.run_batch(self.dataset.proposals, self.snapshot, self.config, replayer)
    self.assertEqual([(r.proposal_id, r.link_set.granularity, r.link_set.links) for r in recorded],
                     [(r.proposal_id, r.link_set.granularity, r.link_set.links) for r in replayed])

  def test_write_and_load_links(self):
    gateway = _scripted(_ByTitle({"typed error": TOY_ORACLES["typed error"]}, fallback="???"))
    rows = pipeline.run_batch(self.dataset.proposals, self.snapshot, self.config, gateway, max_workers=1)
    self.assertEqual([r.status for r in rows], [pipeline.FAILED, pipeline.FAILED, pipeline.OK, pipeline.FAILED])
    path = os.path.join(self.tmp, "links.jsonl")
    pipeline.write_links(rows, path)
    pipeline.write_provenance(rows, os.path.join(self.tmp, "provenance.jsonl"))
    with open(path, "r", encoding="utf-8") as f:
      first = json.loads(f.readline())
    self.assertEqual(first, {"proposal_id": 101, "granularity": None, "links": [], "status": "failed",
                             "failure_phase": pipeline.PHASE_GRANULARITY})
    loaded = pipeline.load_links(path)
    self.assertEqual(list(loaded), [103])
    self.assertEqual(loaded[103].links, frozenset([parse_artifact_id("a/x.go::(*Server).Serve")]))


if __name__ == "__main__":
  unittest.main()
