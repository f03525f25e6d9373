"""Retrieval-augmented baseline: vector similarity localization plus optional link decision."""
import collections
import concurrent.futures
import json
import math

import numpy as np
from absl import logging
from scipy import sparse
from sklearn.preprocessing import normalize

from trace_decline import artifacts
from trace_decline import corpus_utils
from trace_decline import pipeline
from trace_decline import text_utils
from trace_decline.artifacts import DIRECTORY, FILE, GRANULARITIES
from trace_decline.errors import EmptyIndex, ParseError, TransportError

TFIDF = 'tfidf'
EXTERNAL = 'external'
WEIGHTINGS = (TFIDF, EXTERNAL)

DEFAULT_K = 20
DEFAULT_SWEEP = (1, 5, 10, 20, 30, 40, 50)

# Similarities are compared at this many decimals so float noise cannot reorder ties
TIE_DECIMALS = 12
EMBED_BATCH = 64

BaselineResult = collections.namedtuple('BaselineResult', ['candidates', 'links'])
CandidateRow = collections.namedtuple('CandidateRow', ['proposal_id', 'k', 'granularity', 'ranked'])


class VectorIndex(object):
  """
  L2-normalized document vectors over artifacts of one granularity.

  Args:
    ids: Artifact ids, one per row
    granularity: The granularity of the ids
    weighting: "tfidf" or "external"
    matrix: A scipy.sparse CSR matrix (tfidf) or dense numpy array (external)
    vocabulary: A dict mapping terms to columns (tfidf only)
    idf: A numpy array of inverse document frequencies (tfidf only)
    embedder: A callable mapping a list of texts to vectors (external only)
  """

  def __init__(self, ids, granularity, weighting, matrix, vocabulary=None, idf=None, embedder=None):
    self.ids = list(ids)
    self.granularity = granularity
    self.weighting = weighting
    self.matrix = matrix
    self.vocabulary = vocabulary or {}
    self.idf = idf
    self._embedder = embedder

  def __len__(self):
    return len(self.ids)

  def query_vector(self, tokens):
    """Build a normalized query vector in the index's space from preprocessed terms."""
    if self.weighting == EXTERNAL:
      vec = np.asarray(self._embedder([' '.join(tokens)])[0], dtype=float)
      norm = np.linalg.norm(vec)
      return vec / norm if norm > 0 else vec
    vec = np.zeros(len(self.vocabulary))
    for term, count in collections.Counter(tokens).items():
      col = self.vocabulary.get(term)
      if col is not None:
        vec[col] = count * self.idf[col]
    norm = np.linalg.norm(vec)
    return vec / norm if norm > 0 else vec

  def similarities(self, query):
    if sparse.issparse(self.matrix):
      return np.asarray(self.matrix @ query).ravel()
    return self.matrix @ query

  def row(self, i):
    if sparse.issparse(self.matrix):
      return self.matrix[i].toarray().ravel()
    return np.asarray(self.matrix[i]).ravel()


def artifact_documents(snapshot, granularity):
  """
  The raw text of every artifact of a granularity.

  Directories concatenate the files they contain transitively, files use their
  content, functions their source span.

  Returns:
    A list of (artifact id, text) in bytewise id order
  """
  if granularity not in GRANULARITIES:
    raise ValueError(f'Unknown granularity {granularity}')
  docs = []
  for artifact_id in snapshot.artifacts_at(granularity):
    if granularity == DIRECTORY:
      text = '\n'.join(snapshot.file_contents[f] for f in snapshot.files_under(artifact_id))
    elif granularity == FILE:
      text = snapshot.file_contents[artifact_id]
    else:
      text = snapshot.function_source(artifact_id)
    docs.append((artifact_id, text))
  return docs


def tfidf_matrix(token_lists):
  """
  TF-IDF weights with tf the raw term count and idf = ln(N/df), rows L2-normalized.

  A term found in every document has idf 0, so a document made only of such
  terms (any document of a one-document index) keeps an all-zero row.

  Returns:
    A tuple (CSR matrix, vocabulary dict, idf array)
  """
  vocabulary = {t: i for i, t in enumerate(sorted({t for tokens in token_lists for t in tokens}))}
  rows, cols, data = [], [], []
  df = np.zeros(len(vocabulary))
  for r, tokens in enumerate(token_lists):
    for term, count in collections.Counter(tokens).items():
      c = vocabulary[term]
      rows.append(r)
      cols.append(c)
      data.append(float(count))
      df[c] += 1
  n_docs = len(token_lists)
  if not n_docs or not vocabulary:
    return sparse.csr_matrix((n_docs, len(vocabulary))), vocabulary, df
  idf = np.log(n_docs / df)
  tf = sparse.csr_matrix((data, (rows, cols)), shape=(n_docs, len(vocabulary)))
  weighted = sparse.csr_matrix(tf.multiply(idf.reshape(1, -1)))
  return normalize(weighted, norm='l2', axis=1), vocabulary, idf


def build_index(snapshot, granularity, weighting=TFIDF, gateway=None, embedding_model=None, max_workers=4):
  """
  Build a vector index with one document per artifact of a granularity.

  Args:
    snapshot: A RepoSnapshot
    granularity: directory, file or function
    weighting: "tfidf" (offline) or "external" (embeddings via the gateway)
    gateway: A Gateway, required for external weighting
    embedding_model: Model name passed to the embedding endpoint
    max_workers: Threads used for preprocessing

  Returns:
    A VectorIndex

  Raises:
    TransportError: If the embedding endpoint fails
  """
  if weighting not in WEIGHTINGS:
    raise ValueError(f'Unknown weighting {weighting}, expected one of {WEIGHTINGS}')
  docs = artifact_documents(snapshot, granularity)
  ids = [d[0] for d in docs]
  logging.info('Building %s index over %d %s documents.', weighting, len(docs), granularity)
  if weighting == EXTERNAL:
    if gateway is None:
      raise TransportError('External weighting needs a gateway with an embedding endpoint')
    embedder = lambda texts: gateway.embed(texts, embedding_model)
    vectors = []
    for start in range(0, len(docs), EMBED_BATCH):
      vectors.extend(embedder([text for _, text in docs[start:start + EMBED_BATCH]]))
    if not docs:
      return VectorIndex(ids, granularity, EXTERNAL, np.zeros((0, 0)), embedder=embedder)
    matrix = normalize(np.asarray(vectors, dtype=float).reshape(len(docs), -1), norm='l2', axis=1)
    return VectorIndex(ids, granularity, EXTERNAL, matrix, embedder=embedder)
  with concurrent.futures.ThreadPoolExecutor(max_workers=max(1, max_workers)) as pool:
    tokenized = list(pool.map(lambda d: text_utils.tokenize_doc(*d), docs))
  matrix, vocabulary, idf = tfidf_matrix([d.tokens for d in tokenized])
  return VectorIndex(ids, granularity, TFIDF, matrix, vocabulary=vocabulary, idf=idf)


def retrieve_topk(index, proposal_tokens, k):
  """
  Rank artifacts by cosine similarity to a query.

  Ties (at 12 decimals) are broken ascending bytewise by artifact id.

  Args:
    index: A VectorIndex
    proposal_tokens: Preprocessed query terms
    k: Number of results

  Returns:
    A list of (artifact id, similarity) of length min(k, len(index))

  Raises:
    EmptyIndex: If the index holds no documents
  """
  if k < 1:
    raise ValueError(f'k must be >= 1, got {k}')
  if len(index) == 0:
    raise EmptyIndex('Cannot retrieve from an empty index')
  sims = index.similarities(index.query_vector(proposal_tokens))
  order = sorted(range(len(index)),
                 key=lambda i: (-round(float(sims[i]), TIE_DECIMALS), artifacts.sort_key(index.ids[i])))
  return [(index.ids[i], float(sims[i])) for i in order[:k]]


def proposal_tokens(proposal):
  return text_utils.preprocess_text(corpus_utils.concat_discussion(proposal).text)


def run_sweep(proposal, index, ks=DEFAULT_SWEEP):
  """
  Retrieve once at the largest k and cut the ranking for every k.

  Returns:
    A dict mapping each k to its ranked list
  """
  ranked = retrieve_topk(index, proposal_tokens(proposal), max(ks))
  return {k: ranked[:k] for k in sorted(ks)}


def run_baseline(proposal, snapshot, granularity, k, with_link_decision, config=None, gateway=None, index=None):
  """
  Localize by similarity and optionally apply the link decision to every candidate.

  Args:
    proposal: A Proposal
    snapshot: A RepoSnapshot
    granularity: The granularity the caller fixes for retrieval
    k: Number of candidates
    with_link_decision: Whether to ask the Yes/No link decision per candidate
    config: A PipelineConfig (needed with link decision)
    gateway: A Gateway (needed with link decision)
    index: A prebuilt VectorIndex at that granularity

  Returns:
    A BaselineResult; links is None without link decision
  """
  if index is None:
    index = build_index(snapshot, granularity)
  candidates = retrieve_topk(index, proposal_tokens(proposal), k)
  if not with_link_decision:
    return BaselineResult(candidates, None)
  accepted = []
  provenance = pipeline.new_provenance()
  provenance['granularity'] = granularity
  for artifact_id, _ in candidates:
    decision = pipeline.decide_link(proposal, artifact_id, pipeline.element_text(snapshot, artifact_id),
                                    config, gateway)
    provenance['decisions'][artifact_id.canonical] = decision
    if decision:
      accepted.append(artifact_id)
  return BaselineResult(candidates, pipeline.LinkSet(proposal.id, granularity, frozenset(accepted), provenance))


def _candidate_line(row):
  ranked = ', '.join(f'{{"id": {json.dumps(a.canonical, ensure_ascii=False)}, "score": {s:.6f}}}'
                     for a, s in row.ranked)
  return (f'{{"granularity": {json.dumps(row.granularity)}, "k": {row.k}, '
          f'"proposal_id": {row.proposal_id}, "ranked": [{ranked}]}}')


def write_candidates(rows, path):
  """Write candidates.jsonl with scores at 6 decimals, ordered by proposal id then k."""
  logging.info('Writing candidates to %s.', path)
  with open(path, 'w', encoding='utf-8') as f:
    for row in sorted(rows, key=lambda r: (r.proposal_id, r.k)):
      f.write(_candidate_line(row))
      f.write('\n')


def load_candidates(path):
  rows = []
  for line_no, obj in corpus_utils.iterate_jsonl(path):
    try:
      ranked = [(artifacts.parse_artifact_id(x['id']), float(x['score'])) for x in obj['ranked']]
      rows.append(CandidateRow(obj['proposal_id'], obj['k'], obj['granularity'], ranked))
    except (KeyError, TypeError, ValueError) as e:
      raise ParseError(f'Malformed candidate row in {path} line {line_no}: {e}', path=path, line=line_no)
  return rows


def cosine(a, b):
  na, nb = np.linalg.norm(a), np.linalg.norm(b)
  if na == 0 or nb == 0:
    return 0.0
  return float(np.dot(a, b) / (na * nb))


def idf_of(index, term):
  """The idf of a term, or NaN for a term outside the vocabulary."""
  col = index.vocabulary.get(term)
  return float(index.idf[col]) if col is not None else math.nan
