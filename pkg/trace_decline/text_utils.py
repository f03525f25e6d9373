"""Text preprocessing shared by the retrieval baseline."""
import collections
import os
import re
from functools import lru_cache

from trace_decline.cache_utils import CachedPorterStemmer

STOP_WORDS_FILE = os.path.join(os.path.dirname(os.path.abspath(__file__)), 'data', 'stopwords.txt')

_URL_RE = re.compile(r'https?://\S+|www\.\S+')
_TAG_RE = re.compile(r'</?[A-Za-z][^<>]*>')
_FENCE_RE = re.compile(r'```[A-Za-z0-9_+-]*')
_CHUNK_RE = re.compile(r'[A-Za-z0-9]+')
_SUBWORD_RE = re.compile(r'[A-Z]+(?=[A-Z][a-z])|[A-Z]?[a-z]+|[A-Z]+|\d+')

TokenizedDoc = collections.namedtuple('TokenizedDoc', ['doc_id', 'tokens'])

_stemmer = CachedPorterStemmer()


@lru_cache(maxsize=None)
def load_stop_words(filename=STOP_WORDS_FILE):
  """The frozen stop-word list; lines starting with # are comments."""
  with open(filename, 'r', encoding='utf-8') as f:
    return frozenset(line.strip().lower() for line in f if line.strip() and not line.startswith('#'))


def split_identifier(chunk):
  """Split an alphanumeric chunk on case and digit boundaries: "NopCloser" -> ["Nop", "Closer"]."""
  return _SUBWORD_RE.findall(chunk)


def preprocess_text(raw, stop_words=None, stem=True):
  """
  Turn raw discussion or source text into retrieval terms.

  URLs, markup tags and code fences are removed, the rest is split on
  non-alphanumeric and identifier case boundaries, lowercased, stripped of stop
  words and Porter stemmed (stop words are checked again after stemming).

  Args:
    raw: The text
    stop_words: A set of stop words; the shipped list by default
    stem: Whether to stem

  Returns:
    A list of terms in text order
  """
  if stop_words is None:
    stop_words = load_stop_words()
  text = _URL_RE.sub(' ', raw)
  text = _TAG_RE.sub(' ', text)
  text = _FENCE_RE.sub(' ', text)
  terms = []
  for chunk in _CHUNK_RE.findall(text):
    for word in split_identifier(chunk):
      word = word.lower()
      if word in stop_words:
        continue
      if stem:
        word = _stemmer.stem_fixed_point(word)
        if not word or word in stop_words:
          continue
      terms.append(word)
  return terms


def tokenize_doc(doc_id, raw, stop_words=None):
  return TokenizedDoc(doc_id, preprocess_text(raw, stop_words=stop_words))
