"""Immutable inverted index with collection statistics and an optional direct
index (per-document term vectors).

On-disk layout of ``index.ptir`` (little-endian, no compression)::

    header    "PTIR" | version u32 | stem u8 | stopword-hash 8B | direct u8
    stats     N u32 | total_tokens u64 | avg_doclen f64
    docs      N x (len u32, docno utf-8, doclen u32)
    lexicon   nterms u32 | nterms x (len u32, term utf-8, df u32, cf u64, offset u64)
    postings  nbytes u64 | per term, df x (docid u32, tf u32)
    direct    (only if flagged) per doc: count u32, count x (termid u32, tf u32)
"""

from __future__ import annotations

import hashlib
import json
import re
import struct
import sys
import threading
from array import array
from collections import Counter
from dataclasses import dataclass, field
from functools import lru_cache
from importlib import resources
from pathlib import Path
from typing import Callable, Iterable, Iterator

from nltk.stem.porter import PorterStemmer

from .errors import DirectIndexMissing, DuplicateDocno, FormatError

MAGIC = b"PTIR"
FORMAT_VERSION = 1
INDEX_FILENAME = "index.ptir"


def _load_default_stopwords() -> frozenset[str]:
    text = resources.files("pipert.resources").joinpath("stopwords_v1.txt").read_text(encoding="utf-8")
    return frozenset(w.strip() for w in text.splitlines() if w.strip())


DEFAULT_STOPWORDS = _load_default_stopwords()


def stopword_hash(words: Iterable[str]) -> bytes:
    joined = "\n".join(sorted(set(words))).encode("utf-8")
    return hashlib.sha256(joined).digest()[:8]


@dataclass(frozen=True)
class IndexOptions:
    stem: bool = True
    stopwords: frozenset[str] = DEFAULT_STOPWORDS
    build_direct: bool = True

    def __post_init__(self) -> None:
        if not isinstance(self.stopwords, frozenset):
            object.__setattr__(self, "stopwords", frozenset(self.stopwords))

    @property
    def stopword_hash(self) -> bytes:
        return stopword_hash(self.stopwords)


_TOKEN_RE = re.compile(r"[^\W_]+")
_porter = PorterStemmer(mode=PorterStemmer.ORIGINAL_ALGORITHM)


@lru_cache(maxsize=1 << 16)
def _stem(word: str) -> str:
    return _porter.stem(word)


def tokenize(text: str, opts: IndexOptions | None = None) -> list[str]:
    """Lowercase, split on non-alphanumeric runs, drop stopwords, then stem."""
    opts = opts or IndexOptions()
    words = [w for w in _TOKEN_RE.findall(text.lower()) if w not in opts.stopwords]
    if opts.stem:
        words = [_stem(w) for w in words]
    return words


class Index:
    """In-memory inverted index. Treat as read-only once built or loaded.

    Postings per term are two parallel ``array('I')`` (docids ascending, tfs).
    """

    def __init__(
        self,
        options: IndexOptions,
        docnos: list[str],
        doclens: array,
        terms: list[str],
        df: array,
        cf: array,
        post_docids: list[array],
        post_tfs: list[array],
        direct: list[tuple[array, array]] | None,
        name: str = "index",
    ) -> None:
        self.options = options
        self.docnos = docnos
        self.doclens = doclens
        self.terms = terms
        self.df = df
        self.cf = cf
        self.post_docids = post_docids
        self.post_tfs = post_tfs
        self.direct = direct
        self.name = name

        self.num_docs = len(docnos)
        self.total_tokens = sum(doclens)
        self.avg_doclen = self.total_tokens / self.num_docs if self.num_docs else 0.0
        self.term_ids = {t: i for i, t in enumerate(terms)}
        self.docno_to_id = {d: i for i, d in enumerate(docnos)}
        # position of each docid's docno in lexicographic order; used as tie-break key
        order = sorted(range(self.num_docs), key=docnos.__getitem__)
        self.docno_order = array("I", bytes(4 * self.num_docs))
        for pos, docid in enumerate(order):
            self.docno_order[docid] = pos

        self._memo: dict[object, object] = {}
        self._memo_lock = threading.Lock()

    # -- lookups -----------------------------------------------------------

    @property
    def has_direct(self) -> bool:
        return self.direct is not None

    def postings(self, term: str) -> tuple[array, array] | None:
        tid = self.term_ids.get(term)
        if tid is None:
            return None
        return self.post_docids[tid], self.post_tfs[tid]

    def memo(self, key, compute: Callable[[], object]):
        """Thread-safe memoisation for derived per-model data (norms, upper bounds).

        Concurrent first computations may both run; they produce equal values.
        """
        try:
            return self._memo[key]
        except KeyError:
            pass
        value = compute()
        with self._memo_lock:
            return self._memo.setdefault(key, value)

    def __repr__(self) -> str:
        return f"Index(name={self.name!r}, N={self.num_docs}, terms={len(self.terms)})"

    def __eq__(self, other) -> bool:
        if self is other:
            return True
        if not isinstance(other, Index):
            return NotImplemented
        return (
            self.options == other.options
            and self.docnos == other.docnos
            and self.doclens == other.doclens
            and self.terms == other.terms
            and self.df == other.df
            and self.cf == other.cf
            and self.post_docids == other.post_docids
            and self.post_tfs == other.post_tfs
            and self.direct == other.direct
        )

    def __hash__(self) -> int:
        return hash((self.num_docs, self.total_tokens, len(self.terms)))

    def check_invariants(self) -> None:
        """Raise AssertionError if postings, lexicon or doc table disagree."""
        assert len(set(self.docnos)) == self.num_docs, "docnos not unique"
        assert self.terms == sorted(self.terms), "lexicon not sorted"
        for tid in range(len(self.terms)):
            docids, tfs = self.post_docids[tid], self.post_tfs[tid]
            assert len(docids) == len(tfs) == self.df[tid], f"df mismatch for {self.terms[tid]!r}"
            assert sum(tfs) == self.cf[tid], f"cf mismatch for {self.terms[tid]!r}"
            assert all(a < b for a, b in zip(docids, docids[1:])), f"postings unsorted for {self.terms[tid]!r}"
        assert sum(self.doclens) == self.total_tokens
        if self.direct is not None:
            for docid, (tids, tfs) in enumerate(self.direct):
                assert sum(tfs) == self.doclens[docid], f"direct index length mismatch for doc {docid}"


def term_stats(index: Index, term: str) -> tuple[int, int] | None:
    """(df, cf) for an index term, or None when the term is absent."""
    tid = index.term_ids.get(term)
    if tid is None:
        return None
    return index.df[tid], index.cf[tid]


def doc_vector(index: Index, docid: int) -> dict[str, int]:
    if index.direct is None:
        raise DirectIndexMissing(f"index {index.name!r} was built without a direct index")
    tids, tfs = index.direct[docid]
    return {index.terms[t]: tf for t, tf in zip(tids, tfs)}


# ---------------------------------------------------------------------------
# building


def build_index(docs: Iterable[tuple[str, str]], opts: IndexOptions | None = None, name: str = "index") -> Index:
    """Index a stream of (docno, text); docids follow stream order from 0."""
    opts = opts or IndexOptions()
    docnos: list[str] = []
    seen: set[str] = set()
    doclens = array("I")
    acc: dict[str, tuple[array, array]] = {}
    doc_terms: list[Counter] = []

    for docno, text in docs:
        if docno in seen:
            raise DuplicateDocno(f"duplicate docno {docno!r}")
        seen.add(docno)
        docid = len(docnos)
        docnos.append(docno)
        counts = Counter(tokenize(text, opts))
        doclens.append(sum(counts.values()))
        for term, tf in counts.items():
            entry = acc.get(term)
            if entry is None:
                entry = acc[term] = (array("I"), array("I"))
            entry[0].append(docid)
            entry[1].append(tf)
        if opts.build_direct:
            doc_terms.append(counts)

    terms = sorted(acc)
    df = array("I", (len(acc[t][0]) for t in terms))
    cf = array("Q", (sum(acc[t][1]) for t in terms))
    post_docids = [acc[t][0] for t in terms]
    post_tfs = [acc[t][1] for t in terms]

    direct = None
    if opts.build_direct:
        term_ids = {t: i for i, t in enumerate(terms)}
        direct = []
        for counts in doc_terms:
            pairs = sorted((term_ids[t], tf) for t, tf in counts.items())
            direct.append((array("I", (p[0] for p in pairs)), array("I", (p[1] for p in pairs))))

    return Index(opts, docnos, doclens, terms, df, cf, post_docids, post_tfs, direct, name)


def read_corpus(path: str | Path) -> Iterator[tuple[str, str]]:
    """JSON-lines corpus with string fields ``docno`` and ``text``."""
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            obj = json.loads(line)
            docno, text = obj.get("docno"), obj.get("text")
            if not isinstance(docno, str) or not isinstance(text, str):
                raise ValueError(f"{path}:{lineno}: expected string fields 'docno' and 'text'")
            yield docno, text


# ---------------------------------------------------------------------------
# serialization


def _le(arr: array) -> bytes:
    if sys.byteorder == "big":
        arr = array(arr.typecode, arr)
        arr.byteswap()
    return arr.tobytes()


def _from_le(typecode: str, data: bytes) -> array:
    arr = array(typecode)
    arr.frombytes(data)
    if sys.byteorder == "big":
        arr.byteswap()
    return arr


def serialize_index(index: Index) -> bytes:
    opts = index.options
    out = bytearray()
    out += MAGIC
    out += struct.pack("<IB8sB", FORMAT_VERSION, int(opts.stem), opts.stopword_hash, int(index.direct is not None))
    out += struct.pack("<IQd", index.num_docs, index.total_tokens, index.avg_doclen)
    for docno, dl in zip(index.docnos, index.doclens):
        raw = docno.encode("utf-8")
        out += struct.pack("<I", len(raw)) + raw + struct.pack("<I", dl)

    out += struct.pack("<I", len(index.terms))
    offset = 0
    for tid, term in enumerate(index.terms):
        raw = term.encode("utf-8")
        out += struct.pack("<I", len(raw)) + raw + struct.pack("<IQQ", index.df[tid], index.cf[tid], offset)
        offset += 8 * index.df[tid]

    out += struct.pack("<Q", offset)
    for docids, tfs in zip(index.post_docids, index.post_tfs):
        pairs = array("I", bytes(8 * len(docids)))
        pairs[0::2] = docids
        pairs[1::2] = tfs
        out += _le(pairs)

    if index.direct is not None:
        for tids, tfs in index.direct:
            pairs = array("I", bytes(8 * len(tids)))
            pairs[0::2] = tids
            pairs[1::2] = tfs
            out += struct.pack("<I", len(tids)) + _le(pairs)
    return bytes(out)


def write_index(index: Index, path: str | Path) -> Path:
    """Write ``index.ptir`` into directory ``path`` (created if needed)."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    target = path / INDEX_FILENAME
    target.write_bytes(serialize_index(index))
    return target


class _Reader:
    def __init__(self, data: bytes) -> None:
        self.data = data
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise FormatError(f"truncated index: need {n} bytes for {what} at offset {self.pos}")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def deserialize_index(data: bytes, stopwords: Iterable[str] | None = None, name: str = "index") -> Index:
    r = _Reader(data)
    magic = r.take(4, "magic")
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r} at offset 0")
    (version,) = r.unpack("<I", "version")
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported format version {version} at offset 4 (expected {FORMAT_VERSION})")
    stem, sw_hash, has_direct = r.unpack("<B8sB", "options")

    candidates = [DEFAULT_STOPWORDS, frozenset()]
    if stopwords is not None:
        candidates.insert(0, frozenset(stopwords))
    for words in candidates:
        if stopword_hash(words) == sw_hash:
            break
    else:
        raise FormatError(f"unknown stopword list hash {sw_hash.hex()} at offset 9; pass the list used at build time")
    opts = IndexOptions(stem=bool(stem), stopwords=words, build_direct=bool(has_direct))

    n_docs, total_tokens, _avg = r.unpack("<IQd", "stats")
    docnos, doclens = [], array("I")
    for _ in range(n_docs):
        (n,) = r.unpack("<I", "docno length")
        docnos.append(r.take(n, "docno").decode("utf-8"))
        doclens.append(r.unpack("<I", "doclen")[0])
    if sum(doclens) != total_tokens:
        raise FormatError(f"doc table disagrees with total_tokens at offset {r.pos}")

    (n_terms,) = r.unpack("<I", "lexicon size")
    terms, df, cf, offsets = [], array("I"), array("Q"), []
    for _ in range(n_terms):
        (n,) = r.unpack("<I", "term length")
        terms.append(r.take(n, "term").decode("utf-8"))
        d, c, o = r.unpack("<IQQ", "lexicon entry")
        df.append(d)
        cf.append(c)
        offsets.append(o)

    (nbytes,) = r.unpack("<Q", "postings size")
    base = r.pos
    block = r.take(nbytes, "postings")
    post_docids, post_tfs = [], []
    for tid in range(n_terms):
        start, end = offsets[tid], offsets[tid] + 8 * df[tid]
        if end > nbytes:
            raise FormatError(f"postings for {terms[tid]!r} overrun section at offset {base + start}")
        pairs = _from_le("I", block[start:end])
        post_docids.append(pairs[0::2])
        post_tfs.append(pairs[1::2])

    direct = None
    if has_direct:
        direct = []
        for _ in range(n_docs):
            (n,) = r.unpack("<I", "direct entry count")
            pairs = _from_le("I", r.take(8 * n, "direct entries"))
            direct.append((pairs[0::2], pairs[1::2]))
    if r.pos != len(data):
        raise FormatError(f"trailing bytes after offset {r.pos}")
    return Index(opts, docnos, doclens, terms, df, cf, post_docids, post_tfs, direct, name)


def read_index(path: str | Path, stopwords: Iterable[str] | None = None, name: str | None = None) -> Index:
    """Load an index from a directory containing ``index.ptir`` (or the file itself)."""
    path = Path(path)
    target = path / INDEX_FILENAME if path.is_dir() else path
    label = name or (path.name if path.is_dir() else path.parent.name) or "index"
    return deserialize_index(target.read_bytes(), stopwords, label)
