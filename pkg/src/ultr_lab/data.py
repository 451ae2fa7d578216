"""Domain records, dataset file I/O, feature scaling and query-level splits.

Two on-disk formats are supported:

* SVMLight-with-qid for expert annotations::

      #D=3
      3 qid:1 1:0.5 2:-2.0 # d7

  Feature indices are 1-based, absent indices default to ``0.0`` and the
  trailing ``# <doc_id>`` comment names the document. The ``#D=`` header is
  optional here; without it the dimension is the largest index seen.

* A tab-separated click log with a mandatory ``#D=<int>`` header::

      query_id<TAB>doc_id<TAB>position<TAB>clicked<TAB>f1,...,fD

  Lines for one query must be contiguous.

A grades sidecar (``query_id<TAB>doc_id<TAB>grade``) carries the synthetic
ground truth next to a simulated click log.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .errors import ParseError, ValidationError

GRADES = (0, 1, 2, 3, 4)


def _frozen(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


def as_feature_vector(values, dim: int | None = None) -> np.ndarray:
    """Coerce ``values`` to a finite 1-D float64 array of dimension ``dim``."""
    v = np.asarray(values, dtype=np.float64)
    if v.ndim != 1:
        raise ValidationError(f"feature vector must be 1-D, got shape {v.shape}")
    if dim is not None and v.shape[0] != dim:
        raise ValidationError(f"feature vector has dimension {v.shape[0]}, expected {dim}")
    if not np.all(np.isfinite(v)):
        raise ValidationError("feature vector contains non-finite entries")
    return v


@dataclass(frozen=True, eq=False)
class AnnotatedExample:
    """One expert-judged query-document pair."""

    query_id: str
    doc_id: str
    features: np.ndarray
    grade: int

    def __post_init__(self):
        if self.grade not in GRADES:
            raise ValidationError(f"grade {self.grade!r} outside 0..4 for {self.query_id}/{self.doc_id}")
        object.__setattr__(self, "features", _frozen(as_feature_vector(self.features).copy()))


@dataclass(frozen=True, eq=False)
class Impression:
    """A logged ranked list for one query.

    Arrays are aligned entry-wise. ``positions`` is a permutation of
    ``1..n``. ``clicks`` is ``None`` until clicks have been simulated or
    loaded and ``grades`` is only known for synthetic data.
    """

    query_id: str
    doc_ids: tuple
    features: np.ndarray
    positions: np.ndarray
    clicks: np.ndarray | None = None
    grades: np.ndarray | None = None

    def __post_init__(self):
        feats = np.asarray(self.features, dtype=np.float64)
        n = len(self.doc_ids)
        if feats.ndim != 2 or feats.shape[0] != n:
            raise ValidationError(f"query {self.query_id}: features shape {feats.shape} does not match {n} documents")
        if not np.all(np.isfinite(feats)):
            raise ValidationError(f"query {self.query_id}: non-finite features")
        pos = np.asarray(self.positions, dtype=np.int64)
        check_permutation(pos, self.query_id)
        object.__setattr__(self, "doc_ids", tuple(self.doc_ids))
        object.__setattr__(self, "features", _frozen(feats.copy()))
        object.__setattr__(self, "positions", _frozen(pos.copy()))
        if self.clicks is not None:
            clicks = np.asarray(self.clicks, dtype=bool)
            if clicks.shape != (n,):
                raise ValidationError(f"query {self.query_id}: clicks shape {clicks.shape}")
            object.__setattr__(self, "clicks", _frozen(clicks.copy()))
        if self.grades is not None:
            grades = np.asarray(self.grades, dtype=np.int64)
            if grades.shape != (n,) or grades.min(initial=0) < 0 or grades.max(initial=0) > 4:
                raise ValidationError(f"query {self.query_id}: invalid grades")
            object.__setattr__(self, "grades", _frozen(grades.copy()))

    def __len__(self):
        return len(self.doc_ids)

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def with_clicks(self, clicks) -> "Impression":
        return Impression(self.query_id, self.doc_ids, self.features, self.positions, clicks, self.grades)

    def with_features(self, features) -> "Impression":
        return Impression(self.query_id, self.doc_ids, features, self.positions, self.clicks, self.grades)


@dataclass(frozen=True, eq=False)
class QueryGroup:
    """All annotated documents of one query, in file order."""

    query_id: str
    doc_ids: tuple
    features: np.ndarray
    grades: np.ndarray

    def __len__(self):
        return len(self.doc_ids)


@dataclass(frozen=True)
class DatasetSplit:
    train: list
    validation: list
    test: list
    seed: int


def check_permutation(positions: np.ndarray, query_id) -> None:
    n = positions.shape[0]
    if positions.ndim != 1 or not np.array_equal(np.sort(positions), np.arange(1, n + 1)):
        raise ValidationError(f"query {query_id}: positions {positions.tolist()} are not a permutation of 1..{n}")


# --- SVMLight annotations ---------------------------------------------------


def _parse_header(line: str, lineno: int) -> int:
    try:
        d = int(line[3:].strip())
    except ValueError:
        raise ParseError(f"bad dimension header {line.strip()!r}", lineno) from None
    if d < 1:
        raise ParseError(f"dimension must be positive, got {d}", lineno)
    return d


def load_annotations(path, n_features: int | None = None) -> list[AnnotatedExample]:
    """Read an SVMLight-with-qid file into annotated examples.

    ``n_features`` overrides any ``#D=`` header. When neither is given the
    dimension is the largest feature index in the file.
    """
    rows = []
    declared = n_features
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.rstrip("\n")
            stripped = line.strip()
            if not stripped:
                continue
            if stripped.startswith("#"):
                if stripped.startswith("#D=") and n_features is None:
                    declared = _parse_header(stripped, lineno)
                continue
            body, _, comment = line.partition("#")
            tokens = body.split()
            if len(tokens) < 2:
                raise ParseError("expected '<grade> qid:<q> ...'", lineno)
            try:
                grade = int(tokens[0])
            except ValueError:
                raise ParseError(f"grade {tokens[0]!r} is not an integer", lineno) from None
            if not tokens[1].startswith("qid:") or len(tokens[1]) == 4:
                raise ParseError(f"expected qid:<q>, got {tokens[1]!r}", lineno)
            qid = tokens[1][4:]
            feats = {}
            for tok in tokens[2:]:
                idx, sep, val = tok.partition(":")
                try:
                    i, x = int(idx), float(val)
                except ValueError:
                    raise ParseError(f"bad feature token {tok!r}", lineno) from None
                if not sep or i < 1:
                    raise ParseError(f"bad feature token {tok!r}", lineno)
                if not math.isfinite(x):
                    raise ValidationError(f"line {lineno}: non-finite feature value {tok!r}")
                feats[i] = x
            doc_id = comment.strip() or f"{qid}:{lineno}"
            if grade not in GRADES:
                raise ValidationError(f"line {lineno}: grade {grade} outside 0..4")
            rows.append((lineno, qid, doc_id, feats, grade))

    max_index = max((max(f) for _, _, _, f, _ in rows if f), default=0)
    dim = declared if declared is not None else max(max_index, 1)
    if max_index > dim:
        raise ValidationError(f"declared dimension {dim} is smaller than max feature index {max_index}")

    seen = set()
    out = []
    for lineno, qid, doc_id, feats, grade in rows:
        if (qid, doc_id) in seen:
            raise ValidationError(f"line {lineno}: duplicate (query, doc) pair ({qid}, {doc_id})")
        seen.add((qid, doc_id))
        v = np.zeros(dim)
        for i, x in feats.items():
            v[i - 1] = x
        out.append(AnnotatedExample(qid, doc_id, v, grade))
    return out


def write_annotations(path, examples: Sequence[AnnotatedExample]) -> None:
    """Write examples in SVMLight-with-qid format, zeros omitted."""
    dim = examples[0].features.shape[0] if examples else 1
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(f"#D={dim}\n")
        for ex in examples:
            toks = [str(ex.grade), f"qid:{ex.query_id}"]
            toks += [f"{i + 1}:{float(x)!r}" for i, x in enumerate(ex.features) if x != 0.0]
            fh.write(" ".join(toks) + f" # {ex.doc_id}\n")


def group_annotations(examples: Iterable[AnnotatedExample]) -> list[QueryGroup]:
    """Group examples by query, keeping first-appearance and file order."""
    buckets: dict[str, list[AnnotatedExample]] = {}
    for ex in examples:
        buckets.setdefault(ex.query_id, []).append(ex)
    return [
        QueryGroup(
            qid,
            tuple(e.doc_id for e in exs),
            _frozen(np.stack([e.features for e in exs])),
            _frozen(np.array([e.grade for e in exs], dtype=np.int64)),
        )
        for qid, exs in buckets.items()
    ]


# --- click logs -------------------------------------------------------------


def load_click_log(path) -> list[Impression]:
    impressions = []
    dim = None
    current = None  # [qid, doc_ids, feats, positions, clicks]
    finished = set()

    def flush():
        if current is not None:
            qid, docs, feats, pos, clicks = current
            impressions.append(Impression(qid, tuple(docs), np.array(feats).reshape(len(docs), dim), pos, clicks))
            finished.add(qid)

    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.rstrip("\n")
            if not line.strip():
                continue
            if line.startswith("#"):
                if line.startswith("#D="):
                    if dim is not None:
                        raise ParseError("duplicate #D= header", lineno)
                    dim = _parse_header(line, lineno)
                continue
            if dim is None:
                raise ParseError("missing #D=<int> header before data", lineno)
            cols = line.split("\t")
            if len(cols) != 5:
                raise ParseError(f"expected 5 tab-separated columns, got {len(cols)}", lineno)
            qid, doc_id, pos_s, click_s, feat_s = cols
            try:
                pos = int(pos_s)
            except ValueError:
                raise ParseError(f"position {pos_s!r} is not an integer", lineno) from None
            if click_s not in ("0", "1"):
                raise ParseError(f"clicked must be 0 or 1, got {click_s!r}", lineno)
            try:
                feats = [float(x) for x in feat_s.split(",")]
            except ValueError:
                raise ParseError("bad feature list", lineno) from None
            if len(feats) != dim:
                raise ParseError(f"expected {dim} features, got {len(feats)}", lineno)
            if current is None or current[0] != qid:
                flush()
                if qid in finished:
                    raise ValidationError(f"line {lineno}: lines for query {qid} are not contiguous")
                current = [qid, [], [], [], []]
            current[1].append(doc_id)
            current[2].append(feats)
            current[3].append(pos)
            current[4].append(click_s == "1")
    flush()
    return impressions


def write_click_log(path, impressions: Sequence[Impression]) -> None:
    dim = impressions[0].dim if impressions else 1
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(f"#D={dim}\n")
        for imp in impressions:
            if imp.clicks is None:
                raise ValidationError(f"query {imp.query_id}: clicks not set")
            for j, doc in enumerate(imp.doc_ids):
                feats = ",".join(repr(float(x)) for x in imp.features[j])
                fh.write(f"{imp.query_id}\t{doc}\t{int(imp.positions[j])}\t{int(imp.clicks[j])}\t{feats}\n")


def write_grades(path, impressions: Sequence[Impression]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for imp in impressions:
            for doc, g in zip(imp.doc_ids, imp.grades):
                fh.write(f"{imp.query_id}\t{doc}\t{int(g)}\n")


def load_grades(path) -> dict[tuple[str, str], int]:
    out = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.rstrip("\n")
            if not line:
                continue
            cols = line.split("\t")
            if len(cols) != 3:
                raise ParseError("expected query_id, doc_id, grade", lineno)
            try:
                g = int(cols[2])
            except ValueError:
                raise ParseError(f"grade {cols[2]!r} is not an integer", lineno) from None
            if g not in GRADES:
                raise ValidationError(f"line {lineno}: grade {g} outside 0..4")
            out[(cols[0], cols[1])] = g
    return out


def attach_grades(impressions: Sequence[Impression], grades: dict) -> list[Impression]:
    try:
        return [
            Impression(i.query_id, i.doc_ids, i.features, i.positions, i.clicks,
                       [grades[(i.query_id, d)] for d in i.doc_ids])
            for i in impressions
        ]
    except KeyError as e:
        raise ValidationError(f"no grade for (query, doc) {e.args[0]}") from None


# --- scaling and splitting --------------------------------------------------


def scale_features_log1p(v) -> np.ndarray:
    """Map every entry ``x`` to ``sign(x) * ln(1 + |x|)``.

    Accepts a single vector or a stacked matrix; shape is preserved.
    """
    x = np.asarray(v, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise ValidationError("cannot scale non-finite features")
    return np.sign(x) * np.log1p(np.abs(x))


def scale_impressions(impressions: Sequence[Impression]) -> list[Impression]:
    return [i.with_features(scale_features_log1p(i.features)) for i in impressions]


def _query_of(record):
    return record.query_id


def split_by_query(records: Sequence, fractions=(0.8, 0.1, 0.1), seed: int = 0) -> DatasetSplit:
    """Partition records into train/validation/test by query id.

    Unique query ids (first-appearance order) are shuffled with a seeded
    generator and cut at the cumulative fractions. Records keep their input
    order inside each part.
    """
    fr = np.asarray(fractions, dtype=np.float64)
    if fr.shape != (3,) or np.any(fr < 0) or abs(fr.sum() - 1.0) > 1e-9:
        raise ValidationError(f"fractions must be three non-negative numbers summing to 1, got {fractions}")
    qids = list(dict.fromkeys(_query_of(r) for r in records))
    nonzero = int(np.count_nonzero(fr))
    if len(qids) < nonzero:
        raise ValidationError(f"{len(qids)} queries cannot fill {nonzero} non-empty split parts")

    bounds = np.rint(np.cumsum(fr) * len(qids)).astype(int)
    bounds[-1] = len(qids)
    counts = np.diff(np.concatenate([[0], bounds]))
    for i in range(3):
        # every non-empty fraction gets at least one query
        if fr[i] > 0 and counts[i] == 0:
            counts[int(np.argmax(counts))] -= 1
            counts[i] = 1
    order = np.random.default_rng(seed).permutation(len(qids))
    shuffled = [qids[i] for i in order]
    cuts = np.cumsum(counts)
    parts = [set(shuffled[:cuts[0]]), set(shuffled[cuts[0]:cuts[1]]), set(shuffled[cuts[1]:])]
    train, val, test = ([r for r in records if _query_of(r) in p] for p in parts)
    return DatasetSplit(train, val, test, seed)
