import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ultr_lab.data import (
    AnnotatedExample,
    Impression,
    attach_grades,
    group_annotations,
    load_annotations,
    load_click_log,
    load_grades,
    scale_features_log1p,
    split_by_query,
    write_annotations,
    write_click_log,
    write_grades,
)
from ultr_lab.errors import ParseError, ValidationError


def write(tmp_path, name, text):
    p = tmp_path / name
    p.write_text(text, encoding="utf-8")
    return p


# --- annotations ------------------------------------------------------------


def test_annotation_line_maps_fields(tmp_path):
    (ex,) = load_annotations(write(tmp_path, "a.svm", "3 qid:1 1:0.5 2:-2.0 # d7\n"), n_features=3)
    assert ex.grade == 3 and ex.query_id == "1" and ex.doc_id == "d7"
    np.testing.assert_array_equal(ex.features, [0.5, -2.0, 0.0])


def test_annotation_without_features_defaults_to_zero(tmp_path):
    (ex,) = load_annotations(write(tmp_path, "a.svm", "#D=3\n0 qid:1 # d8\n"))
    np.testing.assert_array_equal(ex.features, [0.0, 0.0, 0.0])


def test_annotation_grade_out_of_range(tmp_path):
    with pytest.raises(ValidationError, match="grade 5"):
        load_annotations(write(tmp_path, "a.svm", "5 qid:1 1:1.0 # d9\n"))


def test_annotation_malformed_line_names_line_number(tmp_path):
    with pytest.raises(ParseError, match="line 3"):
        load_annotations(write(tmp_path, "a.svm", "1 qid:1 1:1 # a\n0 qid:1 # b\n2 1:0.3 # c\n"))


def test_annotation_declared_dimension_too_small(tmp_path):
    with pytest.raises(ValidationError, match="smaller"):
        load_annotations(write(tmp_path, "a.svm", "#D=2\n1 qid:1 3:1.0 # a\n"))


def test_annotation_duplicate_pair(tmp_path):
    with pytest.raises(ValidationError, match="duplicate"):
        load_annotations(write(tmp_path, "a.svm", "1 qid:1 1:1 # a\n0 qid:1 1:2 # a\n"))


def test_grouping_preserves_file_order(tmp_path):
    text = "1 qid:b 1:1 # x\n0 qid:a 1:2 # y\n2 qid:b 1:3 # z\n"
    groups = group_annotations(load_annotations(write(tmp_path, "a.svm", text)))
    assert [g.query_id for g in groups] == ["b", "a"]
    assert groups[0].doc_ids == ("x", "z")
    np.testing.assert_array_equal(groups[0].grades, [1, 2])


finite = st.floats(min_value=-1e6, max_value=1e6, allow_nan=False)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 4), st.lists(finite, min_size=4, max_size=4)), min_size=1, max_size=12))
def test_annotation_round_trip(tmp_path_factory, rows):
    examples = [AnnotatedExample(f"q{i % 3}", f"d{i}", np.array(f), g) for i, (g, f) in enumerate(rows)]
    path = tmp_path_factory.mktemp("rt") / "a.svm"
    write_annotations(path, examples)
    back = load_annotations(path)
    assert len(back) == len(examples)
    for a, b in zip(examples, back):
        assert (a.query_id, a.doc_id, a.grade) == (b.query_id, b.doc_id, b.grade)
        np.testing.assert_array_equal(a.features, b.features)


# --- click logs -------------------------------------------------------------


def test_click_log_two_lines(tmp_path):
    p = write(tmp_path, "c.tsv", "#D=2\nq1\ta\t1\t1\t0.1,0.2\nq1\tb\t2\t0\t0.3,0.4\n")
    (imp,) = load_click_log(p)
    assert len(imp) == 2 and imp.doc_ids == ("a", "b")
    np.testing.assert_array_equal(imp.clicks, [True, False])
    np.testing.assert_array_equal(imp.positions, [1, 2])


def test_click_log_non_permutation_names_query(tmp_path):
    p = write(tmp_path, "c.tsv", "#D=1\nq9\ta\t1\t1\t0\nq9\tb\t3\t0\t0\n")
    with pytest.raises(ValidationError, match="q9"):
        load_click_log(p)


def test_click_log_bad_clicked_value(tmp_path):
    p = write(tmp_path, "c.tsv", "#D=1\nq1\ta\t1\t2\t0\n")
    with pytest.raises(ParseError, match="line 2"):
        load_click_log(p)


def test_click_log_empty_file(tmp_path):
    assert load_click_log(write(tmp_path, "c.tsv", "")) == []


def test_click_log_requires_header(tmp_path):
    with pytest.raises(ParseError, match="#D="):
        load_click_log(write(tmp_path, "c.tsv", "q1\ta\t1\t1\t0\n"))


def test_click_log_non_contiguous_query(tmp_path):
    p = write(tmp_path, "c.tsv", "#D=1\nq1\ta\t1\t1\t0\nq2\tb\t1\t0\t0\nq1\tc\t2\t0\t0\n")
    with pytest.raises(ValidationError, match="contiguous"):
        load_click_log(p)


def test_click_log_and_grades_round_trip(tmp_path):
    rng = np.random.default_rng(3)
    imps = [Impression(f"q{i}", ("x", "y", "z"), rng.normal(size=(3, 4)), rng.permutation(3) + 1,
                       rng.random(3) < 0.5, rng.integers(0, 5, 3)) for i in range(5)]
    write_click_log(tmp_path / "c.tsv", imps)
    write_grades(tmp_path / "g.tsv", imps)
    back = attach_grades(load_click_log(tmp_path / "c.tsv"), load_grades(tmp_path / "g.tsv"))
    for a, b in zip(imps, back):
        assert a.doc_ids == b.doc_ids
        for field in ("features", "positions", "clicks", "grades"):
            np.testing.assert_array_equal(getattr(a, field), getattr(b, field))


def test_impression_rejects_bad_positions():
    with pytest.raises(ValidationError):
        Impression("q", ("a", "b"), np.zeros((2, 1)), [1, 1])


def test_impression_arrays_are_read_only():
    imp = Impression("q", ("a", "b"), np.zeros((2, 1)), [2, 1], [True, False])
    with pytest.raises(ValueError):
        imp.features[0, 0] = 1.0


# --- scaling ----------------------------------------------------------------


def test_scale_known_values():
    e1 = math.e - 1
    np.testing.assert_allclose(scale_features_log1p([0.0, e1, -e1]), [0.0, 1.0, -1.0], atol=1e-12)


def test_scale_rejects_non_finite():
    with pytest.raises(ValidationError):
        scale_features_log1p([1.0, np.inf])


@given(st.floats(min_value=-1e300, max_value=1e300, allow_nan=False), st.floats(min_value=1e-6, max_value=1e6))
def test_scale_odd_increasing_contracting(x, step):
    f = lambda v: float(scale_features_log1p([v])[0])
    assert f(-x) == -f(x)
    assert abs(f(x)) <= abs(x)
    if abs(x) < 1e12:
        assert f(x + step) > f(x)


# --- splitting --------------------------------------------------------------


class Rec:
    def __init__(self, q):
        self.query_id = q


def qset(part):
    return {r.query_id for r in part}


def test_split_exact_fractions():
    recs = [Rec(f"q{i}") for i in range(10)]
    s = split_by_query(recs, (0.8, 0.1, 0.1), seed=1)
    assert (len(s.train), len(s.validation), len(s.test)) == (8, 1, 1)


def test_split_deterministic():
    recs = [Rec(f"q{i}") for i in range(50)]
    a, b = split_by_query(recs, seed=5), split_by_query(recs, seed=5)
    assert [qset(p) for p in (a.train, a.validation, a.test)] == [qset(p) for p in (b.train, b.validation, b.test)]


def test_split_degenerate():
    recs = [Rec(f"q{i}") for i in range(7)]
    s = split_by_query(recs, (1.0, 0.0, 0.0), seed=0)
    assert len(s.train) == 7 and s.validation == [] and s.test == []


def test_split_too_few_queries():
    with pytest.raises(ValidationError):
        split_by_query([Rec("a"), Rec("b")], (0.8, 0.1, 0.1))


@settings(max_examples=50, deadline=None)
@given(st.lists(st.integers(0, 30), min_size=3, max_size=200), st.integers(0, 2**32 - 1),
       st.sampled_from([(0.8, 0.1, 0.1), (0.5, 0.25, 0.25), (0.6, 0.4, 0.0)]))
def test_split_is_query_partition(qids, seed, fractions):
    recs = [Rec(str(q)) for q in qids]
    if len(set(qids)) < sum(f > 0 for f in fractions):
        return
    s = split_by_query(recs, fractions, seed)
    parts = [qset(p) for p in (s.train, s.validation, s.test)]
    assert set.union(*parts) == set(map(str, qids))
    assert not (parts[0] & parts[1] or parts[0] & parts[2] or parts[1] & parts[2])
    assert len(s.train) + len(s.validation) + len(s.test) == len(recs)
