import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fundustrack.errors import AdapterCrashed, BadParams
from fundustrack.evaluation import (
    ConfusionMatrix,
    EvaluationReport,
    LabelRow,
    LabelsTable,
    evaluate_labels,
)

CSV = "filename,retinopathy_grade,edema_risk\na.png,0,0\nb.png,3,2\nc.png,1,1\n"


def table_of(labels):
    return LabelsTable(
        rows=tuple(LabelRow(f"img{i:03}.png", r, e) for i, (r, e) in enumerate(labels))
    )


def echo_predictor(table):
    lookup = {row.filename: (row.retinopathy_grade, row.edema_risk) for row in table.rows}
    return lambda name: lookup[name]


# ---------------------------------------------------------------------------
# labels parsing
# ---------------------------------------------------------------------------

def test_labels_from_csv():
    table = LabelsTable.from_csv(CSV)
    assert len(table.rows) == 3
    assert table.rows[1] == LabelRow("b.png", 3, 2)


@pytest.mark.parametrize(
    "text",
    [
        "",
        "file,retino,edema\na.png,0,0\n",
        "filename,retinopathy_grade,edema_risk\n",
        "filename,retinopathy_grade,edema_risk\na.png,0\n",
        "filename,retinopathy_grade,edema_risk\na.png,x,0\n",
        "filename,retinopathy_grade,edema_risk\na.png,4,0\n",
        "filename,retinopathy_grade,edema_risk\na.png,0,3\n",
        "filename,retinopathy_grade,edema_risk\na.png,0,0\na.png,1,1\n",
    ],
)
def test_labels_csv_rejects_malformed(text):
    with pytest.raises(BadParams):
        LabelsTable.from_csv(text)


# ---------------------------------------------------------------------------
# confusion matrix
# ---------------------------------------------------------------------------

def test_confusion_matrix_accuracy_is_trace_over_total():
    m = ConfusionMatrix(3)
    for true, pred in [(0, 0), (1, 1), (2, 0), (2, 2), (1, 0)]:
        m.add(true, pred)
    assert m.total == 5
    assert m.accuracy == pytest.approx(3 / 5, abs=1e-15)
    assert m.counts[2, 0] == 1


def test_confusion_matrix_bounds():
    m = ConfusionMatrix(3)
    with pytest.raises(BadParams):
        m.add(3, 0)
    with pytest.raises(BadParams):
        m.add(0, -1)


# ---------------------------------------------------------------------------
# evaluation harness
# ---------------------------------------------------------------------------

def test_echo_oracle_gives_identity():
    table = table_of([(0, 0), (1, 2), (3, 1), (2, 2), (0, 1)])
    report = evaluate_labels(table, echo_predictor(table))
    assert report.retinopathy.accuracy == 1.0
    assert report.edema.accuracy == 1.0
    assert (report.retinopathy.counts == np.diag(np.diag(report.retinopathy.counts))).all()
    assert report.failures == ()


def test_constant_predictor_accuracy_equals_prevalence():
    labels = [(0, 0)] * 4 + [(1, 1)] * 3 + [(2, 2)] * 2 + [(3, 0)] * 1
    table = table_of(labels)
    report = evaluate_labels(table, lambda name: (0, 0))
    assert report.retinopathy.accuracy == pytest.approx(4 / 10, abs=1e-12)
    assert report.edema.accuracy == pytest.approx(5 / 10, abs=1e-12)


def test_row_sums_match_label_counts():
    labels = [(0, 0), (0, 1), (1, 2), (3, 2), (3, 0), (3, 1)]
    table = table_of(labels)
    report = evaluate_labels(table, lambda name: (2, 1))
    row_sums = report.retinopathy.counts.sum(axis=1).tolist()
    assert row_sums == [2, 1, 0, 3]


def test_failures_excluded_from_matrices():
    table = table_of([(0, 0), (1, 1), (2, 2)])
    echo = echo_predictor(table)

    def flaky(name):
        if name == "img001.png":
            raise AdapterCrashed("model fell over")
        return echo(name)

    report = evaluate_labels(table, flaky)
    assert report.evaluated == 2
    assert report.failures == (("img001.png", "model fell over"),)
    assert report.retinopathy.total == 2


def test_report_serializes():
    table = table_of([(0, 0), (1, 1)])
    doc = evaluate_labels(table, echo_predictor(table)).to_dict()
    assert doc["evaluated"] == 2
    assert doc["retinopathy"]["accuracy"] == 1.0
    assert len(doc["edema"]["counts"]) == 3


@settings(max_examples=60, deadline=None)
@given(
    st.lists(
        st.tuples(st.integers(0, 3), st.integers(0, 2)), min_size=1, max_size=40
    )
)
def test_echo_identity_property(labels):
    table = table_of(labels)
    report = evaluate_labels(table, echo_predictor(table))
    assert report.retinopathy.accuracy == 1.0
    assert report.edema.accuracy == 1.0
    off_diag = report.retinopathy.counts - np.diag(np.diag(report.retinopathy.counts))
    assert not off_diag.any()


@settings(max_examples=60, deadline=None)
@given(
    st.lists(
        st.tuples(st.integers(0, 3), st.integers(0, 2)), min_size=1, max_size=40
    ),
    st.integers(0, 3),
)
def test_constant_predictor_prevalence_property(labels, const):
    table = table_of(labels)
    report = evaluate_labels(table, lambda name: (const, min(const, 2)))
    prevalence_r = sum(1 for r, _ in labels if r == const) / len(labels)
    prevalence_e = sum(1 for _, e in labels if e == min(const, 2)) / len(labels)
    assert abs(report.retinopathy.accuracy - prevalence_r) < 1e-12
    assert abs(report.edema.accuracy - prevalence_e) < 1e-12
