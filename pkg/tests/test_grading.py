import base64
import json
import sys
import time

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fundustrack.errors import (
    AdapterBadOutput,
    AdapterCrashed,
    AdapterTimeout,
    BadParams,
    MissingField,
    OutOfRange,
    UnknownMetric,
    ValidationError,
)
from fundustrack.grading import (
    AdapterSpec,
    AmdMetrics,
    GradingMetrics,
    METRIC_NAMES,
    decode_vessel_mask_response,
    flatten_metrics,
    run_adapter,
    severity_level,
    severity_map,
    stub_adapter,
    validate_metrics,
    worst_severity,
)
from fundustrack.imaging import FundusImage, mask_to_png

from conftest import solid_rgb

RANGES = {
    "retinopathy_grade": (0, 3),
    "edema_risk": (0, 2),
    "glaucoma_score": (0, 1),
    "drusen_score": (0, 2),
    "pigmentary_abnormalities": (0, 1),
    "late_amd": (0, 1),
    "geographic_atrophy": (0, 1),
    "central_geographic_atrophy": (0, 1),
    "amd_grade": (0, 5),
}

CORE = ("retinopathy_grade", "edema_risk", "glaucoma_score")


def base_doc():
    return {
        "retinopathy_grade": 1,
        "edema_risk": 1,
        "glaucoma_score": 0,
        "amd": {
            "drusen_score": 1,
            "pigmentary_abnormalities": 1,
            "late_amd": 0,
            "geographic_atrophy": 1,
            "central_geographic_atrophy": 1,
            "amd_grade": 2,
        },
    }


def out_of_range_mutants(doc=None):
    """Every graded field pushed one unit past each end of its range."""
    doc = doc or base_doc()
    for name, (lo, hi) in RANGES.items():
        for bad in (lo - 1, hi + 1):
            mutant = json.loads(json.dumps(doc))
            if name in CORE:
                mutant[name] = bad
            else:
                mutant["amd"][name] = bad
            yield name, bad, mutant


# ---------------------------------------------------------------------------
# validate_metrics
# ---------------------------------------------------------------------------

def test_validate_accepts_most_severe_grades():
    doc = base_doc()
    doc.update(retinopathy_grade=3, edema_risk=2, glaucoma_score=0)
    m = validate_metrics(doc)
    assert m.retinopathy_grade == 3
    assert severity_level("retinopathy_grade", m.retinopathy_grade) == "high"
    assert severity_level("edema_risk", m.edema_risk) == "high"


def test_validate_rejects_retinopathy_grade_four():
    doc = base_doc()
    doc["retinopathy_grade"] = 4
    with pytest.raises(OutOfRange) as err:
        validate_metrics(doc)
    assert err.value.field == "retinopathy_grade"
    assert err.value.value == 4


def test_validate_core_only_defaults_amd_to_zero():
    m = validate_metrics({"retinopathy_grade": 0, "edema_risk": 0, "glaucoma_score": 0})
    assert m.amd == AmdMetrics(defaulted=True)
    assert m.amd.defaulted


@pytest.mark.parametrize("missing", CORE)
def test_validate_missing_core_field(missing):
    doc = {k: 0 for k in CORE}
    del doc[missing]
    with pytest.raises(MissingField) as err:
        validate_metrics(doc)
    assert err.value.field == missing


def test_validate_mutation_suite_rejected():
    for name, bad, mutant in out_of_range_mutants():
        with pytest.raises(ValidationError):
            validate_metrics(mutant)


def test_validate_rejects_non_integers():
    for bad in (1.5, "2", True, None):
        doc = base_doc()
        doc["edema_risk"] = bad
        with pytest.raises(OutOfRange):
            validate_metrics(doc)


def test_validate_central_ga_implies_ga():
    doc = base_doc()
    doc["amd"]["geographic_atrophy"] = 0
    doc["amd"]["central_geographic_atrophy"] = 1
    with pytest.raises(OutOfRange) as err:
        validate_metrics(doc)
    assert err.value.field == "central_geographic_atrophy"


def test_validate_preserves_unknown_fields():
    doc = base_doc()
    doc["vendor_confidence"] = 0.87
    doc["amd"]["vendor_note"] = "x"
    m = validate_metrics(doc)
    out = m.to_dict()
    assert out["vendor_confidence"] == 0.87
    assert out["amd"]["vendor_note"] == "x"


def test_validate_round_trip():
    doc = base_doc()
    doc["produced_by"] = "model-a"
    doc["produced_at"] = "2026-01-02T03:04:05+00:00"
    doc["extra_score"] = [1, 2]
    m1 = validate_metrics(doc)
    m2 = validate_metrics(m1.to_dict())
    assert m1 == m2


# ---------------------------------------------------------------------------
# stub adapter
# ---------------------------------------------------------------------------

def test_stub_deterministic(fundus_fixture):
    assert stub_adapter(fundus_fixture) == stub_adapter(fundus_fixture)


def test_stub_marked_as_stub(fundus_fixture):
    assert stub_adapter(fundus_fixture).produced_by == "stub"


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_stub_always_validates(seed):
    rng = np.random.default_rng(seed)
    img = FundusImage.from_array(rng.integers(0, 256, (64, 64, 3), dtype=np.uint8))
    m = stub_adapter(img)
    # re-validating the serialized form must succeed and round-trip
    assert validate_metrics(m.to_dict()) == m
    if m.amd.central_geographic_atrophy:
        assert m.amd.geographic_atrophy


def test_stub_differs_across_images():
    docs = set()
    for i in range(16):
        img = solid_rgb(64, 64, (i * 16, 0, 0))
        docs.add(json.dumps(stub_adapter(img).to_dict(), sort_keys=True))
    assert len(docs) > 1


# ---------------------------------------------------------------------------
# severity levels
# ---------------------------------------------------------------------------

@pytest.mark.parametrize(
    "name,value,expected",
    [
        ("retinopathy_grade", 0, "none"),
        ("retinopathy_grade", 1, "low"),
        ("retinopathy_grade", 2, "moderate"),
        ("retinopathy_grade", 3, "high"),
        ("edema_risk", 0, "none"),
        ("edema_risk", 1, "moderate"),
        ("edema_risk", 2, "high"),
        ("glaucoma_score", 0, "none"),
        ("glaucoma_score", 1, "high"),
        ("avg_tortuosity", 1.05, "none"),
        ("avg_tortuosity", 1.10, "low"),
        ("avg_tortuosity", 1.25, "moderate"),
        ("avg_tortuosity", 1.45, "high"),
        ("max_tortuosity", 2.0, "high"),
        ("segments_used", 40, "none"),
        ("amd_grade", 5, "high"),
    ],
)
def test_severity_fixed_mapping(name, value, expected):
    assert severity_level(name, value) == expected


def test_severity_unknown_metric():
    with pytest.raises(UnknownMetric):
        severity_level("cholesterol", 1)


def test_severity_monotone_for_every_graded_metric():
    order = {"none": 0, "low": 1, "moderate": 2, "high": 3}
    for name, (lo, hi) in RANGES.items():
        levels = [order[severity_level(name, v)] for v in range(lo, hi + 1)]
        assert levels == sorted(levels), name
    tort = [order[severity_level("avg_tortuosity", v)] for v in np.arange(1.0, 2.0, 0.01)]
    assert tort == sorted(tort)


def test_worst_severity():
    assert worst_severity([]) == "none"
    assert worst_severity(["none", "low", "moderate"]) == "moderate"
    assert worst_severity(["high", "none"]) == "high"


def test_flatten_and_severity_map(fundus_fixture):
    m = stub_adapter(fundus_fixture)
    flat = flatten_metrics(m, {"avg_tortuosity": 1.2, "max_tortuosity": 1.5, "segments_used": 4})
    assert tuple(flat) == METRIC_NAMES
    sev = severity_map(flat)
    assert sev["avg_tortuosity"] == "low"
    assert sev["max_tortuosity"] == "high"


# ---------------------------------------------------------------------------
# run_adapter
# ---------------------------------------------------------------------------

def echo_adapter_spec(doc: dict, timeout=5.0) -> AdapterSpec:
    code = f"import json,sys; sys.stdout.write(json.dumps({doc!r}))"
    return AdapterSpec(id="echo", command=(sys.executable, "-c", code), timeout=timeout)


def test_run_adapter_passthrough(tmp_path):
    img = tmp_path / "scan.ppm"
    img.write_bytes(b"P6\n64 64\n255\n" + bytes(64 * 64 * 3))
    doc = base_doc()
    assert run_adapter(echo_adapter_spec(doc), str(img)) == doc


def test_run_adapter_substitutes_image_path(tmp_path):
    img = tmp_path / "scan.ppm"
    img.write_bytes(b"x")
    spec = AdapterSpec(
        id="pathecho",
        command=(sys.executable, "-c", "import json,sys; print(json.dumps({'p': sys.argv[1]}))", "{image}"),
        timeout=5,
    )
    assert run_adapter(spec, str(img)) == {"p": str(img)}


def test_run_adapter_timeout_enforced():
    spec = AdapterSpec(
        id="sleeper",
        command=(sys.executable, "-c", "import time; time.sleep(30)"),
        timeout=1,
    )
    start = time.monotonic()
    with pytest.raises(AdapterTimeout):
        run_adapter(spec, "ignored")
    assert time.monotonic() - start < 2.0  # timeout + enforced kill margin


def test_run_adapter_bad_output():
    spec = AdapterSpec(
        id="garbled", command=(sys.executable, "-c", "print('not json')"), timeout=5
    )
    with pytest.raises(AdapterBadOutput):
        run_adapter(spec, "ignored")


def test_run_adapter_crash():
    spec = AdapterSpec(
        id="crasher",
        command=(sys.executable, "-c", "import sys; sys.exit(3)"),
        timeout=5,
    )
    with pytest.raises(AdapterCrashed):
        run_adapter(spec, "ignored")


def test_adapter_spec_validation():
    with pytest.raises(BadParams):
        AdapterSpec(id="", command=("x",))
    with pytest.raises(BadParams):
        AdapterSpec(id="a", command=())
    with pytest.raises(BadParams):
        AdapterSpec(id="a", command=("x",), timeout=0.5)
    with pytest.raises(BadParams):
        AdapterSpec(id="a", command=("x",), timeout=601)


def test_vessel_mask_response_roundtrip():
    mask = np.zeros((16, 16), dtype=bool)
    mask[4:12, 7] = True
    doc = {
        "kind": "vessel_mask",
        "mask_png_base64": base64.b64encode(mask_to_png(mask)).decode(),
    }
    assert (decode_vessel_mask_response(doc) == mask).all()
    with pytest.raises(AdapterBadOutput):
        decode_vessel_mask_response({"kind": "grading"})
    with pytest.raises(AdapterBadOutput):
        decode_vessel_mask_response({"kind": "vessel_mask", "mask_png_base64": "!!"})
