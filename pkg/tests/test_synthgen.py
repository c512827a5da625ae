import json

import numpy as np
import pytest

from segkit.estimators import ols, probit
from segkit.exceptions import InvalidSpec
from segkit.frame import FormulaSpec, build_design, read_csv
from segkit.kbo import kbo_by_period
from segkit.matching import estimate_pscore, match_att
from segkit.segregation import UK_SIC_DOMINANCE, SectorPanel, classify_dominance, ssi
from segkit.synthgen import (
    CELLS,
    MINCER_SPEC,
    WAGE_COLUMNS,
    DgpSpec,
    calibrate_to_paper,
    cell_moments,
    generate,
    ground_truth,
    write_synth,
)


@pytest.fixture(scope="module")
def calibrated_data():
    spec = calibrate_to_paper(n_workers=200_000)
    return spec, *generate(spec)


@pytest.fixture(scope="module")
def iid_data():
    spec = calibrate_to_paper(n_workers=50_000, mode="iid", seed=3, heteroskedastic=0.5)
    frame, panel, truth = generate(spec)
    return spec, frame.filter(frame["inlf"].values == 1), panel, truth


def _small(**kw):
    spec = calibrate_to_paper(n_workers=3000, periods=(2005, 2020))
    for k, v in kw.items():
        setattr(spec, k, v)
    return spec


def test_same_seed_is_bit_identical():
    a = generate(_small())
    b = generate(_small())
    assert a[0].equals(b[0])
    np.testing.assert_array_equal(a[1].counts, b[1].counts)
    c = generate(_small(seed=1))
    assert not a[0].equals(c[0])


def test_zero_tau_gives_zero_att():
    truth = ground_truth(_small(tau=0.0))
    assert truth.att == 0.0 and truth.ate == 0.0


def test_att_equals_tau_when_returns_do_not_depend_on_dominance():
    truth = ground_truth(_small(tau=0.37))
    assert truth.att == pytest.approx(0.37, abs=1e-14)


def test_sector_shares_and_partition(calibrated_data):
    spec, frame, panel, truth = calibrated_data
    c = panel.counts.sum(axis=0)
    share = c[:, 0] / c.sum(axis=1)
    # published pooled female shares, all sectors within one point
    assert np.max(np.abs(share - np.asarray(spec.female_share))) < 0.01
    construction = panel.sectors.index("F")
    assert abs((1 - share[construction]) - 0.832) < 0.01
    assert abs(share[panel.sectors.index("Q")] - 0.804) < 0.01
    dom = classify_dominance(panel, "pooled")
    assert dict(zip(panel.sectors, map(bool, dom.pooled))) == UK_SIC_DOMINANCE
    assert truth.dominance == {s: "fd" if f else "md" for s, f in UK_SIC_DOMINANCE.items()}


def test_calibration_targets(calibrated_data):
    spec, frame, panel, truth = calibrated_data
    work = frame["inlf"].values == 1
    fem = frame["female"].values == 1
    lnw, pt, hours = frame["lnwage"].values, frame["parttime"].values, frame["hours"].values
    assert abs(lnw[work & fem].mean() - 2.41) < 0.01
    assert abs(lnw[work & ~fem].mean() - 2.59) < 0.01
    assert abs(pt[work & fem].mean() - 0.43) < 0.01
    assert abs(pt[work & ~fem].mean() - 0.12) < 0.01
    assert abs(hours[work & ~fem].mean() - 40.33) < 0.01
    assert abs(hours[work & fem].mean() - 30.89) < 0.01
    assert abs(frame["inlf"].values[fem].mean() - 0.70) < 0.01
    assert truth.mean_log_wage["fml"] == pytest.approx(2.41, abs=1e-12)


def test_panel_matches_frame_counts(calibrated_data):
    spec, frame, panel, truth = calibrated_data
    rebuilt = SectorPanel.from_frame(frame, employed="inlf")
    np.testing.assert_array_equal(rebuilt.counts, panel.counts)


def test_ssi_close_to_closed_form(calibrated_data):
    spec, frame, panel, truth = calibrated_data
    s = ssi(panel, classify_dominance(panel, "pooled"))
    np.testing.assert_allclose(s.values[:, 0], truth.ssi["fd"], atol=5e-3)
    np.testing.assert_allclose(s.values[:, 1], truth.ssi["md"], atol=5e-3)


def test_cell_moments_match_sample(calibrated_data):
    spec, frame, panel, truth = calibrated_data
    work = frame.filter(frame["inlf"].values == 1)
    for cell in CELLS:
        g, d = cell.split("/")
        m = (work["female"].values == (g == "fml")) & (work["fd"].values == (d == "fml-dom"))
        _, X = build_design(work.filter(m), MINCER_SPEC.without(()))
        mu, _ = cell_moments(spec, cell)
        assert X.column_names == WAGE_COLUMNS
        np.testing.assert_allclose(X.X.mean(axis=0), mu, rtol=0.02, atol=2e-3)


def test_ols_recovers_cell_coefficients(iid_data):
    spec, work, panel, truth = iid_data
    for cell in CELLS:
        g, d = cell.split("/")
        m = (work["female"].values == (g == "fml")) & (work["fd"].values == (d == "fml-dom"))
        y, X = build_design(work.filter(m), MINCER_SPEC)
        fit = ols(y, X)
        b = np.array([truth.beta[cell][n] for n in X.column_names])
        assert np.all(np.abs(fit.beta - b) < 4 * fit.se), cell


def test_kbo_converges_to_closed_form(iid_data):
    spec, work, panel, truth = iid_data
    for fd, key in ((1, "fml-dom"), (0, "ml-dom")):
        r = kbo_by_period(work, None, "female", MINCER_SPEC, group_a=0, within=("fd", fd))[0]
        t = truth.kbo[key]
        expect = np.array([t["endowment"], t["coefficient"], t["interaction"]])
        assert np.all(np.abs(r.components - expect) < 4 * r.se), key
        assert r.coefficient > 0


def test_matching_recovers_att(iid_data):
    spec, work, panel, truth = iid_data
    ps = estimate_pscore(work, "fd", FormulaSpec(None, (
        "female", "educ", "exper", "incouple", "kids", "nationality", "occupation", "parttime")))
    res = match_att(ps, work["lnwage"].values[ps.row_index], k=5)
    assert abs(res.att - truth.att) < 4 * res.se_naive


def test_participation_probit_recovers_coefficients():
    spec = calibrate_to_paper(n_workers=40_000, mode="iid", seed=9)
    frame, _, truth = generate(spec)
    for g, f in (("fml", 1), ("ml", 0)):
        sub = frame.filter(frame["female"].values == f)
        y, X = build_design(sub, FormulaSpec("inlf", ("age", "age^2", "benefit")))
        fit = probit(y, X)
        b = np.array([truth.participation_beta[g][n] for n in X.column_names])
        assert np.all(np.abs(fit.beta - b) < 4 * fit.se)


@pytest.mark.parametrize("field,value", [
    ("n_workers", 0),
    ("female_share", (0.5,) * 18 + (1.2,)),
    ("educ_sd", -1.0),
    ("mode", "sobol"),
    ("periods", ()),
])
def test_invalid_spec(field, value):
    spec = _small()
    setattr(spec, field, value)
    with pytest.raises(InvalidSpec):
        generate(spec)


def test_invalid_spec_unknown_coefficient():
    spec = _small()
    spec.wage_coef["ml/ml-dom"]["shoe_size"] = 1.0
    with pytest.raises(InvalidSpec, match="shoe_size"):
        spec.validate()


def test_spec_dict_roundtrip():
    spec = _small()
    again = DgpSpec.from_dict(json.loads(json.dumps(spec.to_dict())))
    assert generate(again)[0].equals(generate(spec)[0])
    with pytest.raises(InvalidSpec):
        DgpSpec.from_dict({**spec.to_dict(), "colour": "red"})


def test_write_synth_roundtrip(tmp_path):
    spec = _small()
    frame, panel, truth = generate(spec)
    out = write_synth(tmp_path / "syn", frame, panel, truth, spec)
    schema = json.loads((out / "schema.json").read_text())
    back = read_csv(out / "persons.csv", schema)
    assert back.equals(frame)
    assert SectorPanel.from_long_csv(out / "panel.csv").counts.sum() == panel.counts.sum()
    doc = json.loads((out / "truth.json").read_text())
    assert doc["att"] == truth.att and "spec" in doc
