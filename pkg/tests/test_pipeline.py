import csv
import json
from collections import defaultdict

import numpy as np
import pytest

from segkit import pipeline
from segkit.exceptions import AnalysisFailed, ConfigInvalid


def _two_sector_csv(path):
    rows = ["period,sector,female"]
    # sector A: 30 women, 10 men; sector B: 10 women, 50 men, in both years
    for t in ("2019", "2020"):
        rows += [f"{t},A,1"] * 30 + [f"{t},A,0"] * 10 + [f"{t},B,1"] * 10 + [f"{t},B,0"] * 50
    path.write_text("\n".join(rows) + "\n")


def _write(path, text):
    path.write_text(text)
    return path


SEG_ONLY = """
seed = 1
[input]
path = "people.csv"
schema = {period = "categorical", sector = "categorical", female = "boolean"}
[[analysis]]
name = "segregation"
"""


@pytest.fixture
def seg_config(tmp_path):
    _two_sector_csv(tmp_path / "people.csv")
    return _write(tmp_path / "seg.toml", SEG_ONLY)


def test_segregation_only_smoke(seg_config, tmp_path):
    rep = pipeline.run(pipeline.load_config(seg_config), out_dir=tmp_path / "out",
                       deterministic=True)
    stage = tmp_path / "out" / "segregation"
    assert sorted(p.name for p in stage.iterdir()) == ["results.json", "ssi.csv", "ssi_hist.svg"]
    assert len(list(stage.glob("*.csv"))) == 1 and len(list(stage.glob("*.svg"))) == 1
    assert rep.files["segregation"]
    doc = json.loads((stage / "results.json").read_text())
    assert doc["dominance"] == {"A": "fd", "B": "md"}
    # w = (0.75, 0.25), m = (1/6, 5/6): each sector contributes 7/24
    assert doc["ssi"]["fd"] == pytest.approx([7 / 24] * 2, abs=1e-15)
    assert doc["degree"] is None
    assert not list((tmp_path / "out").rglob("*.tmp"))


def test_ssi_table_cross_foots(seg_config, tmp_path):
    pipeline.run(pipeline.load_config(seg_config), out_dir=tmp_path / "o")
    parts, totals = defaultdict(float), {}
    with open(tmp_path / "o" / "segregation" / "ssi.csv") as fh:
        for r in csv.DictReader(fh):
            key = (r["time"], r["group"])
            if r["sector"] == "total":
                totals[key] = float(r["value"])
            else:
                parts[key] += float(r["value"])
    for key, tot in totals.items():
        assert abs(parts[key] - tot) < 1e-15


def test_validate_valid_file_gives_empty_report(seg_config):
    rep = pipeline.validate(seg_config)
    assert rep["problems"] == [] and rep["order"] == ["segregation"]


def test_absent_column_is_named(tmp_path):
    _two_sector_csv(tmp_path / "people.csv")
    cfg = _write(tmp_path / "c.toml", SEG_ONLY + """
[[analysis]]
name = "mincer"
formula = { response = "lnwage", terms = ["educ"] }
""")
    with pytest.raises(ConfigInvalid) as err:
        pipeline.load_config(cfg)
    text = "\n".join(err.value.problems)
    assert "'lnwage'" in text and "'educ'" in text


def test_unknown_analysis_lists_valid_names(seg_config, tmp_path):
    cfg = _write(tmp_path / "u.toml", SEG_ONLY + '[[analysis]]\nname = "tobit"\n')
    with pytest.raises(ConfigInvalid) as err:
        pipeline.validate(cfg)
    msg = "\n".join(err.value.problems)
    assert "'tobit'" in msg and all(n in msg for n in pipeline.ANALYSES)


def test_cyclic_dependency(seg_config, tmp_path):
    cfg = _write(tmp_path / "cyc.toml", SEG_ONLY.replace(
        '[[analysis]]\nname = "segregation"\n',
        '[[analysis]]\nname = "segregation"\nafter = ["shiftshare"]\n'
        '[[analysis]]\nname = "shiftshare"\nafter = ["segregation"]\n'))
    with pytest.raises(ConfigInvalid, match="problem") as err:
        pipeline.validate(cfg)
    assert any("cyclic" in p for p in err.value.problems)


def test_kbo_requires_mincer(seg_config, tmp_path):
    cfg = _write(tmp_path / "k.toml", SEG_ONLY + '[[analysis]]\nname = "kbo"\nby_period = false\n')
    with pytest.raises(ConfigInvalid) as err:
        pipeline.validate(cfg)
    assert any("requires a 'mincer'" in p for p in err.value.problems)


def test_unknown_option_and_top_level_key(seg_config, tmp_path):
    cfg = _write(tmp_path / "o.toml", "colour = 1\n" + SEG_ONLY + "smoothing = 3\n")
    with pytest.raises(ConfigInvalid) as err:
        pipeline.validate(cfg)
    assert len(err.value.problems) == 2


def test_env_var_overrides_output_dir(seg_config, tmp_path, monkeypatch):
    monkeypatch.setenv(pipeline.ENV_OUTPUT, str(tmp_path / "env"))
    cfg = pipeline.load_config(seg_config)
    assert pipeline.output_dir(cfg) == tmp_path / "env"
    assert pipeline.output_dir(cfg, tmp_path / "flag") == tmp_path / "flag"


def test_failed_stage_writes_error_report(tmp_path):
    rows = ["period,sector,female,fd,y"] + [f"2020,A,{i % 2},1,{i}" for i in range(40)]
    (tmp_path / "d.csv").write_text("\n".join(rows) + "\n")
    cfg = _write(tmp_path / "f.toml", """
[input]
path = "d.csv"
schema = {period = "categorical", sector = "categorical", female = "boolean", fd = "boolean", y = "numeric"}
[[analysis]]
name = "psm"
outcome = "y"
formula = { terms = ["female"] }
""")
    with pytest.raises(AnalysisFailed) as err:
        pipeline.run(pipeline.load_config(cfg), out_dir=tmp_path / "o")
    assert err.value.stage == "psm"
    doc = json.loads((tmp_path / "o" / "error.json").read_text())
    assert doc["stage"] == "psm" and doc["error"] == "AnalysisFailed"


SYNTH = """
seed = 7
[input.synthgen]
n_workers = 6000
periods = [2005, 2006]
[columns]
employed = "inlf"
outcome = "lnwage"
[[analysis]]
name = "mincer"
formula = { response = "lnwage", terms = ["educ", "exper", "exper^2", "incouple", "kids", "parttime"] }
[[analysis]]
name = "kbo"
[[analysis]]
name = "counterfactual"
values = false
grid = 32
[[analysis]]
name = "psm"
k = 3
formula = { terms = ["female", "educ", "exper", "parttime"] }
[[analysis]]
name = "shiftshare"
[[analysis]]
name = "participation_probit"
formula = { response = "inlf", terms = ["age", "age^2", "benefit"] }
"""


@pytest.fixture(scope="module")
def synth_runs(tmp_path_factory):
    d = tmp_path_factory.mktemp("syn")
    cfg = _write(d / "s.toml", SYNTH)
    for name in ("a", "b"):
        pipeline.run(pipeline.load_config(cfg), out_dir=d / name, deterministic=True)
    return d


def test_reruns_are_byte_identical(synth_runs):
    a = sorted(p.relative_to(synth_runs / "a") for p in (synth_runs / "a").rglob("*") if p.is_file())
    b = sorted(p.relative_to(synth_runs / "b") for p in (synth_runs / "b").rglob("*") if p.is_file())
    assert a == b and len(a) > 15
    for rel in a:
        assert (synth_runs / "a" / rel).read_bytes() == (synth_runs / "b" / rel).read_bytes(), rel


def test_dependency_order(synth_runs):
    m = json.loads((synth_runs / "a" / "manifest.json").read_text())
    order = m["order"]
    assert order.index("mincer") < order.index("kbo")
    assert order.index("mincer") < order.index("counterfactual")


def test_kbo_csv_cross_foots(synth_runs):
    for key in ("fd", "md", "all"):
        sums = defaultdict(float)
        totals = {}
        with open(synth_runs / "a" / "kbo" / f"kbo_{key}.csv") as fh:
            for r in csv.DictReader(fh):
                k = (r["period"], r["component"])
                if r["covariate"] == "total":
                    totals[k] = float(r["estimate"])
                else:
                    sums[k] += float(r["estimate"])
        periods = {p for p, _ in totals}
        assert periods == {"all", "2005", "2006"}
        for p in periods:
            parts = sum(totals[(p, c)] for c in ("endowment", "coefficient", "interaction"))
            assert abs(parts - totals[(p, "overall")]) < 1e-10
            for c in ("endowment", "coefficient", "interaction"):
                assert abs(sums[(p, c)] - totals[(p, c)]) < 1e-10


def test_psm_and_counterfactual_outputs(synth_runs):
    att = list(csv.DictReader(open(synth_runs / "a" / "psm" / "att.csv")))
    assert [r["estimator"] for r in att] == ["nn_match_att", "ipw_ate"]
    ks = list(csv.DictReader(open(synth_runs / "a" / "counterfactual" / "ks.csv")))
    assert len(ks) == 4 * 16
    diag = [float(r["statistic"]) for r in ks if r["row"] == r["col"]]
    assert diag == [0.0] * 16
    doc = json.loads((synth_runs / "a" / "counterfactual" / "results.json").read_text())
    assert set(doc["relation"]["predicted"]) == {"ml/fml-dom", "fml/ml-dom", "fml/fml-dom"}
    assert not (synth_runs / "a" / "counterfactual" / "values.csv").exists()


def test_json_has_no_nan(synth_runs):
    for p in (synth_runs / "a").rglob("*.json"):
        text = p.read_text()
        assert "NaN" not in text and "Infinity" not in text, p
        json.loads(text)


def test_stage_substreams_differ_by_name():
    from segkit.rng import substream
    a = substream(3, "stage:kbo").random(4)
    b = substream(3, "stage:psm").random(4)
    assert not np.array_equal(a, b)
    np.testing.assert_array_equal(a, substream(3, "stage:kbo").random(4))
