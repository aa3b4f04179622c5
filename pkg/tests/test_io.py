import math

import numpy as np
import pytest

from ctxexposure import io as cio
from ctxexposure.errors import IncoherentRateTableError, SchemaError
from ctxexposure.grid import Projection

PROJ = Projection(31.8, -28.3)


def write(path, text):
    path.write_text(text.lstrip("\n"), encoding="utf-8")
    return path


def test_valid_file_has_no_findings(tmp_path):
    p = write(tmp_path / "h.csv", "homestead_id,lon,lat\nH1,31.8,-28.3\nH2,31.81,-28.29\n")
    assert cio.check_file(p, "homesteads") == []


def test_missing_column_is_reported_on_the_header_row(tmp_path):
    p = write(tmp_path / "h.csv", "homestead_id,lon\nH1,31.8\n")
    (f,) = cio.check_file(p, "homesteads")
    assert (f.row, f.column) == (1, "lat") and "missing" in f.message
    with pytest.raises(SchemaError) as info:
        cio.load_table(p, "homesteads")
    assert info.value.column == "lat"


def test_bad_timestamp_reports_its_row(tmp_path):
    p = write(tmp_path / "f.csv", """
person_id,timestamp,lon,lat
a,2020-01-01T00:00:00Z,31.8,-28.3
a,yesterday,31.8,-28.3
a,2020-01-01T00:20:00Z,31.8,-28.3
""")
    (f,) = cio.check_file(p, "fixes")
    assert (f.row, f.column) == (3, "timestamp")
    assert "yesterday" in str(f)


def test_prevalence_range_depends_on_units(tmp_path):
    p = write(tmp_path / "d.csv", "district_id,prevalence\nD1,26.4\nD2,0.2\n")
    (f,) = cio.check_file(p, "district_prevalence")
    assert (f.row, f.column) == (2, "prevalence")
    assert cio.check_file(p, "district_prevalence", percent=True) == []
    assert cio.read_district_prevalence(p, percent=True) == {"D1": 0.264, "D2": 0.002}


def test_findings_are_capped(tmp_path):
    rows = "".join(f"H{i},999,-28\n" for i in range(50))
    p = write(tmp_path / "h.csv", "homestead_id,lon,lat\n" + rows)
    assert len(cio.check_file(p, "homesteads", limit=5)) == 5


def test_missing_and_unreadable_files(tmp_path):
    (f,) = cio.check_file(tmp_path / "nope.csv", "tests")
    assert f.message == "file not found"
    with pytest.raises(SchemaError):
        cio.load_table(tmp_path / "nope.csv", "tests")
    with pytest.raises(ValueError):
        cio.schema("weather")


def test_test_date_and_result_go_together(tmp_path):
    p = write(tmp_path / "t.csv", """
person_id,sex,birth_date,entry_date,exit_date,test_date,result
a,F,1990-01-01,2015-01-01,2018-12-31,2016-07-01,
""")
    (f,) = cio.check_file(p, "tests")
    assert (f.row, f.column) == (2, "result")


def test_read_tests_groups_rows_per_person(tmp_path):
    p = write(tmp_path / "t.csv", """
person_id,sex,birth_date,entry_date,exit_date,test_date,result
b,M,1985-02-03,2016-01-01,2019-12-31,,
a,F,1990-01-01,2015-01-01,2018-12-31,2016-07-01,neg
a,F,1990-01-01,2015-01-01,2018-12-31,2018-03-01,pos
""")
    a, b = cio.read_tests(p)
    assert (a.person_id, a.entry_period, a.exit_period, a.tests) == ("a", 2015, 2018, ((2016, False), (2018, True)))
    assert b.category == "never_tested"


def test_inconsistent_demographics(tmp_path):
    p = write(tmp_path / "t.csv", """
person_id,sex,birth_date,entry_date,exit_date,test_date,result
a,F,1990-01-01,2015-01-01,2018-12-31,2016-07-01,neg
a,M,1990-01-01,2015-01-01,2018-12-31,2017-07-01,neg
""")
    with pytest.raises(SchemaError) as info:
        cio.read_tests(p)
    assert info.value.row == 3


def test_read_rates(tmp_path):
    body = "sex,age_group,period,prevalence,incidence\nF,15-49,2015,0.2,0.03\nF,15-49,2016,0.22,0.03\n"
    t = cio.read_rates(write(tmp_path / "r.csv", body))
    assert t.lookup("F", 30, 2016) == (0.22, 0.03)
    with pytest.raises(SchemaError):
        cio.read_rates(write(tmp_path / "r2.csv", body + "F,15-49,2016,0.3,0.03\n"))
    with pytest.raises(IncoherentRateTableError):
        cio.read_rates(write(tmp_path / "r3.csv",
                             "sex,age_group,period,prevalence,incidence\nF,0+,2015,0.9,0.3\nF,0+,2016,0.01,0.3\n"))


def test_read_fixes_sorts_and_projects(tmp_path):
    p = write(tmp_path / "f.csv", """
person_id,timestamp,lon,lat
b,2020-01-01T00:10:00Z,31.8,-28.3
a,2020-01-01T00:10:00+00:00,31.801,-28.3
a,2020-01-01T00:00:00Z,31.8,-28.3
""")
    a, b = cio.read_fixes(p, PROJ)
    assert a.person_id == "a" and a.t.tolist() == [1577836800.0, 1577837400.0]
    assert a.x[0] == 0.0 and a.x[1] == pytest.approx(6371000 * math.radians(0.001) * math.cos(math.radians(-28.3)))
    assert len(b) == 1


def test_duplicate_timestamp(tmp_path):
    p = write(tmp_path / "f.csv", """
person_id,timestamp,lon,lat
a,2020-01-01T00:00:00Z,31.8,-28.3
a,2020-01-01T00:00:00Z,31.9,-28.3
""")
    with pytest.raises(SchemaError) as info:
        cio.read_fixes(p, PROJ)
    assert info.value.column == "timestamp"


def test_duplicate_homestead(tmp_path):
    p = write(tmp_path / "h.csv", "homestead_id,lon,lat\nH1,31.8,-28.3\nH1,31.9,-28.3\n")
    with pytest.raises(SchemaError) as info:
        cio.read_homesteads(p, PROJ)
    assert info.value.row == 3


@pytest.mark.parametrize("v,s", [(None, ""), (float("nan"), ""), (0.0, "0.0"), (-0.0, "0.0"), (0.1, "0.1"),
                                 (1 / 3, "0.3333333333333333"), (True, "1"), (np.int64(7), "7"),
                                 (np.float32(0.5), "0.5"), ("x", "x")])
def test_field_formatting(v, s):
    assert cio.fmt(v) == s


def test_floats_round_trip_through_csv(tmp_path):
    vals = np.random.default_rng(0).random(100)
    p = cio.write_csv(tmp_path / "o.csv", ["v"], [[v] for v in vals])
    back = [float(line) for line in p.read_text().splitlines()[1:]]
    assert back == vals.tolist()
    assert not (tmp_path / "o.csv.part").exists()


def test_iso_timestamps():
    assert cio.iso_utc([0.0, 86400.0]).tolist() == ["1970-01-01T00:00:00Z", "1970-01-02T00:00:00Z"]
    assert cio.iso_utc([0.5])[0] == "1970-01-01T00:00:00.500000Z"
