import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from panelfactor.csvio import (
    format_float,
    read_covariates,
    read_long,
    read_matrix,
    read_panel,
    read_schedule,
    read_table,
    read_wide,
    write_table,
    write_wide,
)
from panelfactor.errors import DegeneratePanel, InputFormatError, ScheduleMismatch

WIDE = """# a comment line
unit,2001,2002,2003
a,1.5,,0.25
b,NA,2.0,-1
"""

LONG = """unit,time,value
a,2001,1.5
a,2003,0.25
b,2002,2.0
b,2003,-1
"""


def _write(tmp_path, name, text):
    path = tmp_path / name
    path.write_text(text)
    return path


class TestPanels:
    def test_wide_na_tokens_and_ids(self, tmp_path):
        panel = read_wide(_write(tmp_path, "w.csv", WIDE))
        assert panel.unit_ids == ("a", "b")
        assert panel.time_ids == ("2001", "2002", "2003")
        assert panel.mask.tolist() == [[1, 0, 1], [0, 1, 1]]
        assert panel.values[0, 0] == 1.5 and panel.values[1, 2] == -1.0

    def test_long_matches_wide(self, tmp_path):
        wide = read_wide(_write(tmp_path, "w.csv", WIDE))
        long = read_panel(_write(tmp_path, "l.csv", LONG), "long")
        assert long.time_ids == ("2001", "2003", "2002")
        order = [0, 2, 1]
        long = type(long).from_array(long.with_nan()[:, order], None, long.unit_ids, [long.time_ids[k] for k in order])
        assert np.array_equal(wide.mask, long.mask)
        assert np.array_equal(wide.values, long.values)
        assert wide.unit_ids == long.unit_ids and wide.time_ids == long.time_ids

    @given(st.lists(st.lists(st.floats(-1e6, 1e6, allow_nan=False) | st.just(math.nan), min_size=3, max_size=3), min_size=2, max_size=4))
    @settings(max_examples=40, deadline=None)
    def test_wide_round_trip_is_exact(self, tmp_path_factory, rows):
        y = np.array(rows)
        y[:, 0] = np.where(np.isnan(y[:, 0]), 1.0, y[:, 0])
        y[0] = np.where(np.isnan(y[0]), 2.0, y[0])
        path = tmp_path_factory.mktemp("rt") / "p.csv"
        write_wide(path, y, [f"u{k}" for k in range(len(y))], ["t0", "t1", "t2"], "# header")
        back = read_wide(path).with_nan()
        assert np.array_equal(np.isnan(back), np.isnan(y))
        assert np.array_equal(back[~np.isnan(y)], y[~np.isnan(y)])

    @pytest.mark.parametrize(
        "text",
        ["unit,1,2\na,1\n", "unit,1,1\na,1,2\nb,1,2\n", "unit,1,2\na,x,2\nb,1,2\n", "unit,1,2\na,inf,2\nb,1,2\n",
         "unit,1,2\na,1,2\na,1,2\n", "unit\n", "# only a comment\n"],
    )
    def test_malformed_wide(self, tmp_path, text):
        with pytest.raises(InputFormatError):
            read_wide(_write(tmp_path, "bad.csv", text))

    def test_malformed_long(self, tmp_path):
        with pytest.raises(InputFormatError):
            read_long(_write(tmp_path, "l.csv", "u,t,v\na,1,2\n"))
        with pytest.raises(InputFormatError):
            read_long(_write(tmp_path, "l.csv", "unit,time,value\na,1,2\na,1,3\n"))

    def test_empty_row_is_degenerate(self, tmp_path):
        with pytest.raises(DegeneratePanel):
            read_wide(_write(tmp_path, "w.csv", "unit,1,2\na,1,2\nb,,NA\n"))

    def test_missing_file_and_format(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            read_wide(tmp_path / "nope.csv")
        with pytest.raises(InputFormatError):
            read_panel(_write(tmp_path, "w.csv", WIDE), "json")


class TestSideFiles:
    def test_schedule_labels_positions_and_never(self, tmp_path):
        path = _write(tmp_path, "s.csv", "unit_id,adopt_time\na,2002\nb,NEVER\nc,0\n")
        adopt = read_schedule(path, ["a", "b", "c", "d"], ["2001", "2002", "2003"])
        assert adopt.tolist() == [1, 3, 0, 3]

    def test_label_takes_precedence_over_position(self, tmp_path):
        path = _write(tmp_path, "s.csv", "unit_id,adopt_time\na,1\n")
        assert read_schedule(path, ["a"], ["0", "5", "1"]).tolist() == [2]

    @pytest.mark.parametrize(
        "text",
        ["unit_id,adopt_time\nz,1\n", "unit_id,adopt_time\na,1\na,2\n", "unit_id,adopt_time\na,soon\n",
         "unit_id,adopt_time\na,9\n"],
    )
    def test_schedule_errors(self, tmp_path, text):
        with pytest.raises(ScheduleMismatch):
            read_schedule(_write(tmp_path, "s.csv", text), ["a", "b"], ["x", "y", "z"])

    def test_schedule_header(self, tmp_path):
        with pytest.raises(InputFormatError):
            read_schedule(_write(tmp_path, "s.csv", "unit,time\na,1\n"), ["a"], ["x"])

    def test_covariates_are_aligned(self, tmp_path):
        path = _write(tmp_path, "c.csv", "unit_id,s,x\nb,1,0.5\na,0,1.5\n")
        values, names = read_covariates(path, ["a", "b"])
        assert names == ["s", "x"]
        assert values.tolist() == [[0.0, 1.5], [1.0, 0.5]]
        with pytest.raises(InputFormatError):
            read_covariates(path, ["a", "c"])
        with pytest.raises(InputFormatError):
            read_covariates(_write(tmp_path, "c2.csv", "unit_id,s\na,\n"), ["a"])

    def test_matrix_alignment(self, tmp_path):
        path = _write(tmp_path, "p.csv", "unit,t2,t1\nb,0.1,0.2\na,0.3,0.4\n")
        got = read_matrix(path, ["a", "b"], ["t1", "t2"])
        assert got.tolist() == [[0.4, 0.3], [0.2, 0.1]]
        with pytest.raises(InputFormatError):
            read_matrix(path, ["a", "c"], ["t1", "t2"])

    def test_table_round_trip(self, tmp_path):
        path = tmp_path / "t.csv"
        write_table(path, ("a", "b", "c"), [(1, 0.1, True), ("x", float("nan"), False)], "# hdr")
        assert path.read_text().splitlines()[0] == "# hdr"
        cols, rows = read_table(path)
        assert cols == ["a", "b", "c"]
        assert rows == [["1", "0.1", "true"], ["x", "", "false"]]

    def test_format_float(self):
        assert format_float(float("nan")) == ""
        x = 0.1 + 0.2
        assert float(format_float(x)) == x
