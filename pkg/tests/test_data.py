import numpy as np
import pytest

from protoforest.data import Dataset, ingest_csv
from protoforest.errors import DataError


def write(path, text):
    path.write_text(text)
    return path


def test_categorical_column_encoded_by_first_appearance(tmp_path):
    f = write(tmp_path / "c.csv", "level,y\nlow,a\nhigh,b\nlow,a\n")
    data = ingest_csv(f, "y")
    assert data.features[:, 0].tolist() == [0, 1, 0]
    assert data.labels.tolist() == [0, 1, 0]
    assert data.class_names == ["a", "b"]


def test_label_ids_follow_first_appearance_and_rows_keep_order(tmp_path):
    f = write(tmp_path / "c.csv", "x,y\n1.5,z\n2.5,a\n3.5,z\n4.5,m\n")
    data = ingest_csv(f, "y")
    assert data.class_names == ["z", "a", "m"]
    assert data.labels.tolist() == [0, 1, 0, 2]
    assert data.features[:, 0].tolist() == [1.5, 2.5, 3.5, 4.5]


def test_wdbc_shape_matches_raw_file(wdbc_csv, wdbc):
    lines = wdbc_csv.read_text().splitlines()
    header = lines[0].split(",")
    assert (wdbc.n, wdbc.p, wdbc.q) == (len(lines) - 1, len(header) - 1, 2)
    assert (wdbc.n, wdbc.p) == (569, 30)
    assert sorted(wdbc.class_names) == ["B", "M"]


@pytest.mark.parametrize(
    "name, text, label, reason",
    [
        ("single", "x,y\n1,a\n2,a\n3,a\n", "y", "single-class"),
        ("nolabel", "x,y\n1,a\n2,b\n", "target", "missing-label"),
        ("blank", "x,y\n1,a\n\n2,b\n", "y", "empty-rows"),
        ("ragged", "x,y\n1,a\n2\n", "y", "empty-rows"),
        ("emptycell", "x,y\n1,a\n,b\n", "y", "empty-rows"),
        ("inf", "x,y\n1,a\ninf,b\n", "y", "non-finite"),
        ("nan", "x,y\nnan,a\n2,b\n", "y", "non-finite"),
    ],
)
def test_rejections_carry_distinct_reasons(tmp_path, name, text, label, reason):
    f = write(tmp_path / f"{name}.csv", text)
    with pytest.raises(DataError) as err:
        ingest_csv(f, label)
    assert err.value.reason == reason


def test_single_class_message(tmp_path):
    f = write(tmp_path / "s.csv", "x,y\n1,a\n2,a\n")
    with pytest.raises(DataError, match="single-class"):
        ingest_csv(f, "y")


def test_missing_file(tmp_path):
    with pytest.raises(DataError) as err:
        ingest_csv(tmp_path / "nope.csv", "y")
    assert err.value.reason == "missing-file"


def test_dataset_invariants():
    with pytest.raises(DataError):
        Dataset(np.zeros((1, 2)), [0])
    with pytest.raises(DataError):
        Dataset(np.zeros((3, 2)), [0, 0, 0])
    with pytest.raises(DataError):
        Dataset(np.array([[0.0], [np.nan]]), [0, 1])
    with pytest.raises(DataError):
        Dataset(np.zeros((3, 1)), [0, 2, 2], class_names=["a", "b", "c"])
    d = Dataset(np.arange(6.0).reshape(3, 2), [0, 1, 1])
    assert (d.n, d.p, d.q) == (3, 2, 2)
    assert d.feature_names == ["x0", "x1"]


def test_take_keeps_class_list():
    d = Dataset(np.arange(8.0).reshape(4, 2), [0, 1, 2, 2], class_names=["a", "b", "c"])
    sub = d.take([2, 3])
    assert sub.q == 3 and sub.labels.tolist() == [2, 2]
