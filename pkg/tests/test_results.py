from pathlib import Path

import pandas as pd
import pytest

from fairdi.errors import FairDiError, ErrorCode
from fairdi.results import ResultColumn, ResultSet
from fairdi.types import ColumnType


@pytest.fixture
def result_set() -> ResultSet:
    return ResultSet(
        rows=[["erm", 3, 0.123456, 1.5e-5, True], ["fairdi", 7, None, float("nan"), False]],
        columns=[
            ResultColumn("method", ColumnType.STRING),
            ResultColumn("epochs", ColumnType.INT),
            ResultColumn("auc", ColumnType.FLOAT),
            ResultColumn("psd", ColumnType.SCIENTIFIC),
            ResultColumn("pareto", ColumnType.BOOL),
        ],
    )


def test_to_markdown(result_set: ResultSet) -> None:
    assert result_set.to_markdown().splitlines() == [
        "| method | epochs | auc | psd | pareto |",
        "|---|---|---|---|---|",
        "| erm | 3 | 0.1235 | 1.50e-05 | yes |",
        "| fairdi | 7 | - | - | no |",
    ]


def test_custom_encoder() -> None:
    column = ResultColumn("gap", ColumnType.FLOAT, text_encoder=lambda col, v: f"{v:+.1f}")
    assert column.text_encode(0.25) == "+0.2"
    assert column.text_encode(None) == "-"
    assert repr(column) == "ResultColumn(gap FLOAT)"


def test_write_csv(result_set: ResultSet, tmp_path: Path) -> None:
    path = tmp_path / "table.csv"
    result_set.write_csv(path)
    frame = pd.read_csv(path)
    assert frame.columns.tolist() == ["method", "epochs", "auc", "psd", "pareto"]
    assert frame["auc"][0] == 0.123456
    assert frame["pareto"].tolist() == [True, False]

    with pytest.raises(FairDiError) as ctx:
        result_set.write_csv(tmp_path / "missing" / "table.csv")
    assert ctx.value.code == ErrorCode.IO_ERROR


def test_empty_result_set() -> None:
    assert not ResultSet([], [])
    assert ResultSet([], [ResultColumn("a", ColumnType.STRING)])
    assert ResultSet([], [ResultColumn("a", ColumnType.STRING)]).to_frame().empty
