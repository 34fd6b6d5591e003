from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Dict, Optional, Sequence

import numpy as np
import pandas as pd

from fairdi.errors import FairDiError, ErrorCode
from fairdi.types import ColumnType

Encoder = Callable[["ResultColumn", Any], str]


class ResultColumn:
    """
    Column of a report table

    Args:
        name: column name
        type: column type
        text_encoder: Optionally override the function used to render values for markdown
    """

    def __init__(
        self,
        name: str,
        type: ColumnType,  # pylint: disable=redefined-builtin
        text_encoder: Optional[Encoder] = None,
    ):
        self.name = name
        self.type = type
        self.text_encoder = text_encoder or _TEXT_ENCODERS.get(type) or _unsupported

    def text_encode(self, val: Any) -> str:
        if val is None or (isinstance(val, float) and np.isnan(val)):
            return "-"
        return self.text_encoder(self, val)

    def __repr__(self) -> str:
        return f"ResultColumn({self.name} {self.type.name})"


@dataclass
class ResultSet:
    rows: Sequence[Sequence[Any]]
    columns: Sequence[ResultColumn]

    def __bool__(self) -> bool:
        return bool(self.columns)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame([list(r) for r in self.rows], columns=[c.name for c in self.columns])

    def write_csv(self, path: str | Path) -> None:
        try:
            self.to_frame().to_csv(path, index=False, float_format="%.17g")
        except OSError as e:
            raise FairDiError(f"Cannot write {path}: {e}", code=ErrorCode.IO_ERROR) from e

    def to_markdown(self) -> str:
        header = "| " + " | ".join(c.name for c in self.columns) + " |"
        rule = "|" + "|".join("---" for _ in self.columns) + "|"
        body = [
            "| " + " | ".join(c.text_encode(v) for c, v in zip(self.columns, row)) + " |"
            for row in self.rows
        ]
        return "\n".join([header, rule, *body])


def _text_encode_str(col: ResultColumn, val: Any) -> str:
    return str(val)


def _text_encode_int(col: ResultColumn, val: Any) -> str:
    return str(int(val))


def _text_encode_float(col: ResultColumn, val: Any) -> str:
    return f"{float(val):.4f}"


def _text_encode_scientific(col: ResultColumn, val: Any) -> str:
    return f"{float(val):.2e}"


def _text_encode_bool(col: ResultColumn, val: Any) -> str:
    return "yes" if val else "no"


def _unsupported(col: ResultColumn, val: Any) -> str:
    raise FairDiError(f"Unsupported column type: {col.type}", code=ErrorCode.INVALID_INPUT)


_TEXT_ENCODERS: Dict[ColumnType, Encoder] = {
    ColumnType.STRING: _text_encode_str,
    ColumnType.INT: _text_encode_int,
    ColumnType.FLOAT: _text_encode_float,
    ColumnType.SCIENTIFIC: _text_encode_scientific,
    ColumnType.BOOL: _text_encode_bool,
}


