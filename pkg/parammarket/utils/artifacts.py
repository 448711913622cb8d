"""
Artifact writers.

This module turns simulation logs into the CSV and JSON files emitted by the
command line. Files are written atomically with full float precision and
UTF-8, LF-terminated lines.
"""

import json
import logging
import math
import os
import tempfile
from pathlib import Path
from typing import Any, Callable, List, Union

import pandas as pd

from parammarket.models.log import MarketLog

logger = logging.getLogger(__name__)

FLOAT_FORMAT = "%.17g"

TRADE_COLUMNS = [
    "round",
    "buyer",
    "seller",
    "merge_weight",
    "gain_kind",
    "gain_value",
    "trade_beneficial",
    "buyer_valuation",
    "seller_valuation",
    "payment",
    "indicator",
]
CURVE_COLUMNS = ["round", "agent", "broker_loss", "own_loss", "est_error", "cum_payment"]
VIOLATION_COLUMNS = ["trial", "scenario", "value", "lower", "upper", "gain_a", "alpha", "beta"]
ALIGNMENT_COLUMNS = ["alpha", "loss_aligned", "loss_unaligned"]
RUN_COLUMNS = [
    "cell_id",
    "axis",
    "value",
    "seed",
    "agent",
    "market_loss",
    "out_of_market_loss",
    "relative_improvement",
]

PathLike = Union[str, Path]


def _atomic_write(path: PathLike, write: Callable[[str], None]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    handle, temporary = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    os.close(handle)
    try:
        write(temporary)
        os.replace(temporary, path)
    except BaseException:
        if os.path.exists(temporary):
            os.remove(temporary)
        raise
    logger.info(f"Wrote {path}")
    return path


def frame(rows: List[dict], columns: List[str]) -> pd.DataFrame:
    """DataFrame with a fixed column order, header only when there are no rows."""
    return pd.DataFrame(rows, columns=columns)


def write_csv(data: pd.DataFrame, path: PathLike) -> Path:
    """Write a frame without index, 17 significant digits, LF line endings."""
    return _atomic_write(
        path,
        lambda temporary: data.to_csv(
            temporary, index=False, float_format=FLOAT_FORMAT, lineterminator="\n", encoding="utf-8"
        ),
    )


def _json_safe(value: Any) -> Any:
    if isinstance(value, float) and not math.isfinite(value):
        return str(value)
    if isinstance(value, dict):
        return {str(k): _json_safe(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_json_safe(v) for v in value]
    return value


def write_json(payload: Any, path: PathLike) -> Path:
    """Write JSON with non-finite floats spelled as strings."""
    text = json.dumps(_json_safe(payload), indent=2, ensure_ascii=False, allow_nan=False) + "\n"

    def write(temporary: str) -> None:
        with open(temporary, "w", encoding="utf-8", newline="\n") as f:
            f.write(text)

    return _atomic_write(path, write)


def trades_frame(log: MarketLog) -> pd.DataFrame:
    """One row per TradeRecord in log order."""
    rows = [
        {
            "round": record.round,
            "buyer": record.buyer,
            "seller": record.seller,
            "merge_weight": record.merge_weight,
            "gain_kind": record.gain.kind.value,
            "gain_value": record.gain.value,
            "trade_beneficial": record.gain.trade_beneficial,
            "buyer_valuation": record.buyer_valuation,
            "seller_valuation": record.seller_valuation,
            "payment": record.payment,
            "indicator": record.indicator,
        }
        for record in log.trades
    ]
    return frame(rows, TRADE_COLUMNS)


def curves_frame(log: MarketLog) -> pd.DataFrame:
    """One row per (round, agent), round 0 first."""
    rows = [{column: getattr(point, column) for column in CURVE_COLUMNS} for point in log.curves]
    return frame(rows, CURVE_COLUMNS)
