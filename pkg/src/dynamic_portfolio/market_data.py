#!/usr/bin/env python3

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Union

import numpy as np
import pandas as pd

logger = logging.getLogger(__name__)

DATE_COLUMN = "Date"
DATE_FORMAT = "%Y-%m-%d"


######################
# --- DATA TYPES --- #
######################


@dataclass(frozen=True)
class PriceTable:
    """
    Dated grid of adjusted close prices, one column per ticker.

    Fields:
        close (pd.DataFrame): Close prices indexed by ascending dates.
        high (pd.DataFrame, optional): High prices, same shape as ``close``.
        low (pd.DataFrame, optional): Low prices, same shape as ``close``.
    """
    close: pd.DataFrame
    high: Optional[pd.DataFrame] = None
    low: Optional[pd.DataFrame] = None

    @property
    def dates(self) -> pd.DatetimeIndex:
        return self.close.index

    @property
    def tickers(self) -> list[str]:
        return list(self.close.columns)

    @property
    def has_range(self) -> bool:
        """True when both high and low prices are present."""
        return self.high is not None and self.low is not None

    def __len__(self) -> int:
        return len(self.close)

    def frames(self) -> list[pd.DataFrame]:
        """All price frames present, close first."""
        return [f for f in (self.close, self.high, self.low) if f is not None]

    def rows(self, start: int, stop: Optional[int] = None) -> "PriceTable":
        """Positional row slice ``[start, stop)``."""
        sl = slice(start, stop)
        return PriceTable(
            close=self.close.iloc[sl],
            high=None if self.high is None else self.high.iloc[sl],
            low=None if self.low is None else self.low.iloc[sl],
        )

    def select(self, tickers: list[str]) -> "PriceTable":
        """Restrict the table to ``tickers`` in the given order."""
        return PriceTable(
            close=self.close[list(tickers)],
            high=None if self.high is None else self.high[list(tickers)],
            low=None if self.low is None else self.low[list(tickers)],
        )

    def latest_close(self) -> np.ndarray:
        return self.close.iloc[-1].to_numpy(dtype=float)

    def validate(self) -> None:
        """
        Check the PriceTable invariants.

        Raises:
            ValueError: On non-increasing dates, mismatched shapes, or prices
                that are not strictly positive and finite.
        """
        if not self.close.index.is_monotonic_increasing or self.close.index.has_duplicates:
            raise ValueError("Dates must be strictly increasing.")
        for frame in self.frames():
            if frame.shape != self.close.shape or list(frame.columns) != self.tickers:
                raise ValueError("High/low prices must match the close prices in shape and columns.")
            values = frame.to_numpy(dtype=float)
            if not np.all(np.isfinite(values)) or np.any(values <= 0.0):
                raise ValueError("non-positive price")


@dataclass(frozen=True)
class ReturnMatrix:
    """
    Per-period simple returns. Row ``t`` covers the source price rows
    ``(t, t+1)`` and is labelled with the later date.
    """
    returns: pd.DataFrame

    @property
    def dates(self) -> pd.DatetimeIndex:
        return self.returns.index

    @property
    def tickers(self) -> list[str]:
        return list(self.returns.columns)

    @property
    def values(self) -> np.ndarray:
        return self.returns.to_numpy(dtype=float)

    @property
    def n_assets(self) -> int:
        return self.returns.shape[1]

    def __len__(self) -> int:
        return len(self.returns)

    def rows(self, start: int, stop: Optional[int] = None) -> "ReturnMatrix":
        return ReturnMatrix(self.returns.iloc[start:stop])

    def select(self, tickers: list[str]) -> "ReturnMatrix":
        return ReturnMatrix(self.returns[list(tickers)])

    @classmethod
    def from_array(cls, values, tickers: Optional[list[str]] = None,
                   start: str = "2015-01-02") -> "ReturnMatrix":
        """
        Wrap a raw ``[T × N]`` array, labelling rows with business days.

        Example:
            >>> ReturnMatrix.from_array([[0.01, 0.02], [0.0, -0.01]]).tickers
            ['A0', 'A1']
        """
        values = np.asarray(values, dtype=float)
        if values.ndim == 1:
            values = values[:, None]
        tickers = tickers or [f"A{i}" for i in range(values.shape[1])]
        dates = pd.bdate_range(start=start, periods=values.shape[0])
        return cls(pd.DataFrame(values, index=dates, columns=tickers))


@dataclass(frozen=True)
class SplitSpec:
    """
    Chronological train/validation/test fractions; the test segment takes
    the remainder.
    """
    train_frac: float = 0.7
    val_frac: float = 0.15

    def __post_init__(self):
        for name in ("train_frac", "val_frac"):
            value = getattr(self, name)
            if not 0.0 < value < 1.0:
                raise ValueError(f"{name} must be in (0, 1), got {value}.")
        if self.train_frac + self.val_frac >= 1.0:
            raise ValueError("no test segment")

    @property
    def test_frac(self) -> float:
        return 1.0 - self.train_frac - self.val_frac


class Standardizer:
    """
    Column-wise z-scoring with statistics frozen at fit time.

    Fit on the training segment only; zero-variance columns are scaled by one.
    The scale is the sample standard deviation (``ddof=1``), matching the
    pandas rolling statistics, so it differs from scikit-learn's
    ``StandardScaler`` (``ddof=0``) by a factor of ``sqrt(n / (n - 1))``.
    A single fitted row scales every column by one.

    Example:
        >>> s = Standardizer().fit(np.array([[1.0], [3.0]]))
        >>> s.transform(np.array([[2.0]]))
        array([[0.]])
    """

    def __init__(self, mean: Optional[np.ndarray] = None, std: Optional[np.ndarray] = None):
        self.mean = None if mean is None else np.asarray(mean, dtype=float)
        self.std = None if std is None else np.asarray(std, dtype=float)

    @property
    def is_fitted(self) -> bool:
        return self.mean is not None and self.std is not None

    def fit(self, values: np.ndarray) -> "Standardizer":
        values = np.asarray(values, dtype=float)
        self.mean = values.mean(axis=0)
        std = values.std(axis=0, ddof=1) if len(values) > 1 else np.zeros(values.shape[1])
        self.std = np.where(std > 0.0, std, 1.0)
        return self

    def transform(self, values: np.ndarray) -> np.ndarray:
        if not self.is_fitted:
            raise ValueError("Standardizer must be fitted before transform.")
        return (np.asarray(values, dtype=float) - self.mean) / self.std


######################
# --- OPERATIONS --- #
######################

def _companion_path(path: Path, suffix: str) -> Path:
    return path.with_name(f"{path.stem}_{suffix}{path.suffix}")


def _read_price_csv(path: Path, tickers: list[str]) -> pd.DataFrame:
    frame = pd.read_csv(path, dtype=str, keep_default_na=False)
    if DATE_COLUMN not in frame.columns:
        raise ValueError(f"{path} has no '{DATE_COLUMN}' column.")
    missing = [t for t in tickers if t not in frame.columns]
    if missing:
        raise ValueError(f"{path} is missing ticker column(s): {', '.join(missing)}")

    try:
        dates = pd.to_datetime(frame[DATE_COLUMN].str.strip(), format=DATE_FORMAT)
    except (ValueError, TypeError) as err:
        raise ValueError(f"Unparseable date in {path}: {err}") from err

    columns = {}
    for ticker in tickers:
        cells = frame[ticker].str.strip().replace("", np.nan)
        try:
            columns[ticker] = pd.to_numeric(cells, errors="raise")
        except (ValueError, TypeError) as err:
            raise ValueError(f"Unparseable number in column {ticker} of {path}: {err}") from err

    prices = pd.DataFrame(columns, index=pd.DatetimeIndex(dates, name=DATE_COLUMN)).astype(float)
    if prices.index.has_duplicates:
        dupes = prices.index[prices.index.duplicated()].strftime(DATE_FORMAT)
        raise ValueError(f"Duplicate date rows in {path}: {', '.join(dupes)}")
    return prices.sort_index()


def load_prices(path: Union[str, Path], tickers: list[str]) -> PriceTable:
    """
    Load adjusted close prices (and optional high/low companions) from CSV.

    The file's first column is ``Date`` (``YYYY-MM-DD``) and remaining columns
    are ticker symbols; empty cells are missing values. Companion files named
    ``<stem>_high<ext>`` and ``<stem>_low<ext>`` are picked up when both exist.

    Args:
        path (str | Path): Close-price CSV file.
        tickers (list[str]): Requested tickers, in output column order.

    Returns:
        PriceTable: Rows sorted ascending by date; values may still be missing.

    Raises:
        FileNotFoundError: If the file does not exist.
        ValueError: If no tickers are requested, a column is missing, a cell
            cannot be parsed, or a date repeats.
    """
    if not tickers:
        raise ValueError("no tickers requested")
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"Price file not found: {path}")

    close = _read_price_csv(path, list(tickers))
    high_path, low_path = _companion_path(path, "high"), _companion_path(path, "low")
    high = low = None
    if high_path.is_file() and low_path.is_file():
        high = _read_price_csv(high_path, list(tickers)).reindex(close.index)
        low = _read_price_csv(low_path, list(tickers)).reindex(close.index)

    logger.info("Loaded %d rows x %d tickers from %s", len(close), len(tickers), path)
    return PriceTable(close=close, high=high, low=low)


def clean(raw: PriceTable) -> PriceTable:
    """
    Forward-fill interior gaps and drop leading incomplete rows.

    Args:
        raw (PriceTable): Table straight from :func:`load_prices`.

    Returns:
        PriceTable: A table satisfying every PriceTable invariant.

    Raises:
        ValueError: If the table is empty, a ticker has no observations, or a
            price is not strictly positive.

    Example:
        Close prices ``[10, NaN, 12]`` become ``[10, 10, 12]``; ``[NaN, 10, 11]``
        loses its first row.
    """
    if len(raw) == 0:
        raise ValueError("Cannot clean an empty price table.")
    for frame in raw.frames():
        empty = [t for t in frame.columns if frame[t].notna().sum() == 0]
        if empty:
            raise ValueError(f"Ticker(s) with zero observations: {', '.join(empty)}")
        observed = frame.to_numpy(dtype=float)
        observed = observed[np.isfinite(observed)]
        if np.any(observed <= 0.0):
            raise ValueError("non-positive price")

    filled = [frame.ffill() for frame in raw.frames()]
    complete = np.logical_and.reduce([f.notna().all(axis=1).to_numpy() for f in filled])
    first = int(np.argmax(complete)) if complete.any() else len(complete)
    if first == len(complete):
        raise ValueError("No complete price rows after forward fill.")
    if first > 0:
        logger.info("Dropped %d leading incomplete row(s)", first)

    filled = [f.iloc[first:] for f in filled]
    cleaned = PriceTable(close=filled[0],
                         high=filled[1] if raw.has_range else None,
                         low=filled[2] if raw.has_range else None)
    cleaned.validate()
    return cleaned


def to_returns(prices: PriceTable) -> ReturnMatrix:
    """
    Simple per-period returns ``close[t+1] / close[t] - 1``.

    Raises:
        ValueError: If fewer than two rows are available.

    Example:
        Closes ``[100, 110]`` give a single return of ``0.10``.
    """
    if len(prices) < 2:
        raise ValueError("At least two price rows are required to compute returns.")
    close = prices.close.to_numpy(dtype=float)
    values = close[1:] / close[:-1] - 1.0
    return ReturnMatrix(pd.DataFrame(values, index=prices.dates[1:], columns=prices.tickers))


def price_relatives(returns: ReturnMatrix) -> np.ndarray:
    """Price relatives ``y = 1 + r`` for every row."""
    return 1.0 + returns.values


def hl_ratios(prices: PriceTable) -> Optional[pd.DataFrame]:
    """
    High/close and low/close ratios aligned with the rows of ``to_returns(prices)``.

    Returns:
        pd.DataFrame | None: Columns ``<ticker>_high`` then ``<ticker>_low``, or
        None when the table has no high/low prices.
    """
    if not prices.has_range:
        return None
    high = prices.high.iloc[1:] / prices.close.iloc[1:]
    low = prices.low.iloc[1:] / prices.close.iloc[1:]
    return pd.concat([high.add_suffix("_high"), low.add_suffix("_low")], axis=1)


def chrono_split(data: ReturnMatrix,
                 spec: SplitSpec = SplitSpec()) -> tuple[ReturnMatrix, ReturnMatrix, ReturnMatrix]:
    """
    Split returns into contiguous train, validation and test segments.

    Segment sizes are ``floor(train_frac·T)``, ``floor(val_frac·T)`` and the
    remainder. Rows are never shuffled.

    Raises:
        ValueError: If fewer than three rows are given or a segment is empty.

    Example:
        ``T=10`` with fractions ``(0.7, 0.15)`` gives sizes ``(7, 1, 2)``.
    """
    n_rows = len(data)
    if n_rows < 3:
        raise ValueError(f"At least three rows are required to split, got {n_rows}.")
    n_train = int(np.floor(spec.train_frac * n_rows))
    n_val = int(np.floor(spec.val_frac * n_rows))
    n_test = n_rows - n_train - n_val
    if min(n_train, n_val, n_test) == 0:
        raise ValueError(f"empty split: sizes ({n_train}, {n_val}, {n_test})")
    return (data.rows(0, n_train),
            data.rows(n_train, n_train + n_val),
            data.rows(n_train + n_val))


def rolling_stats(series: ReturnMatrix, window: int) -> tuple[pd.DataFrame, pd.DataFrame]:
    """
    Rolling mean and unbiased rolling standard deviation.

    Output row ``k`` summarizes input rows ``k .. k+window-1`` and is labelled
    with the last date of the window.

    Raises:
        ValueError: If ``window`` is not in ``[2, T]``.
    """
    if not 2 <= window <= len(series):
        raise ValueError(f"window must be in [2, {len(series)}], got {window}.")
    rolling = series.returns.rolling(window=window)
    means = rolling.mean().iloc[window - 1:]
    stds = rolling.std(ddof=1).iloc[window - 1:]
    return means, stds


def seasonal_adjust(series: ReturnMatrix, period: int = 21) -> ReturnMatrix:
    """
    Remove an additive seasonal component of length ``period``.

    Each column's phase means (entries sharing ``index mod period``) are
    centred on the column mean and subtracted. The column mean is unchanged and
    a second application is a no-op.

    Raises:
        ValueError: If ``period < 2`` or the series is shorter than two periods.

    Example:
        Column ``[1, 3, 1, 3]`` with period 2 becomes ``[2, 2, 2, 2]``.
    """
    if period < 2 or len(series) < 2 * period:
        raise ValueError(f"period must be in [2, {len(series) // 2}], got {period}.")
    values = series.values
    phase = np.arange(len(series)) % period
    counts = np.bincount(phase, minlength=period).astype(float)
    phase_means = np.vstack([values[phase == p].mean(axis=0) for p in range(period)])
    # Count-weighted centring keeps the column mean exact when T % period != 0.
    centred = phase_means - (counts @ phase_means) / counts.sum()
    adjusted = values - centred[phase]
    return ReturnMatrix(pd.DataFrame(adjusted, index=series.dates, columns=series.tickers))
