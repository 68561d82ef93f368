"""CSV dataset ingestion and TOML configuration plumbing.

Datasets are plain UTF-8 CSV files with a header row, ``.`` decimals and
comma delimiters.  Transfers may arrive under a declared monotone
transformation (``log`` is applied on load and inverted on save; any
other tag is kept as an untouched label).  Configuration files are TOML
with one table per concern (``[market]``, ``[bases]``, ``[theta]``,
``[schema]``, ...); the builders below turn those tables into the typed
objects the rest of the package consumes.
"""

from __future__ import annotations

import csv
import dataclasses
import logging
import re
import sys
from typing import Sequence

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover - exercised only on older interpreters
    import tomli as tomllib

from .model import BasisSpec, MatchSample, ProductBasis, Theta

logger = logging.getLogger(__name__)


@dataclasses.dataclass(frozen=True)
class DatasetSchema:
    """Maps CSV columns onto sample fields.

    Attributes:
        worker_columns: header names of worker covariates, in order.
        firm_columns: header names of firm covariates, in order.
        transfer_column: header name of the transfer field.
        transfer_transform: ``"identity"``, ``"log"``, or a free-form
            label for data that were transformed upstream.  Only
            ``"log"`` changes values on load/save.
        missing_marker: field content marking an unobserved transfer.
    """

    worker_columns: tuple
    firm_columns: tuple
    transfer_column: str
    transfer_transform: str = "identity"
    missing_marker: str = ""

    def __post_init__(self):
        workers = tuple(str(c) for c in self.worker_columns)
        firms = tuple(str(c) for c in self.firm_columns)
        transfer = str(self.transfer_column)
        if not workers or not firms:
            raise ValueError("schema needs at least one worker and one firm column")
        named = list(workers) + list(firms) + [transfer]
        if any(not c for c in named):
            raise ValueError("schema column names must be nonempty")
        if len(set(named)) != len(named):
            raise ValueError("schema columns must be disjoint")
        if not str(self.transfer_transform):
            raise ValueError("transfer_transform must be a nonempty tag")
        object.__setattr__(self, "worker_columns", workers)
        object.__setattr__(self, "firm_columns", firms)
        object.__setattr__(self, "transfer_column", transfer)
        object.__setattr__(self, "transfer_transform", str(self.transfer_transform))
        object.__setattr__(self, "missing_marker", str(self.missing_marker))


def _header_positions(header: Sequence[str], schema: DatasetSchema, path) -> dict:
    names = list(schema.worker_columns) + list(schema.firm_columns)
    names.append(schema.transfer_column)
    positions = {}
    for name in names:
        hits = [i for i, h in enumerate(header) if h == name]
        if not hits:
            raise ValueError(f"{path}: header is missing column {name!r}")
        if len(hits) > 1:
            raise ValueError(f"{path}: column {name!r} appears twice in the header")
        positions[name] = hits[0]
    return positions


def _parse_float(field: str, path, line: int, column: str) -> float:
    try:
        return float(field)
    except ValueError:
        raise ValueError(
            f"{path}: line {line}: cannot parse {field!r} in column {column!r}"
        ) from None


def load_sample(path, schema: DatasetSchema) -> MatchSample:
    """Read a matched cross-section from a CSV file.

    Raises ValueError with a 1-based line number for malformed rows and,
    under the ``log`` transform, for nonpositive wages.
    """
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ValueError(f"{path}: empty file") from None
        pos = _header_positions([h.strip() for h in header], schema, path)
        width = max(pos.values()) + 1
        workers, firms, transfers = [], [], []
        for line, row in enumerate(reader, start=2):
            if len(row) < width:
                raise ValueError(
                    f"{path}: line {line}: expected at least {width} fields, "
                    f"got {len(row)}"
                )
            workers.append(
                [_parse_float(row[pos[c]].strip(), path, line, c)
                 for c in schema.worker_columns]
            )
            firms.append(
                [_parse_float(row[pos[c]].strip(), path, line, c)
                 for c in schema.firm_columns]
            )
            raw = row[pos[schema.transfer_column]].strip()
            if raw == schema.missing_marker:
                transfers.append(np.nan)
                continue
            value = _parse_float(raw, path, line, schema.transfer_column)
            if schema.transfer_transform == "log":
                if value <= 0.0:
                    raise ValueError(
                        f"{path}: line {line}: wage {value!r} must be positive "
                        "under the log transform"
                    )
                value = float(np.log(value))
            transfers.append(value)
    if not workers:
        raise ValueError(f"{path}: no data rows")
    sample = MatchSample(
        workers=np.asarray(workers, dtype=np.float64),
        firms=np.asarray(firms, dtype=np.float64),
        transfers=np.asarray(transfers, dtype=np.float64),
    )
    logger.info(
        "loaded %d matches from %s (%d transfers missing)",
        sample.n, path, sample.n - sample.n_observed,
    )
    return sample


def save_sample(path, sample: MatchSample, schema: DatasetSchema) -> None:
    """Write a sample back to CSV, inverting the declared transform.

    Floats are rendered with ``repr`` so that a load/save cycle
    round-trips values exactly (up to the log/exp pair).
    """
    header = list(schema.worker_columns) + list(schema.firm_columns)
    header.append(schema.transfer_column)
    if len(schema.worker_columns) != sample.workers.shape[1]:
        raise ValueError("schema worker columns do not match sample width")
    if len(schema.firm_columns) != sample.firms.shape[1]:
        raise ValueError("schema firm columns do not match sample width")
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for i in range(sample.n):
            row = [repr(float(v)) for v in sample.workers[i]]
            row += [repr(float(v)) for v in sample.firms[i]]
            w = sample.transfers[i]
            if np.isnan(w):
                row.append(schema.missing_marker)
            elif schema.transfer_transform == "log":
                row.append(repr(float(np.exp(w))))
            else:
                row.append(repr(float(w)))
            writer.writerow(row)
    logger.info("wrote %d matches to %s", sample.n, path)


# --------------------------------------------------------------------------
# configuration


def load_config(path) -> dict:
    """Parse a TOML configuration file into nested dictionaries."""
    with open(path, "rb") as fh:
        return tomllib.load(fh)


def _require(cfg: dict, section: str, key: str):
    try:
        table = cfg[section]
    except KeyError:
        raise ValueError(f"config is missing the [{section}] section") from None
    try:
        return table[key]
    except KeyError:
        raise ValueError(f"config is missing key {key!r} in [{section}]") from None


_BASIS_TOKEN = re.compile(r"^(?:x(\d+))?\*?(?:y(\d+))?$")


def basis_from_token(token: str) -> ProductBasis:
    """Parse descriptors like ``"x1*y2"``, ``"x3"`` or ``"y1"``."""
    m = _BASIS_TOKEN.match(token.replace(" ", ""))
    if not m or (m.group(1) is None and m.group(2) is None):
        raise ValueError(
            f"cannot parse basis token {token!r}; expected forms like "
            "'x1*y1', 'x2' or 'y1'"
        )
    wi = int(m.group(1)) if m.group(1) else 0
    fi = int(m.group(2)) if m.group(2) else 0
    if (m.group(1) and wi == 0) or (m.group(2) and fi == 0):
        raise ValueError(f"covariate indices in {token!r} are 1-based")
    return ProductBasis(wi, fi)


def spec_from_config(cfg: dict) -> BasisSpec:
    tokens = [str(t) for t in _require(cfg, "bases", "functions")]
    alpha = {str(t) for t in _require(cfg, "bases", "alpha")}
    gamma = {str(t) for t in _require(cfg, "bases", "gamma")}
    for t in alpha | gamma:
        if t not in tokens:
            raise ValueError(f"active basis {t!r} is not listed in bases.functions")
    functions = tuple(basis_from_token(t) for t in tokens)
    return BasisSpec(
        functions=functions,
        alpha_mask=tuple(t in alpha for t in tokens),
        gamma_mask=tuple(t in gamma for t in tokens),
    )


def theta_from_config(cfg: dict) -> Theta:
    return Theta(
        A=np.asarray(_require(cfg, "theta", "A"), dtype=np.float64),
        Gamma=np.asarray(_require(cfg, "theta", "Gamma"), dtype=np.float64),
        sigma1=float(_require(cfg, "theta", "sigma1")),
        sigma2=float(_require(cfg, "theta", "sigma2")),
        t=float(_require(cfg, "theta", "t")),
        s2=float(_require(cfg, "theta", "s2")),
    )


def schema_from_config(cfg: dict) -> DatasetSchema:
    table = cfg.get("schema", {})
    return DatasetSchema(
        worker_columns=tuple(str(c) for c in _require(cfg, "schema", "workers")),
        firm_columns=tuple(str(c) for c in _require(cfg, "schema", "firms")),
        transfer_column=str(_require(cfg, "schema", "transfer")),
        transfer_transform=str(table.get("transform", "identity")),
        missing_marker=str(table.get("missing", "")),
    )


def market_from_config(cfg: dict):
    """Grids and masses for the simulator: (gx, fx, gy, gy_masses)."""
    gx = np.asarray(_require(cfg, "market", "worker_grid"), dtype=np.float64)
    gy = np.asarray(_require(cfg, "market", "firm_grid"), dtype=np.float64)
    fx = np.asarray(_require(cfg, "market", "worker_masses"), dtype=np.float64)
    fy = np.asarray(_require(cfg, "market", "firm_masses"), dtype=np.float64)
    return gx, fx, gy, fy
