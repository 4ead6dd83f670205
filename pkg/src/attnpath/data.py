"""Dataset ingestion, preprocessing, and concept-group schemas.

Numeric columns are z-scored with statistics computed on the training
split only; categorical columns are one-hot encoded with category lists
determined over the whole file (so the encoding is split-independent).
Every loader is deterministic given the file bytes and a seed.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DataError, SchemaError
from .model import GroupSchema

CACHE_FORMAT_VERSION = 1
STD_CLAMP = 1e-8

TRAIN, VAL, TEST = 0, 1, 2
_SPLIT_NAMES = {"train": TRAIN, "val": VAL, "test": TEST}


@dataclass(frozen=True)
class RawFeature:
    """One pre-encoding feature: a numeric column or a one-hot block.

    ``processed`` lists the indices of the derived columns; a block is
    always toggled as a unit by perturbation-based explainers.
    """

    name: str
    kind: str                       # "numeric" | "categorical"
    processed: tuple[int, ...]
    categories: tuple[str, ...] = ()


@dataclass
class TabularDataset:
    """Post-encoding feature matrix with metadata and split assignments."""

    features: np.ndarray            # (n, F) float64
    labels: np.ndarray              # (n,) int64
    column_names: list[str]         # length F, derived column names
    raw_features: list[RawFeature]
    norm_mean: np.ndarray           # (F,) zeros for one-hot columns
    norm_std: np.ndarray            # (F,) ones for one-hot columns
    split: np.ndarray               # (n,) int8: 0 train, 1 val, 2 test
    label_names: list[str] = field(default_factory=list)

    def __post_init__(self):
        if not np.all(np.isfinite(self.features)):
            raise DataError("dataset contains non-finite values after preprocessing")

    @property
    def n_samples(self) -> int:
        return self.features.shape[0]

    @property
    def n_features(self) -> int:
        return self.features.shape[1]

    @property
    def num_classes(self) -> int:
        return int(self.labels.max()) + 1 if self.labels.size else 0

    def indices(self, split: str) -> np.ndarray:
        return np.flatnonzero(self.split == _SPLIT_NAMES[split])

    def split_arrays(self, split: str) -> tuple[np.ndarray, np.ndarray]:
        idx = self.indices(split)
        return self.features[idx], self.labels[idx]

    # -- cache ---------------------------------------------------------------

    def to_cache(self, path) -> None:
        meta = {
            "format_version": CACHE_FORMAT_VERSION,
            "column_names": self.column_names,
            "raw_features": [
                {"name": f.name, "kind": f.kind, "processed": list(f.processed),
                 "categories": list(f.categories)}
                for f in self.raw_features
            ],
            "label_names": self.label_names,
        }
        np.savez(
            path,
            features=self.features,
            labels=self.labels,
            norm_mean=self.norm_mean,
            norm_std=self.norm_std,
            split=self.split,
            meta=np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8),
        )

    @classmethod
    def from_cache(cls, path) -> "TabularDataset":
        try:
            with np.load(path) as z:
                meta = json.loads(bytes(z["meta"]).decode())
                if meta.get("format_version") != CACHE_FORMAT_VERSION:
                    raise DataError(
                        f"unsupported dataset cache version {meta.get('format_version')}"
                    )
                return cls(
                    features=z["features"],
                    labels=z["labels"],
                    column_names=list(meta["column_names"]),
                    raw_features=[
                        RawFeature(r["name"], r["kind"], tuple(r["processed"]),
                                   tuple(r["categories"]))
                        for r in meta["raw_features"]
                    ],
                    norm_mean=z["norm_mean"],
                    norm_std=z["norm_std"],
                    split=z["split"],
                    label_names=list(meta["label_names"]),
                )
        except FileNotFoundError:
            raise DataError(f"dataset cache not found: {path}")


def build_group_schema(dataset: TabularDataset, group_decl) -> GroupSchema:
    """Expand a {group name -> raw feature names} mapping over processed columns."""
    by_name = {f.name: f for f in dataset.raw_features}
    groups = []
    for gname, members in group_decl:
        cols: list[int] = []
        for feat_name in members:
            if feat_name not in by_name:
                raise SchemaError(f"group {gname!r} references unknown feature {feat_name!r}")
            cols.extend(by_name[feat_name].processed)
        groups.append((gname, cols))
    return GroupSchema.from_groups(groups)


def _stratified_split(labels: np.ndarray, train_fraction: float, val_fraction: float,
                      rng: np.random.Generator) -> np.ndarray:
    """Per-class shuffled assignment into train/val/test partitions."""
    if train_fraction <= 0 or val_fraction <= 0 or train_fraction + val_fraction > 1.0 + 1e-12:
        raise ConfigError(
            f"invalid split fractions train={train_fraction} val={val_fraction}"
        )
    split = np.full(labels.shape[0], TEST, dtype=np.int8)
    for cls in np.unique(labels):
        idx = np.flatnonzero(labels == cls)
        idx = idx[rng.permutation(idx.size)]
        n_train = int(round(train_fraction * idx.size))
        n_val = int(round(val_fraction * idx.size))
        n_val = min(n_val, idx.size - n_train)
        split[idx[:n_train]] = TRAIN
        split[idx[n_train:n_train + n_val]] = VAL
    return split


def _normalize_in_place(features: np.ndarray, numeric_cols: list[int],
                        split: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Z-score numeric columns using train-split statistics only."""
    n_feat = features.shape[1]
    mean = np.zeros(n_feat)
    std = np.ones(n_feat)
    train_rows = split == TRAIN
    for c in numeric_cols:
        col = features[train_rows, c]
        mean[c] = col.mean() if col.size else 0.0
        std[c] = max(col.std(), STD_CLAMP)
        features[:, c] = (features[:, c] - mean[c]) / std[c]
    return mean, std


# ---------------------------------------------------------------------------
# generic CSV loading with a declarative group config
# ---------------------------------------------------------------------------


def read_group_config(path) -> dict:
    """Parse a JSON group-config file: label column, groups, optional types."""
    try:
        with open(path) as fh:
            obj = json.load(fh)
    except FileNotFoundError:
        raise DataError(f"group config not found: {path}")
    except json.JSONDecodeError as exc:
        raise DataError(f"group config {path} is not valid JSON: {exc}")
    if "label" not in obj or "groups" not in obj:
        raise DataError("group config needs 'label' and 'groups' entries")
    return obj


def load_csv(path, group_config, *, train_fraction: float = 0.8,
             val_fraction: float = 0.2, seed: int = 0) -> tuple[TabularDataset, GroupSchema]:
    """Load a header-row CSV, encode it, and build the group schema.

    ``group_config`` is a path to, or dict in, the group-config format:
    ``{"label": col, "groups": {name: [cols...]}, "types": {col: kind}}``.
    Types default to numeric when every cell parses as a float.
    """
    config = group_config if isinstance(group_config, dict) else read_group_config(group_config)
    label_col = config["label"]
    declared_types = config.get("types", {})
    groups_decl = config["groups"]
    if isinstance(groups_decl, dict):
        groups_decl = list(groups_decl.items())
    else:
        groups_decl = [(g["name"], g["columns"]) for g in groups_decl]

    try:
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            rows = list(reader)
    except FileNotFoundError:
        raise DataError(f"csv file not found: {path}")
    if not rows:
        raise DataError(f"csv file {path} is empty")
    header = [h.strip() for h in rows[0]]
    body = rows[1:]
    if not body:
        raise DataError(f"csv file {path} has a header but no data rows")
    if label_col not in header:
        raise DataError(f"label column {label_col!r} not in csv header")
    feature_order = [c for g, members in groups_decl for c in members]
    for col in feature_order:
        if col not in header:
            raise DataError(f"declared column {col!r} not in csv header")
    col_index = {name: i for i, name in enumerate(header)}

    for r, row in enumerate(body):
        if len(row) != len(header):
            raise DataError(f"row {r + 2} has {len(row)} cells, header has {len(header)}")

    def parse_numeric(col: str) -> np.ndarray | None:
        vals = np.empty(len(body))
        for r, row in enumerate(body):
            cell = row[col_index[col]].strip()
            try:
                vals[r] = float(cell)
            except ValueError:
                return None
        return vals

    # resolve column kinds: declaration wins, otherwise infer
    kinds: dict[str, str] = {}
    numeric_values: dict[str, np.ndarray] = {}
    for col in feature_order:
        declared = declared_types.get(col)
        if declared not in (None, "numeric", "categorical"):
            raise DataError(f"unknown type {declared!r} for column {col!r}")
        parsed = parse_numeric(col) if declared in (None, "numeric") else None
        if declared == "numeric" and parsed is None:
            bad = next(
                (r, row[col_index[col]]) for r, row in enumerate(body)
                if not _is_float(row[col_index[col]])
            )
            raise DataError(
                f"column {col!r} declared numeric but row {bad[0] + 2} holds {bad[1]!r}"
            )
        if parsed is not None and declared != "categorical":
            kinds[col] = "numeric"
            numeric_values[col] = parsed
        else:
            kinds[col] = "categorical"

    # labels: mapped onto 0..C-1 by sorted distinct value
    label_values = [row[col_index[label_col]].strip() for row in body]
    label_names = sorted(set(label_values))
    label_map = {v: i for i, v in enumerate(label_names)}
    labels = np.array([label_map[v] for v in label_values], dtype=np.int64)

    # encode features in declared order
    columns: list[np.ndarray] = []
    column_names: list[str] = []
    raw_features: list[RawFeature] = []
    numeric_cols: list[int] = []
    for col in feature_order:
        if kinds[col] == "numeric":
            numeric_cols.append(len(column_names))
            raw_features.append(RawFeature(col, "numeric", (len(column_names),)))
            column_names.append(col)
            columns.append(numeric_values[col])
        else:
            cats = sorted({row[col_index[col]].strip() for row in body})
            start = len(column_names)
            for cat in cats:
                column_names.append(f"{col}={cat}")
                columns.append(np.array(
                    [1.0 if row[col_index[col]].strip() == cat else 0.0 for row in body]
                ))
            raw_features.append(
                RawFeature(col, "categorical", tuple(range(start, len(column_names))),
                           tuple(cats))
            )
    features = np.column_stack(columns)

    rng = np.random.default_rng(seed)
    split = _stratified_split(labels, train_fraction, val_fraction, rng)
    mean, std = _normalize_in_place(features, numeric_cols, split)
    dataset = TabularDataset(
        features=features, labels=labels, column_names=column_names,
        raw_features=raw_features, norm_mean=mean, norm_std=std, split=split,
        label_names=label_names,
    )
    schema = build_group_schema(dataset, groups_decl)
    return dataset, schema


def _is_float(cell: str) -> bool:
    try:
        float(cell.strip())
        return True
    except ValueError:
        return False


# ---------------------------------------------------------------------------
# Forest CoverType
# ---------------------------------------------------------------------------

_COVERTYPE_NUMERIC = [
    "elevation", "aspect", "slope",
    "hd_hydrology", "vd_hydrology", "hd_roadways",
    "hillshade_9am", "hillshade_noon", "hillshade_3pm",
    "hd_fire_points",
]

COVERTYPE_GROUPS = [
    ("generals", ["elevation", "aspect", "slope"]),
    ("distances", ["hd_hydrology", "vd_hydrology", "hd_roadways", "hd_fire_points"]),
    ("hillshades", ["hillshade_9am", "hillshade_noon", "hillshade_3pm"]),
    ("wild_areas", ["wilderness"]),
    ("soil_types", ["soil"]),
]


def covertype_prepare(path, *, num_classes: int = 3, train_fraction: float = 0.8,
                      val_fraction: float = 0.1, seed: int = 0,
                      max_samples: int | None = None) -> tuple[TabularDataset, GroupSchema]:
    """Load the UCI CoverType file and build its five concept groups.

    Keeps the ``num_classes`` most frequent cover types (relabelled 0..
    by descending frequency), z-scores the 10 quantitative columns, and
    treats the wilderness/soil indicator blocks as pre-encoded one-hot
    features.  The default 80/10/10 stratified split reproduces the
    published ~425k/53k train/validation sizes on the full file.
    ``max_samples`` takes a stratified subsample first (for desk-scale
    runs).
    """
    try:
        raw = np.loadtxt(path, delimiter=",")
    except FileNotFoundError:
        raise DataError(f"covertype file not found: {path}")
    except ValueError as exc:
        raise DataError(f"covertype file {path} is not comma-separated numeric: {exc}")
    if raw.ndim != 2 or raw.shape[1] != 55:
        raise DataError(
            f"covertype layout needs 55 columns (54 features + label), got {raw.shape}"
        )
    all_labels = raw[:, -1].astype(np.int64)
    values, counts = np.unique(all_labels, return_counts=True)
    if len(values) < num_classes:
        raise DataError(f"file has {len(values)} classes, need {num_classes}")
    order = np.lexsort((values, -counts))          # frequency desc, then label asc
    keep_values = values[order[:num_classes]]
    mask = np.isin(all_labels, keep_values)
    raw = raw[mask]
    relabel = {int(v): i for i, v in enumerate(keep_values)}
    labels = np.array([relabel[int(v)] for v in raw[:, -1]], dtype=np.int64)
    features = raw[:, :54].astype(np.float64)

    rng = np.random.default_rng(seed)
    if max_samples is not None and max_samples < features.shape[0]:
        sub = _stratified_subsample(labels, max_samples, rng)
        features, labels = features[sub], labels[sub]

    column_names = list(_COVERTYPE_NUMERIC)
    raw_features = [RawFeature(n, "numeric", (i,)) for i, n in enumerate(_COVERTYPE_NUMERIC)]
    column_names += [f"wilderness={i}" for i in range(4)]
    raw_features.append(RawFeature("wilderness", "categorical", tuple(range(10, 14)),
                                   tuple(str(i) for i in range(4))))
    column_names += [f"soil={i}" for i in range(40)]
    raw_features.append(RawFeature("soil", "categorical", tuple(range(14, 54)),
                                   tuple(str(i) for i in range(40))))

    split = _stratified_split(labels, train_fraction, val_fraction, rng)
    mean, std = _normalize_in_place(features, list(range(10)), split)
    dataset = TabularDataset(
        features=features, labels=labels, column_names=column_names,
        raw_features=raw_features, norm_mean=mean, norm_std=std, split=split,
        label_names=[str(int(v)) for v in keep_values],
    )
    return dataset, build_group_schema(dataset, COVERTYPE_GROUPS)


def _stratified_subsample(labels: np.ndarray, size: int, rng: np.random.Generator) -> np.ndarray:
    fraction = size / labels.shape[0]
    chosen = []
    for cls in np.unique(labels):
        idx = np.flatnonzero(labels == cls)
        take = max(1, int(round(fraction * idx.size)))
        chosen.append(rng.choice(idx, size=min(take, idx.size), replace=False))
    return np.sort(np.concatenate(chosen))


# ---------------------------------------------------------------------------
# KDD'99 network intrusion
# ---------------------------------------------------------------------------

# 41 raw columns of the KDD Cup 99 connection records, in file order.
KDD_COLUMNS = [
    "duration", "protocol_type", "service", "flag", "src_bytes", "dst_bytes",
    "land", "wrong_fragment", "urgent",
    "hot", "num_failed_logins", "logged_in", "num_compromised", "root_shell",
    "su_attempted", "num_root", "num_file_creations", "num_shells",
    "num_access_files", "num_outbound_cmds", "is_host_login", "is_guest_login",
    "count", "srv_count", "serror_rate", "srv_serror_rate", "rerror_rate",
    "srv_rerror_rate", "same_srv_rate", "diff_srv_rate", "srv_diff_host_rate",
    "dst_host_count", "dst_host_srv_count", "dst_host_same_srv_rate",
    "dst_host_diff_srv_rate", "dst_host_same_src_port_rate",
    "dst_host_srv_diff_host_rate", "dst_host_serror_rate",
    "dst_host_srv_serror_rate", "dst_host_rerror_rate", "dst_host_srv_rerror_rate",
]

# Canonical category lists; fixing them keeps the encoded width at the
# published 53 columns no matter which subset of the data is loaded.
KDD_PROTOCOLS = ("icmp", "tcp", "udp")
KDD_FLAGS = ("OTH", "REJ", "RSTO", "RSTOS0", "RSTR", "S0", "S1", "S2", "S3", "SF", "SH")
KDD_LOGGED_IN = ("0", "1")

# service is dropped (its cardinality dwarfs the concept groups) and
# logged_in is expanded; with protocol_type and flag one-hot encoded the
# four groups come out at 20/14/9/10 columns over 53 features.
_KDD_BASIC = ["duration", "protocol_type", "flag", "src_bytes", "dst_bytes",
              "land", "wrong_fragment", "urgent"]
_KDD_CONTENT = ["hot", "num_failed_logins", "logged_in", "num_compromised", "root_shell",
                "su_attempted", "num_root", "num_file_creations", "num_shells",
                "num_access_files", "num_outbound_cmds", "is_host_login", "is_guest_login"]
_KDD_TRAFFIC = KDD_COLUMNS[22:31]
_KDD_HOST = KDD_COLUMNS[31:41]

NI_GROUPS = [
    ("basic", _KDD_BASIC),
    ("content", _KDD_CONTENT),
    ("traffic", _KDD_TRAFFIC),
    ("host", _KDD_HOST),
]

_KDD_CATEGORICAL = {
    "protocol_type": KDD_PROTOCOLS,
    "flag": KDD_FLAGS,
    "logged_in": KDD_LOGGED_IN,
}

# Default 3-class aggregation: normal traffic, denial-of-service attacks,
# and everything else.  Editable via the class_map argument.
NI_DEFAULT_CLASS_MAP = {
    "classes": {
        "normal": 0,
        "back": 1, "land": 1, "neptune": 1, "pod": 1, "smurf": 1, "teardrop": 1,
    },
    "default": 2,
}


def ni_prepare(path, *, class_map=None, train_fraction: float = 0.8,
               val_fraction: float = 0.1, seed: int = 0,
               max_samples: int | None = None) -> tuple[TabularDataset, GroupSchema]:
    """Load a KDD'99-layout connection file into the four concept groups.

    ``class_map`` follows ``{"classes": {name: idx}, "default": idx}``
    (a dict or a JSON file path); attack names may carry the trailing
    dot of the raw format.
    """
    if class_map is None:
        cmap = NI_DEFAULT_CLASS_MAP
    elif isinstance(class_map, dict):
        cmap = class_map
    else:
        try:
            with open(class_map) as fh:
                cmap = json.load(fh)
        except FileNotFoundError:
            raise DataError(f"class map not found: {class_map}")
        except json.JSONDecodeError as exc:
            raise DataError(f"class map {class_map} is not valid JSON: {exc}")
    name_to_class = {k.rstrip("."): int(v) for k, v in cmap.get("classes", {}).items()}
    default_class = cmap.get("default")

    try:
        with open(path, newline="") as fh:
            rows = [r for r in csv.reader(fh) if r]
    except FileNotFoundError:
        raise DataError(f"network intrusion file not found: {path}")
    if not rows:
        raise DataError(f"network intrusion file {path} is empty")
    width = len(KDD_COLUMNS) + 1
    labels_raw: list[str] = []
    for r, row in enumerate(rows):
        if len(row) != width:
            raise DataError(f"row {r + 1} has {len(row)} columns, expected {width}")
        labels_raw.append(row[-1].strip().rstrip("."))

    labels = np.empty(len(rows), dtype=np.int64)
    for r, name in enumerate(labels_raw):
        if name in name_to_class:
            labels[r] = name_to_class[name]
        elif default_class is not None:
            labels[r] = int(default_class)
        else:
            raise DataError(f"row {r + 1}: unmapped connection label {name!r}")

    col_index = {name: i for i, name in enumerate(KDD_COLUMNS)}
    columns: list[np.ndarray] = []
    column_names: list[str] = []
    raw_features: list[RawFeature] = []
    numeric_cols: list[int] = []
    wanted = [c for _, members in NI_GROUPS for c in members]
    for col in wanted:
        ci = col_index[col]
        if col in _KDD_CATEGORICAL:
            cats = _KDD_CATEGORICAL[col]
            cells = [row[ci].strip() for row in rows]
            for r, cell in enumerate(cells):
                if cell not in cats:
                    raise DataError(f"row {r + 1}: unknown {col} value {cell!r}")
            start = len(column_names)
            for cat in cats:
                column_names.append(f"{col}={cat}")
                columns.append(np.array([1.0 if c == cat else 0.0 for c in cells]))
            raw_features.append(
                RawFeature(col, "categorical", tuple(range(start, len(column_names))), cats)
            )
        else:
            vals = np.empty(len(rows))
            for r, row in enumerate(rows):
                cell = row[ci].strip()
                try:
                    vals[r] = float(cell)
                except ValueError:
                    raise DataError(f"row {r + 1}, column {col!r}: unparseable cell {cell!r}")
            numeric_cols.append(len(column_names))
            raw_features.append(RawFeature(col, "numeric", (len(column_names),)))
            column_names.append(col)
            columns.append(vals)
    features = np.column_stack(columns)

    rng = np.random.default_rng(seed)
    if max_samples is not None and max_samples < features.shape[0]:
        sub = _stratified_subsample(labels, max_samples, rng)
        features, labels = features[sub], labels[sub]
    split = _stratified_split(labels, train_fraction, val_fraction, rng)
    mean, std = _normalize_in_place(features, numeric_cols, split)
    dataset = TabularDataset(
        features=features, labels=labels, column_names=column_names,
        raw_features=raw_features, norm_mean=mean, norm_std=std, split=split,
        label_names=[str(c) for c in range(int(labels.max()) + 1)],
    )
    return dataset, build_group_schema(dataset, NI_GROUPS)


# ---------------------------------------------------------------------------
# synthetic planted-signal generator
# ---------------------------------------------------------------------------


def synth_planted(n: int = 2000, m: int = 4, k_per_group: int = 3,
                  informative_group: int = 0, noise: float = 0.1, seed: int = 0,
                  train_fraction: float = 0.8,
                  val_fraction: float = 0.2) -> tuple[TabularDataset, GroupSchema]:
    """Gaussian features where only one group's linear score sets the label.

    Labels are 1 when ``w . x_g + noise * eps > 0`` with a unit-norm
    weight vector on the informative group, so the Bayes accuracy stays
    above 0.95 at the default noise level and hits 1.0 at noise 0.
    """
    if m < 2:
        raise ConfigError(f"need at least 2 groups, got {m}")
    if not 0 <= informative_group < m:
        raise ConfigError(f"informative_group {informative_group} outside [0, {m})")
    rng = np.random.default_rng(seed)
    total = m * k_per_group
    features = rng.standard_normal((n, total))
    w = rng.standard_normal(k_per_group)
    w /= np.linalg.norm(w)
    g_cols = slice(informative_group * k_per_group, (informative_group + 1) * k_per_group)
    score = features[:, g_cols] @ w
    if noise > 0:
        score = score + noise * rng.standard_normal(n)
    labels = (score > 0).astype(np.int64)

    column_names = [f"g{g}_f{j}" for g in range(m) for j in range(k_per_group)]
    raw_features = [RawFeature(name, "numeric", (i,)) for i, name in enumerate(column_names)]
    split = _stratified_split(labels, train_fraction, val_fraction, rng)
    mean, std = _normalize_in_place(features, list(range(total)), split)
    dataset = TabularDataset(
        features=features, labels=labels, column_names=column_names,
        raw_features=raw_features, norm_mean=mean, norm_std=std, split=split,
        label_names=["0", "1"],
    )
    groups = [(f"group{g}", [f"g{g}_f{j}" for j in range(k_per_group)]) for g in range(m)]
    return dataset, build_group_schema(dataset, groups)
