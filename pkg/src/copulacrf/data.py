"""Dataset ingestion, subject-wise splitting, and the synthetic generator.

Text format (version 1), line-oriented, '#' comments and blank lines ignored:

    copula-crf-dataset v1
    dataset_id: <token>
    input: features <dim>            (or: input: images <H> <W> [<C>])
    nodes: <name>:<levels> <name>:<levels> ...
    ---
    <subject>|<input>|<labels>

Each row's <input> is either <dim> space-separated floats or a relative image
path (loaded as 8-bit grayscale, scaled to [0, 1]); <labels> holds one entry
per node, an integer in [1, L] or '?' for missing.

The generator samples exactly from the copula-ordinal model on disjoint node
pairs (plus singleton marginals); pairwise copulas do not define a consistent
joint above dimension two, so paired nodes must not overlap.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .copula import THETA_INDEP_EPS, frank_cdf
from .errors import DataError
from .ordinal import OrdinalUnaryParams, _cdf_batch, _probs_batch, _z_batch

FORMAT_VERSION = 1
MISSING = 0  # labels are 1-based; 0 marks a missing annotation

_NAME_RE = re.compile(r"^[A-Za-z0-9_.\-]+$")


@dataclass
class LabeledInstance:
    """One training/evaluation case: input, per-node labels, provenance."""

    input: np.ndarray
    labels: np.ndarray          # (Q,) ints aligned with the dataset node list
    subject_id: str
    dataset_id: str
    source: str | None = None   # original image path, kept for re-saving


@dataclass
class Dataset:
    dataset_id: str
    nodes: list[str]
    levels: dict[str, int]
    input_kind: str                     # "features" | "images"
    feature_dim: int | None = None
    image_shape: tuple | None = None    # (H, W) or (H, W, C)
    instances: list[LabeledInstance] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.instances)

    def subjects(self) -> list[str]:
        return sorted({inst.subject_id for inst in self.instances})

    def label_matrix(self) -> np.ndarray:
        return np.array([inst.labels for inst in self.instances], dtype=int)


def _check_name(name: str, what: str, path=None, line=None) -> str:
    if not _NAME_RE.match(name):
        raise DataError(f"invalid {what} {name!r}", path, line)
    return name


def load_dataset(path) -> Dataset:
    path = Path(path)
    try:
        raw_lines = path.read_text().splitlines()
    except OSError as exc:
        raise DataError(f"cannot read dataset: {exc}", path) from exc

    lines = [(i + 1, ln.strip()) for i, ln in enumerate(raw_lines)]
    lines = [(n, ln) for n, ln in lines if ln and not ln.startswith("#")]
    if not lines:
        raise DataError("empty dataset file", path)

    n0, magic = lines[0]
    m = re.match(r"^copula-crf-dataset v(\d+)$", magic)
    if not m:
        raise DataError(f"bad magic line {magic!r}", path, n0)
    if int(m.group(1)) > FORMAT_VERSION:
        raise DataError(f"unsupported format version {m.group(1)}", path, n0)

    header: dict[str, tuple[int, str]] = {}
    body_start = None
    for i, (n, ln) in enumerate(lines[1:], start=1):
        if ln == "---":
            body_start = i + 1
            break
        if ":" not in ln:
            raise DataError(f"expected 'key: value' header line, got {ln!r}", path, n)
        key, val = ln.split(":", 1)
        header[key.strip()] = (n, val.strip())
    if body_start is None:
        raise DataError("missing '---' separator", path)

    def req(key):
        if key not in header:
            raise DataError(f"missing header field {key!r}", path)
        return header[key]

    n, dataset_id = req("dataset_id")
    _check_name(dataset_id, "dataset_id", path, n)

    n, input_spec = req("input")
    parts = input_spec.split()
    feature_dim = None
    image_shape = None
    if parts[0] == "features" and len(parts) == 2 and parts[1].isdigit():
        input_kind = "features"
        feature_dim = int(parts[1])
        if feature_dim < 1:
            raise DataError("feature dim must be >= 1", path, n)
    elif parts[0] == "images" and len(parts) in (3, 4) and all(p.isdigit() for p in parts[1:]):
        input_kind = "images"
        image_shape = tuple(int(p) for p in parts[1:])
        if any(d < 1 for d in image_shape):
            raise DataError("image dims must be >= 1", path, n)
    else:
        raise DataError(f"bad input spec {input_spec!r}", path, n)

    n, nodes_spec = req("nodes")
    nodes: list[str] = []
    levels: dict[str, int] = {}
    for tok in nodes_spec.split():
        if ":" not in tok:
            raise DataError(f"bad node spec {tok!r}", path, n)
        name, lv = tok.rsplit(":", 1)
        _check_name(name, "node name", path, n)
        if name in levels:
            raise DataError(f"duplicate node {name!r}", path, n)
        if not lv.isdigit() or int(lv) < 2:
            raise DataError(f"node {name!r} needs an integer level count >= 2", path, n)
        nodes.append(name)
        levels[name] = int(lv)
    if not nodes:
        raise DataError("no nodes declared", path, n)

    ds = Dataset(dataset_id, nodes, levels, input_kind, feature_dim, image_shape)
    for n, ln in lines[body_start:]:
        fields = ln.split("|")
        if len(fields) != 3:
            raise DataError(f"expected 3 '|'-separated fields, got {len(fields)}", path, n)
        subject, input_field, label_field = (f.strip() for f in fields)
        _check_name(subject, "subject id", path, n)

        source = None
        if input_kind == "features":
            toks = input_field.split()
            if len(toks) != feature_dim:
                raise DataError(
                    f"expected {feature_dim} features, got {len(toks)}", path, n)
            try:
                values = np.array([float(t) for t in toks])
            except ValueError as exc:
                raise DataError(f"bad feature value: {exc}", path, n) from exc
            if not np.all(np.isfinite(values)):
                raise DataError("non-finite feature value", path, n)
        else:
            source = input_field
            values = _load_image(path.parent / input_field, image_shape, path, n)

        toks = label_field.split()
        if len(toks) != len(nodes):
            raise DataError(f"expected {len(nodes)} labels, got {len(toks)}", path, n)
        labels = np.empty(len(nodes), dtype=int)
        for j, (tok, node) in enumerate(zip(toks, nodes)):
            if tok == "?":
                labels[j] = MISSING
            else:
                try:
                    val = int(tok)
                except ValueError as exc:
                    raise DataError(f"bad label {tok!r} for node {node}", path, n) from exc
                if not 1 <= val <= levels[node]:
                    raise DataError(
                        f"label {val} for node {node} outside [1, {levels[node]}]",
                        path, n)
                labels[j] = val
        if np.all(labels == MISSING):
            raise DataError("row has no labels at all", path, n)
        ds.instances.append(LabeledInstance(values, labels, subject, dataset_id, source))

    if not ds.instances:
        raise DataError("dataset has no rows", path)
    return ds


def _load_image(img_path: Path, image_shape, ds_path, line) -> np.ndarray:
    from PIL import Image

    try:
        with Image.open(img_path) as im:
            arr = np.asarray(im.convert("L"), dtype=float) / 255.0
    except OSError as exc:
        raise DataError(f"cannot load image {img_path}: {exc}", ds_path, line) from exc
    if arr.shape != tuple(image_shape[:2]):
        raise DataError(
            f"image {img_path} is {arr.shape}, expected {tuple(image_shape[:2])}",
            ds_path, line)
    return arr


def save_dataset(ds: Dataset, path) -> None:
    path = Path(path)
    lines = [f"copula-crf-dataset v{FORMAT_VERSION}",
             f"dataset_id: {ds.dataset_id}"]
    if ds.input_kind == "features":
        lines.append(f"input: features {ds.feature_dim}")
    else:
        lines.append("input: images " + " ".join(str(d) for d in ds.image_shape))
    lines.append("nodes: " + " ".join(f"{n}:{ds.levels[n]}" for n in ds.nodes))
    lines.append("---")
    for inst in ds.instances:
        if ds.input_kind == "features":
            input_field = " ".join(repr(float(v)) for v in inst.input)
        else:
            if inst.source is None:
                raise ValueError("image instance lacks a source path; cannot save")
            input_field = inst.source
        labels = " ".join("?" if l == MISSING else str(int(l)) for l in inst.labels)
        lines.append(f"{inst.subject_id}|{input_field}|{labels}")
    path.write_text("\n".join(lines) + "\n")


def split_by_subject(ds: Dataset, train_fraction: float, seed: int):
    """Disjoint-subject (train, test) split; reproducible under seed."""
    subjects = ds.subjects()
    if len(subjects) < 2:
        raise ValueError("need at least two subjects for a subject-wise split")
    n_train = int(round(train_fraction * len(subjects)))
    if not 1 <= n_train <= len(subjects) - 1:
        raise ValueError(
            f"train fraction {train_fraction} leaves an empty partition "
            f"({n_train}/{len(subjects)} subjects)")
    order = np.random.default_rng(seed).permutation(len(subjects))
    train_subj = {subjects[i] for i in order[:n_train]}

    def subset(keep):
        out = Dataset(ds.dataset_id, list(ds.nodes), dict(ds.levels),
                      ds.input_kind, ds.feature_dim, ds.image_shape)
        out.instances = [inst for inst in ds.instances
                         if (inst.subject_id in train_subj) == keep]
        return out

    return subset(True), subset(False)


@dataclass
class SynthSpec:
    """Ground-truth model for the pairwise-exact synthetic generator."""

    nodes: list[str]
    unaries: dict[str, OrdinalUnaryParams]
    edges: list[tuple[tuple[str, str], float]]   # ((r, s), theta), disjoint pairs
    feature_dim: int
    n_samples: int
    seed: int = 0
    feature_scale: float = 1.0
    n_subjects: int = 10
    missing_rate: float = 0.0
    dataset_id: str = "synth"

    def __post_init__(self):
        seen: set[str] = set()
        for (r, s), _ in self.edges:
            if r == s or r not in self.nodes or s not in self.nodes:
                raise ValueError(f"bad edge ({r}, {s})")
            if r in seen or s in seen:
                raise ValueError(
                    "generator edges must be disjoint pairs (no shared nodes)")
            seen.update((r, s))
        for node in self.nodes:
            phi = self.unaries[node]
            if phi.feature_dim != self.feature_dim:
                raise ValueError(f"unary for {node} has wrong feature_dim")
        if not 0.0 <= self.missing_rate < 1.0:
            raise ValueError("missing_rate must be in [0, 1)")


def _joint_cells_batch(F, phi_r, phi_s, theta) -> np.ndarray:
    """(N, L_r, L_s) joint tables for a batch of feature vectors."""
    u = _cdf_batch(_z_batch(F, phi_r))
    v = _cdf_batch(_z_batch(F, phi_s))
    if abs(theta) < THETA_INDEP_EPS:
        return np.diff(u, axis=1)[:, :, None] * np.diff(v, axis=1)[:, None, :]
    grid = frank_cdf(u[:, :, None], v[:, None, :], theta)
    cells = (grid[:, 1:, 1:] + grid[:, :-1, :-1]
             - grid[:, :-1, 1:] - grid[:, 1:, :-1])
    return np.maximum(cells, 0.0)


def _inverse_cdf_rows(cells2d: np.ndarray, draws: np.ndarray) -> np.ndarray:
    cum = np.cumsum(cells2d, axis=1)
    t = draws * cum[:, -1]
    return (cum < t[:, None]).sum(axis=1)


def synth_sample(spec: SynthSpec) -> Dataset:
    """Sample a dataset exactly from the copula-ordinal ground truth."""
    rng = np.random.default_rng(spec.seed)
    N = spec.n_samples
    F = rng.normal(scale=spec.feature_scale, size=(N, spec.feature_dim))

    labels = np.zeros((N, len(spec.nodes)), dtype=int)
    node_idx = {n: i for i, n in enumerate(spec.nodes)}
    paired = set()
    for (r, s), theta in spec.edges:
        paired.update((r, s))
        cells = _joint_cells_batch(F, spec.unaries[r], spec.unaries[s], theta)
        Ls = cells.shape[2]
        flat_idx = _inverse_cdf_rows(cells.reshape(N, -1), rng.random(N))
        labels[:, node_idx[r]] = flat_idx // Ls + 1
        labels[:, node_idx[s]] = flat_idx % Ls + 1
    for node in spec.nodes:
        if node in paired:
            continue
        probs = _probs_batch(F, spec.unaries[node])
        labels[:, node_idx[node]] = _inverse_cdf_rows(probs, rng.random(N)) + 1

    if spec.missing_rate > 0.0:
        drop = rng.random(labels.shape) < spec.missing_rate
        # keep at least one observed label per row
        keep = rng.integers(0, labels.shape[1], size=N)
        drop[np.arange(N), keep] = False
        labels = np.where(drop, MISSING, labels)

    subjects = rng.integers(0, spec.n_subjects, size=N)
    ds = Dataset(spec.dataset_id, list(spec.nodes),
                 {n: spec.unaries[n].levels for n in spec.nodes},
                 "features", spec.feature_dim)
    ds.instances = [
        LabeledInstance(F[i], labels[i], f"s{subjects[i]:02d}", spec.dataset_id)
        for i in range(N)
    ]
    return ds
