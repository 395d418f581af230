"""Multi-view datasets: in-memory type, directory format and generators.

Directory layout (all plain text)::

    meta            key = value lines: K, V, N, dims (comma list), optional name,
                    optional synthetic (0/1)
    view_<v>.csv    N rows of d_v comma-separated reals, written with %.17g
    labels.csv      N integers, one per line
    train.idx       optional, train row indices one per line
    test.idx        optional, test row indices one per line

Views are numbered from 0.
"""

from __future__ import annotations

import hashlib
import os
from dataclasses import dataclass, replace

import numpy as np

# named sub-streams of a run seed
STREAMS = {"split": 1, "init": 2, "batching": 3, "noise": 4, "synth": 5, "train_noise": 6}


def stream_rng(seed: int, stream: str) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), STREAMS[stream]]))


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class MultiViewDataset:
    views: tuple[np.ndarray, ...]
    labels: np.ndarray
    k: int
    train_idx: np.ndarray | None = None
    test_idx: np.ndarray | None = None
    name: str = ""
    synthetic: bool = False

    def __post_init__(self):
        views = tuple(np.ascontiguousarray(v, dtype=np.float64) for v in self.views)
        labels = np.asarray(self.labels, dtype=np.int64)
        if not views:
            raise DatasetError("dataset has no views")
        n = labels.shape[0]
        for i, v in enumerate(views):
            if v.ndim != 2 or v.shape[0] != n:
                raise DatasetError(f"view {i} has shape {v.shape}, expected ({n}, d)")
            if not np.all(np.isfinite(v)):
                raise DatasetError(f"view {i} contains non-finite values")
        if n and (labels.min() < 0 or labels.max() >= self.k):
            raise DatasetError(f"labels must lie in [0, {self.k})")
        if (self.train_idx is None) != (self.test_idx is None):
            raise DatasetError("train and test indices must be given together")
        if self.train_idx is not None:
            tr = np.asarray(self.train_idx, dtype=np.int64)
            te = np.asarray(self.test_idx, dtype=np.int64)
            both = np.concatenate([tr, te])
            if both.size != n or not np.array_equal(np.sort(both), np.arange(n)):
                raise DatasetError("split indices must partition 0..N-1")
            object.__setattr__(self, "train_idx", tr)
            object.__setattr__(self, "test_idx", te)
        object.__setattr__(self, "views", views)
        object.__setattr__(self, "labels", labels)

    @property
    def n(self) -> int:
        return self.labels.shape[0]

    @property
    def v(self) -> int:
        return len(self.views)

    @property
    def dims(self) -> tuple[int, ...]:
        return tuple(x.shape[1] for x in self.views)

    def subset(self, idx) -> tuple[list[np.ndarray], np.ndarray]:
        return [x[idx] for x in self.views], self.labels[idx]

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        h.update(f"{self.k}|{self.dims}".encode())
        for x in self.views:
            h.update(x.tobytes())
        h.update(self.labels.tobytes())
        return h.hexdigest()[:16]


@dataclass(frozen=True)
class SynthSpec:
    """Gaussian class clusters per view; misleading views swap class means.

    For a misleading view, a ``mislead_fraction`` share of rows (chosen per
    row) is drawn at the mean of ``permutation[label]`` instead of its own
    label, with that mean scaled by ``mislead_gain`` and its noise by
    ``mislead_noise`` (a faulty, saturated reading).  With
    ``random_mislead=True`` each misled row instead shows a uniformly drawn
    wrong class, so the fault cannot be undone by relabelling.
    """

    k: int = 5
    v: int = 3
    n: int = 2000
    dims: tuple[int, ...] = (8, 8, 8)
    separation: tuple[float, ...] = (2.0, 2.0, 2.0)
    noise: tuple[float, ...] = (1.0, 1.0, 1.0)
    misleading: tuple[int, ...] = ()
    permutation: tuple[int, ...] | None = None
    mislead_fraction: float = 0.5
    mislead_noise: float = 1.0
    mislead_gain: float = 1.0
    random_mislead: bool = False
    seed: int = 0

    def validate(self) -> None:
        if self.k < 2 or self.v < 1 or self.n < 1:
            raise DatasetError("need K >= 2, V >= 1, N >= 1")
        for name in ("dims", "separation", "noise"):
            if len(getattr(self, name)) != self.v:
                raise DatasetError(f"{name} must have one entry per view")
        if any(s <= 0 for s in self.separation) or any(s < 0 for s in self.noise):
            raise DatasetError("separation must be > 0 and noise >= 0")
        if any(d < 1 for d in self.dims):
            raise DatasetError("view dimensions must be >= 1")
        if not set(self.misleading) <= set(range(self.v)):
            raise DatasetError(f"misleading views {self.misleading} not in 0..{self.v - 1}")
        if self.permutation is not None and sorted(self.permutation) != list(range(self.k)):
            raise DatasetError("permutation must be a permutation of 0..K-1")
        if not 0.0 <= self.mislead_fraction <= 1.0:
            raise DatasetError("mislead_fraction must lie in [0, 1]")
        if self.mislead_noise < 0 or self.mislead_gain <= 0:
            raise DatasetError("need mislead_noise >= 0 and mislead_gain > 0")

    def label_permutation(self) -> np.ndarray:
        if self.permutation is not None:
            return np.asarray(self.permutation)
        # default 2-cycle on the first two classes
        perm = np.arange(self.k)
        perm[[0, 1]] = perm[[1, 0]]
        return perm


def class_means(spec: SynthSpec) -> list[np.ndarray]:
    """Per-view (K, d_v) class means at distance ``separation`` from the origin."""
    rng = stream_rng(spec.seed, "synth")
    means = []
    for d, sep in zip(spec.dims, spec.separation):
        m = rng.standard_normal((spec.k, d))
        m /= np.linalg.norm(m, axis=1, keepdims=True)
        means.append(sep * m)
    return means


def synth_conflict(spec: SynthSpec) -> MultiViewDataset:
    spec.validate()
    means = class_means(spec)
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, STREAMS["synth"], 1]))
    labels = np.arange(spec.n) % spec.k
    rng.shuffle(labels)
    perm = spec.label_permutation()
    views = []
    for v in range(spec.v):
        shown = labels.copy()
        scale = np.full((spec.n, 1), spec.noise[v])
        gain = np.ones((spec.n, 1))
        if v in spec.misleading:
            flip = rng.random(spec.n) < spec.mislead_fraction
            if spec.random_mislead:
                offset = rng.integers(1, spec.k, size=int(flip.sum()))
                shown[flip] = (labels[flip] + offset) % spec.k
            else:
                shown[flip] = perm[labels[flip]]
            scale[flip] *= spec.mislead_noise
            gain[flip] = spec.mislead_gain
        noise = rng.standard_normal((spec.n, spec.dims[v])) * scale
        views.append(gain * means[v][shown] + noise)
    return MultiViewDataset(tuple(views), labels, spec.k, name="synth", synthetic=True)


def split(ds: MultiViewDataset, train_fraction: float = 0.8, seed: int = 0) -> MultiViewDataset:
    if not 0.0 < train_fraction < 1.0:
        raise DatasetError(f"train fraction {train_fraction!r} must lie strictly in (0, 1)")
    order = stream_rng(seed, "split").permutation(ds.n)
    n_train = int(round(train_fraction * ds.n))
    if n_train in (0, ds.n):
        raise DatasetError("split leaves an empty partition")
    return replace(ds, train_idx=np.sort(order[:n_train]), test_idx=np.sort(order[n_train:]))


def make_pseudo_view(ds: MultiViewDataset) -> MultiViewDataset:
    """Append a view that concatenates all views' columns, view 0 first."""
    pseudo = np.concatenate(ds.views, axis=1)
    return replace(ds, views=ds.views + (pseudo,))


def _require_split(ds):
    if ds.train_idx is None:
        raise DatasetError("dataset has no train/test split")


def normalize(ds: MultiViewDataset) -> MultiViewDataset:
    """Z-score each feature with training-split statistics."""
    _require_split(ds)
    out = []
    for x in ds.views:
        tr = x[ds.train_idx]
        mu = tr.mean(axis=0)
        sd = tr.std(axis=0)
        safe = np.where(sd > 0, sd, 1.0)
        z = (x - mu) / safe
        z[:, sd == 0] = 0.0
        out.append(z)
    return replace(ds, views=tuple(out))


def inject_noise(
    ds: MultiViewDataset, level: float, fraction: float, seed: int, rows: str = "test"
) -> MultiViewDataset:
    """Add Gaussian noise to one random view of a random share of rows.

    ``rows`` picks the test split (default) or the train split.  Noise std per
    feature is ``level`` times that feature's training-split std.
    """
    if level < 0 or not 0.0 <= fraction <= 1.0:
        raise DatasetError("need level >= 0 and fraction in [0, 1]")
    if rows not in ("test", "train"):
        raise DatasetError(f"rows must be 'test' or 'train', not {rows!r}")
    _require_split(ds)
    if level == 0 or fraction == 0:
        return ds
    rng = stream_rng(seed, "noise" if rows == "test" else "train_noise")
    pool = ds.test_idx if rows == "test" else ds.train_idx
    hit = pool[rng.random(pool.size) < fraction]
    which = rng.integers(0, ds.v, size=hit.size)
    views = [x.copy() for x in ds.views]
    for v, x in enumerate(views):
        picked = hit[which == v]
        sd = ds.views[v][ds.train_idx].std(axis=0)
        x[picked] += rng.standard_normal((picked.size, x.shape[1])) * (level * sd)
    return replace(ds, views=tuple(views))


# Conflictive synthetic benchmark used by the TD ablation check
FIXTURE_NOISE_LEVEL = 5.0
FIXTURE_TRAIN_NOISE = 0.3
FIXTURE_TEST_NOISE = 0.5


def conflict_fixture(seed: int = 0) -> MultiViewDataset:
    """Three Gaussian views (K=5, N=2000), view 0 misleading, 80/20 split.

    On top of the permuted view, 30% of training rows and 50% of test rows
    get strong noise (5x feature std) in one randomly chosen view, so that
    individual views conflict on an instance-by-instance basis.
    """
    ds = split(synth_conflict(SynthSpec(misleading=(0,), seed=seed)), 0.8, seed)
    ds = inject_noise(ds, FIXTURE_NOISE_LEVEL, FIXTURE_TRAIN_NOISE, seed, rows="train")
    return inject_noise(ds, FIXTURE_NOISE_LEVEL, FIXTURE_TEST_NOISE, seed, rows="test")


# -- directory format ---------------------------------------------------------


def _fmt_rows(x: np.ndarray) -> str:
    return "".join(",".join(f"{val:.17g}" for val in row) + "\n" for row in x)


def save_dataset(ds: MultiViewDataset, path) -> None:
    os.makedirs(path, exist_ok=True)
    meta = {
        "K": ds.k,
        "V": ds.v,
        "N": ds.n,
        "dims": ",".join(map(str, ds.dims)),
        "name": ds.name or "dataset",
        "synthetic": int(ds.synthetic),
    }
    with open(os.path.join(path, "meta"), "w") as fh:
        fh.writelines(f"{k} = {v}\n" for k, v in meta.items())
    for v, x in enumerate(ds.views):
        with open(os.path.join(path, f"view_{v}.csv"), "w") as fh:
            fh.write(_fmt_rows(x))
    with open(os.path.join(path, "labels.csv"), "w") as fh:
        fh.writelines(f"{y}\n" for y in ds.labels)
    if ds.train_idx is not None:
        for fname, idx in (("train.idx", ds.train_idx), ("test.idx", ds.test_idx)):
            with open(os.path.join(path, fname), "w") as fh:
                fh.writelines(f"{i}\n" for i in idx)


def read_meta(path) -> dict[str, str]:
    meta = {}
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, sep, value = line.partition("=")
            if not sep:
                raise DatasetError(f"{path}: malformed line {line!r}")
            meta[key.strip()] = value.strip()
    return meta


def _read_matrix(fname, n, d):
    try:
        x = np.loadtxt(fname, delimiter=",", dtype=np.float64, ndmin=2)
    except ValueError as exc:
        raise DatasetError(f"{fname}: {exc}") from exc
    if x.shape != (n, d):
        raise DatasetError(f"{fname}: shape {x.shape}, meta declares ({n}, {d})")
    if not np.all(np.isfinite(x)):
        raise DatasetError(f"{fname}: non-finite value")
    return x


def load_dataset(path) -> MultiViewDataset:
    meta_path = os.path.join(path, "meta")
    if not os.path.isfile(meta_path):
        raise DatasetError(f"{path}: missing meta file")
    meta = read_meta(meta_path)
    try:
        k, v, n = int(meta["K"]), int(meta["V"]), int(meta["N"])
        dims = [int(d) for d in meta["dims"].split(",")]
    except (KeyError, ValueError) as exc:
        raise DatasetError(f"{meta_path}: bad or missing field ({exc})") from exc
    if len(dims) != v:
        raise DatasetError(f"{meta_path}: {len(dims)} dims for V = {v}")
    views = []
    for i, d in enumerate(dims):
        fname = os.path.join(path, f"view_{i}.csv")
        if not os.path.isfile(fname):
            raise DatasetError(f"{path}: missing view_{i}.csv")
        views.append(_read_matrix(fname, n, d))
    lab_path = os.path.join(path, "labels.csv")
    if not os.path.isfile(lab_path):
        raise DatasetError(f"{path}: missing labels.csv")
    labels = np.loadtxt(lab_path, dtype=np.int64, ndmin=1)
    if labels.shape != (n,):
        raise DatasetError(f"{lab_path}: {labels.shape[0]} labels, meta declares N = {n}")
    if labels.min() < 0 or labels.max() >= k:
        raise DatasetError(f"{lab_path}: label out of range [0, {k})")
    tr = te = None
    tr_path, te_path = os.path.join(path, "train.idx"), os.path.join(path, "test.idx")
    if os.path.isfile(tr_path) and os.path.isfile(te_path):
        tr = np.loadtxt(tr_path, dtype=np.int64, ndmin=1)
        te = np.loadtxt(te_path, dtype=np.int64, ndmin=1)
    return MultiViewDataset(
        tuple(views),
        labels,
        k,
        tr,
        te,
        name=meta.get("name", os.path.basename(os.path.normpath(path))),
        synthetic=meta.get("synthetic", "0") == "1",
    )
