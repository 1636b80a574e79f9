"""Few-shot task generation and ingestion.

Tasks keep their rows grouped by label (stable order), which makes the
text serialization of a pool an exact round trip.
"""

from __future__ import annotations

import json
import math
import os
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import RngStream

ROLES = ("prior", "meta-train", "meta-test")
UNIT_NORM_TOL = 1e-6
# ||c_t|| range per role for circle tasks
CIRCLE_CENTER_RANGE = {"prior": (0.1, 0.5), "meta-train": (0.1, 0.4), "meta-test": (0.1, 0.4)}
CIRCLE_MIN_RADIUS = 0.1


class StoreFormatError(ValueError):
    def __init__(self, path, line, msg):
        super().__init__(f"{path}:{line}: {msg}")
        self.path = str(path)
        self.line = line


def _group_by_label(X, Y):
    order = np.argsort(Y, kind="stable")
    return np.ascontiguousarray(X[order], dtype=np.float64), np.ascontiguousarray(Y[order], dtype=np.int64)


@dataclass(frozen=True)
class TaskDataset:
    task_id: int
    x_train: np.ndarray
    y_train: np.ndarray
    x_val: np.ndarray
    y_val: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        for name in ("x_train", "x_val"):
            a = np.asarray(getattr(self, name), dtype=np.float64)
            a = a.reshape(len(a), -1) if a.ndim != 2 else a
            object.__setattr__(self, name, a)
        for name in ("y_train", "y_val"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=np.int64).reshape(-1))
        if len(self.x_train) != len(self.y_train) or len(self.x_val) != len(self.y_val):
            raise ValueError("features and labels disagree in length")
        if len(self.x_val) and self.x_val.shape[1] != self.x_train.shape[1]:
            raise ValueError("train and validation features differ in dimension")

    @property
    def m(self) -> int:
        return len(self.y_train)

    @property
    def n(self) -> int:
        return len(self.y_val)

    @property
    def d(self) -> int:
        return self.x_train.shape[1]

    @property
    def train(self):
        return self.x_train, self.y_train

    @property
    def x_eval(self) -> np.ndarray:
        return np.concatenate([self.x_train, self.x_val.reshape(-1, self.d)])

    @property
    def y_eval(self) -> np.ndarray:
        return np.concatenate([self.y_train, self.y_val])

    def check(self, r_z: float, k: int):
        for X in (self.x_train, self.x_val):
            if len(X) and np.max(np.linalg.norm(X, axis=1)) > r_z * (1 + 1e-12):
                raise ValueError(f"task {self.task_id}: feature norm exceeds r_z = {r_z}")
        for Y in (self.y_train, self.y_val):
            if len(Y) and (Y.min() < 0 or Y.max() >= k):
                raise ValueError(f"task {self.task_id}: label outside 0..{k - 1}")


@dataclass(frozen=True)
class TaskPool:
    role: str
    tasks: tuple
    k: int
    r_z: float = 1.0
    descriptor: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.role not in ROLES:
            raise ValueError(f"role must be one of {ROLES}, got {self.role!r}")
        object.__setattr__(self, "tasks", tuple(self.tasks))
        if not self.tasks:
            raise ValueError("a task pool needs at least one task")
        shapes = {(t.m, t.n, t.d) for t in self.tasks}
        if len(shapes) != 1:
            raise ValueError(f"tasks in a pool must share (m, n, d), found {sorted(shapes)}")
        for t in self.tasks:
            t.check(self.r_z, self.k)

    def __len__(self):
        return len(self.tasks)

    def __getitem__(self, i):
        return self.tasks[i]

    def __iter__(self):
        return iter(self.tasks)

    @property
    def l(self) -> int:
        return len(self.tasks)

    @property
    def m(self) -> int:
        return self.tasks[0].m

    @property
    def n(self) -> int:
        return self.tasks[0].n

    @property
    def d(self) -> int:
        return self.tasks[0].d

    def stacked(self, validation: bool = True):
        """Arrays (Xtr, Ytr, Xev, Yev); the evaluation split is S plus S_va
        when ``validation`` is set, S alone otherwise."""
        Xtr = np.stack([t.x_train for t in self.tasks])
        Ytr = np.stack([t.y_train for t in self.tasks])
        if validation:
            Xev = np.stack([t.x_eval for t in self.tasks])
            Yev = np.stack([t.y_eval for t in self.tasks])
        else:
            Xev, Yev = Xtr, Ytr
        return Xtr, Ytr, Xev, Yev

    def stacked_validation(self):
        return (np.stack([t.x_val.reshape(-1, self.d) for t in self.tasks]),
                np.stack([t.y_val for t in self.tasks]))

    def subset(self, indices) -> "TaskPool":
        return TaskPool(self.role, tuple(self.tasks[i] for i in indices), self.k, self.r_z, self.descriptor)

    def without_validation(self) -> "TaskPool":
        tasks = tuple(TaskDataset(t.task_id, t.x_train, t.y_train, np.zeros((0, t.d)), np.zeros(0), t.meta)
                      for t in self.tasks)
        return TaskPool(self.role, tasks, self.k, self.r_z, self.descriptor)


# ----------------------------------------------------------- circle tasks

def _uniform_disk(gen, size, lo=0.0, hi=1.0):
    rad = np.sqrt(gen.uniform(lo * lo, hi * hi, size))
    ang = gen.uniform(0.0, 2.0 * math.pi, size)
    return np.stack([rad * np.cos(ang), rad * np.sin(ang)], axis=-1)


def sample_circle_concept(role: str, gen: np.random.Generator):
    lo, hi = CIRCLE_CENTER_RANGE[role]
    rad = math.sqrt(gen.uniform(lo * lo, hi * hi))
    ang = gen.uniform(0.0, math.pi)            # y >= 0 half
    center = np.array([rad * math.cos(ang), rad * math.sin(ang)])
    r_t = gen.uniform(CIRCLE_MIN_RADIUS, 1.0 - rad)
    return center, float(r_t)


def circle_labels(Z: np.ndarray, center: np.ndarray, r_t: float) -> np.ndarray:
    return (np.linalg.norm(Z - center, axis=-1) <= r_t).astype(np.int64)


def gen_circle_tasks(count: int, m: int, n: int, role: str, rng: RngStream) -> TaskPool:
    """Two-class tasks on the unit disk: label 1 inside a random circle.

    The circle center is uniform (by area) over the upper half of the
    annulus lo <= ||c|| <= hi, with (lo, hi) depending on the role, and the
    circle radius is uniform on [0.1, 1 - ||c||].
    """
    if count < 1 or m < 1 or n < 0:
        raise ValueError(f"need count >= 1, m >= 1, n >= 0; got count={count}, m={m}, n={n}")
    if role not in ROLES:
        raise ValueError(f"role must be one of {ROLES}, got {role!r}")
    tasks = []
    for i in range(count):
        gen = rng.child("tasks", role, i).generator()
        center, r_t = sample_circle_concept(role, gen)
        Z = _uniform_disk(gen, m + n)
        Y = circle_labels(Z, center, r_t)
        Xtr, Ytr = _group_by_label(Z[:m], Y[:m])
        Xva, Yva = _group_by_label(Z[m:], Y[m:])
        tasks.append(TaskDataset(i, Xtr, Ytr, Xva, Yva,
                                 {"center": [float(c) for c in center], "radius": r_t}))
    desc = {"generator": "circle", "count": count, "m": m, "n": n, "seed": rng.seed}
    return TaskPool(role, tuple(tasks), 2, 1.0, desc)


# ------------------------------------------------------- embedded stores

@dataclass(frozen=True)
class ClassStore:
    """Class-indexed feature store.  ``k`` is the task way recorded in the
    file header."""

    d: int
    k: int
    classes: tuple            # names, file order
    data: dict                # name -> (count, d) array
    renormalized: bool = False

    def __post_init__(self):
        if not self.classes:
            raise ValueError("a class store needs at least one class")

    def __len__(self):
        return len(self.classes)

    def subset(self, names, k: int | None = None) -> "ClassStore":
        names = tuple(names)
        return ClassStore(self.d, self.k if k is None else k, names, {c: self.data[c] for c in names},
                          self.renormalized)

    def split(self, fractions) -> list:
        """Contiguous partition of the class list by the given fractions;
        empty parts come back as None."""
        fr = np.asarray(fractions, dtype=np.float64)
        if np.any(fr < 0) or not math.isclose(fr.sum(), 1.0, abs_tol=1e-9):
            raise ValueError("split fractions must be non-negative and sum to 1")
        edges = np.round(np.cumsum(np.concatenate([[0.0], fr])) * len(self.classes)).astype(int)
        return [self.subset(self.classes[a:b]) if b > a else None for a, b in zip(edges[:-1], edges[1:])]


def _fmt_row(row) -> str:
    return " ".join(repr(float(x)) for x in row)


def store_text(store: ClassStore) -> str:
    lines = [f"{store.d} {store.k} {len(store.classes)}"]
    for name in store.classes:
        X = store.data[name]
        lines.append(f"class {name} {len(X)}")
        lines.extend(_fmt_row(r) for r in X)
    return "\n".join(lines) + "\n"


def write_store(store: ClassStore, path) -> None:
    Path(path).write_text(store_text(store))


def load_embedded_dataset(path, unit_norm: bool = True) -> ClassStore:
    """Parse a class store file: header ``d k classCount``, then per class
    ``class <name> <count>`` followed by ``count`` rows of ``d`` floats.

    With ``unit_norm`` every vector must have norm 1 within 1e-6; others are
    renormalized and the store is flagged ``renormalized``.
    """
    path = Path(path)
    raw = path.read_text().splitlines()
    lines = [(i + 1, ln.strip()) for i, ln in enumerate(raw) if ln.strip() and not ln.lstrip().startswith("#")]
    if not lines:
        raise StoreFormatError(path, 1, "empty file")
    pos = 0

    def take():
        nonlocal pos
        if pos >= len(lines):
            raise StoreFormatError(path, len(raw) + 1, "unexpected end of file")
        pos += 1
        return lines[pos - 1]

    no, head = take()
    parts = head.split()
    try:
        if len(parts) != 3:
            raise ValueError
        d, k, count = (int(p) for p in parts)
    except ValueError:
        raise StoreFormatError(path, no, f"header must be 'd k classCount', got {head!r}") from None
    if d < 1 or k < 1:
        raise StoreFormatError(path, no, "d and k must be positive")
    if count < 1:
        raise StoreFormatError(path, no, "class list is empty")
    names, data, fixed = [], {}, False
    for _ in range(count):
        no, line = take()
        parts = line.split()
        if len(parts) != 3 or parts[0] != "class":
            raise StoreFormatError(path, no, f"expected 'class <name> <count>', got {line!r}")
        name = parts[1]
        if name in data:
            raise StoreFormatError(path, no, f"duplicate class {name!r}")
        try:
            rows = int(parts[2])
        except ValueError:
            raise StoreFormatError(path, no, f"bad sample count {parts[2]!r}") from None
        if rows < 0:
            raise StoreFormatError(path, no, "negative sample count")
        X = np.empty((rows, d))
        for r in range(rows):
            no, line = take()
            vals = line.split()
            if len(vals) != d:
                raise StoreFormatError(path, no, f"expected {d} values, found {len(vals)}")
            try:
                X[r] = [float(v) for v in vals]
            except ValueError:
                raise StoreFormatError(path, no, "row contains a non-numeric entry") from None
            if not np.all(np.isfinite(X[r])):
                raise StoreFormatError(path, no, "row contains a non-finite entry")
        if unit_norm and rows:
            norms = np.linalg.norm(X, axis=1)
            if np.any(norms == 0):
                raise StoreFormatError(path, no, f"class {name!r} has a zero vector")
            bad = np.abs(norms - 1.0) > UNIT_NORM_TOL
            if np.any(bad):
                X[bad] /= norms[bad, None]
                fixed = True
        names.append(name)
        data[name] = X
    if pos != len(lines):
        raise StoreFormatError(path, lines[pos][0], "trailing content after the last class block")
    if fixed:
        warnings.warn(f"{path}: vectors renormalized to unit length", stacklevel=2)
    return ClassStore(d, k, tuple(names), data, fixed)


# -------------------------------------------------------- k-way tasks

def _draw_kway_task(store, class_names, labels, m_per, n_per, gen, task_id, meta):
    xs_tr, ys_tr, xs_va, ys_va = [], [], [], []
    for name, lab in zip(class_names, labels):
        X = store.data[name]
        idx = gen.choice(len(X), m_per + n_per, replace=False)
        xs_tr.append(X[idx[:m_per]])
        xs_va.append(X[idx[m_per:]])
        ys_tr.append(np.full(m_per, lab))
        ys_va.append(np.full(n_per, lab))
    d = store.d
    Xtr, Ytr = _group_by_label(np.concatenate(xs_tr).reshape(-1, d), np.concatenate(ys_tr))
    Xva, Yva = _group_by_label(np.concatenate(xs_va).reshape(-1, d), np.concatenate(ys_va))
    meta = dict(meta, classes=[str(c) for c in class_names], labels=[int(x) for x in labels])
    return TaskDataset(task_id, Xtr, Ytr, Xva, Yva, meta)


def make_kway_tasks(store: ClassStore, k: int, m_per_class: int, n_per_class: int, count: int,
                    rng: RngStream, role: str = "meta-train") -> TaskPool:
    """k distinct classes per task, task-local labels in random order, and
    disjoint train/validation draws within each class."""
    if k < 2 or m_per_class < 1 or n_per_class < 0 or count < 1:
        raise ValueError("need k >= 2, m_per_class >= 1, n_per_class >= 0, count >= 1")
    if len(store) < k:
        raise ValueError(f"store has {len(store)} classes, tasks need {k}")
    need = m_per_class + n_per_class
    small = [c for c in store.classes if len(store.data[c]) < need]
    if small:
        raise ValueError(f"classes {small[:5]} have fewer than {need} samples")
    tasks = []
    for i in range(count):
        gen = rng.child("tasks", role, i).generator()
        chosen = gen.choice(len(store), k, replace=False)
        names = [store.classes[j] for j in chosen]
        tasks.append(_draw_kway_task(store, names, range(k), m_per_class, n_per_class, gen, i, {}))
    desc = {"generator": "kway", "k": k, "m_per_class": m_per_class, "n_per_class": n_per_class,
            "count": count, "seed": rng.seed}
    return TaskPool(role, tuple(tasks), k, 1.0, desc)


def make_cluster_store(d: int, classes: int, spread: float, per_class: int, rng: RngStream,
                       k: int = 4) -> ClassStore:
    """Unit-norm class centers; samples are center plus N(0, spread^2 I)
    noise, renormalized to unit length."""
    if classes < 2:
        raise ValueError("need at least 2 classes")
    if not spread >= 0:
        raise ValueError("spread must be non-negative")
    gen = rng.child("store").generator()
    centers = gen.standard_normal((classes, d))
    centers /= np.linalg.norm(centers, axis=1, keepdims=True)
    data, names = {}, []
    for c in range(classes):
        X = centers[c] + spread * gen.standard_normal((per_class, d))
        X /= np.linalg.norm(X, axis=1, keepdims=True)
        names.append(f"c{c}")
        data[names[-1]] = X
    return ClassStore(d, k, tuple(names), data)


def gen_cluster_tasks(d: int, classes: int, spread: float, count: int, m: int, n: int, rng: RngStream,
                      k: int = 4, per_class: int | None = None, role: str = "meta-train") -> TaskPool:
    """k-way tasks over a synthetic cluster store; m and n are per class."""
    if not spread > 0:
        raise ValueError("spread must be positive")
    store = make_cluster_store(d, classes, spread, per_class or max(m + n, 20), rng, k)
    pool = make_kway_tasks(store, k, m, n, count, rng, role)
    desc = dict(pool.descriptor, generator="cluster", d=d, classes=classes, spread=spread)
    return TaskPool(role, pool.tasks, k, 1.0, desc)


def make_nme_pool(store: ClassStore, group_count: int, count: int, m_per_class: int, n_per_class: int,
                  rng: RngStream, role: str = "meta-train", permute_at_test: bool = True) -> TaskPool:
    """Non-mutually-exclusive tasks: the classes are split into
    ``group_count`` equal groups and group g always carries label g.  A task
    takes one class from each group.  Meta-test tasks permute the labels
    per task when ``permute_at_test`` is set."""
    if group_count < 2:
        raise ValueError("need at least 2 groups")
    if len(store) < group_count:
        raise ValueError(f"store has {len(store)} classes, need at least {group_count}")
    per_group = len(store) // group_count
    order = rng.child("groups", role).generator().permutation(len(store))
    groups = [[store.classes[j] for j in order[g * per_group:(g + 1) * per_group]] for g in range(group_count)]
    need = m_per_class + n_per_class
    if any(len(store.data[c]) < need for grp in groups for c in grp):
        raise ValueError(f"some classes have fewer than {need} samples")
    permute = role == "meta-test" and permute_at_test
    tasks = []
    for i in range(count):
        gen = rng.child("tasks", role, i).generator()
        names = [grp[gen.integers(len(grp))] for grp in groups]
        labels = gen.permutation(group_count) if permute else np.arange(group_count)
        tasks.append(_draw_kway_task(store, names, labels, m_per_class, n_per_class, gen, i, {}))
    desc = {"generator": "nme", "groups": [list(g) for g in groups], "permuted": permute,
            "m_per_class": m_per_class, "n_per_class": n_per_class, "count": count, "seed": rng.seed}
    return TaskPool(role, tuple(tasks), group_count, 1.0, desc)


# -------------------------------------------------------- pool files

def pool_store(pool: TaskPool) -> ClassStore:
    names, data = [], {}
    for t in pool.tasks:
        for split, X, Y in (("train", t.x_train, t.y_train), ("val", t.x_val, t.y_val)):
            for lab in range(pool.k):
                name = f"t{t.task_id}.{split}.{lab}"
                names.append(name)
                data[name] = X[Y == lab].reshape(-1, pool.d)
    return ClassStore(pool.d, pool.k, tuple(names), data)


def save_pool(pool: TaskPool, directory) -> tuple:
    """Write ``<role>.pool`` (store format) and ``<role>.manifest.json``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    data_path = directory / f"{pool.role}.pool"
    manifest_path = directory / f"{pool.role}.manifest.json"
    _atomic_write(data_path, store_text(pool_store(pool)))
    manifest = {
        "role": pool.role, "count": pool.l, "m": pool.m, "n": pool.n, "d": pool.d, "k": pool.k,
        "r_z": pool.r_z, "descriptor": pool.descriptor,
        "tasks": [{"id": t.task_id, "meta": t.meta} for t in pool.tasks],
    }
    _atomic_write(manifest_path, json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return data_path, manifest_path


def load_pool(directory, role: str) -> TaskPool:
    directory = Path(directory)
    manifest = json.loads((directory / f"{role}.manifest.json").read_text())
    store = load_embedded_dataset(directory / f"{role}.pool", unit_norm=False)
    d, k = manifest["d"], manifest["k"]
    tasks = []
    for entry in manifest["tasks"]:
        tid = entry["id"]
        parts = {}
        for split in ("train", "val"):
            blocks = [store.data[f"t{tid}.{split}.{lab}"] for lab in range(k)]
            X = np.concatenate(blocks).reshape(-1, d)
            Y = np.concatenate([np.full(len(b), lab) for lab, b in enumerate(blocks)])
            parts[split] = (X, Y)
        tasks.append(TaskDataset(tid, *parts["train"], *parts["val"], entry["meta"]))
    pool = TaskPool(manifest["role"], tuple(tasks), k, manifest["r_z"], manifest["descriptor"])
    if (pool.l, pool.m, pool.n) != (manifest["count"], manifest["m"], manifest["n"]):
        raise ValueError(f"{directory}: pool shape disagrees with its manifest")
    return pool


def _atomic_write(path: Path, text: str):
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)
