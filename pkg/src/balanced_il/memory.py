"""Replay memory: per-class exemplar lists under growing or fixed budgets."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .autodiff import Tensor
from .data import LabeledDataset, concat
from .errors import FormatError

POLICIES = ("growing", "fixed")
SELECTIONS = ("herding", "random")


def herding_select(features, m: int) -> list[int]:
    """Greedy mean matching; returns indices in selection (priority) order.

    At step ``s`` the candidate whose addition brings the running exemplar mean
    closest to the class mean is chosen. Near-ties go to the smaller index.
    """
    f = np.asarray(features.values if isinstance(features, Tensor) else features,
                   dtype=np.float64)
    n = len(f)
    if not 1 <= m <= n:
        raise ValueError(f"need 1 <= m <= n, got m={m}, n={n}")
    if not np.all(np.isfinite(f)):
        raise ValueError("features must be finite")
    mu = f.mean(axis=0)
    running = np.zeros(f.shape[1])
    free = np.ones(n, dtype=bool)
    order = []
    for s in range(1, m + 1):
        cand = np.flatnonzero(free)
        dist = np.sum((mu - (running + f[cand]) / s) ** 2, axis=1)
        best = dist.min()
        pick = cand[np.flatnonzero(dist <= best + 1e-12 * max(1.0, best))[0]]
        order.append(int(pick))
        free[pick] = False
        running += f[pick]
    return order


def random_select(n: int, m: int, seed: int = 0) -> list[int]:
    if not 1 <= m <= n:
        raise ValueError(f"need 1 <= m <= n, got m={m}, n={n}")
    return [int(i) for i in np.random.default_rng(seed).choice(n, size=m, replace=False)]


class ReplayMemory:
    """Exemplar store for old classes.

    ``store`` maps a class id to row ids into ``source`` (the full training
    dataset, remapped), kept in priority order so that shrinking a class is a
    prefix truncation.

    Args:
        policy: ``"growing"`` keeps ``size`` exemplars per class; ``"fixed"``
            shares a total budget of ``size`` across stored classes.
        size: per-class count or total budget. Zero means no memory.
        selection: ``"herding"`` or ``"random"``.
        herding_features: ``"initial"`` (default) embeds with the model as it
            was when the step started, before this step's parameter updates;
            ``"trained"`` with the model that has just finished the step.
    """

    def __init__(self, policy: str = "growing", size: int = 20, selection: str = "herding",
                 source: LabeledDataset | None = None, seed: int = 0,
                 herding_features: str = "initial"):
        if policy not in POLICIES:
            raise ValueError(f"unknown memory policy {policy!r}")
        if selection not in SELECTIONS:
            raise ValueError(f"unknown selection method {selection!r}")
        if herding_features not in ("trained", "initial"):
            raise ValueError(f"unknown herding_features {herding_features!r}")
        if size < 0:
            raise ValueError("memory size must be >= 0")
        self.policy = policy
        self.size = int(size)
        self.selection = selection
        self.source = source
        self.seed = seed
        self.herding_features = herding_features
        self.store: dict[int, list[int]] = {}

    @property
    def classes(self) -> list[int]:
        return sorted(self.store)

    def __len__(self) -> int:
        return sum(len(v) for v in self.store.values())

    def quota(self, num_classes: int | None = None) -> int:
        """Exemplars per class once ``num_classes`` classes are stored."""
        if self.policy == "growing":
            return self.size
        k = len(self.store) if num_classes is None else num_classes
        return self.size // k if k else self.size

    def update(self, new_data: LabeledDataset, model=None) -> None:
        """Select exemplars for every class in ``new_data``.

        ``new_data.ids`` must index ``self.source``. Under the fixed policy the
        quota is recomputed and every stored list is prefix-truncated.
        """
        per_class = new_data.class_indices()
        clash = sorted(set(per_class) & set(self.store))
        if clash:
            raise ValueError(f"classes already stored in memory: {clash}")
        quota = self.quota(len(self.store) + len(per_class))
        for c in sorted(per_class):
            rows = per_class[c]
            m = min(quota, len(rows))
            if m == 0:
                chosen = []
            elif self.selection == "herding":
                if model is None:
                    raise ValueError("herding needs a model to embed samples")
                feats = model.extract_features(new_data.samples[rows])
                chosen = herding_select(feats, m)
            else:
                chosen = random_select(len(rows), m, seed=self.seed * 100003 + c)
            self.store[c] = [int(new_data.ids[rows[i]]) for i in chosen]
        if self.policy == "fixed":
            for c in self.store:
                self.store[c] = self.store[c][:quota]

    def exemplars(self) -> LabeledDataset | None:
        """Stored samples as a dataset (rows taken from ``source``)."""
        ids = [i for c in self.classes for i in self.store[c]]
        if not ids:
            return None
        if self.source is None:
            raise ValueError("memory has no source dataset attached")
        pos = np.searchsorted(self.source.ids, ids)
        return self.source.subset(pos)

    # -- text serialization ------------------------------------------------

    def save(self, path) -> None:
        """One line per class: ``<class_id>\\t<id> <id> ...`` in priority order."""
        lines = [f"# policy={self.policy} size={self.size} selection={self.selection}"]
        for c in self.classes:
            lines.append(f"{c}\t" + " ".join(str(i) for i in self.store[c]))
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def load(cls, path, source: LabeledDataset | None = None) -> "ReplayMemory":
        text = Path(path).read_text().splitlines()
        if not text or not text[0].startswith("# "):
            raise FormatError(f"{path}: missing memory header")
        try:
            meta = dict(kv.split("=", 1) for kv in text[0][2:].split())
            mem = cls(meta["policy"], int(meta["size"]), meta["selection"], source)
            for line in text[1:]:
                if not line.strip():
                    continue
                cid, _, ids = line.partition("\t")
                mem.store[int(cid)] = [int(i) for i in ids.split()]
        except (KeyError, ValueError) as exc:
            raise FormatError(f"{path}: malformed memory file ({exc})") from None
        return mem


def training_set(step_data: LabeledDataset, mem: ReplayMemory | None,
                 num_classes: int | None = None) -> tuple[LabeledDataset, np.ndarray]:
    """Merge the step's data with stored exemplars; also return per-class counts."""
    n = num_classes or step_data.num_classes
    parts = [step_data]
    if mem is not None:
        overlap = sorted(set(mem.store) & set(np.unique(step_data.labels).tolist()))
        if overlap:
            raise ValueError(f"step data overlaps stored classes {overlap}")
        stored = mem.exemplars()
        if stored is not None:
            parts.insert(0, stored)
    merged = concat(parts, n)
    return merged, merged.class_counts(n)

