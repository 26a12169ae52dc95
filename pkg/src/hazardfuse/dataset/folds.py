from __future__ import annotations

from dataclasses import dataclass

from .corpus import floor_sort_key


@dataclass(frozen=True)
class Fold:
    test_floor: str
    train_floors: tuple

    def split(self, frames):
        train = [f for f in frames if f.floor in self.train_floors]
        test = [f for f in frames if f.floor == self.test_floor]
        return train, test


@dataclass(frozen=True)
class FoldPlan:
    folds: tuple

    def to_dict(self) -> dict:
        return {"folds": [{"test": f.test_floor, "train": list(f.train_floors)} for f in self.folds]}

    @classmethod
    def from_dict(cls, d: dict) -> "FoldPlan":
        return cls(tuple(Fold(f["test"], tuple(f["train"])) for f in d["folds"]))


def make_folds(frames) -> FoldPlan:
    """Leave-one-floor-out: one fold per floor, tested on it, trained on the rest."""
    floors = sorted({f.floor for f in frames}, key=floor_sort_key)
    if len(floors) < 2:
        raise ValueError(f"cross-validation needs >= 2 floors, got {floors}")
    return FoldPlan(tuple(Fold(t, tuple(x for x in floors if x != t)) for t in floors))
