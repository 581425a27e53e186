"""Preference pairs, candidates, and the newline-delimited dataset format."""

from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence


class PreferenceError(ValueError):
    """Raised for malformed candidates, pairs, or dataset files."""


class Label(enum.Enum):
    FIRST = "first"
    SECOND = "second"

    def flipped(self) -> "Label":
        return Label.SECOND if self is Label.FIRST else Label.FIRST


_CONTENT_KEYS = ("text", "media_uri", "feature_vector")


@dataclass(frozen=True)
class Candidate:
    """One candidate output. Exactly one of the content fields is set."""

    id: str
    text: str | None = None
    media_uri: str | None = None
    feature_vector: tuple[float, ...] | None = None

    def __post_init__(self):
        if self.feature_vector is not None and not isinstance(self.feature_vector, tuple):
            object.__setattr__(self, "feature_vector", tuple(float(v) for v in self.feature_vector))

    @property
    def content_kind(self) -> str:
        kinds = [k for k in _CONTENT_KEYS if getattr(self, k) is not None]
        return kinds[0] if len(kinds) == 1 else ""

    def to_dict(self) -> dict:
        out: dict = {"id": self.id}
        for key in _CONTENT_KEYS:
            value = getattr(self, key)
            if value is not None:
                out[key] = list(value) if key == "feature_vector" else value
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "Candidate":
        if not isinstance(data, dict):
            raise PreferenceError("candidate must be an object")
        if "id" not in data or not isinstance(data["id"], str):
            raise PreferenceError("candidate missing string 'id'")
        unknown = set(data) - {"id", *_CONTENT_KEYS}
        if unknown:
            raise PreferenceError(f"candidate has unknown fields {sorted(unknown)}")
        present = [k for k in _CONTENT_KEYS if k in data]
        if len(present) != 1:
            raise PreferenceError(
                f"candidate {data['id']!r} must carry exactly one of {_CONTENT_KEYS}, got {present}"
            )
        key = present[0]
        value = data[key]
        if key == "feature_vector":
            if not isinstance(value, list) or not all(
                isinstance(v, (int, float)) and not isinstance(v, bool) for v in value
            ):
                raise PreferenceError(f"candidate {data['id']!r}: feature_vector must be a list of numbers")
            return cls(id=data["id"], feature_vector=tuple(float(v) for v in value))
        if not isinstance(value, str):
            raise PreferenceError(f"candidate {data['id']!r}: {key} must be a string")
        return cls(id=data["id"], **{key: value})


@dataclass(frozen=True)
class PreferencePair:
    id: str
    prompt: str
    first: Candidate
    second: Candidate
    label: Label | None = None

    @property
    def preferred(self) -> Candidate:
        if self.label is None:
            raise PreferenceError(f"pair {self.id!r} is unlabeled")
        return self.first if self.label is Label.FIRST else self.second

    @property
    def dispreferred(self) -> Candidate:
        if self.label is None:
            raise PreferenceError(f"pair {self.id!r} is unlabeled")
        return self.second if self.label is Label.FIRST else self.first

    def to_dict(self) -> dict:
        out = {
            "id": self.id,
            "prompt": self.prompt,
            "first": self.first.to_dict(),
            "second": self.second.to_dict(),
        }
        if self.label is not None:
            out["label"] = self.label.value
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "PreferencePair":
        if not isinstance(data, dict):
            raise PreferenceError("record must be an object")
        for key in ("id", "prompt", "first", "second"):
            if key not in data:
                raise PreferenceError(f"record missing {key!r}")
        if not isinstance(data["id"], str) or not isinstance(data["prompt"], str):
            raise PreferenceError("'id' and 'prompt' must be strings")
        unknown = set(data) - {"id", "prompt", "first", "second", "label"}
        if unknown:
            raise PreferenceError(f"record has unknown fields {sorted(unknown)}")
        label = data.get("label")
        if label is not None:
            try:
                label = Label(label)
            except ValueError:
                # ties and anything else are rejected rather than guessed
                raise PreferenceError(f"label must be 'first' or 'second', got {label!r}") from None
        return cls(
            id=data["id"],
            prompt=data["prompt"],
            first=Candidate.from_dict(data["first"]),
            second=Candidate.from_dict(data["second"]),
            label=label,
        )


@dataclass(frozen=True)
class PreferenceDataset:
    pairs: tuple[PreferencePair, ...]
    name: str = "dataset"

    def __post_init__(self):
        if not isinstance(self.pairs, tuple):
            object.__setattr__(self, "pairs", tuple(self.pairs))
        seen: set[str] = set()
        for pair in self.pairs:
            if pair.id in seen:
                raise PreferenceError(f"duplicate pair id {pair.id!r}")
            seen.add(pair.id)

    def __len__(self) -> int:
        return len(self.pairs)

    def __iter__(self):
        return iter(self.pairs)

    def __getitem__(self, idx):
        return self.pairs[idx]

    @property
    def labeled(self) -> bool:
        return all(p.label is not None for p in self.pairs)

    def subset(self, ids: Iterable[str], name: str | None = None) -> "PreferenceDataset":
        wanted = set(ids)
        return PreferenceDataset(tuple(p for p in self.pairs if p.id in wanted), name or self.name)


def swap_pair(pair: PreferencePair) -> PreferencePair:
    """Exchange the two candidates; the label follows its candidate."""
    label = pair.label.flipped() if pair.label is not None else None
    return replace(pair, first=pair.second, second=pair.first, label=label)


def _validate_candidate(c: Candidate) -> None:
    present = [k for k in _CONTENT_KEYS if getattr(c, k) is not None]
    if len(present) != 1:
        raise PreferenceError(f"content variant violation: candidate {c.id!r} has {present or 'no content'}")
    if c.feature_vector is not None:
        if len(c.feature_vector) == 0:
            raise PreferenceError(f"content variant violation: candidate {c.id!r} has empty feature_vector")
        if not all(math.isfinite(v) for v in c.feature_vector):
            raise PreferenceError(f"non-finite feature in candidate {c.id!r}")


def validate_pair(pair: PreferencePair) -> None:
    if pair.first.id == pair.second.id:
        raise PreferenceError(f"duplicate candidate id {pair.first.id!r} in pair {pair.id!r}")
    _validate_candidate(pair.first)
    _validate_candidate(pair.second)


def dumps_pair(pair: PreferencePair) -> str:
    return json.dumps(pair.to_dict(), ensure_ascii=False, separators=(", ", ": "))


def serialize_dataset(dataset: PreferenceDataset) -> str:
    return "".join(dumps_pair(p) + "\n" for p in dataset.pairs)


def save_dataset(dataset: PreferenceDataset, path: str | Path) -> None:
    Path(path).write_text(serialize_dataset(dataset), encoding="utf-8", newline="\n")


def parse_dataset(text: str, name: str = "dataset") -> PreferenceDataset:
    pairs: list[PreferencePair] = []
    seen: dict[str, int] = {}
    for lineno, line in enumerate(text.split("\n"), start=1):
        if not line.strip():
            continue
        try:
            pair = PreferencePair.from_dict(json.loads(line))
            validate_pair(pair)
        except (json.JSONDecodeError, PreferenceError) as exc:
            raise PreferenceError(f"line {lineno}: {exc}") from exc
        if pair.id in seen:
            raise PreferenceError(f"line {lineno}: duplicate pair id {pair.id!r} (first seen on line {seen[pair.id]})")
        seen[pair.id] = lineno
        pairs.append(pair)
    return PreferenceDataset(tuple(pairs), name)


def load_dataset(path: str | Path) -> PreferenceDataset:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"dataset not found: {path}")
    return parse_dataset(path.read_text(encoding="utf-8"), name=path.stem)


def synthetic_feature_dataset(
    n: int,
    weights: Sequence[float],
    rng,
    *,
    name: str = "synthetic",
    label_noise: float = 0.0,
) -> PreferenceDataset:
    """Random feature-vector pairs labeled by a linear scoring rule.

    Labels follow sign(w . (f1 - f2)); `label_noise` flips a fraction of them.
    """
    d = len(weights)
    w = [float(v) for v in weights]
    pairs = []
    for i in range(n):
        f1 = [float(v) for v in rng.normal(size=d)]
        f2 = [float(v) for v in rng.normal(size=d)]
        s1 = sum(a * b for a, b in zip(w, f1))
        s2 = sum(a * b for a, b in zip(w, f2))
        label = Label.FIRST if s1 >= s2 else Label.SECOND
        if label_noise and rng.random() < label_noise:
            label = label.flipped()
        pairs.append(
            PreferencePair(
                id=f"p{i:05d}",
                prompt=f"synthetic prompt {i}",
                first=Candidate(f"p{i:05d}-a", feature_vector=tuple(f1)),
                second=Candidate(f"p{i:05d}-b", feature_vector=tuple(f2)),
                label=label,
            )
        )
    return PreferenceDataset(tuple(pairs), name)


def axis_decided_dataset(
    n: int,
    d: int,
    rng,
    *,
    name: str = "axis-decided",
    label_noise: float = 0.0,
) -> PreferenceDataset:
    """Pairs that differ on exactly one quality axis, cycling through the `d` axes.

    Candidates agree on every other coordinate, so only a judge that attends to
    the deciding axis can separate them. The higher value on that axis is
    preferred unless `label_noise` flips the label.
    """
    pairs = []
    for i in range(n):
        axis = i % d
        base = [float(v) for v in rng.normal(size=d)]
        gap = float(rng.uniform(0.5, 2.0))
        hi, lo = list(base), list(base)
        hi[axis] += gap
        first_wins = bool(rng.random() < 0.5)
        f1, f2 = (hi, lo) if first_wins else (lo, hi)
        label = Label.FIRST if first_wins else Label.SECOND
        if label_noise and rng.random() < label_noise:
            label = label.flipped()
        pairs.append(
            PreferencePair(
                id=f"p{i:05d}",
                prompt=f"axis {axis} prompt {i}",
                first=Candidate(f"p{i:05d}-a", feature_vector=tuple(f1)),
                second=Candidate(f"p{i:05d}-b", feature_vector=tuple(f2)),
                label=label,
            )
        )
    return PreferenceDataset(tuple(pairs), name)
