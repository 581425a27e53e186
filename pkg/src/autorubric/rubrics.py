"""Verifiable rubric generation: generate, verify, refine, discard, and structure.

Each labeled pair gets one rubric. The rubric is checked by a fresh verifier
call that sees only the rubric and the pair; failures are refined with the
verifier's critique until the rubric verifies or the refinement budget
``t_max`` runs out. Verified rubrics are then consolidated into a single
:class:`StructuredRubric` used as the judge's conditioning block.
"""

from __future__ import annotations

import enum
import json
import logging
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

from . import prompts
from .judge import Gateway, JudgeError, TextPart, VerdictParseError, as_gateway, make_tag, parse_verdict
from .preference import PreferenceDataset, PreferencePair

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1


class RubricError(RuntimeError):
    pass


class StoreFormatError(RubricError):
    pass


class PipelineAborted(RubricError):
    """Backend failure stopped the run. ``store`` holds the flushed partial result."""

    def __init__(self, message: str, store: "RubricStore"):
        super().__init__(message)
        self.store = store


class Status(enum.Enum):
    PENDING = "pending"
    VERIFIED = "verified"
    DISCARDED = "discarded"


@dataclass(frozen=True)
class Attempt:
    attempt_text: str
    verifier_critique: str


@dataclass(frozen=True)
class RubricRecord:
    rubric_id: str
    source_pair_id: str
    text: str
    status: Status = Status.PENDING
    attempts: int = 0
    history: tuple[Attempt, ...] = ()

    @property
    def criteria(self) -> list[str]:
        return criteria_lines(self.text)

    def to_dict(self) -> dict:
        return {
            "rubric_id": self.rubric_id,
            "source_pair_id": self.source_pair_id,
            "text": self.text,
            "status": self.status.value,
            "attempts": self.attempts,
            "history": [{"attempt_text": h.attempt_text, "verifier_critique": h.verifier_critique} for h in self.history],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RubricRecord":
        return cls(
            rubric_id=d["rubric_id"],
            source_pair_id=d["source_pair_id"],
            text=d["text"],
            status=Status(d["status"]),
            attempts=int(d["attempts"]),
            history=tuple(Attempt(h["attempt_text"], h["verifier_critique"]) for h in d["history"]),
        )


@dataclass(frozen=True)
class StoreStats:
    generated: int = 0
    verified_first_try: int = 0
    refined_then_verified: int = 0
    discarded: int = 0

    @classmethod
    def from_records(cls, records: Sequence[RubricRecord]) -> "StoreStats":
        return cls(
            generated=len(records),
            verified_first_try=sum(r.status is Status.VERIFIED and r.attempts == 0 for r in records),
            refined_then_verified=sum(r.status is Status.VERIFIED and r.attempts > 0 for r in records),
            discarded=sum(r.status is Status.DISCARDED for r in records),
        )

    def to_dict(self) -> dict:
        return {
            "generated": self.generated,
            "verified_first_try": self.verified_first_try,
            "refined_then_verified": self.refined_then_verified,
            "discarded": self.discarded,
        }


@dataclass(frozen=True)
class RubricStore:
    records: tuple[RubricRecord, ...]
    stats: StoreStats
    complete: bool = True
    template_hashes: dict = field(default_factory=prompts.template_hashes)

    @classmethod
    def from_records(cls, records: Sequence[RubricRecord], complete: bool = True) -> "RubricStore":
        records = tuple(records)
        return cls(records=records, stats=StoreStats.from_records(records), complete=complete)

    @property
    def verified(self) -> list[RubricRecord]:
        return [r for r in self.records if r.status is Status.VERIFIED]


@dataclass(frozen=True)
class Criterion:
    rubric_id: str
    text: str


@dataclass(frozen=True)
class Dimension:
    name: str
    operationalization: str
    criteria: tuple[Criterion, ...]


@dataclass(frozen=True)
class StructuredRubric:
    dimensions: tuple[Dimension, ...]
    provenance: tuple[str, ...]

    def __post_init__(self):
        if not self.dimensions:
            raise RubricError("structured rubric needs at least one dimension")
        known = set(self.provenance)
        for dim in self.dimensions:
            for c in dim.criteria:
                if c.rubric_id not in known:
                    raise RubricError(f"criterion traces to unknown rubric {c.rubric_id!r}")

    @property
    def rendered(self) -> str:
        lines = []
        for i, dim in enumerate(self.dimensions, start=1):
            lines.append(f"{i}. {dim.name}: {dim.operationalization}".rstrip())
            lines.extend(f"   - {c.text}" for c in dim.criteria)
        return "\n".join(lines) + "\n"

    @property
    def criteria(self) -> list[Criterion]:
        return [c for dim in self.dimensions for c in dim.criteria]

    def to_dict(self) -> dict:
        return {
            "dimensions": [
                {
                    "name": d.name,
                    "operationalization": d.operationalization,
                    "criteria": [{"rubric_id": c.rubric_id, "text": c.text} for c in d.criteria],
                }
                for d in self.dimensions
            ],
            "provenance": list(self.provenance),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "StructuredRubric":
        return cls(
            dimensions=tuple(
                Dimension(
                    x["name"],
                    x["operationalization"],
                    tuple(Criterion(c["rubric_id"], c["text"]) for c in x["criteria"]),
                )
                for x in d["dimensions"]
            ),
            provenance=tuple(d["provenance"]),
        )


@dataclass(frozen=True)
class PipelineConfig:
    t_max: int = 5
    concurrency_bound: int = 4
    store_path: str | Path | None = None

    def __post_init__(self):
        if self.t_max < 1:
            raise ValueError("t_max must be >= 1")
        if self.concurrency_bound < 1:
            raise ValueError("concurrency_bound must be >= 1")


@dataclass(frozen=True)
class Verification:
    verdict: bool
    critique: str


_BULLET_RE = re.compile(r"^\s*(?:[-*•]|\d+[.)])\s+(.*\S)\s*$")


def criteria_lines(text: str) -> list[str]:
    """Bulleted or numbered lines of a rubric; the whole text if there are none."""
    found = [m.group(1) for line in text.splitlines() if (m := _BULLET_RE.match(line))]
    if found:
        return found
    stripped = text.strip()
    return [stripped] if stripped else []


# -- per-pair stages ----------------------------------------------------------


def generate_rubric(pair: PreferencePair, backend) -> RubricRecord:
    if pair.label is None:
        raise RubricError(f"pair {pair.id!r} is unlabeled; rubric generation needs the preferred side")
    gw = as_gateway(backend)
    req = gw.request(
        prompts.template("generate"),
        prompts.pair_parts(pair.prompt, pair.preferred, pair.dispreferred),
        make_tag("generate", pair.id),
    )
    text = gw.chat_complete(req).text.strip()
    if not text:
        raise RubricError(f"generator returned empty output for pair {pair.id!r}")
    return RubricRecord(rubric_id=f"r-{pair.id}", source_pair_id=pair.id, text=text)


def verify_rubric(pair: PreferencePair, record: RubricRecord, backend) -> Verification:
    """Judge the pair with the rubric as the only conditioning context."""
    if not record.text.strip():
        raise RubricError(f"rubric {record.rubric_id!r} is empty")
    if pair.label is None:
        raise RubricError(f"pair {pair.id!r} is unlabeled")
    gw = as_gateway(backend)
    req = gw.request(
        prompts.template("verify") + record.text.strip() + "\n",
        prompts.pair_parts(pair.prompt, pair.first, pair.second),
        make_tag("verify", pair.id),
    )
    verdict = parse_verdict(gw.chat_complete(req).text)
    ok = verdict.preferred is pair.label
    critique = verdict.rationale
    if not ok and not critique:
        critique = f"Applying the rubric selected the {verdict.preferred.value} output, contradicting the label."
    return Verification(ok, critique)


def refine_rubric(pair: PreferencePair, record: RubricRecord, critique: str, backend, t_max: int = 5) -> RubricRecord:
    if record.status is not Status.PENDING:
        raise RubricError(f"rubric {record.rubric_id!r} is {record.status.value}, not pending")
    if record.attempts >= t_max:
        raise RubricError(f"rubric {record.rubric_id!r} exhausted its {t_max} refinement attempts")
    gw = as_gateway(backend)
    parts = prompts.pair_parts(pair.prompt, pair.preferred, pair.dispreferred)
    parts += [TextPart(f"Current rubric:\n{record.text}"), TextPart(f"Critique:\n{critique}")]
    req = gw.request(prompts.template("refine"), parts, make_tag("refine", pair.id))
    text = gw.chat_complete(req).text.strip()
    if not text:
        raise RubricError(f"refiner returned empty output for pair {pair.id!r}")
    return replace(
        record,
        text=text,
        attempts=record.attempts + 1,
        history=record.history + (Attempt(text, critique),),
    )


def _safe_verify(pair, record, backend) -> Verification:
    try:
        return verify_rubric(pair, record, backend)
    except VerdictParseError as exc:
        # unparseable verifier output counts as a failed check
        return Verification(False, f"verifier output unparseable: {exc}")


def process_pair(
    pair: PreferencePair,
    t_max: int,
    gen_backend,
    verify_backend=None,
    refine_backend=None,
) -> RubricRecord:
    verify_backend = verify_backend or gen_backend
    refine_backend = refine_backend or gen_backend
    record = generate_rubric(pair, gen_backend)
    while True:
        check = _safe_verify(pair, record, verify_backend)
        if check.verdict:
            return replace(record, status=Status.VERIFIED)
        if record.attempts >= t_max:
            return replace(record, status=Status.DISCARDED)
        record = refine_rubric(pair, record, check.critique, refine_backend, t_max)


def run_pipeline(
    dataset: PreferenceDataset,
    cfg: PipelineConfig,
    backend,
    *,
    verify_backend=None,
    refine_backend=None,
) -> RubricStore:
    unlabeled = [p.id for p in dataset if p.label is None]
    if unlabeled:
        raise RubricError(f"rubric pipeline needs labeled pairs; unlabeled: {unlabeled[:5]}")

    def work(pair):
        try:
            return process_pair(pair, cfg.t_max, backend, verify_backend, refine_backend)
        except JudgeError as exc:
            return exc

    if cfg.concurrency_bound == 1:
        results = [work(p) for p in dataset]
    else:
        with ThreadPoolExecutor(max_workers=cfg.concurrency_bound) as pool:
            results = list(pool.map(work, dataset.pairs))

    records = [r for r in results if isinstance(r, RubricRecord)]
    failures = [r for r in results if not isinstance(r, RubricRecord)]
    store = RubricStore.from_records(records, complete=not failures)
    if cfg.store_path is not None:
        persist_store(store, cfg.store_path)
    if failures:
        raise PipelineAborted(f"{len(failures)} pair(s) failed: {failures[0]}", store)
    s = store.stats
    logger.info(
        "rubrics: %d generated, %d verified first try, %d after refinement, %d discarded",
        s.generated, s.verified_first_try, s.refined_then_verified, s.discarded,
    )
    return store


# -- structuring ----------------------------------------------------------------


_FENCE_RE = re.compile(r"```[ \t]*(?:rubric)?[ \t]*\n(.*?)```", re.DOTALL)
_CRITERION_RE = re.compile(r"^-\s*\[([^\]]+)\]\s*(.+?)\s*$")


def parse_structured(text: str, known_ids: Sequence[str]) -> StructuredRubric:
    """Parse the structurer's fenced block. Prose outside the block is ignored."""
    m = _FENCE_RE.search(text)
    if m is None:
        raise RubricError("structuring output has no fenced rubric block")
    dims: list[Dimension] = []
    name = op = None
    crit: list[Criterion] = []
    known = set(known_ids)

    def close():
        if name is not None:
            if not crit:
                raise RubricError(f"dimension {name!r} has no criteria")
            dims.append(Dimension(name, op or "", tuple(crit)))

    for raw in m.group(1).splitlines():
        line = raw.strip()
        if not line:
            continue
        if line.startswith("##"):
            close()
            name, op, crit = line.lstrip("#").strip(), None, []
        elif line.lower().startswith("operationalization:"):
            if name is None:
                raise RubricError("operationalization before any dimension")
            op = line.split(":", 1)[1].strip()
        elif line.startswith("-"):
            cm = _CRITERION_RE.match(line)
            if name is None or cm is None:
                raise RubricError(f"unparseable criterion line: {line!r}")
            rid = cm.group(1).strip()
            if rid not in known:
                raise RubricError(f"criterion cites unknown or unverified rubric {rid!r}")
            crit.append(Criterion(rid, cm.group(2)))
        else:
            raise RubricError(f"unexpected line in rubric block: {line!r}")
    close()
    if not dims:
        raise RubricError("structuring output has no dimensions")
    return StructuredRubric(tuple(dims), tuple(known_ids))


def flat_rubric(records: Sequence[RubricRecord], name: str = "Selected criteria") -> StructuredRubric:
    """Single-dimension rubric built locally from records, without a structuring call."""
    if not records:
        raise RubricError("no rubrics to combine")
    crit = tuple(Criterion(r.rubric_id, c) for r in records for c in r.criteria)
    dim = Dimension(name, "Check each criterion on each output independently.", crit)
    return StructuredRubric((dim,), tuple(r.rubric_id for r in records))


def structure_rubrics(store: RubricStore | Sequence[RubricRecord], backend) -> StructuredRubric:
    records = store.verified if isinstance(store, RubricStore) else [r for r in store if r.status is Status.VERIFIED]
    if not records:
        raise RubricError("no verified rubrics to structure")
    if len(records) == 1:
        return flat_rubric(records, name="Overall alignment")
    gw = as_gateway(backend)
    body = "\n\n".join(f"Rubric {r.rubric_id}:\n" + "\n".join(f"- {c}" for c in r.criteria) for r in records)
    req = gw.request(prompts.template("structure"), [TextPart(body)], make_tag("structure"))
    return parse_structured(gw.chat_complete(req).text, [r.rubric_id for r in records])


def save_structured(rubric: StructuredRubric, path: str | Path) -> Path:
    """Write the rendered block and a provenance sidecar next to it."""
    path = Path(path)
    path.write_text(rubric.rendered, encoding="utf-8", newline="\n")
    sidecar = path.with_name(path.name + ".provenance.json")
    sidecar.write_text(json.dumps(rubric.to_dict(), indent=2, ensure_ascii=False) + "\n", encoding="utf-8", newline="\n")
    return sidecar


def load_structured(path: str | Path) -> StructuredRubric:
    path = Path(path)
    sidecar = path.with_name(path.name + ".provenance.json")
    if not sidecar.exists():
        raise FileNotFoundError(f"provenance sidecar not found: {sidecar}")
    rubric = StructuredRubric.from_dict(json.loads(sidecar.read_text(encoding="utf-8")))
    if path.exists() and path.read_text(encoding="utf-8") != rubric.rendered:
        raise RubricError(f"{path} does not match its provenance sidecar")
    return rubric


# -- persistence ----------------------------------------------------------------


def _dump(obj: dict) -> str:
    return json.dumps(obj, ensure_ascii=False, separators=(",", ":")) + "\n"


def dumps_store(store: RubricStore) -> str:
    lines = [_dump({"schema_version": SCHEMA_VERSION, "kind": "rubric", **r.to_dict()}) for r in store.records]
    lines.append(
        _dump(
            {
                "schema_version": SCHEMA_VERSION,
                "kind": "stats",
                "stats": store.stats.to_dict(),
                "complete": store.complete,
                "template_hashes": dict(sorted(store.template_hashes.items())),
            }
        )
    )
    return "".join(lines)


def persist_store(store: RubricStore, path: str | Path) -> None:
    Path(path).write_bytes(dumps_store(store).encode("utf-8"))


def loads_store(data: bytes) -> RubricStore:
    records: list[RubricRecord] = []
    trailer = None
    offset = 0
    for raw in data.splitlines(keepends=True):
        if trailer is not None:
            raise StoreFormatError(f"byte {offset}: content after the stats record")
        if not raw.endswith(b"\n"):
            raise StoreFormatError(f"byte {offset}: truncated record (no line terminator)")
        try:
            obj = json.loads(raw.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise StoreFormatError(f"byte {offset}: unparseable record: {exc}") from exc
        version = obj.get("schema_version")
        if version != SCHEMA_VERSION:
            raise StoreFormatError(f"byte {offset}: schema_version {version!r}, expected {SCHEMA_VERSION}")
        try:
            if obj.get("kind") == "rubric":
                records.append(RubricRecord.from_dict(obj))
            elif obj.get("kind") == "stats":
                trailer = obj
            else:
                raise StoreFormatError(f"byte {offset}: unknown record kind {obj.get('kind')!r}")
        except (KeyError, ValueError, TypeError) as exc:
            raise StoreFormatError(f"byte {offset}: malformed record: {exc}") from exc
        offset += len(raw)
    if trailer is None:
        raise StoreFormatError(f"byte {offset}: truncated store (missing stats record)")
    stats = StoreStats(**trailer["stats"])
    if stats != StoreStats.from_records(records):
        raise StoreFormatError("stats record does not match the rubric records")
    return RubricStore(tuple(records), stats, bool(trailer["complete"]), dict(trailer["template_hashes"]))


def load_store(path: str | Path) -> RubricStore:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"rubric store not found: {path}")
    return loads_store(path.read_bytes())
