"""Meta-prompt templates and candidate rendering shared by the pipeline and evaluator."""

from __future__ import annotations

import hashlib
import json
from functools import lru_cache
from importlib import resources

from .judge import ImagePart, TextPart
from .preference import Candidate

TEMPLATE_NAMES = ("generate", "verify", "refine", "structure", "judge")
TEMPLATE_VERSION = "1"


@lru_cache(maxsize=None)
def template(name: str) -> str:
    if name not in TEMPLATE_NAMES:
        raise KeyError(name)
    return resources.files("autorubric.templates").joinpath(f"{name}.txt").read_text(encoding="utf-8")


def template_hashes() -> dict[str, str]:
    return {name: hashlib.sha256(template(name).encode("utf-8")).hexdigest()[:16] for name in TEMPLATE_NAMES}


def candidate_parts(slot: int, candidate: Candidate) -> list[TextPart | ImagePart]:
    if candidate.feature_vector is not None:
        return [TextPart(f"Candidate {slot} features: {json.dumps(list(candidate.feature_vector))}")]
    if candidate.media_uri is not None:
        return [TextPart(f"Candidate {slot}:"), ImagePart(candidate.media_uri)]
    return [TextPart(f"Candidate {slot}:\n{candidate.text}")]


def pair_parts(prompt: str, first: Candidate, second: Candidate) -> list[TextPart | ImagePart]:
    return [TextPart(f"Prompt: {prompt}"), *candidate_parts(1, first), *candidate_parts(2, second)]
