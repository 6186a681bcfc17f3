"""Two-level label hierarchies: verb clustering, LLM-voted object taxonomy.

Verbs cluster by their leading action word. Objects are categorized by an
external language model queried several times per object; the repeated
trials are reduced by majority vote so a single noisy completion cannot
flip the taxonomy.
"""

from __future__ import annotations

import json
import os
import re
import time
from collections import Counter
from dataclasses import dataclass, field

from .errors import ExternalServiceError, ValidationError

UNKNOWN_CATEGORY = "unknown"

# In-context example plus the instruction; {object} is substituted per query.
DEFAULT_PROMPT_TEMPLATE = (
    "Q: Categorize the following object into a broad category: chair.\n"
    "A: chair belongs to furniture.\n"
    "Complete the following dialog with the format of the example. "
    "Do not print any extra words!\n"
    "Q: Categorize the following object into a broad category: {object}.\n"
    "A: {object} belongs to "
)


@dataclass(frozen=True)
class Hierarchy:
    """Coarse categories over verbs and objects plus child->parent maps."""

    coarse_verbs: tuple[str, ...]
    coarse_objects: tuple[str, ...]
    verb_parent: tuple[int, ...]
    object_parent: tuple[int, ...]


@dataclass
class TaxonomyVote:
    """Audit record of one object's majority vote."""

    object_name: str
    proposals: dict[str, int]
    chosen: str
    tied: bool
    failed_trials: int = 0


@dataclass
class EndpointConfig:
    url: str
    key: str = ""
    model: str = "default"
    timeout: float = 30.0
    max_retries: int = 3
    backoff: float = 0.5

    @classmethod
    def from_env(cls) -> "EndpointConfig":
        url = os.environ.get("LOGICCAR_LLM_ENDPOINT", "")
        if not url:
            raise ExternalServiceError(
                "LOGICCAR_LLM_ENDPOINT is not set (required unless running offline from cache)"
            )
        return cls(url=url, key=os.environ.get("LOGICCAR_LLM_KEY", ""))


def slugify(name: str) -> str:
    """Lowercase; every non-alphanumeric character becomes an underscore."""
    return "".join(ch if ch.isalnum() else "_" for ch in name.lower())


def normalize_category(name: str) -> str:
    return name.strip().lower().rstrip(".,;:!?").strip()


def cluster_verbs(verbs: list[str] | tuple[str, ...]) -> tuple[tuple[str, ...], tuple[int, ...]]:
    """Group verb phrases by their first whitespace token, lowercased.

    Returns (coarse names in first-appearance order, per-verb parent index).
    """
    coarse: list[str] = []
    parents: list[int] = []
    for verb in verbs:
        tokens = verb.strip().split()
        if not tokens:
            raise ValidationError(f"empty verb phrase: {verb!r}")
        word = tokens[0].lower()
        if word not in coarse:
            coarse.append(word)
        parents.append(coarse.index(word))
    return tuple(coarse), tuple(parents)


def parse_completion(text: str, object_name: str) -> str | None:
    """Extract the category from `A: <object> belongs to <name>`.

    Returns the normalized name, or None when the completion does not
    match the expected dialogue format.
    """
    pattern = re.compile(
        r"A:\s*" + re.escape(object_name) + r"\s+belongs\s+to\s+(.+)", re.IGNORECASE
    )
    m = pattern.search(text)
    if m is None:
        return None
    name = normalize_category(m.group(1).splitlines()[0])
    return name or None


def _default_transport(endpoint: EndpointConfig, prompt: str) -> str:
    import requests

    headers = {"Content-Type": "application/json"}
    if endpoint.key:
        headers["Authorization"] = f"Bearer {endpoint.key}"
    resp = requests.post(
        endpoint.url,
        headers=headers,
        json={"model": endpoint.model, "prompt": prompt},
        timeout=endpoint.timeout,
    )
    resp.raise_for_status()
    body = resp.json()
    if "text" not in body:
        raise ExternalServiceError("completion response has no 'text' field")
    return str(body["text"])


def _cache_path(cache_dir: str, object_name: str, trial: int) -> str:
    return os.path.join(cache_dir, slugify(object_name), f"trial_{trial}.txt")


def _write_atomic(path: str, text: str) -> None:
    os.makedirs(os.path.dirname(path), exist_ok=True)
    tmp = path + ".tmp"
    with open(tmp, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)
    os.replace(tmp, path)


def query_llm_taxonomy(
    objects: list[str] | tuple[str, ...],
    template: str = DEFAULT_PROMPT_TEMPLATE,
    endpoint: EndpointConfig | None = None,
    trials: int = 19,
    cache_dir: str | None = None,
    offline: bool = False,
    transport=None,
    sleep=time.sleep,
) -> dict[str, list[str | None]]:
    """Collect `trials` taxonomy answers per object.

    Raw completions are cached under <cache_dir>/<slug(object)>/trial_<n>.txt
    and reused on later runs; offline=True never touches the network and
    requires a complete cache. Entries are normalized category names,
    UNKNOWN_CATEGORY for unparseable completions, or None for trials that
    failed after retries.
    """
    if trials < 1:
        raise ValidationError("trials must be >= 1")
    if offline and cache_dir is None:
        raise ValidationError("offline mode requires a cache directory")

    results: dict[str, list[str | None]] = {}
    for obj in objects:
        per_trial: list[str | None] = []
        for t in range(trials):
            raw: str | None = None
            if cache_dir is not None:
                path = _cache_path(cache_dir, obj, t)
                if os.path.exists(path):
                    with open(path, "r", encoding="utf-8") as fh:
                        raw = fh.read()
            if raw is None:
                if offline:
                    raise ExternalServiceError(
                        f"offline mode: missing cached trial {t} for object {obj!r}"
                    )
                raw = _fetch_with_retries(obj, template, endpoint, transport, sleep)
                if raw is not None and cache_dir is not None:
                    _write_atomic(_cache_path(cache_dir, obj, t), raw)
            if raw is None:
                per_trial.append(None)
            else:
                parsed = parse_completion(raw, obj)
                per_trial.append(parsed if parsed is not None else UNKNOWN_CATEGORY)
        results[obj] = per_trial
    return results


def _fetch_with_retries(obj, template, endpoint, transport, sleep) -> str | None:
    if transport is None:
        if endpoint is None:
            endpoint = EndpointConfig.from_env()
        send = lambda prompt: _default_transport(endpoint, prompt)
    else:
        send = lambda prompt: transport(endpoint, prompt)
    prompt = template.format(object=obj)
    delay = endpoint.backoff if endpoint is not None else 0.5
    retries = endpoint.max_retries if endpoint is not None else 3
    for attempt in range(retries):
        try:
            return send(prompt)
        except Exception:
            if attempt == retries - 1:
                return None
            sleep(delay)
            delay *= 2.0
    return None


def aggregate_votes(
    objects: list[str] | tuple[str, ...],
    trials: dict[str, list[str | None]],
) -> tuple[tuple[str, ...], tuple[int, ...], list[TaxonomyVote]]:
    """Majority vote per object; ties pick the lexicographically smallest
    tied name and set the tie flag.

    Returns (coarse names in first-appearance order over objects in input
    order, per-object parent index, per-object vote records).
    """
    coarse: list[str] = []
    parents: list[int] = []
    votes: list[TaxonomyVote] = []
    for obj in objects:
        if obj not in trials:
            raise ValidationError(f"no trials recorded for object {obj!r}")
        entries = trials[obj]
        valid = [normalize_category(e) for e in entries if e is not None]
        failed = sum(1 for e in entries if e is None)
        counts = Counter(v for v in valid if v)
        if not counts:
            chosen, tied = UNKNOWN_CATEGORY, False
            counts = Counter()
        else:
            top = max(counts.values())
            leaders = sorted(name for name, c in counts.items() if c == top)
            chosen = leaders[0]
            tied = len(leaders) > 1
        votes.append(
            TaxonomyVote(
                object_name=obj,
                proposals=dict(sorted(counts.items())),
                chosen=chosen,
                tied=tied,
                failed_trials=failed,
            )
        )
        if chosen not in coarse:
            coarse.append(chosen)
        parents.append(coarse.index(chosen))
    return tuple(coarse), tuple(parents), votes


def validate_hierarchy(h: Hierarchy, verbs: tuple[str, ...], objects: tuple[str, ...]) -> list[str]:
    """Structured validation; returns a list of problems, never raises."""
    problems: list[str] = []
    if len(h.verb_parent) != len(verbs):
        problems.append(f"verb_parent covers {len(h.verb_parent)} verbs, label space has {len(verbs)}")
    if len(h.object_parent) != len(objects):
        problems.append(
            f"object_parent covers {len(h.object_parent)} objects, label space has {len(objects)}"
        )
    for i, p in enumerate(h.verb_parent):
        if not (0 <= p < len(h.coarse_verbs)):
            problems.append(f"verb {i} has out-of-range parent {p}")
    for i, p in enumerate(h.object_parent):
        if not (0 <= p < len(h.coarse_objects)):
            problems.append(f"object {i} has out-of-range parent {p}")
    for j in range(len(h.coarse_verbs)):
        if j not in h.verb_parent:
            problems.append(f"coarse verb {h.coarse_verbs[j]!r} has no members")
    for j in range(len(h.coarse_objects)):
        if j not in h.object_parent:
            problems.append(f"coarse object {h.coarse_objects[j]!r} has no members")
    if len(set(h.coarse_verbs)) != len(h.coarse_verbs):
        problems.append("duplicate coarse verb names")
    if len(set(h.coarse_objects)) != len(h.coarse_objects):
        problems.append("duplicate coarse object names")
    return problems


def write_hierarchy(path: str, h: Hierarchy, verbs: tuple[str, ...], objects: tuple[str, ...]) -> None:
    doc = {
        "coarse_verbs": [
            {"name": name, "verbs": [verbs[i] for i, p in enumerate(h.verb_parent) if p == j]}
            for j, name in enumerate(h.coarse_verbs)
        ],
        "coarse_objects": [
            {"name": name, "objects": [objects[i] for i, p in enumerate(h.object_parent) if p == j]}
            for j, name in enumerate(h.coarse_objects)
        ],
    }
    with open(path, "w", encoding="utf-8", newline="") as fh:
        json.dump(doc, fh, indent=2)
        fh.write("\n")


def read_hierarchy(path: str, verbs: tuple[str, ...], objects: tuple[str, ...]) -> Hierarchy:
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    try:
        coarse_verbs = tuple(entry["name"] for entry in doc["coarse_verbs"])
        coarse_objects = tuple(entry["name"] for entry in doc["coarse_objects"])
        v_parent = {}
        for j, entry in enumerate(doc["coarse_verbs"]):
            for name in entry["verbs"]:
                v_parent[name] = j
        o_parent = {}
        for j, entry in enumerate(doc["coarse_objects"]):
            for name in entry["objects"]:
                o_parent[name] = j
    except (KeyError, TypeError) as exc:
        raise ValidationError(f"malformed hierarchy file {path}: {exc}") from exc
    missing_v = [v for v in verbs if v not in v_parent]
    missing_o = [o for o in objects if o not in o_parent]
    if missing_v or missing_o:
        raise ValidationError(
            f"hierarchy file does not cover the label space (missing verbs {missing_v}, objects {missing_o})"
        )
    return Hierarchy(
        coarse_verbs=coarse_verbs,
        coarse_objects=coarse_objects,
        verb_parent=tuple(v_parent[v] for v in verbs),
        object_parent=tuple(o_parent[o] for o in objects),
    )
