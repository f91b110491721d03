"""Knowledge-guided selection of which head classes are safe to inpaint.

A backend scores how likely a head-class lesion is spatially entangled with a
tail-class lesion; heads that clear the threshold are retained (left visible)
so the overlapping tail evidence is not erased.
"""

from __future__ import annotations

import json
import os
import threading
import time
import urllib.request
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Protocol, Sequence

import numpy as np

from .core import ClassRegistry, LabelVector
from .stats import HeadTailPartition


class KnowledgeBackendError(RuntimeError):
    """The backend could not produce scores (transport failed after retries)."""


class LLMParseError(ValueError):
    """The model reply was not the strict JSON the prompt demands."""

    def __init__(self, message: str, raw: str):
        super().__init__(f"{message}; raw reply: {raw!r}")
        self.raw = raw


@dataclass(frozen=True)
class EntanglementMatrix:
    """Symmetric K x K pairwise spatial-entanglement scores in [0, 1]."""

    names: tuple[str, ...]
    scores: np.ndarray
    provenance: str = "hand-authored"

    def __post_init__(self):
        arr = np.asarray(self.scores, dtype=np.float64)
        K = len(self.names)
        if arr.shape != (K, K):
            raise ValueError(f"scores must be {K}x{K}, got {arr.shape}")
        if arr.min() < 0.0 or arr.max() > 1.0:
            raise ValueError("scores must lie in [0, 1]")
        if not np.allclose(arr, arr.T):
            raise ValueError("scores must be symmetric")
        arr.flags.writeable = False
        object.__setattr__(self, "scores", arr)

    def score(self, a: str, b: str) -> float:
        ia, ib = self.names.index(a), self.names.index(b)
        return float(self.scores[ia, ib])

    def save(self, path: str | Path) -> None:
        # Nested dict keyed by class names; order-independent on load.
        body = {
            "provenance": self.provenance,
            "scores": {
                a: {b: float(self.scores[i, j]) for j, b in enumerate(self.names)}
                for i, a in enumerate(self.names)
            },
        }
        Path(path).write_text(json.dumps(body, indent=2, sort_keys=True) + "\n")

    @staticmethod
    def load(path: str | Path, registry: ClassRegistry) -> "EntanglementMatrix":
        body = json.loads(Path(path).read_text())
        table = body["scores"]
        K = registry.K
        arr = np.zeros((K, K))
        for i, a in enumerate(registry.names):
            for j, b in enumerate(registry.names):
                arr[i, j] = float(table[a][b])
        return EntanglementMatrix(names=tuple(registry.names), scores=arr, provenance=body.get("provenance", "file"))


class KnowledgeBackend(Protocol):
    def query(self, pairs: Sequence[tuple[str, str]]) -> dict[tuple[str, str], float]: ...


class MatrixBackend:
    """Deterministic lookup into a fixed entanglement matrix."""

    def __init__(self, matrix: EntanglementMatrix):
        self.matrix = matrix

    def query(self, pairs: Sequence[tuple[str, str]]) -> dict[tuple[str, str], float]:
        out = {}
        for a, b in pairs:
            if a not in self.matrix.names or b not in self.matrix.names:
                missing = a if a not in self.matrix.names else b
                raise ValueError(f"unknown class name: {missing!r}")
            out[(a, b)] = self.matrix.score(a, b)
        return out


class ZeroBackend:
    """Scores every pair 0: no head is ever retained (guidance disabled)."""

    def query(self, pairs: Sequence[tuple[str, str]]) -> dict[tuple[str, str], float]:
        return {pair: 0.0 for pair in pairs}


class ScoreCache:
    """Pair-score cache keyed by (model, head, tail); concurrent-reader safe."""

    def __init__(self, path: str | Path | None = None):
        self.path = Path(path) if path is not None else None
        self._lock = threading.Lock()
        self._scores: dict[str, float] = {}
        if self.path is not None and self.path.exists():
            self._scores = {str(k): float(v) for k, v in json.loads(self.path.read_text()).items()}

    @staticmethod
    def key(model: str, head: str, tail: str) -> str:
        return f"{model}|{head}|{tail}"

    def get(self, model: str, head: str, tail: str) -> float | None:
        return self._scores.get(self.key(model, head, tail))

    def put(self, model: str, head: str, tail: str, score: float) -> None:
        with self._lock:
            self._scores[self.key(model, head, tail)] = float(score)
            if self.path is not None:
                self.path.write_text(json.dumps(self._scores, indent=2, sort_keys=True) + "\n")


@dataclass(frozen=True)
class LLMConfig:
    endpoint: str
    model: str
    api_key_env: str = "TAILAUG_LLM_API_KEY"
    max_retries: int = 3
    backoff_base: float = 1.0
    min_interval: float = 0.0
    timeout: float = 60.0


PROMPT_TEMPLATE = """\
You are assisting with chest radiograph dataset curation. For each pair of
lesion categories below, estimate the likelihood (0 to 1) that lesions of the
two categories occupy spatially overlapping regions when both appear in the
same frontal chest X-ray, given how these conditions present anatomically.

Pairs:
{pairs}

Reply with a single strict JSON object and nothing else. Keys must be exactly
"FirstName|SecondName" for each listed pair; values must be numbers in [0, 1].
"""


def build_prompt(pairs: Sequence[tuple[str, str]]) -> str:
    listing = "\n".join(f"- {a}|{b}" for a, b in pairs)
    return PROMPT_TEMPLATE.format(pairs=listing)


def parse_reply(raw: str, pairs: Sequence[tuple[str, str]]) -> dict[tuple[str, str], float]:
    try:
        body = json.loads(raw)
    except json.JSONDecodeError as exc:
        raise LLMParseError(f"reply is not valid JSON ({exc})", raw) from None
    if not isinstance(body, dict):
        raise LLMParseError("reply must be a JSON object", raw)
    out = {}
    for a, b in pairs:
        key = f"{a}|{b}"
        if key not in body:
            raise LLMParseError(f"reply is missing pair {key!r}", raw)
        value = body[key]
        if not isinstance(value, (int, float)) or not 0.0 <= float(value) <= 1.0:
            raise LLMParseError(f"score for {key!r} must be a number in [0, 1], got {value!r}", raw)
        out[(a, b)] = float(value)
    return out


def _default_transport(config: LLMConfig) -> Callable[[str], str]:
    def transport(prompt: str) -> str:
        api_key = os.environ.get(config.api_key_env, "")
        payload = json.dumps(
            {
                "model": config.model,
                "temperature": 0.0,
                "messages": [{"role": "user", "content": prompt}],
            }
        ).encode()
        req = urllib.request.Request(
            config.endpoint,
            data=payload,
            headers={"Content-Type": "application/json", "Authorization": f"Bearer {api_key}"},
        )
        with urllib.request.urlopen(req, timeout=config.timeout) as resp:
            body = json.loads(resp.read().decode())
        return body["choices"][0]["message"]["content"]

    return transport


class LLMBackend:
    """Scores pairs through a chat-completion endpoint, with retry and cache.

    Replies are cached per (model, pair), so repeat queries are free and
    deterministic. A custom transport callable can stand in for the network.
    """

    def __init__(
        self,
        config: LLMConfig,
        cache: ScoreCache | None = None,
        transport: Callable[[str], str] | None = None,
    ):
        self.config = config
        self.cache = cache if cache is not None else ScoreCache()
        self.transport = transport if transport is not None else _default_transport(config)
        self._last_call = 0.0

    def _call_with_retries(self, prompt: str) -> str:
        last_exc: Exception | None = None
        for attempt in range(self.config.max_retries + 1):
            wait = self._last_call + self.config.min_interval - time.monotonic()
            if wait > 0:
                time.sleep(wait)
            try:
                self._last_call = time.monotonic()
                return self.transport(prompt)
            except LLMParseError:
                raise
            except Exception as exc:
                last_exc = exc
                if attempt < self.config.max_retries:
                    time.sleep(self.config.backoff_base * (2**attempt))
        raise KnowledgeBackendError(
            f"transport failed after {self.config.max_retries + 1} attempts: {last_exc}"
        ) from last_exc

    def query(self, pairs: Sequence[tuple[str, str]]) -> dict[tuple[str, str], float]:
        out: dict[tuple[str, str], float] = {}
        missing = []
        for a, b in pairs:
            cached = self.cache.get(self.config.model, a, b)
            if cached is not None:
                out[(a, b)] = cached
            else:
                missing.append((a, b))
        if missing:
            raw = self._call_with_retries(build_prompt(missing))
            parsed = parse_reply(raw, missing)
            for (a, b), score in parsed.items():
                self.cache.put(self.config.model, a, b, score)
                out[(a, b)] = score
        return out


def query_entanglement(
    backend: KnowledgeBackend,
    heads: Sequence[str],
    tails: Sequence[str],
    registry: ClassRegistry,
) -> dict[tuple[str, str], float]:
    """Score every (head, tail) pair; empty head or tail set gives an empty map."""
    for name in list(heads) + list(tails):
        registry.index(name)  # raises on unknown names
    overlap = set(heads) & set(tails)
    if overlap:
        raise ValueError(f"heads and tails must be disjoint, both contain {sorted(overlap)}")
    pairs = [(h, t) for h in heads for t in tails]
    if not pairs:
        return {}
    return backend.query(pairs)


@dataclass(frozen=True)
class EntanglementDecision:
    """Which present head classes to inpaint vs retain, with the scores used."""

    inpaint_targets: frozenset[int]
    retained_heads: frozenset[int]
    rationale: Mapping[tuple[str, str], float] = field(default_factory=dict)

    def __post_init__(self):
        if self.inpaint_targets & self.retained_heads:
            raise ValueError("inpaint targets and retained heads must be disjoint")


def select_inpaint_targets(
    labels: LabelVector,
    partition: HeadTailPartition,
    scores: Mapping[tuple[str, str], float],
    entangle_threshold: float,
    registry: ClassRegistry,
    retain_mode: str = "threshold",
) -> EntanglementDecision:
    """Decide which present head classes get inpainted.

    threshold mode: a present head is retained iff its max score against any
    present tail clears the threshold. argmax mode reproduces the stricter
    single-head reading: only the top-scoring head is retained (and only if
    it clears the threshold).

    With no present tail there is nothing to protect, so every present head
    is a target; with no present head the decision is vacuous.
    """
    if not 0.0 <= entangle_threshold <= 1.0:
        raise ValueError(f"entangle_threshold must lie in [0, 1], got {entangle_threshold}")
    if retain_mode not in ("threshold", "argmax"):
        raise ValueError(f"retain_mode must be 'threshold' or 'argmax', got {retain_mode!r}")
    present = set(labels.present())
    present_heads = sorted(present & partition.head)
    present_tails = sorted(present & partition.tail)
    if not present_heads:
        return EntanglementDecision(frozenset(), frozenset(), dict(scores))
    if not present_tails:
        return EntanglementDecision(frozenset(present_heads), frozenset(), dict(scores))

    max_score = {}
    for h in present_heads:
        h_name = registry.name(h)
        per_tail = []
        for t in present_tails:
            pair = (h_name, registry.name(t))
            if pair not in scores:
                raise ValueError(f"missing score for pair {pair!r}")
            per_tail.append(scores[pair])
        max_score[h] = max(per_tail)

    if retain_mode == "argmax":
        best = max(present_heads, key=lambda h: (max_score[h], -h))
        retained = {best} if max_score[best] >= entangle_threshold else set()
    else:
        retained = {h for h in present_heads if max_score[h] >= entangle_threshold}
    targets = set(present_heads) - retained
    return EntanglementDecision(frozenset(targets), frozenset(retained), dict(scores))
