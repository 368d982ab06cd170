"""Class-name decomposition into spatial/temporal attribute descriptions.

An LLM client turns each action label into G object-like spatial attributes
and L ordered temporal state descriptions. Entries are validated, cached in
a fingerprinted JSON knowledge base, and encoded into attribute feature
matrices by the frozen text encoder. A fixture client replays canned
responses so everything runs offline.
"""
from __future__ import annotations

import json
import os
import re
import tempfile
import time
import urllib.error
import urllib.request
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Protocol

import torch

from .config import Config, stable_hash
from .errors import (CountMismatchError, FingerprintMismatchError,
                     KnowledgeMissError, TransportError)

ENV_URL = "DIST_LLM_URL"
ENV_MODEL = "DIST_LLM_MODEL"
ENV_KEY = "DIST_LLM_KEY"

_ITEM_PREFIX = re.compile(r"^\s*(?:\d+\s*[.):-]\s*|[-*•]\s*)")


def build_spatial_prompt(label: str, count: int) -> str:
    if count < 1:
        raise ValueError("count must be >= 1")
    return (f"Given action label {{{label}}}, please generate {{{count}}} "
            f"most related objects for each class.")


def build_temporal_prompt(label: str, count: int) -> str:
    if count < 1:
        raise ValueError("count must be >= 1")
    return (f"Given action label {{{label}}}, please describe {{{count}}} "
            f"states of each action in simple and short words.")


@dataclass
class KnowledgeEntry:
    label: str
    spatial_attributes: list[str]
    temporal_attributes: list[str]   # order encodes the step sequence
    provenance: dict = field(default_factory=dict)

    def validate(self, num_spatial: int, num_temporal: int) -> "KnowledgeEntry":
        if len(self.spatial_attributes) != num_spatial:
            raise ValueError(f"{self.label}: expected {num_spatial} spatial attributes")
        if len(self.temporal_attributes) != num_temporal:
            raise ValueError(f"{self.label}: expected {num_temporal} temporal attributes")
        if any(not a for a in self.spatial_attributes + self.temporal_attributes):
            raise ValueError(f"{self.label}: empty attribute string")
        return self


@dataclass
class AttributeFeatures:
    spatial: torch.Tensor   # (G, C)
    temporal: torch.Tensor  # (L, C)


class LLMClient(Protocol):
    def complete(self, label: str, kind: str, prompt: str) -> str: ...


class HttpChatClient:
    """Chat-completion style endpoint configured through environment variables."""

    def __init__(self, base_url: str | None = None, model_id: str | None = None,
                 api_key: str | None = None, timeout: float = 30.0,
                 max_retries: int = 2, backoff_seconds: float = 0.5):
        self.base_url = base_url or os.environ.get(ENV_URL, "")
        self.model_id = model_id or os.environ.get(ENV_MODEL, "gpt-3.5-turbo")
        self.api_key = api_key or os.environ.get(ENV_KEY, "")
        self.timeout = timeout
        self.max_retries = max_retries
        self.backoff_seconds = backoff_seconds
        if not self.base_url:
            raise TransportError(f"no LLM endpoint configured; set {ENV_URL}")

    def complete(self, label: str, kind: str, prompt: str) -> str:
        body = json.dumps({
            "model": self.model_id,
            "messages": [{"role": "user", "content": prompt}],
        }).encode("utf-8")
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        last_error: Exception | None = None
        for attempt in range(self.max_retries + 1):
            if attempt:
                time.sleep(self.backoff_seconds * 2 ** (attempt - 1))
            try:
                req = urllib.request.Request(self.base_url, data=body, headers=headers)
                with urllib.request.urlopen(req, timeout=self.timeout) as resp:
                    payload = json.loads(resp.read().decode("utf-8"))
                return payload["choices"][0]["message"]["content"]
            except (urllib.error.URLError, OSError, KeyError, IndexError,
                    json.JSONDecodeError) as exc:
                last_error = exc
        raise TransportError(f"LLM request failed after retries: {last_error}")


class FixtureClient:
    """Replays canned responses from a JSON map {label: {kind: response}}."""

    def __init__(self, responses: dict):
        self.responses = responses
        self.calls = 0

    @classmethod
    def from_file(cls, path) -> "FixtureClient":
        with open(path, "r", encoding="utf-8") as fh:
            return cls(json.load(fh))

    def complete(self, label: str, kind: str, prompt: str) -> str:
        self.calls += 1
        try:
            return self.responses[label][kind]
        except KeyError:
            raise TransportError(f"fixture has no {kind!r} response for label {label!r}")


def parse_attribute_list(text: str, expected: int, dedupe: bool) -> list[str]:
    """Split a response on ';' or newlines, strip numbering, enforce the count."""
    raw = re.split(r"[;\n]", text)
    items: list[str] = []
    seen: set[str] = set()
    for piece in raw:
        item = _ITEM_PREFIX.sub("", piece).strip().rstrip(".")
        if not item:
            continue
        if dedupe:
            key = item.lower()
            if key in seen:
                continue
            seen.add(key)
        items.append(item)
    if len(items) != expected:
        raise CountMismatchError(
            f"expected {expected} items, parsed {len(items)}", raw_response=text)
    return items


def generate_attributes(client: LLMClient, label: str, num_spatial: int,
                        num_temporal: int, model_id: str = "",
                        max_retries: int = 2) -> KnowledgeEntry:
    """Ask the client for both attribute kinds, retrying on count mismatch."""
    spatial_prompt = build_spatial_prompt(label, num_spatial)
    temporal_prompt = build_temporal_prompt(label, num_temporal)

    def ask(kind: str, prompt: str, expected: int, dedupe: bool) -> list[str]:
        last: CountMismatchError | None = None
        for _ in range(max_retries + 1):
            response = client.complete(label, kind, prompt)
            try:
                return parse_attribute_list(response, expected, dedupe)
            except CountMismatchError as exc:
                last = exc
        raise CountMismatchError(
            f"{label}/{kind}: {last}; raw response: {last.raw_response!r}",
            raw_response=last.raw_response)

    spatial = ask("spatial", spatial_prompt, num_spatial, dedupe=True)
    temporal = ask("temporal", temporal_prompt, num_temporal, dedupe=False)
    entry = KnowledgeEntry(
        label=label,
        spatial_attributes=spatial,
        temporal_attributes=temporal,
        provenance={
            "model_id": model_id,
            "prompt_hash": stable_hash([spatial_prompt, temporal_prompt]),
            "timestamp": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()),
        },
    )
    return entry.validate(num_spatial, num_temporal)


@dataclass
class KnowledgeBase:
    fingerprint: dict
    entries: dict[str, KnowledgeEntry] = field(default_factory=dict)

    def __contains__(self, label: str) -> bool:
        return label in self.entries

    def get(self, label: str) -> KnowledgeEntry:
        try:
            return self.entries[label]
        except KeyError:
            raise KnowledgeMissError(f"no knowledge entry for label {label!r}")

    def add(self, entry: KnowledgeEntry) -> None:
        entry.validate(self.fingerprint["num_spatial"], self.fingerprint["num_temporal"])
        self.entries[entry.label] = entry

    def covers(self, labels) -> list[str]:
        """Labels from the iterable that are missing from the base."""
        return [lb for lb in labels if lb not in self.entries]

    def content_hash(self) -> str:
        return stable_hash(_kb_payload(self))


def _kb_payload(kb: KnowledgeBase) -> dict:
    return {
        "fingerprint": kb.fingerprint,
        "entries": {
            label: {
                "spatial": e.spatial_attributes,
                "temporal": e.temporal_attributes,
                "provenance": e.provenance,
            }
            for label, e in sorted(kb.entries.items())
        },
    }


def save_kb(kb: KnowledgeBase, path) -> None:
    """Atomic write: temp file in the target directory, then rename."""
    path = os.fspath(path)
    directory = os.path.dirname(path) or "."
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            json.dump(_kb_payload(kb), fh, indent=2, sort_keys=True)
            fh.write("\n")
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_kb(path, expected_fingerprint: dict | None = None,
            allow_mismatch: bool = False) -> KnowledgeBase:
    with open(path, "r", encoding="utf-8") as fh:
        payload = json.load(fh)
    if "fingerprint" not in payload or "entries" not in payload:
        raise ValueError(f"{path}: not a knowledge base file")
    fingerprint = payload["fingerprint"]
    if expected_fingerprint is not None and fingerprint != expected_fingerprint:
        if not allow_mismatch:
            raise FingerprintMismatchError(
                f"{path}: knowledge base fingerprint {fingerprint} does not match "
                f"run config {expected_fingerprint}")
    kb = KnowledgeBase(fingerprint=fingerprint)
    for label, e in payload["entries"].items():
        kb.add(KnowledgeEntry(label=label,
                              spatial_attributes=list(e["spatial"]),
                              temporal_attributes=list(e["temporal"]),
                              provenance=dict(e.get("provenance", {}))))
    return kb


def new_kb(cfg: Config) -> KnowledgeBase:
    return KnowledgeBase(fingerprint=cfg.knowledge_fingerprint())


def ensure_coverage(kb: KnowledgeBase, labels, client: LLMClient, cfg: Config,
                    ) -> dict[str, Exception]:
    """Generate entries for labels the base does not cover yet.

    Cached labels trigger zero client calls. Returns a map of label ->
    failure for labels that could not be generated; successful entries are
    added to the base in place.
    """
    kn = cfg.knowledge
    missing = kb.covers(labels)
    failures: dict[str, Exception] = {}

    def worker(label: str):
        return generate_attributes(client, label, kn.num_spatial, kn.num_temporal,
                                   model_id=kn.model_id, max_retries=kn.max_retries)

    if not missing:
        return failures
    with ThreadPoolExecutor(max_workers=max(1, kn.max_inflight)) as pool:
        for label, outcome in zip(missing, pool.map(
                lambda lb: _capture(worker, lb), missing)):
            if isinstance(outcome, Exception):
                failures[label] = outcome
            else:
                kb.add(outcome)
    return failures


def _capture(fn, arg):
    try:
        return fn(arg)
    except Exception as exc:
        return exc


def encode_entry(entry: KnowledgeEntry, text_encoder) -> AttributeFeatures:
    """Row i of each matrix is the embedding of attribute i, order preserved."""
    spatial = torch.stack([text_encoder.encode_text(a).values
                           for a in entry.spatial_attributes])
    temporal = torch.stack([text_encoder.encode_text(a).values
                            for a in entry.temporal_attributes])
    return AttributeFeatures(spatial=spatial, temporal=temporal)
