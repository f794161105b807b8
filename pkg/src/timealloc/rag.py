"""Retrieval-augmented mitigation loop.

A small knowledge base of empirical findings about time use is embedded
alongside a one-sentence persona description; the top-k most similar
findings (cosine similarity, k=3 by default) are injected into the agent
prompt as a clearly delimited block.  Re-estimating on the augmented
decisions then shows whether conditioning on evidence moved the targeted
trade-offs.

Two embedders share the interface: ``HttpEmbedder`` posts to an external
embeddings endpoint, while ``MockEmbedder`` hashes lowercased word tokens
into 256 signed buckets -- deterministic, platform-independent, and good
enough to exercise the whole loop offline.  All vectors are L2-normalized.
"""

from __future__ import annotations

import hashlib
import json
import os
import re
import time
from dataclasses import dataclass

import numpy as np
import pandas as pd

import requests

from .agents import PersonaRecord, persona_from_row
from .alignment import attribute_activity_cosine
from .fileio import atomic_write_text


class RagError(ValueError):
    pass


@dataclass(frozen=True)
class KnowledgeInstance:
    id: str
    topic: str
    text: str


def load_kb(path) -> list[KnowledgeInstance]:
    """Load one topic's knowledge base: a JSON array of {id, topic, text}."""
    with open(path, encoding="utf-8") as f:
        raw = json.load(f)
    kb = []
    seen = set()
    for item in raw:
        inst = KnowledgeInstance(
            id=str(item["id"]), topic=str(item.get("topic", "")), text=str(item["text"])
        )
        if not inst.text.strip():
            raise RagError(f"knowledge instance {inst.id!r} has empty text")
        if inst.id in seen:
            raise RagError(f"duplicate knowledge instance id {inst.id!r}")
        seen.add(inst.id)
        kb.append(inst)
    if not kb:
        raise RagError(f"knowledge base {path} is empty")
    return kb


def default_kb_path(topic: str) -> str:
    return os.path.join(os.path.dirname(__file__), "data", f"kb_{topic}.json")


# ---------------------------------------------------------------------------
# persona sentences
# ---------------------------------------------------------------------------

# prompt-side education label -> sentence phrase
_EDU_SENTENCE = {
    "no college education": "no college education",
    "some college without a bachelor's degree": "some college education but no bachelor's degree",
    "bachelor's degree": "a bachelor's degree",
    "advanced degree": "an advanced degree",
}

_SPOUSE_SENTENCE = {
    "having a spouse": "a spouse",
    "having an unmarried partner": "an unmarried partner",
    "having no spouse or unmarried partner": "no spouse or unmarried partner",
}


def build_persona_sentence(persona: PersonaRecord) -> str:
    """One-line persona description used as the retrieval query."""
    persona.validate()
    edu = _EDU_SENTENCE[persona.education]
    spouse = _SPOUSE_SENTENCE[persona.spouse_status]
    return (
        f"A {persona.age}-year-old {persona.gender} {persona.race} with {edu}, "
        f"{spouse}, earning ${persona.weekly_income:.2f} per week."
    )


# ---------------------------------------------------------------------------
# embedders
# ---------------------------------------------------------------------------

_TOKEN_RE = re.compile(r"[a-z0-9]+")


class MockEmbedder:
    """Signed feature hashing of lowercased word tokens into 256 buckets."""

    dim = 256

    def embed(self, texts) -> np.ndarray:
        if not texts:
            raise RagError("nothing to embed")
        out = np.zeros((len(texts), self.dim))
        for i, text in enumerate(texts):
            tokens = _TOKEN_RE.findall((text or "").lower())
            if not tokens:
                raise RagError(f"text {i} has no tokens to embed")
            for tok in tokens:
                h = int.from_bytes(hashlib.sha256(tok.encode()).digest()[:8], "big")
                bucket = h % self.dim
                sign = 1.0 if (h >> 8) & 1 else -1.0
                out[i, bucket] += sign
            norm = np.linalg.norm(out[i])
            if norm == 0.0:
                raise RagError(f"text {i} hashed to a zero vector")
            out[i] /= norm
        return out

    def token_buckets(self, text: str) -> set:
        """Bucket indices a text maps into (used to verify disjointness)."""
        return {
            int.from_bytes(hashlib.sha256(t.encode()).digest()[:8], "big") % self.dim
            for t in _TOKEN_RE.findall(text.lower())
        }


class HttpEmbedder:
    """External embeddings endpoint: POST {model, input: [texts]}.

    Expects a response carrying one float array per input; vectors are
    L2-normalized on receipt and cached content-addressed when a cache
    directory is given.
    """

    def __init__(self, endpoint: str, model: str, api_key_env: str = "TIMEALLOC_API_KEY",
                 timeout: float = 60.0, max_retries: int = 3, cache_dir=None,
                 session=None, sleep=time.sleep, backoff_base: float = 1.0):
        self.endpoint = endpoint
        self.model = model
        self.api_key_env = api_key_env
        self.timeout = timeout
        self.max_retries = max_retries
        self.cache_dir = os.fspath(cache_dir) if cache_dir else None
        self.session = session or requests.Session()
        self.sleep = sleep
        self.backoff_base = backoff_base

    def _cache_path(self, text: str) -> str | None:
        if not self.cache_dir:
            return None
        key = hashlib.sha256((self.model + "\x00" + text).encode("utf-8")).hexdigest()
        safe = re.sub(r"[^A-Za-z0-9._-]", "_", self.model)
        return os.path.join(self.cache_dir, safe, key + ".json")

    def embed(self, texts) -> np.ndarray:
        from .agents import TransportError

        if not texts:
            raise RagError("nothing to embed")
        for i, t in enumerate(texts):
            if not (t or "").strip():
                raise RagError(f"text {i} is empty")
        vecs: list[np.ndarray | None] = [None] * len(texts)
        missing = []
        for i, t in enumerate(texts):
            path = self._cache_path(t)
            if path and os.path.exists(path):
                with open(path, encoding="utf-8") as f:
                    vecs[i] = np.asarray(json.load(f)["embedding"], dtype=float)
            else:
                missing.append(i)
        if missing:
            body = {"model": self.model, "input": [texts[i] for i in missing]}
            headers = {"Content-Type": "application/json"}
            api_key = os.environ.get(self.api_key_env, "")
            if api_key:
                headers["Authorization"] = f"Bearer {api_key}"
            last_exc = None
            for attempt in range(self.max_retries + 1):
                if attempt:
                    self.sleep(self.backoff_base * 2 ** (attempt - 1))
                try:
                    resp = self.session.post(
                        self.endpoint, json=body, headers=headers, timeout=self.timeout
                    )
                except requests.RequestException as exc:
                    last_exc = TransportError(f"embedding request failed: {exc}")
                    continue
                if resp.status_code == 429 or resp.status_code >= 500:
                    last_exc = TransportError(f"embedding HTTP {resp.status_code}")
                    continue
                if resp.status_code != 200:
                    raise TransportError(f"embedding HTTP {resp.status_code}: {resp.text[:200]}")
                data = resp.json()["data"]
                for slot, item in zip(missing, data):
                    v = np.asarray(item["embedding"], dtype=float)
                    vecs[slot] = v
                    path = self._cache_path(texts[slot])
                    if path:
                        atomic_write_text(path, json.dumps({"embedding": v.tolist()}))
                last_exc = None
                break
            if last_exc is not None:
                raise last_exc
        out = np.vstack(vecs)
        norms = np.linalg.norm(out, axis=1, keepdims=True)
        if np.any(norms == 0):
            raise RagError("embedding endpoint returned a zero vector")
        return out / norms


# ---------------------------------------------------------------------------
# retrieval
# ---------------------------------------------------------------------------


@dataclass
class RetrievalResult:
    instances: list
    similarities: np.ndarray
    truncated: bool   # kb had fewer than k items


def retrieve_top_k(query_vec, kb: list[KnowledgeInstance], kb_matrix: np.ndarray,
                   k: int = 3) -> RetrievalResult:
    """The k most similar instances by cosine, ties broken by ascending id.

    kb_matrix rows must be the embeddings of kb in order (unit norm).
    When the kb holds fewer than k items, all of them come back flagged.
    """
    if not kb:
        raise RagError("knowledge base is empty")
    if k < 1:
        raise RagError("k must be >= 1")
    q = np.asarray(query_vec, dtype=float)
    qn = np.linalg.norm(q)
    if qn == 0.0:
        raise RagError("query vector is zero")
    sims = kb_matrix @ (q / qn)
    order = sorted(range(len(kb)), key=lambda i: (-sims[i], kb[i].id))
    take = min(k, len(kb))
    chosen = order[:take]
    return RetrievalResult(
        instances=[kb[i] for i in chosen],
        similarities=sims[chosen],
        truncated=len(kb) < k,
    )


_AUGMENT_MARKER = "Based on this background"
_BLOCK_HEADER = "Relevant research findings:"


def augment_prompt(user_prompt: str, instances) -> str:
    """Insert the numbered findings block before the answer-format question.

    Zero instances leave the prompt untouched.  The block lands between
    the persona description and the "Based on this background" question
    when that marker exists, otherwise at the end.
    """
    instances = list(instances)
    if not instances:
        return user_prompt
    lines = [_BLOCK_HEADER]
    for i, inst in enumerate(instances, 1):
        lines.append(f"{i}. {inst.text}")
    block = "\n".join(lines)
    idx = user_prompt.find(_AUGMENT_MARKER)
    if idx == -1:
        return user_prompt.rstrip() + "\n\n" + block
    prefix = user_prompt[:idx].rstrip()
    return prefix + "\n\n" + block + "\n\n" + user_prompt[idx:]


def make_augmenter(kb: list[KnowledgeInstance], embedder, k: int = 3):
    """Prompt-rewriting callable for agents.run_batch.

    Embeds the knowledge base once; per record, embeds the persona
    sentence, retrieves the top-k findings, and injects them.
    """
    kb_matrix = embedder.embed([inst.text for inst in kb])

    def augment(user_prompt: str, row) -> str:
        sentence = build_persona_sentence(persona_from_row(row))
        q = embedder.embed([sentence])[0]
        result = retrieve_top_k(q, kb, kb_matrix, k=k)
        return augment_prompt(user_prompt, result.instances)

    return augment


def rag_compare_table(human_fit, pre_fit, post_fit, features) -> pd.DataFrame:
    """Pre- vs post-mitigation attribute-activity cosines per feature."""
    rows = []
    for name in features:
        pre = attribute_activity_cosine(human_fit, pre_fit, name)
        post = attribute_activity_cosine(human_fit, post_fit, name)
        rows.append(
            {
                "feature": name,
                "cosine_pre": pre,
                "cosine_post": post,
                "delta": post - pre,
            }
        )
    return pd.DataFrame(rows)
