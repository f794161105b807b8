"""Language-model decision makers: prompts, transport, parsing, caching.

Each record's demographics become a persona prompt asking for a daily
allocation in the bracketed format ``[Work, Leisure, Sleep and Personal
Care, Other]``.  Responses are parsed back into minutes with a documented
repair pipeline (proportional renormalization to the 1440-minute budget,
1-minute flooring of zeros) and flags carried into the output dataset so
estimation can audit the attrition.

``HttpAgent`` speaks the plain chat-completions JSON shape over HTTP with
bearer auth from an environment variable, exponential backoff, and a
content-addressed response cache keyed by (model, prompt hash) -- a rerun
over cached prompts performs zero network calls.  ``MockAgent`` is a fully
offline stand-in that answers from a hidden coefficient matrix, enabling
end-to-end recovery tests.
"""

from __future__ import annotations

import hashlib
import json
import os
import re
import threading
import time
from dataclasses import dataclass

import numpy as np
import pandas as pd

import requests

from .fileio import atomic_write_df, atomic_write_text
from .ingest import CLEAN_COLUMNS
from .model import ACTIVITIES, FEATURES, T_DEFAULT, as_theta, predict_shares

GENDER_LABELS = {1: "male", 0: "female"}

RACE_LABELS = {
    "white": "White",
    "black": "Black",
    "native": "American Indian or Alaskan Native",
    "asian": "Asian",
    "pacific": "Native Hawaiian or Pacific Islander",
}

EDUCATION_LABELS = {
    1: "no college education",
    2: "some college without a bachelor's degree",
    3: "bachelor's degree",
    4: "advanced degree",
}

SPOUSE_LABELS = {
    "spouse": "having a spouse",
    "partner": "having an unmarried partner",
    "none": "having no spouse or unmarried partner",
}

SYSTEM_INSTRUCTION = (
    "You are an American making daily time allocation decisions across three "
    "activities: work, leisure, and other. Your goal is to maximize overall "
    "happiness within the 1,440 minutes available each day."
)

USER_TEMPLATE = (
    "You are a {gender}, {age} years old, ethnically identified as {race}. "
    "Your highest level of education is {education}, and your weekly income "
    "is {income}. Based on this background, how would you allocate your time "
    "across Work, Leisure, Sleep and Personal Care, and Other in a typical "
    "day? Please answer in the format: [Work, Leisure, Sleep and Personal "
    "Care, Other], using numbers to indicate minutes."
)

FORMAT_REMINDER = (
    "\n\nReminder: reply with exactly one bracketed list in the format "
    "[Work, Leisure, Sleep and Personal Care, Other], using numbers to "
    "indicate minutes that sum to 1440."
)

# bracket order in prompts/answers -> canonical activity order
BRACKET_ORDER = ("work", "leisure", "sleep", "other")


class AgentError(RuntimeError):
    pass


class TransportError(AgentError):
    pass


class RateLimitError(TransportError):
    pass


class ParseError(AgentError):
    pass


class PersonaError(ValueError):
    pass


# ---------------------------------------------------------------------------
# personas and prompts
# ---------------------------------------------------------------------------


@dataclass
class PersonaRecord:
    age: int
    gender: str             # "male" / "female"
    race: str               # display label from RACE_LABELS
    education: str          # display label from EDUCATION_LABELS
    spouse_status: str      # display label from SPOUSE_LABELS
    weekly_income: float

    def validate(self) -> None:
        for slot, value, allowed in (
            ("gender", self.gender, set(GENDER_LABELS.values())),
            ("race", self.race, set(RACE_LABELS.values())),
            ("education", self.education, set(EDUCATION_LABELS.values())),
            ("spouse_status", self.spouse_status, set(SPOUSE_LABELS.values())),
        ):
            if value is None:
                raise PersonaError(f"persona is missing the {slot} slot")
            if value not in allowed:
                raise PersonaError(f"unknown {slot} label {value!r}")
        if self.age is None or self.weekly_income is None:
            raise PersonaError("persona is missing age or weekly_income")


def persona_from_row(row) -> PersonaRecord:
    """Build the persona for one cleaned record (raw demographic fields)."""
    race = "white"
    for cat, col in (
        ("black", "race_black"),
        ("native", "race_native"),
        ("asian", "race_asian"),
        ("pacific", "race_pacific"),
    ):
        if float(row[col]) == 1:
            race = cat
    if float(row["spouse_present"]) == 1:
        spouse = "spouse"
    elif float(row["partner_present"]) == 1:
        spouse = "partner"
    else:
        spouse = "none"
    return PersonaRecord(
        age=int(round(float(row["age"]))),
        gender=GENDER_LABELS[int(row["male"])],
        race=RACE_LABELS[race],
        education=EDUCATION_LABELS[int(row["edu"])],
        spouse_status=SPOUSE_LABELS[spouse],
        weekly_income=float(row["earnweek"]),
    )


def render_prompt(persona: PersonaRecord) -> tuple[str, str]:
    """(system, user) strings; byte-stable for identical personas."""
    persona.validate()
    user = USER_TEMPLATE.format(
        gender=persona.gender,
        age=persona.age,
        race=persona.race,
        education=persona.education,
        income=f"${persona.weekly_income:.2f}",
    )
    return SYSTEM_INSTRUCTION, user


# ---------------------------------------------------------------------------
# response parsing and repair
# ---------------------------------------------------------------------------

_BRACKET_RE = re.compile(
    r"\[\s*([0-9]+(?:\.[0-9]+)?)\s*,\s*([0-9]+(?:\.[0-9]+)?)\s*,"
    r"\s*([0-9]+(?:\.[0-9]+)?)\s*,\s*([0-9]+(?:\.[0-9]+)?)\s*\]"
)


@dataclass
class ParsedAllocation:
    minutes: np.ndarray      # canonical (leisure, work, sleep, other) order
    renormalized: bool
    floored: bool


def parse_allocation(text: str, T: float = T_DEFAULT) -> ParsedAllocation:
    """Extract and repair the first bracketed 4-tuple of minutes.

    Bracket order is (Work, Leisure, Sleep/Personal, Other), remapped to
    the canonical order.  A total different from T is scaled
    proportionally (renormalized flag); zero entries are floored at one
    minute with the rest rescaled so the budget holds exactly (floored
    flag).  Raises ParseError when no usable tuple exists.
    """
    m = _BRACKET_RE.search(text or "")
    if not m:
        raise ParseError("no bracketed 4-tuple of minutes found")
    bracket = np.array([float(g) for g in m.groups()])
    total = bracket.sum()
    if total <= 0:
        raise ParseError("bracketed minutes sum to zero")
    renormalized = False
    if abs(total - T) > 1e-9:
        bracket = bracket * (T / total)
        renormalized = True
    floored = False
    zeros = bracket == 0.0
    if zeros.any():
        nz = int(zeros.sum())
        if nz == len(bracket):
            raise ParseError("all bracketed minutes are zero")
        bracket[~zeros] *= (T - nz) / bracket[~zeros].sum()
        bracket[zeros] = 1.0
        floored = True
    by_name = dict(zip(BRACKET_ORDER, bracket))
    minutes = np.array([by_name[a] for a in ACTIVITIES])
    return ParsedAllocation(minutes=minutes, renormalized=renormalized, floored=floored)


# ---------------------------------------------------------------------------
# transports
# ---------------------------------------------------------------------------


@dataclass
class AgentConfig:
    endpoint: str = ""
    model: str = "mock"
    temperature: float = 0.1
    max_tokens: int = 1024
    top_p: float = 1.0
    timeout: float = 60.0
    max_retries: int = 3
    concurrency: int = 4
    api_key_env: str = "TIMEALLOC_API_KEY"
    backoff_base: float = 1.0
    rate_limit_per_sec: float | None = None

    def validate(self) -> None:
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")
        if self.max_retries < 0:
            raise ValueError("max_retries must be >= 0")
        if self.concurrency < 1:
            raise ValueError("concurrency must be >= 1")


class TokenBucket:
    """Simple shared rate limiter: acquire() blocks until a token is free."""

    def __init__(self, rate_per_sec: float, clock=time.monotonic, sleep=time.sleep):
        self.rate = rate_per_sec
        self.capacity = max(rate_per_sec, 1.0)
        self.tokens = self.capacity
        self.updated = clock()
        self.clock = clock
        self.sleep = sleep
        self._lock = threading.Lock()

    def acquire(self) -> None:
        while True:
            with self._lock:
                now = self.clock()
                self.tokens = min(
                    self.capacity, self.tokens + (now - self.updated) * self.rate
                )
                self.updated = now
                if self.tokens >= 1.0:
                    self.tokens -= 1.0
                    return
                wait = (1.0 - self.tokens) / self.rate
            self.sleep(wait)


def prompt_hash(system: str, user: str) -> str:
    return hashlib.sha256((system + "\x00" + user).encode("utf-8")).hexdigest()


class ResponseCache:
    """One JSON file per response under a content-addressed directory."""

    def __init__(self, root):
        self.root = os.fspath(root)
        self._lock = threading.Lock()

    def _path(self, model: str, key: str) -> str:
        safe = re.sub(r"[^A-Za-z0-9._-]", "_", model)
        return os.path.join(self.root, safe, key + ".json")

    def get(self, model: str, key: str):
        path = self._path(model, key)
        if not os.path.exists(path):
            return None
        with open(path, encoding="utf-8") as f:
            return json.load(f)

    def put(self, model: str, key: str, doc: dict) -> None:
        with self._lock:
            atomic_write_text(self._path(model, key), json.dumps(doc, indent=2))


class HttpAgent:
    """Chat-completions-style HTTP transport with retries and caching.

    POST body: {model, messages: [{role, content}...], temperature,
    max_tokens, top_p}; bearer token read from config.api_key_env.  The
    response text is the first choice's message content.
    """

    def __init__(self, config: AgentConfig, cache: ResponseCache | None = None,
                 session=None, sleep=time.sleep):
        config.validate()
        self.config = config
        self.cache = cache
        self.session = session or requests.Session()
        self.sleep = sleep
        self.rate_limiter = (
            TokenBucket(config.rate_limit_per_sec, sleep=sleep)
            if config.rate_limit_per_sec
            else None
        )

    def respond(self, row, system: str, user: str) -> str:
        cfg = self.config
        key = prompt_hash(system, user)
        if self.cache is not None:
            hit = self.cache.get(cfg.model, key)
            if hit is not None:
                return hit["response_text"]
        if self.rate_limiter is not None:
            self.rate_limiter.acquire()
        body = {
            "model": cfg.model,
            "messages": [
                {"role": "system", "content": system},
                {"role": "user", "content": user},
            ],
            "temperature": cfg.temperature,
            "max_tokens": cfg.max_tokens,
            "top_p": cfg.top_p,
        }
        headers = {"Content-Type": "application/json"}
        api_key = os.environ.get(cfg.api_key_env, "")
        if api_key:
            headers["Authorization"] = f"Bearer {api_key}"
        last_exc: Exception | None = None
        for attempt in range(cfg.max_retries + 1):
            if attempt:
                self.sleep(cfg.backoff_base * 2 ** (attempt - 1))
            try:
                resp = self.session.post(
                    cfg.endpoint, json=body, headers=headers, timeout=cfg.timeout
                )
            except requests.RequestException as exc:
                last_exc = TransportError(f"request failed: {exc}")
                continue
            if resp.status_code == 429:
                last_exc = RateLimitError("rate limited (HTTP 429)")
                continue
            if resp.status_code >= 500:
                last_exc = TransportError(f"server error (HTTP {resp.status_code})")
                continue
            if resp.status_code != 200:
                raise TransportError(f"HTTP {resp.status_code}: {resp.text[:200]}")
            try:
                text = resp.json()["choices"][0]["message"]["content"]
            except (ValueError, KeyError, IndexError) as exc:
                raise TransportError(f"malformed completion payload: {exc}") from exc
            if self.cache is not None:
                self.cache.put(
                    cfg.model,
                    key,
                    {
                        "model": cfg.model,
                        "prompt_hash": key,
                        "system": system,
                        "user": user,
                        "response_text": text,
                    },
                )
            return text
        raise last_exc if last_exc is not None else TransportError("retries exhausted")


def largest_remainder_minutes(shares, total: int = 1440) -> np.ndarray:
    """Round shares to integer minutes that sum exactly to total."""
    s = np.asarray(shares, dtype=float)
    raw = s / s.sum() * total
    base = np.floor(raw).astype(int)
    short = total - int(base.sum())
    # hand leftover minutes to the largest fractional remainders,
    # activity order breaking exact ties
    remainder = raw - base
    order = np.lexsort((np.arange(len(s)), -remainder))
    base[order[:short]] += 1
    return base


class MockAgent:
    """Offline decision maker answering from a hidden coefficient matrix.

    Computes softmax shares from the record's standardized features,
    optionally perturbs them with seeded Dirichlet noise (one stream per
    record id), rounds to whole minutes by largest remainder, and emits the
    bracketed answer format.  When rag_theta is set, prompts carrying the
    retrieved-findings block are answered from that matrix instead --
    modeling an agent whose trade-offs move when shown evidence.
    """

    RAG_MARKER = "Relevant research findings:"

    def __init__(self, theta, noise: str = "none", kappa: float = 1000.0,
                 seed: int = 0, rag_theta=None):
        self.theta = as_theta(theta)
        self.rag_theta = as_theta(rag_theta) if rag_theta is not None else None
        if noise not in ("none", "dirichlet"):
            raise ValueError(f"unknown noise kind {noise!r}")
        self.noise = noise
        self.kappa = kappa
        self.seed = seed

    def respond(self, row, system: str, user: str) -> str:
        theta = self.theta
        if self.rag_theta is not None and self.RAG_MARKER in user:
            theta = self.rag_theta
        x = np.array([1.0] + [float(row[f]) for f in FEATURES[1:]])
        shares = predict_shares(theta, x)
        if self.noise == "dirichlet":
            rid = str(row["record_id"])
            digest = hashlib.sha256(f"{self.seed}:{rid}".encode()).digest()
            rg = np.random.default_rng(
                np.random.SeedSequence((self.seed, int.from_bytes(digest[:8], "big")))
            )
            g = rg.gamma(shape=self.kappa * shares, scale=1.0)
            shares = np.maximum(g, 1e-300) / np.maximum(g, 1e-300).sum()
        minutes = largest_remainder_minutes(shares, int(T_DEFAULT))
        by_name = dict(zip(ACTIVITIES, minutes))
        bracket = ", ".join(str(int(by_name[a])) for a in BRACKET_ORDER)
        return f"[{bracket}]"


# ---------------------------------------------------------------------------
# batch runner
# ---------------------------------------------------------------------------


@dataclass
class DecisionResponse:
    record_id: str
    raw_text: str
    minutes: np.ndarray | None
    failure: str | None
    renormalized: bool
    floored: bool
    retries: int


def _run_one(row, agent, augment, retry_on_parse_failure):
    persona = persona_from_row(row)
    system, user = render_prompt(persona)
    if augment is not None:
        user = augment(user, row)
    raw = agent.respond(row, system, user)
    retries = 0
    try:
        parsed = parse_allocation(raw)
        failure = None
    except ParseError as exc:
        failure = str(exc)
        parsed = None
        if retry_on_parse_failure:
            retries = 1
            raw = agent.respond(row, system, user + FORMAT_REMINDER)
            try:
                parsed = parse_allocation(raw)
                failure = None
            except ParseError as exc2:
                failure = str(exc2)
    resp = DecisionResponse(
        record_id=str(row["record_id"]),
        raw_text=raw,
        minutes=None if parsed is None else parsed.minutes,
        failure=failure,
        renormalized=bool(parsed.renormalized) if parsed else False,
        floored=bool(parsed.floored) if parsed else False,
        retries=retries,
    )
    return resp, prompt_hash(system, user)


def run_batch(
    df: pd.DataFrame,
    agent,
    index_csv=None,
    augment=None,
    retry_on_parse_failure: bool = True,
) -> tuple[pd.DataFrame, pd.DataFrame]:
    """Query the agent for every record and parse the answers.

    Returns (decisions, attrition): decisions reuses the input covariates
    with the agent's minutes and repair flags substituted in; attrition has
    one row per dropped record (record_id, reason).  ``augment`` may rewrite
    the user prompt (the retrieval loop plugs in here).  Records whose
    response cannot be parsed are retried once with a format reminder, then
    dropped with a logged reason.  Transport agents run up to their
    configured concurrency; results are ordered by input position either way.
    """
    rows = df.to_dict("records")
    workers = getattr(getattr(agent, "config", None), "concurrency", 1)
    if workers > 1 and len(rows) > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=workers) as pool:
            outcomes = list(
                pool.map(
                    lambda r: _run_one(r, agent, augment, retry_on_parse_failure), rows
                )
            )
    else:
        outcomes = [_run_one(r, agent, augment, retry_on_parse_failure) for r in rows]

    responses = [o[0] for o in outcomes]
    model_name = getattr(getattr(agent, "config", None), "model", type(agent).__name__)
    index_rows = [
        {
            "record_id": r.record_id,
            "model": model_name,
            "prompt_hash": h,
            "status": "ok" if r.failure is None else "parse-failure",
            "renormalized": int(r.renormalized),
            "floored": int(r.floored),
        }
        for r, h in outcomes
    ]

    ok = {r.record_id: r for r in responses if r.failure is None}
    decisions = df[df["record_id"].astype(str).isin(ok)].copy()
    if len(decisions):
        ids = decisions["record_id"].astype(str)
        M = np.vstack([ok[r].minutes for r in ids])
        for j, a in enumerate(ACTIVITIES):
            decisions[f"minutes_{a}"] = M[:, j]
        decisions["renormalized"] = [int(ok[r].renormalized) for r in ids]
        decisions["floored"] = [int(ok[r].floored) for r in ids]
    else:
        for a in ACTIVITIES:
            decisions[f"minutes_{a}"] = np.empty(0)
    decisions = decisions[[c for c in CLEAN_COLUMNS if c in decisions.columns]
                          + [c for c in decisions.columns if c not in CLEAN_COLUMNS]]
    attrition = pd.DataFrame(
        [
            {"record_id": r.record_id, "reason": r.failure}
            for r in responses
            if r.failure is not None
        ],
        columns=["record_id", "reason"],
    )
    if index_csv is not None:
        atomic_write_df(index_csv, pd.DataFrame(index_rows))
    return decisions.reset_index(drop=True), attrition
