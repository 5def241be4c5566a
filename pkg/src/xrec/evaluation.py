"""Explanation quality metrics, judge scoring, aggregation and report rendering."""
from __future__ import annotations

import csv
import logging
import math
import re
import time
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Iterable

import httpx
import numpy as np

from . import numerics as nx
from .emissions import DISCREPANCY_NOTE
from .lm import ToyLm, split_words, tokenize

log = logging.getLogger(__name__)

JUDGE_SYSTEM_PROMPT = (
    "Score the given explanation against the ground truth on a scale from 0 to 100, "
    "focusing on the alignment of meanings rather than the formatting.\n"
    "Provide your score as a number and do not provide any other text."
)

# higher-is-better metrics reported as mean (explainability) and std (stability)
DEFAULT_METRICS = ("judge", "embed_p", "embed_r", "embed_f1", "likelihood")


def usr(explanations: list[str]) -> float:
    """Unique sentence ratio after trimming surrounding whitespace."""
    if not explanations:
        raise ValueError("usr of an empty list is undefined")
    return len({s.strip() for s in explanations}) / len(explanations)


# ---------------------------------------------------------------------------
# embedding similarity
# ---------------------------------------------------------------------------

Embedder = Callable[[str], np.ndarray]


def lm_embedder(lm: ToyLm) -> Embedder:
    """Final-layer contextual token vectors of the frozen LM."""
    return lm.token_states


def greedy_match(cand: np.ndarray, ref: np.ndarray) -> tuple[float, float, float]:
    """Greedy cosine matching between two token-vector sequences."""
    def unit(m):
        n = np.linalg.norm(m, axis=1, keepdims=True)
        return np.divide(m, n, out=np.zeros_like(m), where=n > 0)

    sim = unit(cand) @ unit(ref).T
    p = float(sim.max(axis=1).mean())
    r = float(sim.max(axis=0).mean())
    f1 = 0.0 if p + r == 0 else 2 * p * r / (p + r)
    return p, r, f1


def embed_sim_score(candidate: str, reference: str, embedder: Embedder) -> tuple[float, float, float]:
    c, r = np.asarray(embedder(candidate)), np.asarray(embedder(reference))
    if len(c) == 0 or len(r) == 0:
        raise ValueError("embed_sim_score: candidate and reference must each contain at least one token")
    return greedy_match(c, r)


# ---------------------------------------------------------------------------
# likelihood
# ---------------------------------------------------------------------------

def likelihood_score(candidate: str, reference: str, lm: ToyLm) -> float:
    """Mean log-probability of the reference tokens given the candidate as prefix."""
    vocab = lm.vocab
    prefix = [vocab.bos] + tokenize(candidate, vocab)
    ref = tokenize(reference, vocab)
    if not ref:
        raise ValueError("likelihood_score: reference has no tokens")
    ids = prefix + ref
    if len(ids) - 1 > lm.config.max_seq_len:
        raise ValueError(f"likelihood_score: {len(ids)} tokens exceed the LM context of {lm.config.max_seq_len}")
    with nx.no_tape():
        logits = lm.forward(ids[:-1]).data[len(prefix) - 1:]
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    return float(np.mean(logp[np.arange(len(ref)), ref]))


# ---------------------------------------------------------------------------
# judge
# ---------------------------------------------------------------------------

class JudgeUnavailable(RuntimeError):
    def __init__(self, message: str, sample_id=None):
        super().__init__(message)
        self.sample_id = sample_id


class UnparseableReply(ValueError):
    def __init__(self, raw: str):
        super().__init__(f"judge reply has no score in [0, 100]: {raw!r}")
        self.raw = raw


@dataclass
class JudgeConfig:
    endpoint: str = "http://localhost:8000/v1"
    model: str = "gpt-3.5-turbo"
    system_prompt: str = JUDGE_SYSTEM_PROMPT
    timeout: float = 30.0
    max_retries: int = 3
    concurrency: int = 4
    stub_mode: bool = True
    api_key: str | None = None
    backoff: float = 0.5

    def __post_init__(self):
        if self.max_retries < 0:
            raise ValueError("max_retries must be >= 0")
        if self.concurrency < 1:
            raise ValueError("concurrency must be >= 1")
        if self.timeout <= 0:
            raise ValueError("timeout must be positive")


def token_f1(a: str, b: str) -> float:
    ca, cb = Counter(split_words(a)), Counter(split_words(b))
    overlap = sum((ca & cb).values())
    if overlap == 0:
        return 0.0
    p, r = overlap / sum(ca.values()), overlap / sum(cb.values())
    return 2 * p * r / (p + r)


def stub_judge(candidate: str, reference: str) -> int:
    return int(math.floor(100 * token_f1(candidate, reference) + 0.5))


def parse_score(reply: str) -> int:
    m = re.search(r"-?\d+", reply or "")
    if m is None or not 0 <= int(m.group()) <= 100:
        raise UnparseableReply(reply)
    return int(m.group())


def _chat(client: httpx.Client, config: JudgeConfig, candidate: str, reference: str) -> str:
    headers = {"Authorization": f"Bearer {config.api_key}"} if config.api_key else {}
    body = {
        "model": config.model,
        "messages": [
            {"role": "system", "content": config.system_prompt},
            {"role": "user", "content": f"Ground truth: {reference}\nExplanation: {candidate}"},
        ],
    }
    resp = client.post(config.endpoint.rstrip("/") + "/chat/completions", json=body, headers=headers,
                       timeout=config.timeout)
    if resp.status_code >= 500 or resp.status_code == 429:
        raise httpx.TransportError(f"server returned {resp.status_code}")
    resp.raise_for_status()
    return resp.json()["choices"][0]["message"]["content"]


def judge_score(candidate: str, reference: str, config: JudgeConfig, client: httpx.Client | None = None,
                sample_id=None) -> int:
    if config.stub_mode:
        return stub_judge(candidate, reference)
    own = client is None
    client = client or httpx.Client()
    try:
        last = None
        for attempt in range(config.max_retries + 1):
            try:
                reply = _chat(client, config, candidate, reference)
                return parse_score(reply)
            except httpx.TransportError as exc:
                last = exc
                log.warning("judge attempt %d failed: %s", attempt + 1, exc)
                if attempt < config.max_retries and config.backoff > 0:
                    time.sleep(config.backoff * 2 ** attempt)
        raise JudgeUnavailable(f"judge unreachable after {config.max_retries + 1} attempts: {last}", sample_id)
    finally:
        if own:
            client.close()


def judge_many(pairs: list[tuple[str, str]], config: JudgeConfig, ids=None,
               client: httpx.Client | None = None) -> list[tuple[int | None, str | None]]:
    """Score (candidate, reference) pairs with bounded concurrency; failures become (None, reason)."""
    ids = list(ids) if ids is not None else list(range(len(pairs)))

    def one(k):
        cand, ref = pairs[k]
        try:
            return judge_score(cand, ref, config, client=shared, sample_id=ids[k]), None
        except (JudgeUnavailable, UnparseableReply) as exc:
            return None, str(exc)

    if config.stub_mode:
        shared = None
        return [one(k) for k in range(len(pairs))]
    shared = client or httpx.Client()
    try:
        with ThreadPoolExecutor(max_workers=config.concurrency) as pool:
            return list(pool.map(one, range(len(pairs))))
    finally:
        if client is None:
            shared.close()


# ---------------------------------------------------------------------------
# anomalies
# ---------------------------------------------------------------------------

_DIGIT_RUN = re.compile(r"[0-9/]{12,}")


def detect_numeric_anomaly(explanation: str) -> bool:
    chars = [c for c in explanation if not c.isspace()]
    if chars and sum(c.isdigit() for c in chars) / len(chars) >= 0.3:
        return True
    return _DIGIT_RUN.search(explanation) is not None


# ---------------------------------------------------------------------------
# aggregation and reports
# ---------------------------------------------------------------------------

@dataclass
class MetricRow:
    sample_id: str
    metric: str
    value: float | None


@dataclass
class MetricReport:
    name: str
    rows: list[MetricRow]
    means: dict[str, float]
    stds: dict[str, float]
    usr: float | None = None
    anomaly_count: int = 0
    excluded: dict[str, int] = field(default_factory=dict)

    @property
    def metrics(self) -> list[str]:
        return list(self.means)


def aggregate(rows: Iterable[MetricRow], name: str = "run", texts: list[str] | None = None) -> MetricReport:
    """Per-metric mean and population std; rows with value None are excluded and counted."""
    rows = list(rows)
    values: dict[str, list[float]] = {}
    excluded: dict[str, int] = {}
    for row in rows:
        values.setdefault(row.metric, [])
        if row.value is None:
            excluded[row.metric] = excluded.get(row.metric, 0) + 1
        else:
            values[row.metric].append(float(row.value))
    if not values:
        raise ValueError("aggregate: no rows")
    means, stds = {}, {}
    for metric, vals in values.items():
        if not vals:
            raise ValueError(f"aggregate: metric {metric!r} has no usable rows")
        arr = np.asarray(vals)
        means[metric] = float(arr.mean())
        stds[metric] = float(arr.std())
    report = MetricReport(name, rows, means, stds, excluded=excluded)
    if texts:
        report.usr = usr(texts)
        report.anomaly_count = sum(detect_numeric_anomaly(t) for t in texts)
    return report


def score_generations(pairs, lm: ToyLm | None, judge: JudgeConfig, metrics=DEFAULT_METRICS,
                      external: dict[str, float] | None = None) -> list[MetricRow]:
    """Rows for (sample_id, candidate, reference) triples; candidate None marks a failed generation."""
    pairs = list(pairs)
    rows: list[MetricRow] = []
    ok = [(sid, c, r) for sid, c, r in pairs if c is not None]
    if "judge" in metrics:
        scores = judge_many([(c, r) for _, c, r in ok], judge, ids=[sid for sid, _, _ in ok])
        for (sid, _, _), (score, err) in zip(ok, scores):
            if err:
                log.warning("judge row %s missing: %s", sid, err)
            rows.append(MetricRow(sid, "judge", score))
    embed = [m for m in ("embed_p", "embed_r", "embed_f1") if m in metrics]
    if embed or "likelihood" in metrics:
        if lm is None:
            raise ValueError("embedding and likelihood metrics need an LM")
        emb = lm_embedder(lm)
        for sid, c, r in ok:
            if embed:
                try:
                    p, rc, f = embed_sim_score(c, r, emb)
                except ValueError:
                    p = rc = f = None
                for m, v in zip(("embed_p", "embed_r", "embed_f1"), (p, rc, f)):
                    if m in embed:
                        rows.append(MetricRow(sid, m, v))
            if "likelihood" in metrics:
                try:
                    rows.append(MetricRow(sid, "likelihood", likelihood_score(c, r, lm)))
                except ValueError:
                    rows.append(MetricRow(sid, "likelihood", None))
    if external:
        for sid, _, _ in ok:
            rows.append(MetricRow(sid, "bleurt", external.get(sid)))
    return rows


def write_rows(path, rows: Iterable[MetricRow]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["sample_id", "metric", "value"])
        for row in rows:
            w.writerow([row.sample_id, row.metric, "" if row.value is None else repr(row.value)])


def read_rows(path) -> list[MetricRow]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing = {"sample_id", "metric", "value"} - set(reader.fieldnames or ())
        if missing:
            raise ValueError(f"{path}: rows file lacks column(s) {sorted(missing)}")
        return [MetricRow(r["sample_id"], r["metric"], float(r["value"]) if r["value"] else None) for r in reader]


_LABELS = {
    "judge": "Judge", "embed_p": "EmbP", "embed_r": "EmbR", "embed_f1": "EmbF1",
    "likelihood": "LogLik", "bleurt": "BLEURT",
}


def render_report(reports: list[MetricReport], fmt: str = "markdown", notes: bool = True) -> str:
    """One row per variant: mean and std per metric, then USR; best value per column marked."""
    if fmt not in ("markdown", "text"):
        raise ValueError("fmt must be 'markdown' or 'text'")
    if not reports:
        raise ValueError("render_report: nothing to render")
    metrics = [m for m in DEFAULT_METRICS if any(m in r.means for r in reports)]
    metrics += sorted({m for r in reports for m in r.means} - set(metrics) - {"bleurt"})
    if any("bleurt" in r.means for r in reports):
        metrics.append("bleurt")
    columns = []  # (header, getter, higher_is_better)
    for m in metrics:
        columns.append((f"{_LABELS.get(m, m)} mean", lambda r, m=m: r.means.get(m), True))
        columns.append((f"{_LABELS.get(m, m)} std", lambda r, m=m: r.stds.get(m), False))
    columns.append(("USR", lambda r: r.usr, True))

    best = []
    for _, get, up in columns:
        vals = [get(r) for r in reports if get(r) is not None]
        best.append((max(vals) if up else min(vals)) if vals else None)

    mark = (lambda s: f"**{s}**") if fmt == "markdown" else (lambda s: f"{s}*")
    header = ["Variant"] + [c[0] for c in columns]
    body = []
    for r in reports:
        cells = [r.name]
        for (_, get, _), b in zip(columns, best):
            v = get(r)
            if v is None:
                cells.append("n/a")
                continue
            s = f"{v:.4f}"
            cells.append(mark(s) if b is not None and v == b and len(reports) > 1 else s)
        body.append(cells)

    if fmt == "markdown":
        lines = ["| " + " | ".join(header) + " |", "|" + "|".join("---" for _ in header) + "|"]
        lines += ["| " + " | ".join(row) + " |" for row in body]
    else:
        widths = [max(len(str(row[k])) for row in [header, *body]) for k in range(len(header))]
        lines = ["  ".join(str(c).ljust(w) for c, w in zip(row, widths)) for row in [header, *body]]
    out = "\n".join(lines) + "\n"
    if notes:
        foot = ["Best value per column is marked. Means measure explainability (higher is better); "
                "standard deviations (population) measure stability (lower is better)."]
        foot.append("EmbP/EmbR/EmbF1 and LogLik use the frozen toy LM as the embedding and scoring model; "
                    "they are comparable only across runs sharing that LM.")
        for r in reports:
            if r.excluded:
                parts = ", ".join(f"{k}: {v}" for k, v in sorted(r.excluded.items()))
                foot.append(f"{r.name}: rows excluded as missing ({parts}).")
            if r.anomaly_count:
                foot.append(f"{r.name}: {r.anomaly_count} generation(s) flagged as numeric anomalies.")
        foot.append(DISCREPANCY_NOTE)
        out += "\n" + "\n".join(f"- {f}" for f in foot) + "\n"
    return out
