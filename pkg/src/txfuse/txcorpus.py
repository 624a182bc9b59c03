"""Transaction ingestion and linguistic serialization.

Raw transfers become short template phrases ("amount AMT_16 direction out
time HOD_9 GAP_11") so an account's history reads as one sentence. No
address ever becomes a token: identity is expressed only through behavior,
which is what lets the language model generalize to unseen accounts.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

PAD, CLS, SEP, MASK, UNK = "[PAD]", "[CLS]", "[SEP]", "[MASK]", "[UNK]"
RESERVED = (PAD, CLS, SEP, MASK, UNK)
PAD_ID, CLS_ID, SEP_ID, MASK_ID, UNK_ID = range(5)

TOKENS_PER_TX = 7  # amount AMT_k direction in|out time HOD_h GAP_g


@dataclass(frozen=True)
class TransactionRecord:
    """One transfer seen from a focal account's perspective."""

    sender: str
    receiver: str
    value: float        # ETH, non-negative
    direction: int      # +1 outflow, -1 inflow
    timestamp: int      # Unix seconds, > 0


@dataclass(frozen=True)
class TransactionSentence:
    account: str
    tokens: tuple                 # token strings, [CLS] first
    n_transactions: int
    truncated: bool

    @property
    def degenerate(self) -> bool:
        return self.n_transactions == 0


@dataclass
class RejectReport:
    """Counts of discarded input lines, keyed by reason."""

    reasons: dict = field(default_factory=dict)
    accepted: int = 0

    def reject(self, reason: str) -> None:
        self.reasons[reason] = self.reasons.get(reason, 0) + 1

    @property
    def rejected(self) -> int:
        return sum(self.reasons.values())


def bucket_amount(v: float) -> str:
    """Half-decade log bucket token for an ETH amount; 32 buckets total."""
    if v < 0:
        raise ValueError("amount must be non-negative")
    k = math.floor(2.0 * math.log10(max(v, 1e-8)))
    k = max(-16, min(15, k)) + 16
    return f"AMT_{k}"


def bucket_time(tau: int, prev_tau: Optional[int]) -> tuple:
    """Hour-of-day and log2 inter-transaction gap tokens."""
    if prev_tau is not None and tau < prev_tau:
        raise ValueError(f"timestamps out of order: {tau} < {prev_tau}")
    hour = (tau // 3600) % 24
    if prev_tau is None:
        gap = 0
    else:
        delta = max(tau - prev_tau, 1)
        gap = min(math.floor(math.log2(delta)), 24)
    return f"HOD_{hour}", f"GAP_{gap}"


def serialize_transaction(t: TransactionRecord, prev_tau: Optional[int]) -> list:
    """Render one transfer as its fixed seven-token template phrase."""
    hod, gap = bucket_time(t.timestamp, prev_tau)
    word = "out" if t.direction > 0 else "in"
    return ["amount", bucket_amount(t.value), "direction", word,
            "time", hod, gap]


def max_transactions(max_seq_len: int) -> int:
    """Most transactions that fit: 1 + 7n + (n-1) separators <= limit."""
    return max(max_seq_len // (TOKENS_PER_TX + 1), 0)


def build_sentence(account: str, records: Sequence[TransactionRecord],
                   max_seq_len: int = 128) -> TransactionSentence:
    """One sentence per account; oldest transactions drop first on overflow.

    Records must already be sorted by nondecreasing timestamp. Gap tokens
    are computed before truncation, so a retained transaction keeps the
    gap to its true predecessor even when that predecessor was dropped.
    """
    phrases = []
    prev = None
    for t in records:
        phrases.append(serialize_transaction(t, prev))
        prev = t.timestamp
    keep = max_transactions(max_seq_len)
    truncated = len(phrases) > keep
    kept = phrases[-keep:] if keep else []
    tokens = [CLS]
    for i, phrase in enumerate(kept):
        if i:
            tokens.append(SEP)
        tokens.extend(phrase)
    return TransactionSentence(account, tuple(tokens), len(records), truncated)


class Vocabulary:
    """Token-string to id map with five fixed reserved entries."""

    def __init__(self, token_to_id: dict):
        for i, tok in enumerate(RESERVED):
            if token_to_id.get(tok) != i:
                raise ValueError(f"reserved token {tok} must have id {i}")
        self.token_to_id = dict(token_to_id)
        self.id_to_token = {i: t for t, i in token_to_id.items()}

    def __len__(self) -> int:
        return len(self.token_to_id)

    def encode(self, tokens: Iterable[str]) -> list:
        unk = self.token_to_id[UNK]
        return [self.token_to_id.get(t, unk) for t in tokens]

    def decode(self, ids: Iterable[int]) -> list:
        return [self.id_to_token[i] for i in ids]

    def save(self, path: str) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.token_to_id, fh, indent=0, sort_keys=False)

    @classmethod
    def load(cls, path: str) -> "Vocabulary":
        with open(path, encoding="utf-8") as fh:
            return cls(json.load(fh))


def build_vocab(sentences: Iterable[TransactionSentence],
                min_freq: int = 1) -> Vocabulary:
    """Ids by descending frequency, ties broken alphabetically."""
    if min_freq < 1:
        raise ValueError("min_freq must be >= 1")
    counts: dict = {}
    total = 0
    for s in sentences:
        total += 1
        for tok in s.tokens:
            if tok not in RESERVED:
                counts[tok] = counts.get(tok, 0) + 1
    if total == 0:
        raise ValueError("cannot build a vocabulary from an empty corpus")
    kept = sorted((t for t, c in counts.items() if c >= min_freq),
                  key=lambda t: (-counts[t], t))
    mapping = {tok: i for i, tok in enumerate(RESERVED)}
    for offset, tok in enumerate(kept):
        mapping[tok] = 5 + offset
    return Vocabulary(mapping)


# ---------------------------------------------------------------------------
# ingestion
# ---------------------------------------------------------------------------

def _validate(raw: dict, report: RejectReport) -> Optional[dict]:
    try:
        sender = str(raw["from"]).lower()
        receiver = str(raw["to"]).lower()
        value = float(raw["value"])
        timestamp = int(raw["timestamp"])
    except (KeyError, TypeError, ValueError):
        report.reject("malformed record")
        return None
    if value < 0:
        report.reject("negative value")
        return None
    if timestamp <= 0:
        report.reject("nonpositive timestamp")
        return None
    if sender == receiver:
        report.reject("self transfer")
        return None
    return {"from": sender, "to": receiver, "value": value,
            "timestamp": timestamp}


def parse_transactions(lines: Iterable[str],
                       report: Optional[RejectReport] = None) -> tuple:
    """Group JSON-Lines transfers by focal account.

    Every transfer appears twice: as an outflow of its sender and an
    inflow of its receiver. Returns (account -> record list, report);
    bad lines are counted in the report and skipped.
    """
    report = report if report is not None else RejectReport()
    groups: dict = {}
    for line in lines:
        line = line.strip()
        if not line:
            continue
        try:
            raw = json.loads(line)
        except json.JSONDecodeError:
            report.reject("malformed record")
            continue
        _ingest_one(raw, groups, report)
    _sort_groups(groups)
    return groups, report


def parse_transactions_csv(fh, report: Optional[RejectReport] = None) -> tuple:
    """CSV variant: header row with columns from, to, value, timestamp."""
    report = report if report is not None else RejectReport()
    groups: dict = {}
    for raw in csv.DictReader(fh):
        _ingest_one(raw, groups, report)
    _sort_groups(groups)
    return groups, report


def _ingest_one(raw: dict, groups: dict, report: RejectReport) -> None:
    rec = _validate(raw, report)
    if rec is None:
        return
    report.accepted += 1
    out = TransactionRecord(rec["from"], rec["to"], rec["value"], +1,
                            rec["timestamp"])
    inc = TransactionRecord(rec["from"], rec["to"], rec["value"], -1,
                            rec["timestamp"])
    groups.setdefault(rec["from"], []).append(out)
    groups.setdefault(rec["to"], []).append(inc)


def _sort_groups(groups: dict) -> None:
    for records in groups.values():
        records.sort(key=lambda r: r.timestamp)


def load_transactions(path: str) -> tuple:
    """Dispatch on extension: .csv uses the CSV reader, else JSON-Lines."""
    if path.endswith(".csv"):
        with open(path, encoding="utf-8") as fh:
            return parse_transactions_csv(fh)
    with open(path, encoding="utf-8") as fh:
        return parse_transactions(fh)


def build_corpus(groups: dict, max_seq_len: int = 128) -> list:
    """Sentences for every account, in sorted account order."""
    return [build_sentence(acct, groups[acct], max_seq_len)
            for acct in sorted(groups)]


def write_corpus(path: str, sentences: Sequence[TransactionSentence],
                 vocab: Vocabulary) -> None:
    """Line format: account id, tab, space-separated token ids."""
    with open(path, "w", encoding="utf-8") as fh:
        for s in sentences:
            ids = " ".join(str(i) for i in vocab.encode(s.tokens))
            fh.write(f"{s.account}\t{ids}\n")


def read_corpus(path: str) -> list:
    """Returns (account, token-id list) pairs in file order."""
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            account, _, ids = line.rstrip("\n").partition("\t")
            out.append((account, [int(x) for x in ids.split()] if ids else []))
    return out
