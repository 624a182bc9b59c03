"""Synthetic transaction generator with a planted fraud signal.

The generator writes a single consistent world: every transfer appears
once globally, so an account's record set is exactly the transfers it
participates in. Fraud comes in two flavors with complementary
signatures. Burst accounts live days, wake at night, and fan small
amounts out to fresh addresses seconds apart; their timing and amounts
mark them in the serialized view while lifetime and fan-out mark them in
the graph view. Mule accounts collect near-identical amounts from many
fresh senders on a benign-looking schedule and forward the balance, so
neither the timing view nor the degree view alone pins them down.

A configurable fraction of each fraud class throttles its behavior to
evade detection: the account keeps ordinary day-time cover traffic over
a long life and compresses a damped copy of its class signature into one
short window, with looser amounts, a milder schedule, and counterparties
that are only partly fresh. The signature is then a sparse motif inside
an otherwise benign record, weakly suspicious in both views at once, so
recalling these accounts requires reading the window out of the sequence
and corroborating it across views rather than thresholding either one.
Plain normal accounts emit occasional installment runs (short bursts of
near-identical payments to one recurring partner) so that a motif alone,
without graph corroboration, stays inconclusive.

Normal accounts include three hard negatives, each a deliberate
doppelganger of a fraud class in exactly one view. Night owls replay the
burst signature in the serialized view (night hours, tight small
amounts, second-spaced runs) but pay a few recurring partners over a
long life, so their graph is ordinary. Subscribers replay the mule
signature in the serialized view (a stream of near-identical inflows
swept out in larger chunks) but collect from two or three recurring
payers instead of a fresh crowd. Busy traders are the mirror image:
their graph shows mule-like fresh fan-in and burst-like fresh fan-out,
while their serialized view stays diverse and day-scheduled. A model
reading one view must mislabel one doppelganger family; separating every
subtype requires agreement between both views.
"""

from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .rng import stream

EPOCH_BASE = 1_600_000_000  # all timestamps offset from this instant
SECONDS_PER_DAY = 86_400

# hour-of-day sampling weights
_DAY_PROFILE = np.array([1, 1, 1, 1, 1, 2, 4, 8, 12, 14, 14, 13,
                         12, 13, 14, 14, 13, 12, 10, 8, 6, 4, 2, 1],
                        dtype=np.float64)
_NIGHT_PROFILE = np.array([14, 15, 15, 14, 12, 8, 4, 2, 1, 1, 1, 1,
                           1, 1, 1, 1, 1, 1, 2, 3, 5, 8, 10, 12],
                          dtype=np.float64)
_DAY_PROFILE /= _DAY_PROFILE.sum()
_NIGHT_PROFILE /= _NIGHT_PROFILE.sum()
_MIXED_PROFILE = 0.45 * _NIGHT_PROFILE + 0.55 * _DAY_PROFILE


@dataclass(frozen=True)
class ClassBehavior:
    """Per-class generation knobs."""

    rate: float                # mean transactions initiated per account
    burstiness: float          # 0 = spread over lifetime, 1 = seconds apart
    fanout: int                # distinct counterparties
    lifetime_days: tuple       # (lo, hi) uniform range
    amount_mu: float           # log-normal location of ln(value)
    amount_sigma: float        # log-normal scale

    def validate(self, name: str) -> None:
        if self.rate <= 0:
            raise ValueError(f"{name}: transaction rate must be positive")
        if not 0.0 <= self.burstiness <= 1.0:
            raise ValueError(f"{name}: burstiness must lie in [0, 1]")
        if self.fanout < 1:
            raise ValueError(f"{name}: fanout must be >= 1")
        lo, hi = self.lifetime_days
        if not 0 < lo <= hi:
            raise ValueError(f"{name}: lifetime range must satisfy 0 < lo <= hi")
        if self.amount_sigma <= 0:
            raise ValueError(f"{name}: amount sigma must be positive")


@dataclass(frozen=True)
class SyntheticSpec:
    n_accounts: int = 2000
    fraud_fraction: float = 0.10
    horizon_days: float = 120.0
    normal: ClassBehavior = field(default_factory=lambda: ClassBehavior(
        rate=11.0, burstiness=0.0, fanout=5, lifetime_days=(45.0, 115.0),
        amount_mu=0.0, amount_sigma=1.0))
    burst: ClassBehavior = field(default_factory=lambda: ClassBehavior(
        rate=22.0, burstiness=0.9, fanout=16, lifetime_days=(1.0, 6.0),
        amount_mu=-1.2, amount_sigma=0.35))
    mule: ClassBehavior = field(default_factory=lambda: ClassBehavior(
        rate=20.0, burstiness=0.2, fanout=18, lifetime_days=(20.0, 50.0),
        amount_mu=-0.9, amount_sigma=0.15))
    mule_fraction: float = 0.4          # of fraud accounts
    throttled_fraction: float = 0.35    # of each fraud class
    night_owl_fraction: float = 0.08    # of normal accounts
    busy_trader_fraction: float = 0.08
    subscriber_fraction: float = 0.08

    def validate(self) -> None:
        if self.n_accounts < 10:
            raise ValueError("need at least 10 accounts")
        if not 0.0 < self.fraud_fraction < 1.0:
            raise ValueError("fraud fraction must lie strictly in (0, 1)")
        if self.horizon_days <= 0:
            raise ValueError("time horizon must be positive")
        self.normal.validate("normal")
        self.burst.validate("burst")
        self.mule.validate("mule")
        if not 0.0 <= self.mule_fraction <= 1.0:
            raise ValueError("mule fraction must lie in [0, 1]")
        if not 0.0 <= self.throttled_fraction <= 1.0:
            raise ValueError("throttled fraction must lie in [0, 1]")
        for name in ("night_owl_fraction", "busy_trader_fraction",
                     "subscriber_fraction"):
            if not 0.0 <= getattr(self, name) <= 0.5:
                raise ValueError(f"{name} must lie in [0, 0.5]")


def _tx(sender: str, receiver: str, value: float, t: float) -> dict:
    return {"from": sender, "to": receiver,
            "value": round(float(value), 6), "timestamp": int(t)}


def _timestamps(rng: np.random.Generator, n: int, start_day: float,
                lifetime: float, profile: np.ndarray,
                burstiness: float) -> np.ndarray:
    """Seconds offsets; burstiness collapses spacing toward seconds."""
    days = np.sort(rng.uniform(start_day, start_day + lifetime, size=n))
    hours = rng.choice(24, size=n, p=profile)
    secs = rng.uniform(0, 3600, size=n)
    t = (np.floor(days) * SECONDS_PER_DAY + hours * 3600 + secs)
    if burstiness > 0:
        # collapse a burst fraction of consecutive pairs to short gaps
        anchor = t[0]
        gaps = rng.exponential(20.0 + 900.0 * (1.0 - burstiness), size=n)
        bursty = anchor + np.concatenate([[0.0], np.cumsum(gaps[1:])])
        keep = rng.uniform(size=n) > burstiness
        t = np.where(keep, t, bursty)
        t = np.sort(t)
    return EPOCH_BASE + t


def _lifetime(rng: np.random.Generator, behavior: ClassBehavior,
              horizon: float) -> tuple:
    lo, hi = behavior.lifetime_days
    life = min(rng.uniform(lo, hi), horizon)
    start = rng.uniform(0.0, max(horizon - life, 0.25))
    return start, life


def _amounts(rng: np.random.Generator, behavior: ClassBehavior,
             n: int) -> np.ndarray:
    return rng.lognormal(behavior.amount_mu, behavior.amount_sigma, size=n)


def generate(spec: SyntheticSpec, seed: int) -> tuple:
    """Deterministic world build; returns (transactions, labels).

    Transactions are dicts sorted by (timestamp, sender, receiver);
    labels map every focal account to 0 (normal) or 1 (fraud).
    """
    spec.validate()
    n = spec.n_accounts
    accounts = [f"acct{i:05d}" for i in range(n)]
    roles = _assign_roles(spec, seed, accounts)
    normal_pool = [a for a, r in roles.items() if r in
                   ("normal", "night_owl", "subscriber")]

    transactions: list = []
    for acct in accounts:
        rng = stream(seed, f"synth:{acct}")
        role = roles[acct]
        if role == "burst":
            transactions.extend(_gen_burst(spec, rng, acct, normal_pool))
        elif role == "mule":
            transactions.extend(_gen_mule(spec, rng, acct, normal_pool))
        elif role == "night_owl":
            transactions.extend(_gen_night_owl(spec, rng, acct, normal_pool))
        elif role == "busy_trader":
            transactions.extend(_gen_busy_trader(spec, rng, acct))
        elif role == "subscriber":
            transactions.extend(_gen_subscriber(spec, rng, acct, normal_pool))
        else:
            transactions.extend(_gen_normal(spec, rng, acct, normal_pool,
                                            profile=_DAY_PROFILE,
                                            burstiness=0.0))
    transactions.sort(key=lambda r: (r["timestamp"], r["from"],
                                     r["to"], r["value"]))
    labels = {a: int(roles[a] in ("burst", "mule")) for a in accounts}
    return transactions, labels


def _assign_roles(spec: SyntheticSpec, seed: int,
                  accounts: Sequence[str]) -> dict:
    n = len(accounts)
    n_fraud = int(round(n * spec.fraud_fraction))
    perm = stream(seed, "synth-roles").permutation(n)
    roles = {a: "normal" for a in accounts}
    n_mule = int(round(n_fraud * spec.mule_fraction))
    for idx in perm[:n_mule]:
        roles[accounts[idx]] = "mule"
    for idx in perm[n_mule:n_fraud]:
        roles[accounts[idx]] = "burst"
    cursor = n_fraud
    for name, frac in (("night_owl", spec.night_owl_fraction),
                       ("busy_trader", spec.busy_trader_fraction),
                       ("subscriber", spec.subscriber_fraction)):
        count = int(round((n - n_fraud) * frac))
        for idx in perm[cursor:cursor + count]:
            roles[accounts[idx]] = name
        cursor += count
    return roles


def _gen_normal(spec: SyntheticSpec, rng: np.random.Generator, acct: str,
                pool: Sequence[str], profile: np.ndarray,
                burstiness: float) -> list:
    b = spec.normal
    start, life = _lifetime(rng, b, spec.horizon_days)
    n_out = max(2, int(rng.poisson(b.rate)))
    partners = [p for p in _pick(rng, pool, b.fanout) if p != acct]
    if not partners:
        partners = [f"ext-{acct}-0"]
    times = _timestamps(rng, n_out, start, life, profile, burstiness)
    values = _amounts(rng, b, n_out)
    dests = rng.choice(len(partners), size=n_out)
    out = [_tx(acct, partners[d], v, t)
           for d, v, t in zip(dests, values, times)]
    if rng.random() < 0.25:
        # installment run: near-identical payments to one recurring
        # partner inside a few days, a benign look-alike of the damped
        # fan-out motif that throttled fraud hides in cover traffic
        n_run = int(rng.integers(3, 7))
        run_to = partners[int(rng.integers(len(partners)))]
        r0 = start + life * rng.uniform(0.2, 0.7)
        rt = _timestamps(rng, n_run, r0, rng.uniform(1.0, 4.0),
                         _DAY_PROFILE, 0.3)
        v0 = float(rng.lognormal(-0.8, 0.5))
        rv = np.abs(v0 * (1.0 + rng.normal(0.0, 0.03, size=n_run)))
        out.extend(_tx(acct, run_to, v, t) for v, t in zip(rv, rt))
    return out


def _gen_night_owl(spec: SyntheticSpec, rng: np.random.Generator, acct: str,
                   pool: Sequence[str]) -> list:
    """Burst's serialized signature on a normal long-lived graph.

    Sends carry the burst class's amount distribution, night schedule,
    and near-burst pacing, and a few larger day-time top-ups arrive
    first, mirroring a burst account's victim seeding. Every
    counterparty is a recurring pool member, so the graph view (degree,
    freshness, lifetime) stays benign.
    """
    b = spec.burst
    start, life = _lifetime(rng, spec.normal, spec.horizon_days)
    out = []
    n_in = int(rng.integers(2, 4))
    payers = [p for p in _pick(rng, pool, n_in) if p != acct] or [f"ext-{acct}-p"]
    vt = _timestamps(rng, n_in, start, life * 0.3, _DAY_PROFILE, 0.0)
    for t in vt:
        out.append(_tx(payers[int(rng.integers(len(payers)))], acct,
                       float(rng.lognormal(1.2, 0.5)), t))
    n_out = max(4, int(rng.poisson(spec.normal.rate * 1.3)))
    partners = [p for p in _pick(rng, pool, spec.normal.fanout)
                if p != acct] or [f"ext-{acct}-0"]
    times = _timestamps(rng, n_out, start + life * 0.3, life * 0.7,
                        _NIGHT_PROFILE, b.burstiness - 0.1)
    values = _amounts(rng, b, n_out)
    dests = rng.choice(len(partners), size=n_out)
    for d, v, t in zip(dests, values, times):
        out.append(_tx(acct, partners[d], v, t))
    return out


def _gen_busy_trader(spec: SyntheticSpec, rng: np.random.Generator,
                     acct: str) -> list:
    """Fraud-like graph (fresh fan-in and fan-out) with benign text.

    Degree and counterparty freshness mimic the mule's collection side
    and the burst's distribution side at once, but amounts stay diverse
    and the schedule stays day-shaped, so the serialized view reads as
    ordinary trading.
    """
    b = spec.normal
    life = min(rng.uniform(15.0, 60.0), spec.horizon_days)
    start = rng.uniform(0.0, max(spec.horizon_days - life, 0.25))
    n_in = max(4, int(rng.poisson(spec.mule.rate * 0.7)))
    n_out = max(3, int(rng.poisson(b.rate * 0.8)))
    out = []
    times = _timestamps(rng, n_in, start, life, _DAY_PROFILE, 0.0)
    for i, t in enumerate(times):
        v = float(_amounts(rng, b, 1)[0])
        out.append(_tx(f"ext-{acct}-i{i}", acct, v, t))
    times = _timestamps(rng, n_out, start, life, _DAY_PROFILE, 0.0)
    for i, t in enumerate(times):
        v = float(_amounts(rng, b, 1)[0])
        out.append(_tx(acct, f"ext-{acct}-o{i}", v, t))
    return out


def _gen_subscriber(spec: SyntheticSpec, rng: np.random.Generator, acct: str,
                    pool: Sequence[str]) -> list:
    """The mule's serialized signature at subscription-scale degree.

    Collects the mule class's near-identical amounts on the mule's
    schedule and sweeps the balance out in a few larger transfers, but
    every payment comes from two or three recurring payers and the
    sweeps go to one recurring partner, so the graph stays benign.
    """
    m = spec.mule
    start, life = _lifetime(rng, spec.normal, spec.horizon_days)
    n_in = max(6, int(rng.poisson(m.rate * 0.9)))
    payers = [p for p in _pick(rng, pool, 3) if p != acct] or [f"ext-{acct}-p"]
    times = _timestamps(rng, n_in, start, life, _DAY_PROFILE, m.burstiness)
    values = _amounts(rng, m, n_in)
    srcs = rng.choice(len(payers), size=n_in)
    out = [_tx(payers[s], acct, v, t)
           for s, v, t in zip(srcs, values, times)]
    partner = payers[int(rng.integers(len(payers)))]
    n_fwd = int(rng.integers(2, 5))
    total = float(values.sum())
    ft = _timestamps(rng, n_fwd, start + life * 0.5, life * 0.5,
                     _DAY_PROFILE, 0.0)
    for t in ft:
        out.append(_tx(acct, partner, total / n_fwd, t))
    return out


def _cover_sends(spec: SyntheticSpec, rng: np.random.Generator, acct: str,
                 pool: Sequence[str], start: float, life: float) -> list:
    """Ordinary day-time sends that blend a throttled account in."""
    b = spec.normal
    n = max(4, int(rng.poisson(5.0)))
    partners = [p for p in _pick(rng, pool, 4) if p != acct]
    if not partners:
        partners = [f"ext-{acct}-0"]
    times = _timestamps(rng, n, start, life, _DAY_PROFILE, 0.0)
    values = _amounts(rng, b, n)
    dests = rng.choice(len(partners), size=n)
    return [_tx(acct, partners[d], v, t)
            for d, v, t in zip(dests, values, times)]


def _gen_burst(spec: SyntheticSpec, rng: np.random.Generator, acct: str,
               victims: Sequence[str]) -> list:
    """Victim seeding then rapid night fan-out to fresh sinks.

    A throttled burst instead lives weeks, keeps day-time cover traffic
    to recurring partners, and compresses a damped copy of the signature
    into one window: a couple of seeding inflows, then a mixed-schedule
    run of smallish sends to a half-fresh sink set.
    """
    b = spec.burst
    throttled = rng.random() < spec.throttled_fraction
    if not throttled:
        start, life = _lifetime(rng, b, spec.horizon_days)
        out = []
        # victims seed the account, then it fans out within hours
        n_victims = int(rng.integers(2, 4))
        chosen = _pick(rng, victims, n_victims)
        vt = _timestamps(rng, n_victims, start, max(life * 0.3, 0.05),
                         _DAY_PROFILE, 0.0)
        for v, t in zip(chosen, vt):
            out.append(_tx(v, acct, float(rng.lognormal(1.2, 0.5)), t))
        n_out = max(4, int(rng.poisson(b.rate)))
        sinks = [f"ext-{acct}-{i}" for i in range(b.fanout)]
        times = _timestamps(rng, n_out, start + life * 0.3, life * 0.7,
                            _NIGHT_PROFILE, b.burstiness)
        values = _amounts(rng, b, n_out)
        dests = rng.permutation(
            np.concatenate([np.arange(len(sinks)),
                            rng.choice(len(sinks),
                                       size=max(n_out - len(sinks),
                                                0))]))[:n_out]
        for d, v, t in zip(dests, values, times):
            out.append(_tx(acct, sinks[int(d)], v, t))
        return out
    life = min(rng.uniform(20.0, 60.0), spec.horizon_days)
    start = rng.uniform(0.0, max(spec.horizon_days - life, 0.25))
    out = _cover_sends(spec, rng, acct, victims, start, life)
    w0 = start + life * rng.uniform(0.25, 0.55)
    n_victims = int(rng.integers(2, 4))
    chosen = _pick(rng, victims, n_victims)
    vt = _timestamps(rng, n_victims, max(w0 - 2.0, start), 2.0,
                     _DAY_PROFILE, 0.0)
    for v, t in zip(chosen, vt):
        out.append(_tx(v, acct, float(rng.lognormal(1.2, 0.5)), t))
    n_mot = max(4, int(rng.poisson(b.rate * 0.4)))
    sinks = [f"ext-{acct}-{i}" for i in range(4)]
    sinks += [p for p in _pick(rng, victims, 2) if p != acct]
    times = _timestamps(rng, n_mot, w0, rng.uniform(1.0, 2.5),
                        _MIXED_PROFILE, 0.6)
    values = rng.lognormal(-1.0, 0.45, size=n_mot)
    dests = rng.choice(len(sinks), size=n_mot)
    for d, v, t in zip(dests, values, times):
        out.append(_tx(acct, sinks[int(d)], v, t))
    return out


def _gen_mule(spec: SyntheticSpec, rng: np.random.Generator, acct: str,
              pool: Sequence[str]) -> list:
    """Fan-in collection from fresh senders, then sweep-out.

    A throttled mule keeps day-time cover traffic over a long life and
    compresses collection into one window of fewer, looser payments from
    a half-fresh sender set, followed by the usual balance sweeps.
    """
    b = spec.mule
    throttled = rng.random() < spec.throttled_fraction
    if not throttled:
        start, life = _lifetime(rng, b, spec.horizon_days)
        n_in = max(6, int(rng.poisson(b.rate)))
        senders = [f"ext-{acct}-{i}" for i in range(b.fanout)]
        times = _timestamps(rng, n_in, start, life, _DAY_PROFILE,
                            b.burstiness)
        values = _amounts(rng, b, n_in)
        srcs = rng.permutation(
            np.concatenate([np.arange(len(senders)),
                            rng.choice(len(senders),
                                       size=max(n_in - len(senders),
                                                0))]))[:n_in]
        out = [_tx(senders[int(s)], acct, v, t)
               for s, v, t in zip(srcs, values, times)]
        # forward the collected balance in a few larger sweeps
        n_fwd = int(rng.integers(2, 5))
        total = float(values.sum())
        ft = _timestamps(rng, n_fwd, start + life * 0.5, life * 0.5,
                         _DAY_PROFILE, 0.0)
        for t in ft:
            out.append(_tx(acct, f"sink-{acct}", total / n_fwd, t))
        return out
    life = min(rng.uniform(40.0, 90.0), spec.horizon_days)
    start = rng.uniform(0.0, max(spec.horizon_days - life, 0.25))
    out = _cover_sends(spec, rng, acct, pool, start, life)
    w0 = start + life * rng.uniform(0.3, 0.55)
    wlen = rng.uniform(4.0, 10.0)
    n_in = max(5, int(rng.poisson(b.rate * 0.45)))
    senders = [f"ext-{acct}-{i}" for i in range(4)]
    senders += [p for p in _pick(rng, pool, 2) if p != acct]
    times = _timestamps(rng, n_in, w0, wlen, _DAY_PROFILE, 0.15)
    values = rng.lognormal(b.amount_mu, 0.35, size=n_in)
    srcs = rng.choice(len(senders), size=n_in)
    for s, v, t in zip(srcs, values, times):
        out.append(_tx(senders[int(s)], acct, v, t))
    n_fwd = int(rng.integers(2, 4))
    total = float(values.sum())
    ft = _timestamps(rng, n_fwd, w0 + wlen, 3.0, _DAY_PROFILE, 0.0)
    for t in ft:
        out.append(_tx(acct, f"sink-{acct}", total / n_fwd, t))
    return out


def _pick(rng: np.random.Generator, pool: Sequence[str], k: int) -> list:
    k = min(k, len(pool))
    if k == 0:
        return []
    idx = rng.choice(len(pool), size=k, replace=False)
    return [pool[i] for i in idx]


def write_dataset(out_dir: str, transactions: Sequence[dict],
                  labels: dict) -> tuple:
    """JSONL transfers plus a labels CSV; byte-stable for a given input."""
    os.makedirs(out_dir, exist_ok=True)
    tx_path = os.path.join(out_dir, "transactions.jsonl")
    with open(tx_path, "w", encoding="utf-8") as fh:
        for r in transactions:
            fh.write(json.dumps(r, sort_keys=True) + "\n")
    labels_path = os.path.join(out_dir, "labels.csv")
    with open(labels_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["account", "label"])
        for acct in sorted(labels):
            writer.writerow([acct, labels[acct]])
    return tx_path, labels_path


def load_labels(path: str) -> dict:
    with open(path, newline="", encoding="utf-8") as fh:
        return {row["account"]: int(row["label"])
                for row in csv.DictReader(fh)}
