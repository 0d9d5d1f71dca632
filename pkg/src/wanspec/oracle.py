"""Deterministic token sources standing in for the draft and target models.

An oracle yields whole sequences of :class:`TokenRecord`. Each record carries
the target model's greedy token and top-2 distribution plus the draft model's
top-2 distribution for the same position. The protocol code never sees an
oracle directly; the harnesses (simulator, runtime) look records up by
absolute position.
"""

from __future__ import annotations

import json
import math
import random
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

from .spectree import ValidationResult

DEFAULT_VOCAB_SIZE = 32768
DEFAULT_EOS_ID = 0


class OracleError(Exception):
    """Base class for oracle failures."""


class OracleConfigError(OracleError):
    pass


class TraceParseError(OracleError):
    def __init__(self, index: int, reason: str):
        super().__init__(f"trace record {index}: {reason}")
        self.index = index
        self.reason = reason


class TraceExhausted(OracleError):
    pass


@dataclass(frozen=True)
class Prediction:
    """Top candidates of one next-token distribution, plus its entropy in nats."""

    top: tuple[tuple[int, float], ...]
    entropy: float

    def __post_init__(self):
        if len(self.top) < 2:
            raise ValueError("a prediction needs at least two candidates")
        for tok, p in self.top:
            if tok < 0:
                raise ValueError(f"negative token id {tok}")
            if not 0.0 < p <= 1.0:
                raise ValueError(f"candidate probability {p} outside (0, 1]")
        if self.top[0][1] + self.top[1][1] > 1.0 + 1e-12:
            raise ValueError("top-2 probabilities sum above 1")
        ranked = sorted(self.top, key=lambda c: (-c[1], c[0]))
        if list(ranked) != list(self.top):
            raise ValueError("candidates must be sorted by probability desc, token asc")
        if self.entropy < 0:
            raise ValueError("negative entropy")

    @property
    def argmax(self) -> int:
        return self.top[0][0]

    @property
    def argmax2(self) -> int:
        return self.top[1][0]


@dataclass(frozen=True)
class TokenRecord:
    position: int
    target_token: int
    target_prediction: Prediction
    draft_prediction: Prediction

    def __post_init__(self):
        if self.target_prediction.argmax != self.target_token:
            raise ValueError(
                f"position {self.position}: target token {self.target_token} is not "
                f"the target argmax {self.target_prediction.argmax}"
            )

    @property
    def draft_matches(self) -> bool:
        return self.draft_prediction.argmax == self.target_token


@dataclass
class OracleConfig:
    kind: str = "stochastic"
    seed: int = 0
    match_prob: float = 0.8
    entropy_low: float = 0.3
    entropy_high: float = 1.5
    second_correct_prob: float = 0.3
    trace_path: str | None = None
    sequence_length: int = 100
    vocab_size: int = DEFAULT_VOCAB_SIZE
    eos_id: int = DEFAULT_EOS_ID

    def validate(self) -> None:
        if self.kind not in ("stochastic", "trace"):
            raise OracleConfigError(f"unknown oracle kind {self.kind!r}")
        if not 0.0 <= self.match_prob <= 1.0:
            raise OracleConfigError("match_prob must lie in [0, 1]")
        if not 0.0 <= self.second_correct_prob <= 1.0:
            raise OracleConfigError("second_correct_prob must lie in [0, 1]")
        if self.entropy_low <= 0 or self.entropy_high <= 0:
            raise OracleConfigError("entropy means must be positive")
        if self.sequence_length < 1:
            raise OracleConfigError("sequence_length must be >= 1")
        if self.vocab_size < 4:
            raise OracleConfigError("vocab_size must be >= 4")
        if not 0 <= self.eos_id < self.vocab_size:
            raise OracleConfigError("eos_id outside the vocabulary")
        if self.kind == "trace" and not self.trace_path:
            raise OracleConfigError("trace oracle needs trace_path")


def entropy_of(distribution: Sequence[float]) -> float:
    """Shannon entropy in nats, with 0 ln 0 taken as 0."""
    total = 0.0
    for p in distribution:
        if p < 0:
            raise ValueError(f"negative probability {p}")
        total += p
    if abs(total - 1.0) > 1e-9:
        raise ValueError(f"probabilities sum to {total}, not 1")
    h = 0.0
    for p in distribution:
        if p > 0:
            h -= p * math.log(p)
    return h


def top2_probs(entropy: float) -> tuple[float, float]:
    """Map an entropy onto a plausible (top-1, top-2) probability pair.

    Monotone: higher entropy gives a flatter head. The second probability is
    kept strictly below the first so argmax never depends on id tie-breaks.
    """
    p1 = math.exp(-entropy)
    p2 = min(0.5 * p1, 0.5 * (1.0 - p1))
    if p2 <= 0.0:
        p2 = 5e-324
    return p1, p2


class Oracle:
    """Stateful source of token sequences."""

    def __init__(self, config: OracleConfig):
        self.config = config

    def next_sequence(self) -> list[TokenRecord]:
        raise NotImplementedError


class StochasticOracle(Oracle):
    """I.i.d. per-position oracle with a configurable draft match rate."""

    def __init__(self, config: OracleConfig):
        super().__init__(config)
        self.rng = random.Random(config.seed)

    def _token(self, *exclude: int) -> int:
        # rejection keeps the draw uniform over the vocabulary minus `exclude`
        while True:
            tok = self.rng.randrange(self.config.vocab_size)
            if tok != self.config.eos_id and tok not in exclude:
                return tok

    def _entropy(self, mean: float) -> float:
        return max(self.rng.expovariate(1.0 / mean), 1e-12)

    def _record(self, position: int, last: bool) -> TokenRecord:
        cfg = self.config
        rng = self.rng
        match = rng.random() < cfg.match_prob
        mean = cfg.entropy_low if match else cfg.entropy_high
        target = cfg.eos_id if last else self._token()
        t_ent = self._entropy(mean)
        d_ent = self._entropy(mean)

        p1, p2 = top2_probs(t_ent)
        target_pred = Prediction(((target, p1), (self._token(target), p2)), t_ent)

        if match:
            first = target
            second = self._token(target)
        else:
            first = self._token(target)
            if rng.random() < cfg.second_correct_prob:
                second = target
            else:
                second = self._token(target, first)
        q1, q2 = top2_probs(d_ent)
        draft_pred = Prediction(((first, q1), (second, q2)), d_ent)
        return TokenRecord(position, target, target_pred, draft_pred)

    def next_sequence(self) -> list[TokenRecord]:
        n = self.config.sequence_length
        return [self._record(i, i == n - 1) for i in range(n)]


class TraceOracle(Oracle):
    """Replays sequences from a trace file, sampled without replacement."""

    def __init__(self, config: OracleConfig):
        super().__init__(config)
        self.sequences = read_trace(config.trace_path)
        order = list(range(len(self.sequences)))
        random.Random(config.seed).shuffle(order)
        self._order = order

    def next_sequence(self) -> list[TokenRecord]:
        if not self._order:
            raise TraceExhausted(
                f"all {len(self.sequences)} sequences of {self.config.trace_path} consumed"
            )
        return list(self.sequences[self._order.pop(0)])


def open_oracle(config: OracleConfig) -> Oracle:
    config.validate()
    if config.kind == "stochastic":
        return StochasticOracle(config)
    return TraceOracle(config)


# -- trace files -------------------------------------------------------------


def _pairs(raw, index: int, name: str) -> tuple[tuple[int, float], ...]:
    if not isinstance(raw, list) or len(raw) < 2:
        raise TraceParseError(index, f"{name} must list at least two [id, prob] pairs")
    out = []
    for pair in raw:
        if not (isinstance(pair, list) and len(pair) == 2):
            raise TraceParseError(index, f"{name} entry {pair!r} is not an [id, prob] pair")
        tok, p = pair
        if not isinstance(tok, int) or isinstance(tok, bool):
            raise TraceParseError(index, f"{name} token id {tok!r} is not an integer")
        out.append((tok, float(p)))
    return tuple(out)


def record_from_json(obj: dict, position: int, index: int) -> TokenRecord:
    try:
        t = obj["t"]
        tp = _pairs(obj["tp"], index, "tp")
        dp = _pairs(obj["dp"], index, "dp")
        te = float(obj["te"])
        de = float(obj["de"])
    except KeyError as exc:
        raise TraceParseError(index, f"missing field {exc.args[0]!r}") from None
    except (TypeError, ValueError) as exc:
        raise TraceParseError(index, str(exc)) from None
    try:
        return TokenRecord(position, t, Prediction(tp, te), Prediction(dp, de))
    except ValueError as exc:
        raise TraceParseError(index, f"token {position}: {exc}") from None


def record_to_json(rec: TokenRecord) -> dict:
    return {
        "t": rec.target_token,
        "tp": [[tok, p] for tok, p in rec.target_prediction.top],
        "te": rec.target_prediction.entropy,
        "dp": [[tok, p] for tok, p in rec.draft_prediction.top],
        "de": rec.draft_prediction.entropy,
    }


def dumps_sequence(records: Iterable[TokenRecord]) -> str:
    return json.dumps({"tokens": [record_to_json(r) for r in records]}, separators=(",", ":"))


def read_trace(path) -> list[list[TokenRecord]]:
    """Parse a trace file; record indices in errors are 0-based line numbers."""
    sequences = []
    with open(path, encoding="utf-8") as fh:
        for index, line in enumerate(fh):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise TraceParseError(index, f"invalid JSON: {exc.msg}") from None
            if not isinstance(obj, dict) or not isinstance(obj.get("tokens"), list):
                raise TraceParseError(index, "expected an object with a 'tokens' list")
            if not obj["tokens"]:
                raise TraceParseError(index, "empty sequence")
            sequences.append(
                [record_from_json(tok, pos, index) for pos, tok in enumerate(obj["tokens"])]
            )
    if not sequences:
        raise TraceParseError(0, "trace holds no sequences")
    return sequences


def write_trace(path, config: OracleConfig, n_sequences: int) -> Path:
    if config.kind != "stochastic":
        raise OracleConfigError("traces are generated from a stochastic oracle")
    oracle = open_oracle(config)
    path = Path(path)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for _ in range(n_sequences):
            fh.write(dumps_sequence(oracle.next_sequence()))
            fh.write("\n")
    return path


@dataclass
class SequenceView:
    """Position-indexed access to one sequence, as the harnesses need it.

    Positions at or past the end answer with an EOS-headed draft prediction so
    a draft model running off the end of the sequence terminates its branch.
    """

    records: list[TokenRecord]
    eos_id: int = DEFAULT_EOS_ID
    _past_end: Prediction = field(init=False, repr=False)

    def __post_init__(self):
        filler = 1 if self.eos_id != 1 else 2
        self._past_end = Prediction(((self.eos_id, 0.5), (filler, 0.25)), math.log(2))

    def __len__(self) -> int:
        return len(self.records)

    @property
    def target_tokens(self) -> list[int]:
        return [r.target_token for r in self.records]

    def draft_at(self, position: int) -> Prediction:
        if position < len(self.records):
            return self.records[position].draft_prediction
        return self._past_end

    def target_at(self, position: int) -> TokenRecord:
        return self.records[position]


def verify(view: SequenceView, committed_len: int, path) -> ValidationResult:
    """Greedy target-model check of `path` proposed after `committed_len` tokens."""
    accepted = []
    pos = committed_len
    for tok in path:
        truth = view.records[pos].target_token
        if tok != truth:
            break
        accepted.append(tok)
        pos += 1
    rec = view.records[pos]
    return ValidationResult(tuple(accepted), rec.target_token, rec.target_prediction.entropy)
