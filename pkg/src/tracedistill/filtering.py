"""Dual-stage quality filtering and step-level CV expansion.

Stage one is structural: drop records whose output never parsed, parsed to
fewer than two steps, or carry an empty condition list. Stage two scores
every structural survivor twice with a reward backend, once with retrieved
demonstrations in the context and once without, and keeps records whose
strategy score clears a strict threshold (default 0). Records the reward
backend fails on are excluded from all reward strategies rather than
retried forever.

Every decision is emitted as an audit line so dataset sizes can be traced
back to individual drops.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

from .backends import BackendError
from .corpus import SeedExample
from .synthesis import STATUS_OK, build_ucot_prompt

log = logging.getLogger(__name__)

STRATEGY_STRUCTURE = "structure"
STRATEGY_ZERO = "zero"
STRATEGY_FEW = "few"
STRATEGY_AVERAGE = "average"
STRATEGIES = (STRATEGY_STRUCTURE, STRATEGY_ZERO, STRATEGY_FEW, STRATEGY_AVERAGE)

REASON_KEPT = "kept"
REASON_EMPTY_QP = "empty_qp"
REASON_BELOW_THRESHOLD = "below_threshold"
REASON_UNSCORED = "unscored"

STAGE_STRUCTURAL = "structural"
STAGE_REWARD = "reward"


@dataclass
class RewardRecord:
    s_few: float
    s_zero: float

    @property
    def s_avg(self):
        return (self.s_few + self.s_zero) / 2


@dataclass
class FilterOutcome:
    record_id: str
    stage: str
    decision: str
    reason: str
    scores: RewardRecord | None = None
    strategy: str | None = None

    def to_json(self):
        out = {
            "id": self.record_id,
            "stage": self.stage,
            "decision": self.decision,
            "reason": self.reason,
        }
        if self.strategy is not None:
            out["strategy"] = self.strategy
        if self.scores is not None:
            out["scores"] = {
                "s_few": self.scores.s_few,
                "s_zero": self.scores.s_zero,
                "s_avg": self.scores.s_avg,
            }
        return out


def structural_filter(record):
    """Keep a record iff it parsed cleanly with >=2 steps and non-empty QP."""
    if record.parse_status != STATUS_OK:
        return FilterOutcome(
            record_id=record.instance.id,
            stage=STAGE_STRUCTURAL,
            decision="drop",
            reason=record.parse_status,
        )
    if not record.qp:
        return FilterOutcome(
            record_id=record.instance.id,
            stage=STAGE_STRUCTURAL,
            decision="drop",
            reason=REASON_EMPTY_QP,
        )
    return FilterOutcome(
        record_id=record.instance.id,
        stage=STAGE_STRUCTURAL,
        decision="keep",
        reason=REASON_KEPT,
    )


def build_reward_prompts(instance, response_text, hits, seed_by_id, instruction=None):
    """Few-shot and zero-shot chat contexts for scoring one synthesized output.

    Both contexts share the same instruction text; only the few-shot one
    carries demonstrations. The response being scored is passed to the
    reward call separately.
    """
    few = build_ucot_prompt(instance, hits, seed_by_id, instruction)
    zero = build_ucot_prompt(instance, [], seed_by_id, instruction)
    return few.to_messages(), zero.to_messages()


def score_record(record, hits, seed_by_id, backend, instruction=None):
    """Reward the raw synthesized reasoning under both prompt variants."""
    response = record.ucot_raw
    few_messages, zero_messages = build_reward_prompts(
        record.instance, response, hits, seed_by_id, instruction
    )
    s_few = backend.reward(few_messages, response)
    s_zero = backend.reward(zero_messages, response)
    return RewardRecord(s_few=s_few, s_zero=s_zero)


def strategy_score(rewards, strategy):
    if strategy == STRATEGY_ZERO:
        return rewards.s_zero
    if strategy == STRATEGY_FEW:
        return rewards.s_few
    if strategy == STRATEGY_AVERAGE:
        return rewards.s_avg
    raise ValueError(f"strategy {strategy!r} has no reward score")


def apply_strategy(records, strategy, threshold=0.0):
    """Keep the subset selected by the strategy, preserving input order.

    The structure strategy keeps every input; the reward strategies keep
    records whose score is strictly above the threshold.
    """
    if strategy not in STRATEGIES:
        raise ValueError(f"unknown strategy {strategy!r}; expected one of {STRATEGIES}")
    if strategy == STRATEGY_STRUCTURE:
        return list(records)
    kept = []
    for record in records:
        if record.rewards is None:
            continue
        if strategy_score(record.rewards, strategy) > threshold:
            kept.append(record)
    return kept


def to_training_example(record):
    return SeedExample(
        instance=record.instance,
        question_parsing=list(record.qp),
        trace=record.trace,
    )


@dataclass
class CVRow:
    id: str
    question: str
    question_parsing: list[str]
    statement: str
    evidence: str
    verification: bool


def expand_cv(examples):
    """One verification row per step; row count equals the CV dataset size."""
    rows = []
    for example in examples:
        if len(example.trace.steps) < 2:
            raise ValueError(
                f"trace {example.instance.id!r} has {len(example.trace.steps)} steps; "
                "expand_cv expects structurally filtered traces"
            )
        for step in example.trace.steps:
            rows.append(
                CVRow(
                    id=example.instance.id,
                    question=example.instance.question,
                    question_parsing=list(example.question_parsing),
                    statement=step.statement,
                    evidence=step.evidence,
                    verification=step.verification,
                )
            )
    return rows


@dataclass
class FilterResult:
    outcomes: list[FilterOutcome]
    kept: dict[str, list]  # strategy -> SynthesizedRecords, input order


def run_filter(records, index, seed_by_id, reward_backend, k=5,
               threshold=0.0, instruction=None, leave_one_out=True,
               strategies=STRATEGIES, workers=4):
    """Structural stage, reward stage, strategy subsets, audit trail.

    Reward calls happen only for structural survivors; scoring failures
    mark the record unscored and exclude it from every reward strategy.
    """
    from .retrieval import top_k

    outcomes = []
    survivors = []
    for record in records:
        outcome = structural_filter(record)
        outcomes.append(outcome)
        if outcome.decision == "keep":
            survivors.append(record)

    need_scores = any(s != STRATEGY_STRUCTURE for s in strategies)
    scored = []
    if need_scores and survivors:
        def job(record):
            exclude = {record.instance.id} if leave_one_out else None
            hits = top_k(index, record.instance.question, k, exclude=exclude)
            return score_record(record, hits, seed_by_id, reward_backend, instruction)

        results = {}
        with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
            futures = {pool.submit(job, r): r for r in survivors}
            for future, record in futures.items():
                try:
                    results[record.instance.id] = future.result()
                except BackendError as exc:
                    log.warning("reward scoring failed for %s: %s", record.instance.id, exc)
                    results[record.instance.id] = None
        for record in survivors:
            record.rewards = results[record.instance.id]
            if record.rewards is not None:
                scored.append(record)
            else:
                outcomes.append(
                    FilterOutcome(
                        record_id=record.instance.id,
                        stage=STAGE_REWARD,
                        decision="drop",
                        reason=REASON_UNSCORED,
                    )
                )

    kept = {}
    for strategy in strategies:
        if strategy == STRATEGY_STRUCTURE:
            kept[strategy] = list(survivors)
            continue
        subset = apply_strategy(scored, strategy, threshold)
        kept_ids = {r.instance.id for r in subset}
        for record in scored:
            keep = record.instance.id in kept_ids
            outcomes.append(
                FilterOutcome(
                    record_id=record.instance.id,
                    stage=STAGE_REWARD,
                    decision="keep" if keep else "drop",
                    reason=REASON_KEPT if keep else REASON_BELOW_THRESHOLD,
                    scores=record.rewards,
                    strategy=strategy,
                )
            )
        kept[strategy] = subset
    return FilterResult(outcomes=outcomes, kept=kept)
