"""Prompt induction: propose candidate task instructions from the seed set,
score each by generation fit and by pairwise preference, keep the argmax.

Generation fit is the mean sequence score of the gold outputs under the
candidate instruction. Backends that cannot score sequences fall back to
rewarding a generated output instead; which path ran is recorded alongside
the scores. Preference is a round-robin tournament judged by a separate
backend on a shared held-out slice of the seed set.

Fit scores and win counts live on incommensurable scales, so the combined
score z-normalizes each component across the candidate pool before summing;
normalization "none" sums the raw values instead.
"""

from __future__ import annotations

import json
import logging
import random
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from itertools import combinations

from . import prompts
from .backends import CapabilityError, ChatMessage, GenParams
from .corpus import format_question, trace_to_json
from .synthesis import PromptBundle

log = logging.getLogger(__name__)

SUBTASKS = ("QP", "UCoT")
NORMALIZATIONS = ("none", "zscore")
RETRY_ROUNDS = 3


class InductionError(Exception):
    pass


@dataclass
class CandidatePrompt:
    text: str
    s_gen: float | None = None
    s_pref: int | None = None
    combined: float | None = None
    gen_method: str | None = None


@dataclass
class InductionConfig:
    subtask: str
    n_candidates: int = 4
    reverse_prompt: str = prompts.REVERSE_INSTRUCTION
    held_out_fraction: float = 0.25
    normalization: str = "zscore"
    temperature: float = 0.1
    max_tokens: int = 1024
    base_seed: int = 0

    def __post_init__(self):
        if self.subtask not in SUBTASKS:
            raise InductionError(f"unknown subtask {self.subtask!r}; expected one of {SUBTASKS}")
        if self.n_candidates < 2:
            raise InductionError("n_candidates must be >= 2: preference scoring needs a pair")
        if not 0.0 < self.held_out_fraction < 1.0:
            raise InductionError("held_out_fraction must be in (0, 1)")
        if self.normalization not in NORMALIZATIONS:
            raise InductionError(f"unknown normalization {self.normalization!r}")


def gold_output(example, subtask):
    if subtask == "QP":
        return json.dumps(example.question_parsing, ensure_ascii=False, indent=2)
    return json.dumps(trace_to_json(example.trace), ensure_ascii=False, indent=2)


def _example_input(example, subtask):
    text = f"Question:\n{format_question(example.instance)}"
    if subtask == "UCoT" and example.instance.cot:
        text += f"\n\nCoT:\n{example.instance.cot}"
    return text


def _reverse_prompt_text(config, ordered_seed):
    parts = [prompts.SECTION_INSTRUCTION, config.reverse_prompt.strip(), "", prompts.SECTION_EXAMPLES]
    for example in ordered_seed:
        parts += ["", _example_input(example, config.subtask), "",
                  "Output:\n" + gold_output(example, config.subtask)]
    parts += ["", prompts.INDUCTION_HEADER]
    return "\n".join(parts)


def generate_candidates(config, seed_examples, backend):
    """Propose n distinct candidate instruction texts.

    Duplicate completions trigger retries over perturbed seed orderings for
    up to RETRY_ROUNDS extra rounds; after that a short list is returned
    with a warning.
    """
    if not seed_examples:
        raise InductionError("seed set must be non-empty")
    texts = []
    seen = set()
    attempt = 0
    for round_no in range(RETRY_ROUNDS + 1):
        ordered = list(seed_examples)
        if round_no:
            random.Random(config.base_seed + round_no).shuffle(ordered)
        prompt_text = _reverse_prompt_text(config, ordered)
        needed = config.n_candidates - len(texts)
        for _ in range(needed):
            params = GenParams(
                temperature=config.temperature,
                max_tokens=config.max_tokens,
                seed=config.base_seed * 10_000 + attempt,
            )
            attempt += 1
            completion = backend.generate([ChatMessage(role="user", content=prompt_text)], params)
            text = completion.strip()
            if text and text not in seen:
                seen.add(text)
                texts.append(text)
        if len(texts) >= config.n_candidates:
            break
    if len(texts) < config.n_candidates:
        log.warning(
            "only %d distinct candidate prompts after %d rounds (wanted %d)",
            len(texts), RETRY_ROUNDS + 1, config.n_candidates,
        )
    return texts


def _candidate_bundle(candidate_text, example, config):
    return PromptBundle(
        subtask=config.subtask,
        system_instruction=candidate_text,
        demonstrations=[],
        query=_example_input(example, config.subtask),
    )


def score_gen(candidate_text, seed_examples, config, backend, reward_backend=None, workers=4):
    """Mean per-example fit of the gold outputs under the candidate.

    Returns (score, method) with method "logprob" when the backend scored
    the gold sequences directly and "reward" for the fallback path.
    Per-example scoring fans out; the backend enforces its in-flight bound.
    """
    if not seed_examples:
        raise InductionError("seed set must be non-empty")
    params = GenParams(temperature=config.temperature, max_tokens=config.max_tokens)

    def score_one(example):
        messages = _candidate_bundle(candidate_text, example, config).to_messages()
        gold = gold_output(example, config.subtask)
        try:
            return backend.score_completion(messages, gold), "logprob"
        except CapabilityError:
            scorer = reward_backend or backend
            generated = backend.generate(messages, params)
            return scorer.reward(messages, generated or gold), "reward"

    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        results = list(pool.map(score_one, seed_examples))
    scores = [value for value, _ in results]
    method = "reward" if any(m == "reward" for _, m in results) else "logprob"
    return sum(scores) / len(scores), method


def _held_out_slice(seed_examples, fraction):
    count = max(1, round(fraction * len(seed_examples)))
    return list(seed_examples[-count:])


def _judge_messages(gold_blocks, outputs_a, outputs_b):
    parts = [prompts.JUDGE_INSTRUCTION, "", "Gold outputs:"]
    parts += gold_blocks
    parts += ["", "Outputs A:"]
    parts += outputs_a
    parts += ["", "Outputs B:"]
    parts += outputs_b
    parts += ["", prompts.JUDGE_ANSWER_LINE]
    return [ChatMessage(role="user", content="\n".join(parts))]


def _parse_verdict(raw):
    token = raw.strip().split()[0].strip(".,:;").upper() if raw.strip() else ""
    if token in ("A", "B", "TIE"):
        return token
    return None


def score_pref(candidate_texts, seed_examples, config, backend, judge_backend, workers=4):
    """Round-robin win counts over all unordered candidate pairs.

    Every pair is judged on the same held-out slice; a tie or an
    unparseable verdict credits neither side. Candidate outputs and pair
    judgements fan out concurrently; the tally runs in pair order.
    """
    if len(candidate_texts) < 2:
        raise InductionError("preference scoring needs at least two candidates")
    held_out = _held_out_slice(seed_examples, config.held_out_fraction)
    params = GenParams(temperature=config.temperature, max_tokens=config.max_tokens)

    jobs = [
        (text, example)
        for text in candidate_texts
        for example in held_out
    ]
    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        generated = list(
            pool.map(
                lambda job: backend.generate(
                    _candidate_bundle(job[0], job[1], config).to_messages(), params
                ),
                jobs,
            )
        )
    per_candidate = len(held_out)
    outputs = [
        generated[i * per_candidate : (i + 1) * per_candidate]
        for i in range(len(candidate_texts))
    ]
    gold_blocks = [gold_output(ex, config.subtask) for ex in held_out]
    pairs = list(combinations(range(len(candidate_texts)), 2))
    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        raw_verdicts = list(
            pool.map(
                lambda pair: judge_backend.generate(
                    _judge_messages(gold_blocks, outputs[pair[0]], outputs[pair[1]]), params
                ),
                pairs,
            )
        )
    wins = [0] * len(candidate_texts)
    for (i, j), raw in zip(pairs, raw_verdicts):
        verdict = _parse_verdict(raw)
        if verdict == "A":
            wins[i] += 1
        elif verdict == "B":
            wins[j] += 1
        elif verdict is None:
            log.warning("unparseable judge verdict %r; pair (%d, %d) counted as tie", raw, i, j)
    return wins


def _normalize_scores(values, normalization):
    if normalization == "none":
        return [float(v) for v in values]
    mean = sum(values) / len(values)
    variance = sum((v - mean) ** 2 for v in values) / len(values)
    std = variance**0.5
    if std == 0.0:
        return [0.0] * len(values)
    return [(v - mean) / std for v in values]


def select_prompt(candidates, config):
    """Pick the candidate with the highest combined score; ties keep the
    lowest index."""
    if not candidates:
        raise InductionError("no candidates to select from")
    for cand in candidates:
        if cand.s_gen is None or cand.s_pref is None:
            raise InductionError(f"candidate not fully scored: {cand.text[:40]!r}")
    gen_norm = _normalize_scores([c.s_gen for c in candidates], config.normalization)
    pref_norm = _normalize_scores([c.s_pref for c in candidates], config.normalization)
    best = None
    for idx, cand in enumerate(candidates):
        cand.combined = gen_norm[idx] + pref_norm[idx]
        if best is None or cand.combined > best.combined:
            best = cand
    return best


def induce_prompt(config, seed_examples, backend, judge_backend=None, reward_backend=None,
                  workers=4):
    """Full induction pass; returns (winner, report dict for the sidecar)."""
    texts = generate_candidates(config, seed_examples, backend)
    candidates = [CandidatePrompt(text=t) for t in texts]
    for cand in candidates:
        cand.s_gen, cand.gen_method = score_gen(
            cand.text, seed_examples, config, backend, reward_backend, workers=workers
        )
    if len(candidates) >= 2:
        wins = score_pref(
            texts, seed_examples, config, backend, judge_backend or backend, workers=workers
        )
    else:
        wins = [0] * len(candidates)
    for cand, win in zip(candidates, wins):
        cand.s_pref = win
    winner = select_prompt(candidates, config)
    report = {
        "config": asdict(config),
        "winner": winner.text,
        "candidates": [
            {
                "text": c.text,
                "s_gen": c.s_gen,
                "s_pref": c.s_pref,
                "combined": c.combined,
                "gen_method": c.gen_method,
            }
            for c in candidates
        ],
    }
    return winner, report
