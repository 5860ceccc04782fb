"""Three-agent inference cascade: Parser, Decomposer, Verifier.

One retrieval pass per instance feeds all four stages; the rendered
demonstration block is byte-identical across them. Stages run strictly in
order, each consuming the previous stage's output:

    conditions  = Parser(question)
    statements  = Decomposer(question, cot)
    evidence    = Verifier(question, statements)          # evidence pass
    verdicts    = Verifier(question, statements, evidence)  # verify pass

Stage failures are recorded and flagged rather than fatal; downstream
stages continue on best-effort inputs so a batch always yields aligned,
schema-valid predictions.
"""

from __future__ import annotations

import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

from . import prompts
from .backends import GenParams
from .corpus import (
    SchemaError,
    canonicalize_verification,
    format_question,
    instance_to_json,
    save_jsonl,
    trace_to_json,
    verification_str,
)
from .retrieval import top_k
from .synthesis import PromptBundle, extract_json

log = logging.getLogger(__name__)

PARSER = "parser"
DECOMPOSER = "decomposer"
VERIFIER = "verifier"
AGENTS = (PARSER, DECOMPOSER, VERIFIER)

REPROMPT_SUFFIX = (
    "Your previous answer could not be used: {problem}. "
    "Return only the JSON array requested, nothing else."
)


class CascadeError(Exception):
    pass


@dataclass
class AgentBinding:
    agent: str
    backend: object
    template_id: str = "default"

    def __post_init__(self):
        if self.agent not in AGENTS:
            raise CascadeError(f"unknown agent {self.agent!r}; expected one of {AGENTS}")


@dataclass
class StageResult:
    raw: list[str] = field(default_factory=list)
    prompt: str = ""
    failed: bool = False
    started: float = 0.0
    finished: float = 0.0

    @property
    def duration(self):
        return self.finished - self.started


@dataclass
class CascadeOutput:
    instance_id: str
    qp: list[str]
    statements: list[str]
    evidence: list[str]
    verdicts: list[bool]
    stages: dict[str, StageResult]
    flags: list[str] = field(default_factory=list)


def demo_pairs_full(hits, seed_by_id):
    """Full example cards shared verbatim by every stage prompt."""
    pairs = []
    for hit in hits:
        example = seed_by_id[hit.id]
        inst = example.instance
        head = f"Question:\n{format_question(inst)}"
        body = [
            prompts.OUTPUT_HEADERS["QP"],
            json.dumps(example.question_parsing, ensure_ascii=False, indent=2),
        ]
        if inst.cot:
            body += ["", "CoT:", inst.cot]
        body += [
            "",
            "CoT Steps:",
            json.dumps(trace_to_json(example.trace), ensure_ascii=False, indent=2),
        ]
        pairs.append((head, "\n".join(body)))
    return pairs


def _generate(binding, bundle, params, reprompt_problem=None):
    """One generation, optionally with a corrective reprompt appended."""
    text = bundle.render_text()
    if reprompt_problem:
        header = text.rsplit("\n", 1)[-1]
        text = "\n".join(
            [text, "", REPROMPT_SUFFIX.format(problem=reprompt_problem), header]
        )
    from .backends import ChatMessage

    return text, binding.backend.generate([ChatMessage(role="user", content=text)], params)


def _string_list(raw):
    found = extract_json(raw)
    if found is None:
        return None
    value = found[0]
    if not isinstance(value, list) or not all(isinstance(v, str) for v in value):
        return None
    return [v for v in value if v.strip()]


def parse_question(instance, demos, binding, params):
    """Stage 1: extract the condition list; one reprompt, then a flagged
    empty list."""
    bundle = PromptBundle(
        subtask="QP",
        system_instruction=prompts.QP_INSTRUCTION,
        demonstrations=demos,
        query=f"Question:\n{format_question(instance)}",
    )
    stage = StageResult(started=time.monotonic())
    prompt, raw = _generate(binding, bundle, params)
    stage.prompt = prompt
    stage.raw.append(raw)
    conditions = _string_list(raw)
    if not conditions:
        _, raw = _generate(
            binding, bundle, params, reprompt_problem="no non-empty JSON array of strings found"
        )
        stage.raw.append(raw)
        conditions = _string_list(raw)
    if not conditions:
        stage.failed = True
        conditions = []
    stage.finished = time.monotonic()
    return conditions, stage


def decompose_cot(instance, demos, binding, params):
    """Stage 2: split the chain of thought into ordered statements."""
    if not instance.cot or not instance.cot.strip():
        raise CascadeError(f"instance {instance.id!r} carries no CoT text to decompose")
    bundle = PromptBundle(
        subtask="CP",
        system_instruction=prompts.CP_INSTRUCTION,
        demonstrations=demos,
        query=f"Question:\n{format_question(instance)}\n\nCoT:\n{instance.cot}",
    )
    stage = StageResult(started=time.monotonic())
    prompt, raw = _generate(binding, bundle, params)
    stage.prompt = prompt
    stage.raw.append(raw)
    statements = _string_list(raw)
    if not statements:
        _, raw = _generate(
            binding, bundle, params, reprompt_problem="no non-empty JSON array of strings found"
        )
        stage.raw.append(raw)
        statements = _string_list(raw)
    if not statements:
        stage.failed = True
        statements = []
    stage.finished = time.monotonic()
    return statements, stage


def extract_evidence(instance, statements, demos, binding, params):
    """Stage 3: one evidence string per statement, order-aligned.

    A count mismatch triggers one reprompt naming the expected count; any
    still-missing slots are filled with empty strings and flagged.
    """
    if not statements:
        raise CascadeError("extract_evidence requires at least one statement")
    query = (
        f"Question:\n{format_question(instance)}\n\n"
        f"Statements:\n{json.dumps(statements, ensure_ascii=False, indent=2)}"
    )
    bundle = PromptBundle(
        subtask="CV_evidence",
        system_instruction=prompts.CV_EVIDENCE_INSTRUCTION,
        demonstrations=demos,
        query=query,
    )
    stage = StageResult(started=time.monotonic())
    flags = []
    prompt, raw = _generate(binding, bundle, params)
    stage.prompt = prompt
    stage.raw.append(raw)
    found = extract_json(raw)
    evidence = found[0] if found and isinstance(found[0], list) else None
    if evidence is None or len(evidence) != len(statements):
        got = "nothing parseable" if evidence is None else f"{len(evidence)} entries"
        _, raw = _generate(
            binding, bundle, params,
            reprompt_problem=f"expected exactly {len(statements)} evidence strings, got {got}",
        )
        stage.raw.append(raw)
        found = extract_json(raw)
        evidence = found[0] if found and isinstance(found[0], list) else evidence
    if evidence is None:
        evidence = []
        stage.failed = True
    evidence = [str(e) for e in evidence[: len(statements)]]
    for slot in range(len(evidence), len(statements)):
        flags.append(f"evidence_missing:{slot + 1}")
        evidence.append("")
    stage.finished = time.monotonic()
    return evidence, stage, flags


def verify_steps(instance, statements, evidence, demos, binding, params):
    """Stage 4: one boolean verdict per aligned (statement, evidence) pair.

    Unparseable or missing verdicts default to False and are flagged.
    """
    if len(statements) != len(evidence):
        raise CascadeError("statements and evidence must be aligned")
    if not statements:
        stage = StageResult(started=time.monotonic())
        stage.finished = stage.started
        return [], stage, []
    query = (
        f"Question:\n{format_question(instance)}\n\n"
        f"Statements:\n{json.dumps(statements, ensure_ascii=False, indent=2)}\n\n"
        f"Evidence:\n{json.dumps(evidence, ensure_ascii=False, indent=2)}"
    )
    bundle = PromptBundle(
        subtask="CV_verify",
        system_instruction=prompts.CV_VERIFY_INSTRUCTION,
        demonstrations=demos,
        query=query,
    )
    stage = StageResult(started=time.monotonic())
    flags = []
    prompt, raw = _generate(binding, bundle, params)
    stage.prompt = prompt
    stage.raw.append(raw)
    found = extract_json(raw)
    values = found[0] if found and isinstance(found[0], list) else None
    verdicts = []
    for i in range(len(statements)):
        raw_value = values[i] if values is not None and i < len(values) else None
        try:
            verdicts.append(canonicalize_verification(raw_value))
        except SchemaError:
            verdicts.append(False)
            flags.append(f"verdict_defaulted:{i + 1}")
    if values is None:
        stage.failed = True
    stage.finished = time.monotonic()
    return verdicts, stage, flags


class CascadePipeline:
    """Wire the three agents over one shared retrieval pass per instance."""

    def __init__(self, bindings, index, seed_by_id, k=5, params=None,
                 verify_binding=None):
        missing = [a for a in AGENTS if a not in bindings]
        if missing:
            raise CascadeError(f"missing agent bindings: {missing}")
        self.bindings = bindings
        self.verify_binding = verify_binding or bindings[VERIFIER]
        self.index = index
        self.seed_by_id = seed_by_id
        self.k = k
        self.params = params or GenParams()

    def run(self, instance):
        hits = top_k(self.index, instance.question, self.k, exclude={instance.id})
        demos = demo_pairs_full(hits, self.seed_by_id)
        flags = []

        qp, qp_stage = parse_question(instance, demos, self.bindings[PARSER], self.params)
        if qp_stage.failed:
            flags.append("parser_failed")

        statements, cp_stage = decompose_cot(
            instance, demos, self.bindings[DECOMPOSER], self.params
        )
        if cp_stage.failed:
            flags.append("decomposer_failed")

        if statements:
            evidence, ev_stage, ev_flags = extract_evidence(
                instance, statements, demos, self.bindings[VERIFIER], self.params
            )
            flags.extend(ev_flags)
            if ev_stage.failed:
                flags.append("evidence_failed")
            verdicts, vf_stage, vf_flags = verify_steps(
                instance, statements, evidence, demos, self.verify_binding, self.params
            )
            flags.extend(vf_flags)
            if vf_stage.failed:
                flags.append("verify_failed")
        else:
            now = time.monotonic()
            evidence, verdicts = [], []
            ev_stage = StageResult(started=now, finished=now, failed=True)
            vf_stage = StageResult(started=now, finished=now, failed=True)
            flags.append("no_statements")

        return CascadeOutput(
            instance_id=instance.id,
            qp=qp,
            statements=statements,
            evidence=evidence,
            verdicts=verdicts,
            stages={
                "question_parsing": qp_stage,
                "cot_parsing": cp_stage,
                "evidence": ev_stage,
                "verify": vf_stage,
            },
            flags=flags,
        )

    def run_batch(self, instances, workers=4):
        outputs = []
        with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
            futures = {pool.submit(self.run, x): x for x in instances}
            for future, instance in futures.items():
                outputs.append(future.result())
        outputs.sort(key=lambda o: o.instance_id)
        return outputs


def output_to_prediction(output, instance=None):
    """Submission-schema record: question_parsing plus cot_parsing steps."""
    row = {"id": output.instance_id}
    if instance is not None:
        row.update({k: v for k, v in instance_to_json(instance).items() if k != "id"})
    row["question_parsing"] = list(output.qp)
    row["cot_parsing"] = [
        {
            "statement": statement,
            "evidence": evidence,
            "verification": verification_str(verdict),
        }
        for statement, evidence, verdict in zip(output.statements, output.evidence, output.verdicts)
    ]
    return row


def write_predictions(path, outputs, instances_by_id=None):
    instances_by_id = instances_by_id or {}
    save_jsonl(
        path,
        (output_to_prediction(o, instances_by_id.get(o.instance_id)) for o in outputs),
    )
