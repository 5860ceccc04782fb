"""Instruction templates and prompt rendering.

Rendered prompts use ###Instruction### / ###Examples### / ###Input###
section markers. Demonstrations are pre-rendered (input, output) text
blocks so that callers control exactly what each example shows; the last
line of every rendered prompt is the output header for the artifact being
requested (e.g. "Question Parsing:"), which doubles as the template cue
for the deterministic mock backend.
"""

from __future__ import annotations

SECTION_INSTRUCTION = "###Instruction###"
SECTION_EXAMPLES = "###Examples###"
SECTION_INPUT = "###Input###"

# Output headers, one per subtask. The final line of a rendered prompt.
OUTPUT_HEADERS = {
    "QP": "Question Parsing:",
    "UCoT": "CoT Steps:",
    "CP": "Statements:",
    "CV_evidence": "Evidence:",
    "CV_verify": "Verdicts:",
}

QP_INSTRUCTION = (
    "Extract the constraints and key details from a problem description, "
    "ignoring any specific questions or answer choices.\n\n"
    "Focus on the rules or conditions given that are necessary to solve the "
    "problem, and extract these in a clear, descriptive list.\n\n"
    "Input: A textual problem or scenario containing multiple rules or "
    "conditions within a specific context.\n"
    "Output: An ordered JSON array of extracted conditions and essential "
    "details needed to address the problem stated in the input. Each "
    "extracted condition should be clearly and concisely formatted, "
    "capturing only the facts necessary for determining the problem's "
    "solution."
)

UCOT_INSTRUCTION = (
    "The goal is to systematically dissect the problem using logical "
    "reasoning, providing detailed evidence for each derived statement, and "
    "verifying the correctness of these statements against the given "
    "problem conditions.\n\n"
    "- For each condition or rule, analyze its implications step by step.\n"
    "- Provide verification for each logical statement using evidence from "
    "the given problem.\n"
    "- Ensure that each step follows logically from the previous, with "
    "clear conclusions and validations.\n\n"
    "Output: A JSON array of steps, each an object with keys \"statement\", "
    "\"evidence\", and \"verification\"."
)

DOUBLE_QUOTE_NOTICE = (
    "**Notice:** The JSON output must use **double quotes** (\") for all "
    "keys and string values, as required by JSON syntax."
)

CP_INSTRUCTION = (
    "You are an expert in logical reasoning and structural analysis. Your "
    "task is to identify and extract all distinct statements from the given "
    "question conditions and chain-of-thought (CoT) content.\n\n"
    "- Extract explicitly stated and logically implied statements within "
    "the context.\n"
    "- Each statement should be independent and clearly structured.\n"
    "- Clearly state how each constraint impacts potential solutions based "
    "on the scenario.\n\n"
    "Input: A question scenario with a set of constraints and a "
    "chain-of-thought explanation.\n"
    "Output: A JSON array of statements extracted from the given "
    "constraints and reasoning."
)

CV_EVIDENCE_INSTRUCTION = (
    "You are an expert in logical analysis and evidence validation. Your "
    "task is to identify and extract specific supporting evidence for each "
    "derived statement from the given problem conditions.\n\n"
    "- Locate precise textual or logical evidence that directly supports "
    "each statement.\n"
    "- Ensure the evidence is explicitly stated in the problem conditions "
    "or logically inferred.\n"
    "- Maintain clarity, accuracy, and relevance in evidence selection.\n\n"
    "Output: A JSON array of evidence strings, one per statement and in the "
    "same order."
)

CV_VERIFY_INSTRUCTION = (
    "You are an expert in logical reasoning and verification. Your task is "
    "to verify the logical correctness of each derived statement based on "
    "evidence from the problem context.\n\n"
    "- Assess whether each statement logically follows from the provided "
    "evidence.\n"
    "- Clearly indicate valid statements and invalid statements.\n"
    "- Do not introduce new assumptions; base verification strictly on the "
    "provided evidence.\n\n"
    "Output: A JSON array with one \"True\" or \"False\" entry per "
    "statement, in the same order."
)

# Default meta-prompt for inducing a task instruction from worked examples.
# Ships as a config default; override via InductionConfig.reverse_prompt.
REVERSE_INSTRUCTION = (
    "You are shown input-output pairs from a single task. Study the pairs "
    "and write the one instruction that, given a new input, would lead a "
    "capable assistant to produce an output in exactly the same structure.\n\n"
    "- State the task directly; do not mention the examples.\n"
    "- Describe the required output format precisely.\n"
    "- Return only the instruction text."
)

INDUCTION_HEADER = "Instruction:"

JUDGE_INSTRUCTION = (
    "You are comparing two candidate instructions by the outputs they "
    "produced on the same inputs. Judge which output set matches the gold "
    "outputs more closely in content and structure."
)

JUDGE_ANSWER_LINE = "Answer with exactly one of: A, B, tie."


def render_prompt(instruction, demonstrations, query, output_header, notice=None):
    """Assemble a full prompt from its sections.

    `demonstrations` is a list of (input_block, output_block) strings,
    already rendered, in the order they should appear.
    """
    parts = [SECTION_INSTRUCTION, instruction.strip()]
    if notice:
        parts += ["", notice]
    if demonstrations:
        parts += ["", SECTION_EXAMPLES]
        for demo_in, demo_out in demonstrations:
            parts += ["", demo_in.strip(), "", demo_out.strip()]
    parts += ["", SECTION_INPUT, "", query.strip(), "", output_header]
    return "\n".join(parts)
