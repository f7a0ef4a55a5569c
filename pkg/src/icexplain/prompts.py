"""Prompt rendering for the perturbation, guided, explanation and text strategies."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .perturb import IclSet, TextNeighborhood

STRATEGIES = ("p-icl", "pg-icl", "e-icl", "text-icl")

_NUMBER_WORDS = ("zero", "one", "two", "three", "four", "five", "six", "seven", "eight", "nine",
                 "ten", "eleven", "twelve", "thirteen", "fourteen", "fifteen", "sixteen",
                 "seventeen", "eighteen", "nineteen", "twenty")

COT_SENTENCE = "Think about the question. "
FINAL_LINE = ("Only provide the feature names on the last line. "
              "Do not provide any further details on the last line.")


class PromptError(ValueError):
    pass


def number_word(k: int) -> str:
    return _NUMBER_WORDS[k] if 0 <= k < len(_NUMBER_WORDS) else str(k)


def letter(i: int) -> str:
    """0 -> A, 25 -> Z, 26 -> AA, 27 -> AB, ..."""
    if i < 0:
        raise PromptError("feature index must be >= 0")
    out = ""
    i += 1
    while i:
        i, r = divmod(i - 1, 26)
        out = chr(65 + r) + out
    return out


def letter_index(code: str) -> int:
    if not code or not code.isalpha() or not code.isupper():
        raise PromptError(f"not a feature letter: {code!r}")
    n = 0
    for ch in code:
        n = n * 26 + (ord(ch) - 64)
    return n - 1


def letters(d: int) -> list[str]:
    return [letter(i) for i in range(d)]


def default_top_k(d: int) -> int:
    return min(5, d)


def fmt(v: float) -> str:
    if not np.isfinite(v):
        raise PromptError(f"non-finite value {v}")
    s = f"{float(v):.3f}"
    return "0.000" if s == "-0.000" else s


def format_values(values: Sequence[float]) -> str:
    return ", ".join(f"{letter(i)}: {fmt(v)}" for i, v in enumerate(values))


def render_icl_line(values: Sequence[float], output: int, format: str = "raw-delta") -> str:
    """Two-line serialization of one ICL example."""
    if format == "raw-delta":
        return f"Change in Input: {format_values(values)}\nChange in Output: {int(output)}"
    if format == "perturbed-sample":
        return f"Input: {format_values(values)}\nOutput: {int(output)}"
    raise PromptError(f"unknown format {format!r}")


@dataclass(frozen=True)
class RenderedPrompt:
    text: str
    metadata: dict = field(default_factory=dict)

    @property
    def hash(self) -> str:
        return hashlib.sha256(self.text.encode("utf-8")).hexdigest()


@dataclass(frozen=True)
class PromptSpec:
    strategy: str
    icl: IclSet
    n_features: int
    top_k: int | None = None
    include_context: bool = True
    include_cot: bool = True
    instance_id: int | None = None

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise PromptError(f"unknown strategy {self.strategy!r}")
        if self.n_features < 1:
            raise PromptError("n_features must be >= 1")
        if not 1 <= self.k <= self.n_features:
            raise PromptError(f"top_k={self.k} outside 1..{self.n_features}")

    @property
    def k(self) -> int:
        return self.top_k if self.top_k is not None else default_top_k(self.n_features)

    @property
    def format(self) -> str:
        return self.icl.format


def _context(d: int, format: str) -> str:
    names = ", ".join(f"'{c}'" for c in letters(d))
    last = letter(d - 1)
    if format == "raw-delta":
        body = (f"The dataset below contains the change in feature values 'A' through '{last}' "
                "with respect to a given instance and the corresponding change in model outputs.")
    else:
        body = (f"The dataset below contains the feature values 'A' through '{last}' "
                "and the corresponding model outputs.")
    return (f"We have a two-class machine learning model that predicts based on {d} features: "
            f"[{names}]. {body}")


def _question(k: int) -> str:
    return (f"Based on the above set, what are the {number_word(k)} most important features "
            "driving the output?")


def _p_instructions(k: int, cot: bool) -> str:
    return ((COT_SENTENCE if cot else "")
            + f"After explaining your reasoning, provide your answer as the top {number_word(k)} "
            "features ranked from most important to least important, in descending order, "
            "separated by commas. " + FINAL_LINE)


def _pg_instructions(d: int) -> str:
    last = letter(d - 1)
    return (
        f"For each feature, starting with 'A' and continuing to '{last}':\n\n"
        "1. Analyze the feature in question. Rate the importance of the feature in determining "
        "the output on a scale of 0-100, considering both positive and negative correlations. "
        "Ensure to give equal emphasis to both positive and negative correlations and avoid "
        "focusing only on absolute values.\n\n"
        "2. After analyzing the feature, position it in a running rank compared to the features "
        "already analyzed. For instance, after analyzing feature 'B', determine its relative "
        "importance compared to 'A' and position it accordingly in the rank (e.g., BA or AB). "
        f"Continue this process until all features from 'A' to '{last}' are ranked.\n\n"
        f"After explaining your reasoning, provide your answer as the final rank of features from "
        f"'A' to '{last}' from most important to least important, in descending order, separated "
        "by commas. " + FINAL_LINE)


def _dataset_block(icl: IclSet) -> str:
    if len(icl) == 0:
        raise PromptError("empty ICL set")
    return "\n\n".join(render_icl_line(r, o, icl.format) for r, o in zip(icl.rows, icl.outputs))


def _assemble(spec: PromptSpec, instructions: str) -> RenderedPrompt:
    parts = []
    if spec.include_context:
        parts.append(f'Context: "{_context(spec.n_features, spec.format)}"')
    parts.append("Dataset:\n" + _dataset_block(spec.icl))
    parts.append(f'Question: "{_question(spec.k)}"')
    parts.append(f'Instructions: "{instructions}"')
    meta = {"strategy": spec.strategy, "instance_id": spec.instance_id, "k": spec.k,
            "n_features": spec.n_features, "format": spec.format,
            "context": spec.include_context, "cot": spec.include_cot}
    return RenderedPrompt("\n\n".join(parts), meta)


def build_p_icl(spec: PromptSpec) -> RenderedPrompt:
    if spec.strategy != "p-icl":
        raise PromptError("spec.strategy must be p-icl")
    return _assemble(spec, _p_instructions(spec.k, spec.include_cot))


def build_pg_icl(spec: PromptSpec) -> RenderedPrompt:
    if spec.strategy != "pg-icl":
        raise PromptError("spec.strategy must be pg-icl")
    return _assemble(spec, _pg_instructions(spec.n_features))


@dataclass(frozen=True)
class Triplet:
    x: np.ndarray
    output: int
    explanation: Sequence[str]


def build_e_icl(triplets: Sequence[Triplet], query: np.ndarray, query_output: int,
                instance_id: int | None = None) -> RenderedPrompt:
    """Input/Output/Explanation blocks followed by the open query block."""
    if not triplets:
        raise PromptError("E-ICL needs at least one triplet")
    d = len(query)
    universe = set(letters(d))
    blocks = []
    for t in triplets:
        if len(t.x) != d:
            raise PromptError(f"triplet has {len(t.x)} features, query has {d}")
        exp = list(t.explanation)
        if not exp or not set(exp) <= universe or len(set(exp)) != len(exp):
            raise PromptError(f"explanation {exp} inconsistent with {d} features")
        blocks.append(f"Input: {format_values(t.x)}\nOutput: {int(t.output)}\n"
                      f"Explanation: {','.join(exp)}")
    blocks.append(f"Input: {format_values(query)}\nOutput: {int(query_output)}\nExplanation:")
    meta = {"strategy": "e-icl", "instance_id": instance_id, "n_features": d,
            "n_icl": len(triplets)}
    return RenderedPrompt("\n".join(blocks), meta)


TEXT_CONTEXT = ("We are analyzing a fixed set of word removals on a specific sentence to understand "
                "the influence on the model’s output. The dataset below contains the words "
                "removed from the original sentence and the corresponding change in output.")


def build_text_prompt(sentence: str, nb: TextNeighborhood, k: int = 3,
                      instance_id: int | None = None) -> RenderedPrompt:
    if len(nb) == 0:
        raise PromptError("empty text neighborhood")
    kw = number_word(k)
    rows = [f"Removed words: {' '.join(nb.removed(i))}\nChange in output: {int(nb.changes[i])}"
            for i in range(len(nb))]
    dataset = f"Dataset:\nOriginal sentence: {sentence.strip()}\n\n" + "\n\n".join(rows)
    question = f"Based on the above set, what are the top {kw} most important words driving the output?"
    instructions = (
        f"Think about the question. After explaining your reasoning, provide your answer as the "
        f"top {kw} most important words ranked from most important to least important, in "
        "descending order. Only provide the important words on the last line. Do not provide any "
        "further details on the last line. Provide the answer on one line with each word "
        "separated by commas.")
    text = "\n\n".join([f'Context: "{TEXT_CONTEXT}"', dataset, f'Question: "{question}"',
                        f'Instructions: "{instructions}"'])
    return RenderedPrompt(text, {"strategy": "text-icl", "instance_id": instance_id, "k": k})


def render(spec: PromptSpec) -> RenderedPrompt:
    if spec.strategy == "p-icl":
        return build_p_icl(spec)
    if spec.strategy == "pg-icl":
        return build_pg_icl(spec)
    raise PromptError(f"{spec.strategy} prompts are built with their dedicated builder")
