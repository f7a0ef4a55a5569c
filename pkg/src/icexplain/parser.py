"""Extract top-k rankings from free-text LLM replies."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Collection, Iterable

OK, BAD_FORMAT, REFUSAL = "ok", "bad-format", "refusal"

REFUSAL_PHRASES = (
    "don't have enough information",
    "do not have enough information",
    "not enough information",
    "cannot determine",
    "can't determine",
    "unable to determine",
    "impossible to determine",
    "i'm sorry",
    "i am sorry",
    "as an ai",
)

_QUOTES = "'\"`‘’“”*[]()"
_STRIP = " \t." + _QUOTES


@dataclass(frozen=True)
class ParsedReply:
    status: str
    ranking: tuple[str, ...]
    last_line: str

    @property
    def ok(self) -> bool:
        return self.status == OK


def last_line(reply: str) -> str:
    for line in reversed(reply.splitlines()):
        if line.strip():
            return line.strip()
    return ""


def _normalize_quotes(text: str) -> str:
    return text.replace("’", "'").replace("‘", "'").replace("`", "'")


def is_refusal(reply: str, phrases: Iterable[str] = REFUSAL_PHRASES) -> bool:
    low = _normalize_quotes(reply).lower()
    return any(p in low for p in phrases)


def _feature_token(t: str) -> str:
    return t.strip(_STRIP).upper()


def _word_token(t: str) -> str:
    t = t.strip(" \t" + _QUOTES).lower()
    # a bare "." is a sentence token; otherwise drop trailing punctuation
    return t if t == "." else t.strip(" .").strip(_QUOTES)


def _parse(reply: str, valid, normalize, k: int | None, phrases) -> ParsedReply:
    line = last_line(reply)
    tokens = [normalize(t) for t in line.split(",")] if line else []
    ranking: list[str] = []
    foreign = False
    for tok in tokens:
        if not tok:
            continue
        if not valid(tok):
            foreign = True
            break
        if tok not in ranking:
            ranking.append(tok)
    if ranking and not foreign:
        if k is not None and k > 0:
            ranking = ranking[:k]
        return ParsedReply(OK, tuple(ranking), line)
    status = REFUSAL if is_refusal(reply, phrases) else BAD_FORMAT
    return ParsedReply(status, (), line)


def parse_topk(reply: str, universe: Collection[str], k: int | None = None,
               phrases: Iterable[str] = REFUSAL_PHRASES) -> ParsedReply:
    """Parse a comma-separated feature-letter list from the last non-empty line.

    Over-long answers are truncated to ``k``; shorter answers stay ok.
    """
    universe = {u.upper() for u in universe}
    return _parse(reply, lambda t: t in universe, _feature_token, k, tuple(phrases))


def parse_words(reply: str, sentence_tokens: Collection[str], k: int | None = None,
                phrases: Iterable[str] = REFUSAL_PHRASES) -> ParsedReply:
    """Same last-line rule over words; only tokens of the original sentence are valid."""
    vocab = {t.lower() for t in sentence_tokens}
    return _parse(reply, lambda t: t in vocab, _word_token, k, tuple(phrases))


def bad_reply_rate(parsed: Iterable[ParsedReply]) -> float:
    items = list(parsed)
    if not items:
        return 0.0
    return sum(not p.ok for p in items) / len(items)
