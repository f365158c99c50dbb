"""Prompt construction and category-token alignment."""

from __future__ import annotations

from transformers import CLIPTokenizer

PROMPT_TEMPLATE = "a photograph of {names} and other objects and background"
DEFAULT_BACKGROUND_WORDS = ("background",)


class TokenAlignmentError(ValueError):
    """A category name could not be located in the tokenized prompt."""


def build_prompt(categories: list[str], template: str = PROMPT_TEMPLATE) -> str:
    if not categories:
        raise ValueError("need at least one category name")
    return template.format(names=" and ".join(categories))


def _find_subsequence(haystack: list[int], needle: list[int]) -> int | None:
    if not needle:
        return None
    for start in range(len(haystack) - len(needle) + 1):
        if haystack[start:start + len(needle)] == needle:
            return start
    return None


def align_tokens(prompt: str, categories: list[str], tokenizer: CLIPTokenizer,
                 background_words=DEFAULT_BACKGROUND_WORDS,
                 max_tokens: int = 77) -> tuple[list[list[int]], list[int], list[str]]:
    """Token positions of every category (and background word) in the prompt.

    Returns (category_groups, background_positions, prompt_tokens) where
    each group lists the positions of one category's tokens; multi-token
    names span several positions. Raises TokenAlignmentError, listing the
    tokenized prompt, when a name cannot be found.
    """
    enc = tokenizer(prompt, padding="max_length", max_length=max_tokens,
                    truncation=True)["input_ids"]
    tokens = tokenizer.convert_ids_to_tokens(enc)

    def locate(name: str) -> list[int]:
        ids = tokenizer(name, add_special_tokens=False)["input_ids"]
        start = _find_subsequence(enc, ids)
        if start is None:
            raise TokenAlignmentError(
                f"{name!r} not found in tokenized prompt: {tokens}")
        return list(range(start, start + len(ids)))

    groups = [locate(name) for name in categories]
    background: list[int] = []
    for word in background_words:
        ids = tokenizer(word, add_special_tokens=False)["input_ids"]
        start = _find_subsequence(enc, ids)
        if start is not None:
            background.extend(range(start, start + len(ids)))
    taken = {i for g in groups for i in g}
    background = sorted(set(background) - taken)
    return groups, background, tokens
