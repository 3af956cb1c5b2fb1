"""Few-shot prompt text serialization and parsing.

The wire format is "Input: x Prediction: y" segments joined by a
separator, ending in an "Input: x_pred Prediction: " generation point
with a single trailing space. parse() inverts serialize() for any spec
whose texts are free of tag collisions.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from enum import Enum

from .errors import ConfigInvalid, MalformedPrompt, TagCollision

GUARD = "\\"


class PromptKind(str, Enum):
    PLAIN = "plain"
    INSTRUCTED = "instructed"


@dataclass(frozen=True)
class PromptStyle:
    kind: PromptKind = PromptKind.PLAIN
    input_tag: str = "Input:"
    pred_tag: str = "Prediction:"
    sep: str = "\n"
    instruction: str | None = None

    def validate(self) -> None:
        if not self.input_tag or not self.pred_tag:
            raise ConfigInvalid("prompt tags must be non-empty")
        if not self.sep:
            raise ConfigInvalid("separator must be non-empty")
        if self.sep in self.input_tag or self.sep in self.pred_tag:
            raise ConfigInvalid("prompt tags must not contain the separator")
        if self.kind is PromptKind.INSTRUCTED and self.instruction is None:
            raise ConfigInvalid("instructed style requires an instruction")
        if self.kind is PromptKind.PLAIN and self.instruction is not None:
            raise ConfigInvalid("plain style must not carry an instruction")

    @classmethod
    def from_json(cls, obj: dict) -> "PromptStyle":
        instruction = obj.get("instruction")
        kind = PromptKind.INSTRUCTED if instruction is not None else PromptKind.PLAIN
        style = cls(
            kind=kind,
            input_tag=obj.get("input_tag", "Input:"),
            pred_tag=obj.get("pred_tag", "Prediction:"),
            sep=obj.get("sep", "\n"),
            instruction=instruction,
        )
        style.validate()
        return style


@dataclass
class PromptSpec:
    demos: list[tuple[str, str]]
    x_pred: str
    y_pred: str = ""
    k: int = -1
    sep: str = "\n"
    sample_id: str = ""
    strategy: str = ""
    concept: str = ""

    def __post_init__(self) -> None:
        if self.k < 0:
            self.k = len(self.demos)

    def validate(self) -> None:
        if self.k != len(self.demos):
            raise ConfigInvalid(f"k={self.k} but spec holds {len(self.demos)} demos")

    def to_json(self) -> dict:
        return {
            "id": self.sample_id,
            "strategy": self.strategy,
            "k": self.k,
            "concept": self.concept,
            "demos": [{"x": x, "y": y} for x, y in self.demos],
            "x_pred": self.x_pred,
            "y_pred": self.y_pred,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "PromptSpec":
        return cls(
            demos=[(d["x"], d["y"]) for d in obj["demos"]],
            x_pred=obj["x_pred"],
            y_pred=obj.get("y_pred", ""),
            k=obj.get("k", len(obj["demos"])),
            sample_id=obj.get("id", ""),
            strategy=obj.get("strategy", ""),
            concept=obj.get("concept", ""),
        )


def _collision_pattern(style: PromptStyle) -> re.Pattern:
    return re.compile(
        r"^\\*(?:%s|%s)" % (re.escape(style.input_tag), re.escape(style.pred_tag))
    )


def _guard_text(text: str, style: PromptStyle, escape: bool) -> str:
    """Neutralize demo lines that would read as structural tags."""
    pattern = _collision_pattern(style)
    lines = text.split(style.sep)
    out = []
    for line in lines:
        if pattern.match(line):
            if not escape:
                raise TagCollision(f"text line starts with a prompt tag: {line[:40]!r}")
            line = GUARD + line
        out.append(line)
    return style.sep.join(out)


def _unguard_text(text: str, style: PromptStyle) -> str:
    pattern = _collision_pattern(style)
    out = []
    for line in text.split(style.sep):
        if line.startswith(GUARD) and pattern.match(line[1:]):
            line = line[1:]
        out.append(line)
    return style.sep.join(out)


def serialize(spec: PromptSpec, style: PromptStyle, *, escape: bool = True) -> str:
    """Render demos + predicted input to text, ending at the generation point.

    The target y_pred is never emitted; training and scoring append it
    after the returned text.
    """
    style.validate()
    spec.validate()
    segments = []
    for x, y in spec.demos:
        gx = _guard_text(x, style, escape)
        gy = _guard_text(y, style, escape)
        segments.append(f"{style.input_tag} {gx} {style.pred_tag} {gy}")
    gx_pred = _guard_text(spec.x_pred, style, escape)
    segments.append(f"{style.input_tag} {gx_pred} {style.pred_tag} ")
    body = style.sep.join(segments)
    if style.kind is PromptKind.INSTRUCTED:
        return f"{style.instruction}{style.sep}{body}"
    return body


def _split_segment(joined: str, style: PromptStyle) -> tuple[str, str]:
    """One segment -> (x, y); y is "" at the generation point."""
    head = style.input_tag + " "
    if not joined.startswith(head):
        raise MalformedPrompt(f"segment does not open with {style.input_tag!r}")
    marker = f" {style.pred_tag} "
    pos = joined.find(marker, len(head) - 1)
    if pos < 0:
        raise MalformedPrompt(f"segment has no {style.pred_tag!r} boundary")
    x = joined[len(head):pos]
    y = joined[pos + len(marker):]
    return _unguard_text(x, style), _unguard_text(y, style)


def parse(text: str, style: PromptStyle) -> PromptSpec:
    """Recover (demos, x_pred) from serialized text; y_pred is left empty."""
    style.validate()
    if style.kind is PromptKind.INSTRUCTED:
        prefix = f"{style.instruction}{style.sep}"
        if not text.startswith(prefix):
            raise MalformedPrompt("instructed prompt does not start with its instruction")
        text = text[len(prefix):]
    if not text:
        raise MalformedPrompt("empty prompt body")

    # Group lines into segments: an unescaped input_tag line opens one.
    opener = re.compile(r"^%s(\s|$)" % re.escape(style.input_tag))
    segments: list[list[str]] = []
    for line in text.split(style.sep):
        if opener.match(line):
            segments.append([line])
        elif segments:
            segments[-1].append(line)
        else:
            raise MalformedPrompt("prompt does not begin with the input tag")

    parsed = [_split_segment(style.sep.join(seg), style) for seg in segments]
    # The final segment is the generation point; any tail after its tag is
    # text generated past the prompt (kept, so decoded outputs parse too).
    x_pred, y_tail = parsed[-1]
    demos = list(parsed[:-1])
    return PromptSpec(
        demos=demos, x_pred=x_pred, y_pred=y_tail, k=len(demos), sep=style.sep
    )
