"""Prompt primitives: labelled points, boxes, mask prompts, and prompt sets."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator, Sequence

from .core import LabelMask

FG = 1
BG = 0


@dataclass(frozen=True)
class Point:
    """A click prompt at pixel (x, y); label 1 = foreground, 0 = background."""

    x: int
    y: int
    label: int = FG

    def __post_init__(self) -> None:
        if self.label not in (FG, BG):
            raise ValueError(f"point label must be 0 or 1, got {self.label}")

    def in_bounds(self, height: int, width: int) -> bool:
        return 0 <= self.x < width and 0 <= self.y < height


@dataclass(frozen=True)
class Box:
    """Half-open axis-aligned box [x1, x2) x [y1, y2)."""

    x1: int
    y1: int
    x2: int
    y2: int

    def __post_init__(self) -> None:
        if not (self.x1 < self.x2 and self.y1 < self.y2):
            raise ValueError(f"degenerate box ({self.x1},{self.y1},{self.x2},{self.y2})")

    def in_bounds(self, height: int, width: int) -> bool:
        return 0 <= self.x1 and 0 <= self.y1 and self.x2 <= width and self.y2 <= height

    @property
    def width(self) -> int:
        return self.x2 - self.x1

    @property
    def height(self) -> int:
        return self.y2 - self.y1

    def contains(self, x: float, y: float) -> bool:
        return self.x1 <= x < self.x2 and self.y1 <= y < self.y2


@dataclass(frozen=True)
class MaskPrompt:
    """A dense mask prompt (e.g. a previous prediction fed back for refinement)."""

    mask: LabelMask


Prompt = Point | Box | MaskPrompt


@dataclass(frozen=True)
class PromptSet:
    """An ordered collection of prompts targeting one instance."""

    prompts: tuple[Prompt, ...] = ()
    instance_id: str | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "prompts", tuple(self.prompts))

    def __iter__(self) -> Iterator[Prompt]:
        return iter(self.prompts)

    def __len__(self) -> int:
        return len(self.prompts)

    @property
    def points(self) -> tuple[Point, ...]:
        return tuple(p for p in self.prompts if isinstance(p, Point))

    @property
    def boxes(self) -> tuple[Box, ...]:
        return tuple(p for p in self.prompts if isinstance(p, Box))

    @property
    def mask_prompts(self) -> tuple[MaskPrompt, ...]:
        return tuple(p for p in self.prompts if isinstance(p, MaskPrompt))

    def validate_bounds(self, height: int, width: int) -> None:
        for p in self.prompts:
            if isinstance(p, (Point, Box)) and not p.in_bounds(height, width):
                raise ValueError(f"prompt out of image bounds ({height}x{width}): {p}")
            if isinstance(p, MaskPrompt) and p.mask.shape != (height, width):
                raise ValueError(f"mask prompt shape {p.mask.shape} != image {height, width}")

    def extend(self, extra: Sequence[Prompt]) -> "PromptSet":
        return PromptSet(self.prompts + tuple(extra), instance_id=self.instance_id)

    def to_jsonable(self) -> list[dict]:
        out: list[dict] = []
        for p in self.prompts:
            if isinstance(p, Point):
                out.append({"type": "point", "x": p.x, "y": p.y, "label": p.label})
            elif isinstance(p, Box):
                out.append({"type": "box", "x1": p.x1, "y1": p.y1, "x2": p.x2, "y2": p.y2})
            else:
                from .core import mask_to_rle

                out.append({"type": "mask", "rle": mask_to_rle(p.mask)})
        return out

    @classmethod
    def from_jsonable(cls, items: Sequence[dict], instance_id: str | None = None) -> "PromptSet":
        from .core import rle_to_mask

        prompts: list[Prompt] = []
        for item in items:
            kind = item.get("type")
            if kind == "point":
                prompts.append(Point(int(item["x"]), int(item["y"]), int(item.get("label", FG))))
            elif kind == "box":
                prompts.append(Box(int(item["x1"]), int(item["y1"]), int(item["x2"]), int(item["y2"])))
            elif kind == "mask":
                prompts.append(MaskPrompt(rle_to_mask(item["rle"])))
            else:
                raise ValueError(f"unknown prompt type {kind!r}")
        return cls(tuple(prompts), instance_id=instance_id)
