"""Tool-call argument schemas and validation.

Schemas follow the function signatures advertised in the agentic system prompt,
tightened where the protocol needs to be mechanically decidable (numeric ranges
on bbox entries, no undeclared arguments).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Iterable, Mapping

from jsonschema import Draft7Validator
from jsonschema.exceptions import best_match


@dataclass(frozen=True)
class ToolSchema:
    name: str
    description: str
    parameters: Mapping[str, Any]
    required: tuple[str, ...] = ()
    _validator: Draft7Validator = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        spec = dict(self.parameters)
        spec["required"] = list(self.required)
        Draft7Validator.check_schema(spec)
        object.__setattr__(self, "_validator", Draft7Validator(spec))

    def first_violation(self, arguments: Any) -> "Violation | None":
        err = best_match(self._validator.iter_errors(arguments))
        if err is None:
            return None
        return Violation(
            tool=self.name,
            keyword=str(err.validator),
            path=tuple(err.absolute_path),
            message=err.message,
        )

    def to_function_dict(self) -> dict:
        params = dict(self.parameters)
        params["required"] = list(self.required)
        return {"type": "function", "function": {"name": self.name, "description": self.description, "parameters": params}}


@dataclass(frozen=True)
class Violation:
    """The first failing constraint of a tool call."""

    tool: str
    keyword: str
    path: tuple
    message: str


WEB_SEARCH = ToolSchema(
    name="web_search",
    description="Search the web for information you don't have or to verify facts.",
    parameters={
        "type": "object",
        "properties": {"query": {"type": "string", "minLength": 1, "description": "Query to search the web"}},
        "additionalProperties": False,
    },
    required=("query",),
)

CROP_IMAGE = ToolSchema(
    name="crop_image",
    description=(
        "Crop the image based on the bounding box coordinates to zoom in on specific regions for detailed analysis."
    ),
    parameters={
        "type": "object",
        "properties": {
            "bbox": {
                "type": "array",
                "items": {"type": "number", "minimum": 0.0, "maximum": 1.0},
                "minItems": 4,
                "maxItems": 4,
            },
            "image_index": {"type": "integer", "minimum": 1},
        },
        "additionalProperties": False,
    },
    required=("bbox", "image_index"),
)

# The advertised signature takes no arguments; an optional index selects which
# registered image to search (default: the original input image).
IMAGE_SEARCH = ToolSchema(
    name="image_search",
    description=(
        "Reverse search the current image to get more information. "
        "This function does not accept any text queries or arguments."
    ),
    parameters={
        "type": "object",
        "properties": {"image_index": {"type": "integer", "minimum": 1}},
        "additionalProperties": False,
    },
)

ALL_SCHEMAS = (WEB_SEARCH, CROP_IMAGE, IMAGE_SEARCH)
WORKFLOW_TOOLS = {
    "agentic": ("web_search", "crop_image", "image_search"),
    "rag": ("web_search", "crop_image"),
    "direct": (),
}


def schemas_for(names: Iterable[str]) -> tuple[ToolSchema, ...]:
    by_name = {s.name: s for s in ALL_SCHEMAS}
    return tuple(by_name[n] for n in names)


def validate_tool_call(name: str, arguments: Any, schemas: Iterable[ToolSchema]) -> Violation | None:
    """Return None when the call is valid, else the first failing constraint.

    An unregistered tool name is reported with keyword ``"name"``.
    """
    for schema in schemas:
        if schema.name == name:
            return schema.first_violation(arguments)
    return Violation(tool=name, keyword="name", path=(), message=f"unknown tool {name!r}")
