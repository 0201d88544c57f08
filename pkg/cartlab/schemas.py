# cartlab/schemas.py
"""JSON-Schema loading and validation for every cartlab file format."""

import json
from functools import lru_cache
from pathlib import Path
from typing import Any, Dict

import jsonschema

from .errors import ParseError


def _get_schema_dir() -> Path:
    """Get schemas/ relative to the repository root, not the CWD."""
    repo_root = Path(__file__).resolve().parent.parent
    return repo_root / "schemas"


@lru_cache(maxsize=None)
def load_schema(name: str) -> Dict[str, Any]:
    """Load `schemas/<name>.schema.json`."""
    path = _get_schema_dir() / f"{name}.schema.json"
    return json.loads(path.read_text())


def _json_path(error: jsonschema.ValidationError) -> str:
    path = "$"
    for part in error.absolute_path:
        path += f"[{part}]" if isinstance(part, int) else f".{part}"
    return path


def validate_document(document: Any, schema_name: str) -> None:
    """
    Validate a decoded document against a named schema.

    Raises ParseError carrying the JSON path of the first offending field.
    Errors are ordered by path so the reported field is stable across runs.
    """
    validator = jsonschema.Draft7Validator(load_schema(schema_name))
    errors = sorted(validator.iter_errors(document), key=lambda e: [str(p) for p in e.absolute_path])
    if errors:
        first = errors[0]
        raise ParseError(first.message, path=_json_path(first))


def decode_json(document: Any, schema_name: str) -> Any:
    """Decode bytes/str JSON and validate it. Decoding failures become ParseError."""
    if isinstance(document, (bytes, bytearray)):
        try:
            document = document.decode("utf-8")
        except UnicodeDecodeError as e:
            raise ParseError(f"not valid UTF-8: {e}")
    try:
        data = json.loads(document)
    except json.JSONDecodeError as e:
        raise ParseError(f"invalid JSON: {e.msg} (line {e.lineno}, column {e.colno})")
    validate_document(data, schema_name)
    return data
