"""casepipe: turn heterogeneous missing-person case documents into one record shape.

The package has two extraction paths that share every downstream stage:

* a deterministic rule path driven by per-source label rules, and
* a model-assisted path that asks a text-generation backend for a schema-shaped
  candidate and repairs validation failures with bounded, minimal edits.

Both paths end in the same schema validation, geocoding, and emission code, so
their outputs are directly comparable record for record.
"""

from __future__ import annotations

__version__ = "0.1.0"

from casepipe.schema import (  # noqa: F401
    ABSENT,
    SchemaDefinition,
    SchemaEntry,
    ValidationReport,
    ValidationViolation,
    default_schema,
    resolve_path,
    validate,
)
