"""Protocol schemas and the spec-driven frame codec."""

from .codec import (
    Encoded,
    FrameError,
    MagicMismatch,
    MissingField,
    TooShort,
    UnknownLayout,
    ValueOutOfWidth,
    consistent_frame,
    decode_frame,
    encode_frame,
    encode_with_flags,
    enumerate_combos,
    expected_lengths,
    relations,
    validate_frame,
)
from .schema import (
    FieldDescriptor,
    Frame,
    ProtocolSpec,
    Relation,
    SpecError,
    ValidationReport,
    ValueClass,
    ValueSet,
    Violation,
)
from .specfile import bundled_spec_path, load_bundled, load_spec, parse_spec

__all__ = [
    "Encoded",
    "FieldDescriptor",
    "Frame",
    "FrameError",
    "MagicMismatch",
    "MissingField",
    "ProtocolSpec",
    "Relation",
    "SpecError",
    "TooShort",
    "UnknownLayout",
    "ValidationReport",
    "ValueClass",
    "ValueOutOfWidth",
    "ValueSet",
    "Violation",
    "bundled_spec_path",
    "consistent_frame",
    "decode_frame",
    "encode_frame",
    "encode_with_flags",
    "enumerate_combos",
    "expected_lengths",
    "load_bundled",
    "load_spec",
    "parse_spec",
    "relations",
    "validate_frame",
]
