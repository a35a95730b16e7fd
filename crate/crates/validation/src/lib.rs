//! Acceptance suite for `arithwave`; the checks live in `tests/acceptance.rs`.
