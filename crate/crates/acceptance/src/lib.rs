//! Holds the acceptance suite under `tests/`; there is no library code.
