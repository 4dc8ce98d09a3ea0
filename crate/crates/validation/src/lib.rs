//! Holds the long-running acceptance checks in `tests/acceptance.rs`.
//! Kept in its own package so they run after the faster core tests.
