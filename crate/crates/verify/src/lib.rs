//! Acceptance suite. The checks live in `tests/acceptance.rs`; run them with
//! `cargo test -p apda-verify --test acceptance`.
