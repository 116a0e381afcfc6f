//! Acceptance suite package. The criteria live in `tests/acceptance.rs`;
//! run them with `cargo test --release -p lnlora-repro --test acceptance`.
