//! Holds the `acceptance` test target, which prints one PASS/FAIL line per
//! criterion. Run it alone with `cargo test -p sstgnn-verify --test acceptance`.
