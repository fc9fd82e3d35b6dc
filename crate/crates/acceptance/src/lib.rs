//! Holds the `acceptance` test target for `nptest`.
