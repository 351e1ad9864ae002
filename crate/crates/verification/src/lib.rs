//! Holds the `acceptance` test target, which checks the exit criteria end to end.
