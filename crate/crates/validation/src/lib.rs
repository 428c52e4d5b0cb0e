//! Host package for the `acceptance` test target; it has no library code.
