// SPDX-License-Identifier: MIT OR Apache-2.0

//! Lets the acceptance runner reuse plain check functions that are also
//! ordinary `#[test]`s.

/// Lists `fn()` checks in `CHECKS` and registers each as a `#[test]`.
macro_rules! checks {
    ($($name:ident),* $(,)?) => {
        #[allow(dead_code)]
        pub const CHECKS: &[(&str, fn())] = &[$((stringify!($name), $name)),*];

        #[cfg(test)]
        mod registered {
            $(
                #[test]
                fn $name() {
                    super::$name()
                }
            )*
        }
    };
}
