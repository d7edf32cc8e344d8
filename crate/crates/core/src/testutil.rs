//! Shared, lazily built models for unit tests.

use std::sync::OnceLock;

use crate::model::{reference, ToralEndomorphism};

pub fn conjugated() -> &'static ToralEndomorphism {
    static F: OnceLock<ToralEndomorphism> = OnceLock::new();
    F.get_or_init(reference::conjugated)
}

pub fn trig005() -> &'static ToralEndomorphism {
    static F: OnceLock<ToralEndomorphism> = OnceLock::new();
    F.get_or_init(|| reference::trig(0.05).unwrap())
}
