//! Python bindings: populated alongside the core crate.
