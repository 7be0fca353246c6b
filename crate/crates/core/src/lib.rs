//! UNDO Flip-Flop laboratory: the language and its stack oracle, seeded data
//! generation, a small Mamba-2 style model trained with a hand-written
//! reverse-mode tape, and the evaluation and causal probes used to tell
//! stack retrieval apart from a toggle shortcut.

pub mod datagen;
pub mod lang;
pub mod model;
pub mod numerics;
pub mod probes;
pub mod train;
