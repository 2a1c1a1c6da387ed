//! Library side of the command-line interface: manifests, checkpoints,
//! configuration files, the synthetic tone corpus and the subcommand
//! implementations. The binary in `main.rs` is a thin argument parser over
//! these.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod manifest;
pub mod synth;
pub mod util;

/// Map a library error to the documented process exit code:
/// 2 bad arguments, 3 I/O, 4 format/version, 5 diverged training.
pub fn exit_code(err: &pascore::Error) -> u8 {
    use pascore::Error::*;
    match err {
        Io(_) => 3,
        Format(_) | Shape(_) => 4,
        Diverged(_) => 5,
        InvalidInput(_) | MissingPronunciation(_) | UndefinedCorrelation(_) | InvalidState(_) => 2,
    }
}
