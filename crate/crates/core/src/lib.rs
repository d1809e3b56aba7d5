//! Space-group conditional flow matching for symmetric crystal generation.

pub mod autodiff;
pub mod evalx;
pub mod field;
pub mod flow;
pub mod io;
pub mod lattice;
pub mod prior;
pub mod sgdata;
pub mod symmetry;
pub mod synthbench;
pub mod torus;

/// Any error raised by the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Data(#[from] sgdata::SgError),
    #[error(transparent)]
    Lattice(#[from] lattice::LatticeError),
    #[error(transparent)]
    Symmetry(#[from] symmetry::SymmetryError),
    #[error(transparent)]
    Field(#[from] field::FieldError),
    #[error(transparent)]
    Flow(#[from] flow::FlowError),
    #[error(transparent)]
    Eval(#[from] evalx::EvalError),
    #[error(transparent)]
    Io(#[from] io::IoError),
    #[error(transparent)]
    Synth(#[from] synthbench::SynthError),
}
