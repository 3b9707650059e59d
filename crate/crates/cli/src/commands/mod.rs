pub mod compare;
pub mod fit;
pub mod ingest;
pub mod report;
pub mod severity;
pub mod signatures;
pub mod synth;
