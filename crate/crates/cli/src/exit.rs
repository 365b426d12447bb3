use std::io::ErrorKind;

use mriseq::config::ConfigError;
use mriseq::evaluation::EvalError;
use mriseq::ingestion::IngestError;
use mriseq::model::ModelError;
use mriseq::phantom::PhantomError;
use mriseq::pipeline::PipelineError;
use mriseq::preprocessing::PreprocessError;
use mriseq::training::TrainingError;

pub const OK: u8 = 0;
pub const INTERNAL: u8 = 1;
pub const BAD_INPUT: u8 = 2;

fn io(e: &std::io::Error) -> u8 {
    match e.kind() {
        ErrorKind::NotFound | ErrorKind::PermissionDenied | ErrorKind::InvalidData | ErrorKind::UnexpectedEof => BAD_INPUT,
        _ => INTERNAL,
    }
}

fn ingest(e: &IngestError) -> u8 {
    match e {
        IngestError::Io(e) => io(e),
        _ => BAD_INPUT,
    }
}

fn model(e: &ModelError) -> u8 {
    match e {
        ModelError::Io(e) => io(e),
        _ => BAD_INPUT,
    }
}

fn preprocess(e: &PreprocessError) -> u8 {
    match e {
        PreprocessError::InvalidConfig(_) => BAD_INPUT,
        PreprocessError::Write { .. } => INTERNAL,
    }
}

fn eval(e: &EvalError) -> u8 {
    match e {
        EvalError::Model(e) => model(e),
        EvalError::Preprocess(e) => preprocess(e),
        EvalError::FingerprintMismatch(_) | EvalError::MixedLabelSets(..) | EvalError::LabelOutOfRange { .. } => BAD_INPUT,
        EvalError::EmptyMatrix | EvalError::NoReports => INTERNAL,
    }
}

fn training(e: &TrainingError) -> u8 {
    match e {
        TrainingError::TooFewPatients(_)
        | TrainingError::TooFewForK { .. }
        | TrainingError::LabelOutOfRange { .. }
        | TrainingError::EmptyFold { .. }
        | TrainingError::InvalidConfig(_) => BAD_INPUT,
        TrainingError::NonFiniteLoss { .. } | TrainingError::Io { .. } => INTERNAL,
        TrainingError::Model(e) => model(e),
        TrainingError::Eval(e) => eval(e),
        TrainingError::Preprocess(e) => preprocess(e),
        TrainingError::Ingest(e) => ingest(e),
    }
}

/// Maps an error chain to the process exit code: 2 for problems with the
/// caller's input, 1 for everything else.
pub fn code_for(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<PipelineError>() {
            return match e {
                PipelineError::Config(_) | PipelineError::Input(_) => BAD_INPUT,
                PipelineError::Ingest(e) => ingest(e),
                PipelineError::Training(e) => training(e),
                PipelineError::Eval(e) => eval(e),
                PipelineError::Model(e) => model(e),
                PipelineError::Io { source, .. } => io(source),
            };
        }
        if let Some(e) = cause.downcast_ref::<ConfigError>() {
            return match e {
                ConfigError::Io { source, .. } => io(source),
                _ => BAD_INPUT,
            };
        }
        if let Some(e) = cause.downcast_ref::<IngestError>() {
            return ingest(e);
        }
        if let Some(e) = cause.downcast_ref::<ModelError>() {
            return model(e);
        }
        if let Some(e) = cause.downcast_ref::<TrainingError>() {
            return training(e);
        }
        if let Some(e) = cause.downcast_ref::<PhantomError>() {
            return match e {
                PhantomError::Unwritable { .. } => INTERNAL,
                _ => BAD_INPUT,
            };
        }
        if cause.downcast_ref::<BadInput>().is_some() {
            return BAD_INPUT;
        }
    }
    INTERNAL
}

/// Marker for argument-level problems detected by the CLI itself.
#[derive(Debug)]
pub struct BadInput(pub String);

impl std::fmt::Display for BadInput {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for BadInput {}
