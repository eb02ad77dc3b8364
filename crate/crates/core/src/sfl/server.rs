use ndarray::Array1;

use super::record::{feature_matrix, SmashedRecord};
use crate::error::{Error, Result};
use crate::nn::{cross_entropy, per_sample_cross_entropy, MlpModel, Sgd, Velocity};

/// Server-side network with its optimizer state.
#[derive(Clone, Debug)]
pub struct ServerState {
    pub model: MlpModel,
    pub velocity: Velocity,
}

impl ServerState {
    pub fn new(model: MlpModel) -> Self {
        Self {
            model,
            velocity: Velocity::new(),
        }
    }
}

/// Result of one server update on a pooled batch.
#[derive(Clone, Debug)]
pub struct ServerStep {
    /// Mean cross-entropy before the update.
    pub loss: f64,
    pub per_sample_loss: Vec<f64>,
    /// `d loss / d z` for every record, in record order. `loss` is the batch
    /// mean, so each entry carries a `1 / K` factor.
    pub smashed_gradients: Vec<(usize, Array1<f64>)>,
}

pub fn server_train_step(
    server: &mut ServerState,
    records: &[SmashedRecord],
    sgd: &Sgd,
) -> Result<ServerStep> {
    if records.is_empty() {
        return Err(Error::Domain("server step on an empty record set".into()));
    }
    let z = feature_matrix(records);
    let labels: Vec<usize> = records.iter().map(|r| r.label).collect();
    let trace = server.model.forward(&z, None)?;
    let (per_sample, _) = per_sample_cross_entropy(trace.output(), &labels)?;
    let (loss, grad) = cross_entropy(trace.output(), &labels)?;
    let bundle = server.model.backward(&trace, &grad)?;
    let input = bundle.input.clone().expect("backward fills the input gradient");
    let smashed_gradients = records
        .iter()
        .zip(input.rows())
        .map(|(r, g)| (r.sample_id, g.to_owned()))
        .collect();
    sgd.step(&mut server.model, &bundle, &mut server.velocity)?;
    Ok(ServerStep {
        loss,
        per_sample_loss: per_sample.to_vec(),
        smashed_gradients,
    })
}
