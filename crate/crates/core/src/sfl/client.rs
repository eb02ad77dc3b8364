use std::collections::HashMap;

use ndarray::{Array1, Array2};

use super::record::{Batch, SmashedRecord};
use crate::attacks::AttackSpec;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nn::{MlpModel, Sgd, Trace, Velocity};

/// One participant: its client-side network and local data.
#[derive(Clone, Debug)]
pub struct ClientState {
    pub id: usize,
    pub model: MlpModel,
    pub velocity: Velocity,
    pub train: Dataset,
    /// Global sample id of every row of `train`.
    pub train_ids: Vec<usize>,
    pub test: Dataset,
    pub attack: Option<AttackSpec>,
}

impl ClientState {
    pub fn is_malicious(&self) -> bool {
        self.attack.is_some()
    }

    /// Rows `rows` of the local training set as a batch.
    pub fn batch(&self, rows: &[usize]) -> Batch {
        let sub = self.train.subset(rows);
        Batch::new(
            rows.iter().map(|&r| self.train_ids[r]).collect(),
            sub.features,
            sub.labels,
        )
    }
}

/// Activation trace of one client forward pass, keyed by sample id.
#[derive(Clone, Debug)]
pub struct ClientTrace {
    pub client_id: usize,
    pub trace: Trace,
    pub sample_ids: Vec<usize>,
}

pub fn client_forward(client: &ClientState, batch: &Batch) -> Result<(Vec<SmashedRecord>, ClientTrace)> {
    if batch.is_empty() {
        return Err(Error::Domain(format!("client {} got an empty batch", client.id)));
    }
    let trace = client.model.forward(&batch.features, None)?;
    let out = trace.output();
    let records = (0..batch.len())
        .map(|i| SmashedRecord {
            sample_id: batch.sample_ids[i],
            client_id: client.id,
            features: out.row(i).to_vec(),
            label: batch.labels[i],
            poison_truth: batch.poisoned[i],
        })
        .collect();
    Ok((
        records,
        ClientTrace {
            client_id: client.id,
            trace,
            sample_ids: batch.sample_ids.clone(),
        },
    ))
}

/// Back-propagates the smashed gradients through the client network and
/// applies one SGD step. Samples without a gradient contribute zero.
pub fn client_backward(
    client: &mut ClientState,
    trace: &ClientTrace,
    smashed_gradients: &[(usize, Array1<f64>)],
    sgd: &Sgd,
) -> Result<()> {
    if trace.client_id != client.id {
        return Err(Error::Contract(format!(
            "trace of client {} applied to client {}",
            trace.client_id, client.id
        )));
    }
    let rows: HashMap<usize, usize> = trace
        .sample_ids
        .iter()
        .enumerate()
        .map(|(i, &s)| (s, i))
        .collect();
    let out = trace.trace.output();
    let mut grad = Array2::zeros(out.raw_dim());
    for (sample, g) in smashed_gradients {
        let row = *rows.get(sample).ok_or_else(|| {
            Error::Contract(format!(
                "gradient for sample {sample} which client {} did not forward",
                client.id
            ))
        })?;
        if g.len() != out.ncols() {
            return Err(Error::Shape(format!(
                "smashed gradient width {} vs smashed width {}",
                g.len(),
                out.ncols()
            )));
        }
        let mut dst = grad.row_mut(row);
        dst += g;
    }
    let bundle = client.model.backward(&trace.trace, &grad)?;
    sgd.step(&mut client.model, &bundle, &mut client.velocity)
}
