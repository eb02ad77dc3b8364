//! Label-level gradient interactions and the influence-gated multi-task
//! teacher.
//!
//! The teacher has a shared trunk and three heads: `a` flags poisoned
//! records, `b` names the sending client and `c` predicts the class.
//! Cosine similarities between per-label trunk gradients form the
//! interaction matrices, which are diffused over a score-weighted node
//! graph into label-pair gates for the auxiliary losses.

use log::warn;
use ndarray::{Array1, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{per_sample_cross_entropy, Activation, Adam, MlpModel};
use crate::rng::{stream_rng, Stream};

pub const HEAD_A: &str = "a";
pub const HEAD_B: &str = "b";
pub const HEAD_C: &str = "c";

/// Features with the three task labelings.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskBatch {
    pub features: Array2<f64>,
    /// 1 for detected-poisoned.
    pub poison: Vec<usize>,
    pub client: Vec<usize>,
    pub category: Vec<usize>,
    pub clients: usize,
    pub classes: usize,
}

impl TaskBatch {
    pub fn len(&self) -> usize {
        self.features.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.len();
        if self.poison.len() != n || self.client.len() != n || self.category.len() != n {
            return Err(Error::Shape("task labels must match the feature rows".into()));
        }
        if self.poison.iter().any(|&y| y >= 2)
            || self.client.iter().any(|&y| y >= self.clients)
            || self.category.iter().any(|&y| y >= self.classes)
        {
            return Err(Error::Domain("task label outside its label set".into()));
        }
        Ok(())
    }

    pub fn select(&self, rows: &[usize]) -> TaskBatch {
        let pick = |v: &[usize]| rows.iter().map(|&i| v[i]).collect();
        TaskBatch {
            features: self.features.select(Axis(0), rows),
            poison: pick(&self.poison),
            client: pick(&self.client),
            category: pick(&self.category),
            clients: self.clients,
            classes: self.classes,
        }
    }
}

/// Trunk gradient of the mean task loss over each label's samples; `None`
/// for labels absent from the batch.
pub fn per_label_gradients(
    teacher: &MlpModel,
    features: &Array2<f64>,
    labels: &[usize],
    head: &str,
) -> Result<Vec<Option<Vec<f64>>>> {
    let n_labels = teacher
        .output_dim(Some(head))
        .ok_or_else(|| Error::Contract(format!("teacher has no head `{head}`")))?;
    let trace = teacher.forward(features, Some(head))?;
    let (_, grad) = per_sample_cross_entropy(trace.output(), labels)?;
    let mut out = vec![None; n_labels];
    for (y, slot) in out.iter_mut().enumerate() {
        let rows: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == y).collect();
        if rows.is_empty() {
            continue;
        }
        let sub = trace.select_rows(&rows);
        let g = grad.select(Axis(0), &rows) / rows.len() as f64;
        *slot = Some(teacher.backward(&sub, &g)?.trunk_flat());
    }
    Ok(out)
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        (dot / (na * nb)).clamp(-1.0, 1.0)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GisMatrix {
    pub values: Array2<f64>,
    /// Labels of either task with no samples; their rows/columns are zero.
    pub missing_rows: Vec<usize>,
    pub missing_cols: Vec<usize>,
}

pub fn gis_matrix(rows: &[Option<Vec<f64>>], cols: &[Option<Vec<f64>>]) -> Result<GisMatrix> {
    let mut values = Array2::zeros((rows.len(), cols.len()));
    for (i, gi) in rows.iter().enumerate() {
        for (j, gj) in cols.iter().enumerate() {
            if let (Some(a), Some(b)) = (gi, gj) {
                if a.len() != b.len() {
                    return Err(Error::Shape("gradient vectors differ in length".into()));
                }
                values[[i, j]] = cosine(a, b);
            }
        }
    }
    let missing = |v: &[Option<Vec<f64>>]| (0..v.len()).filter(|&i| v[i].is_none()).collect();
    Ok(GisMatrix {
        values,
        missing_rows: missing(rows),
        missing_cols: missing(cols),
    })
}

/// How node scores become the pairwise weight `R`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreLift {
    /// `R = r rᵀ / max(r rᵀ)`.
    #[default]
    Outer,
    /// `R_kj = r_j / max r`.
    Broadcast,
}

pub fn one_hot(labels: &[usize], width: usize) -> Result<Array2<f64>> {
    let mut m = Array2::zeros((labels.len(), width));
    for (k, &y) in labels.iter().enumerate() {
        if y >= width {
            return Err(Error::Domain(format!("label {y} outside [0, {width})")));
        }
        m[[k, y]] = 1.0;
    }
    Ok(m)
}

pub fn score_lift(scores: &[f64], mode: ScoreLift) -> Array2<f64> {
    let n = scores.len();
    let r = Array1::from(scores.to_vec());
    let raw = match mode {
        ScoreLift::Outer => {
            let col = r.view().insert_axis(Axis(1));
            let row = r.view().insert_axis(Axis(0));
            col.dot(&row)
        }
        ScoreLift::Broadcast => Array2::from_shape_fn((n, n), |(_, j)| scores[j]),
    };
    let max = raw.iter().copied().fold(0.0f64, f64::max);
    if max > 0.0 {
        raw / max
    } else {
        raw
    }
}

/// Divides each row by its absolute sum; zero rows stay zero.
pub fn row_normalize(m: &Array2<f64>) -> Array2<f64> {
    let mut out = m.clone();
    for mut row in out.rows_mut() {
        let s: f64 = row.iter().map(|v| v.abs()).sum();
        if s > 0.0 {
            row /= s;
        }
    }
    out
}

/// LU with partial pivoting; `None` when a pivot vanishes.
pub fn lu_solve(a: &Array2<f64>, b: &Array2<f64>) -> Option<Array2<f64>> {
    let n = a.nrows();
    assert_eq!(a.ncols(), n, "square system");
    assert_eq!(b.nrows(), n, "right-hand side rows");
    let mut lu = a.clone();
    let mut x = b.clone();
    let scale = a.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1.0);
    for col in 0..n {
        let pivot = (col..n).max_by(|&i, &j| lu[[i, col]].abs().total_cmp(&lu[[j, col]].abs()))?;
        if lu[[pivot, col]].abs() <= 1e-14 * scale {
            return None;
        }
        if pivot != col {
            for j in 0..n {
                lu.swap([pivot, j], [col, j]);
            }
            for j in 0..x.ncols() {
                x.swap([pivot, j], [col, j]);
            }
        }
        let p = lu[[col, col]];
        for i in col + 1..n {
            let f = lu[[i, col]] / p;
            if f == 0.0 {
                continue;
            }
            for j in col..n {
                lu[[i, j]] -= f * lu[[col, j]];
            }
            for j in 0..x.ncols() {
                x[[i, j]] -= f * x[[col, j]];
            }
        }
    }
    for col in (0..n).rev() {
        for j in 0..x.ncols() {
            let mut v = x[[col, j]];
            for k in col + 1..n {
                v -= lu[[col, k]] * x[[k, j]];
            }
            x[[col, j]] = v / lu[[col, col]];
        }
    }
    Some(x)
}

#[derive(Clone, Debug, PartialEq)]
pub struct InfluenceMatrix {
    pub values: Array2<f64>,
    pub beta: f64,
    /// The propagation operator `RowNorm(R ⊙ (E G Fᵀ))`.
    pub operator: Array2<f64>,
    pub jittered: bool,
}

/// `(1−β) Eᵀ (I − β·RowNorm(R ⊙ (E G Fᵀ)))⁻¹ F` with `E`, `F` given by the
/// per-node labels of the two tasks.
pub fn influence_matrix(
    scores: &[f64],
    gis: &Array2<f64>,
    labels_x: &[usize],
    labels_y: &[usize],
    beta: f64,
    lift: ScoreLift,
) -> Result<InfluenceMatrix> {
    if !(beta > 0.0 && beta < 1.0) {
        return Err(Error::config("beta", format!("must lie in (0,1), got {beta}")));
    }
    let k = scores.len();
    if labels_x.len() != k || labels_y.len() != k {
        return Err(Error::Shape("one label per node for both tasks".into()));
    }
    let e = one_hot(labels_x, gis.nrows())?;
    let f = one_hot(labels_y, gis.ncols())?;
    let pair = e.dot(gis).dot(&f.t());
    let q = row_normalize(&(score_lift(scores, lift) * pair));
    let system = Array2::<f64>::eye(k) - &q * beta;
    let (solution, jittered) = match lu_solve(&system, &f) {
        Some(x) => (x, false),
        None => {
            warn!("influence system is singular; retrying with diagonal jitter");
            let jitter = &system + &(Array2::<f64>::eye(k) * 1e-10);
            let x = lu_solve(&jitter, &f)
                .ok_or_else(|| Error::NonFinite("influence system remains singular".into()))?;
            (x, true)
        }
    };
    let values = e.t().dot(&solution) * (1.0 - beta);
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("influence matrix".into()));
    }
    Ok(InfluenceMatrix {
        values,
        beta,
        operator: q,
        jittered,
    })
}

/// Head logits and per-logit gradients of the gated multi-task loss.
#[derive(Clone, Debug, PartialEq)]
pub struct AdLoss {
    /// Sum over samples, as the objective is written.
    pub total: f64,
    pub grad_a: Array2<f64>,
    pub grad_b: Array2<f64>,
    pub grad_c: Array2<f64>,
}

#[allow(clippy::too_many_arguments)]
pub fn ad_teacher_loss(
    logits: (&Array2<f64>, &Array2<f64>, &Array2<f64>),
    labels: (&[usize], &[usize], &[usize]),
    m_ab: &Array2<f64>,
    m_ac: &Array2<f64>,
    lambda_b: f64,
    lambda_c: f64,
) -> Result<AdLoss> {
    let (la, ga) = per_sample_cross_entropy(logits.0, labels.0)?;
    let (lb, mut gb) = per_sample_cross_entropy(logits.1, labels.1)?;
    let (lc, mut gc) = per_sample_cross_entropy(logits.2, labels.2)?;
    let mut total = 0.0;
    for k in 0..la.len() {
        let (ya, yb, yc) = (labels.0[k], labels.1[k], labels.2[k]);
        let wb = *m_ab
            .get([ya, yb])
            .ok_or_else(|| Error::Contract(format!("({ya}, {yb}) outside the a-b influence matrix")))?;
        let wc = *m_ac
            .get([ya, yc])
            .ok_or_else(|| Error::Contract(format!("({ya}, {yc}) outside the a-c influence matrix")))?;
        let cb = lambda_b * wb;
        let cc = lambda_c * wc;
        total += la[k] + cb * lb[k] + cc * lc[k];
        gb.row_mut(k).mapv_inplace(|g| cb * g);
        gc.row_mut(k).mapv_inplace(|g| cc * g);
    }
    Ok(AdLoss {
        total,
        grad_a: ga,
        grad_b: gb,
        grad_c: gc,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdTeacherConfig {
    pub hidden: Vec<usize>,
    pub epochs: usize,
    pub lr: f64,
    pub batch: usize,
    pub beta: f64,
    pub lambda_b: f64,
    pub lambda_c: f64,
    pub lift: ScoreLift,
    /// Epochs between influence refreshes.
    pub refresh: usize,
    /// Nodes used to build the influence graph.
    pub max_nodes: usize,
}

impl Default for AdTeacherConfig {
    fn default() -> Self {
        Self {
            hidden: vec![64, 32],
            epochs: 30,
            lr: 1e-2,
            batch: 64,
            beta: 0.15,
            lambda_b: 1.0,
            lambda_c: 1.0,
            lift: ScoreLift::Outer,
            refresh: 1,
            max_nodes: 256,
        }
    }
}

pub fn build_ad_teacher(dz: usize, config: &AdTeacherConfig, clients: usize, classes: usize, seed: u64, round: usize) -> Result<MlpModel> {
    let mut widths = vec![dz];
    widths.extend(&config.hidden);
    let mut rng = stream_rng(seed, Stream::Teacher, round as u64, 0);
    MlpModel::multi_head(
        &widths,
        Activation::Relu,
        &[(HEAD_A, 2), (HEAD_B, clients), (HEAD_C, classes)],
        &mut rng,
    )
}

#[derive(Clone, Debug)]
pub struct AdTeacher {
    pub model: MlpModel,
    pub m_ab: Array2<f64>,
    pub m_ac: Array2<f64>,
    /// Mean per-sample objective per epoch.
    pub losses: Vec<f64>,
}

/// Evenly spaced subset of at most `cap` indices.
pub fn spread_indices(n: usize, cap: usize) -> Vec<usize> {
    if n <= cap {
        return (0..n).collect();
    }
    (0..cap).map(|i| i * n / cap).collect()
}

/// Recomputes both influence matrices for the current teacher.
pub fn refresh_influence(
    teacher: &MlpModel,
    batch: &TaskBatch,
    scores: &[f64],
    config: &AdTeacherConfig,
) -> Result<(Array2<f64>, Array2<f64>)> {
    let ga = per_label_gradients(teacher, &batch.features, &batch.poison, HEAD_A)?;
    let gb = per_label_gradients(teacher, &batch.features, &batch.client, HEAD_B)?;
    let gc = per_label_gradients(teacher, &batch.features, &batch.category, HEAD_C)?;
    let nodes = spread_indices(batch.len(), config.max_nodes);
    let pick = |v: &[usize]| nodes.iter().map(|&i| v[i]).collect::<Vec<_>>();
    let r: Vec<f64> = nodes.iter().map(|&i| scores[i]).collect();
    let m_ab = influence_matrix(&r, &gis_matrix(&ga, &gb)?.values, &pick(&batch.poison), &pick(&batch.client), config.beta, config.lift)?;
    let m_ac = influence_matrix(&r, &gis_matrix(&ga, &gc)?.values, &pick(&batch.poison), &pick(&batch.category), config.beta, config.lift)?;
    Ok((m_ab.values, m_ac.values))
}

/// One optimizer step on the mean gated objective of `batch`.
pub fn ad_teacher_step(
    model: &mut MlpModel,
    opt: &mut Adam,
    batch: &TaskBatch,
    m_ab: &Array2<f64>,
    m_ac: &Array2<f64>,
    config: &AdTeacherConfig,
) -> Result<f64> {
    let ta = model.forward(&batch.features, Some(HEAD_A))?;
    let tb = model.forward(&batch.features, Some(HEAD_B))?;
    let tc = model.forward(&batch.features, Some(HEAD_C))?;
    let loss = ad_teacher_loss(
        (ta.output(), tb.output(), tc.output()),
        (&batch.poison, &batch.client, &batch.category),
        m_ab,
        m_ac,
        config.lambda_b,
        config.lambda_c,
    )?;
    let n = batch.len() as f64;
    let mut grads = model.backward(&ta, &(loss.grad_a / n))?;
    grads.add_assign(&model.backward(&tb, &(loss.grad_b / n))?)?;
    grads.add_assign(&model.backward(&tc, &(loss.grad_c / n))?)?;
    opt.step(model, &grads)?;
    Ok(loss.total / n)
}

pub fn train_ad_teacher(
    batch: &TaskBatch,
    scores: &[f64],
    config: &AdTeacherConfig,
    seed: u64,
    round: usize,
) -> Result<AdTeacher> {
    batch.validate()?;
    if batch.is_empty() {
        return Err(Error::config("ad_teacher", "no records to train on"));
    }
    if scores.len() != batch.len() {
        return Err(Error::Shape("one score per record".into()));
    }
    if config.refresh == 0 || config.batch == 0 || config.max_nodes == 0 {
        return Err(Error::config("ad_refresh", "cadence, batch and node cap must be positive"));
    }
    let mut model = build_ad_teacher(batch.features.ncols(), config, batch.clients, batch.classes, seed, round)?;
    let mut opt = Adam::new(config.lr);
    let mut rng = stream_rng(seed, Stream::Teacher, round as u64, 1);
    let mut m_ab = Array2::ones((2, batch.clients));
    let mut m_ac = Array2::ones((2, batch.classes));
    let mut losses = Vec::with_capacity(config.epochs);
    let mut order: Vec<usize> = (0..batch.len()).collect();
    for epoch in 0..config.epochs {
        if epoch % config.refresh == 0 {
            (m_ab, m_ac) = refresh_influence(&model, batch, scores, config)?;
        }
        rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
        let mut sum = 0.0;
        for chunk in order.chunks(config.batch) {
            let mini = batch.select(chunk);
            sum += ad_teacher_step(&mut model, &mut opt, &mini, &m_ab, &m_ac, config)? * chunk.len() as f64;
        }
        losses.push(sum / batch.len() as f64);
    }
    Ok(AdTeacher {
        model,
        m_ab,
        m_ac,
        losses,
    })
}
