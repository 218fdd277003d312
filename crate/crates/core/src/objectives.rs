//! Training objectives: bank decorrelation, the domain-aware soft-nearest-
//! neighbour contrastive loss, the task loss and their weighted sum.

use log::warn;
use serde::{Deserialize, Serialize};

use crate::data::Task;
use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

/// How the off-diagonal Gram matrix is reduced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorrNorm {
    /// `‖offdiag(BBᵀ)‖_F`
    #[default]
    Frobenius,
    /// `‖offdiag(BBᵀ)‖_F²`
    SquaredFrobenius,
}

/// Pairwise prompt distance used by the contrastive loss and diagnostics.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptDistance {
    /// Squared difference averaged over the `Z·d` entries.
    #[default]
    MeanSquared,
    /// Euclidean norm of the flattened difference.
    L2,
}

impl PromptDistance {
    pub fn between(self, a: &Tensor, b: &Tensor) -> f64 {
        let sq = a.mean_sq_diff(b);
        match self {
            PromptDistance::MeanSquared => sq,
            PromptDistance::L2 => (sq * a.len() as f64).sqrt(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub lambda_corr: f64,
    pub gamma_dac: f64,
    pub tau: f64,
    pub corr_norm: CorrNorm,
    pub distance: PromptDistance,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_corr: 0.1,
            gamma_dac: 0.1,
            tau: 0.1,
            corr_norm: CorrNorm::Frobenius,
            distance: PromptDistance::MeanSquared,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) {
            return Err(Error::config("tau must be positive"));
        }
        if self.lambda_corr < 0.0 || self.gamma_dac < 0.0 {
            return Err(Error::config("loss weights must be non-negative"));
        }
        Ok(())
    }
}

/// Off-diagonal energy of the bank Gram matrix.
pub fn corr_loss(g: &mut Graph, bank: Var, norm: CorrNorm) -> Result<Var> {
    let z = g.value(bank).rows();
    let bt = g.transpose(bank)?;
    let gram = g.matmul(bank, bt)?;
    let mut mask = Tensor::filled(z, z, 1.0);
    for i in 0..z {
        mask.data_mut()[i * z + i] = 0.0;
    }
    let mask = g.constant(mask);
    let off = g.mul(gram, mask)?;
    let sq = g.square(off)?;
    let energy = g.sum(sq)?;
    match norm {
        CorrNorm::Frobenius => g.sqrt(energy),
        CorrNorm::SquaredFrobenius => Ok(energy),
    }
}

/// Soft-nearest-neighbour loss over per-image prompts.
///
/// For each prompt `i` with at least one same-domain partner the term is
/// `log Σ_{k≠i} exp(−dist_ik/τ) − log Σ_{j≠i, same} exp(−dist_ij/τ)`; the
/// loss is the mean over those prompts. A batch with a single distinct
/// domain yields 0.
pub fn dac_loss(
    g: &mut Graph,
    prompts: &[Var],
    domain_ids: &[u32],
    tau: f64,
    distance: PromptDistance,
) -> Result<Var> {
    if prompts.len() != domain_ids.len() {
        return Err(Error::contract(format!(
            "{} prompts but {} domain ids",
            prompts.len(),
            domain_ids.len()
        )));
    }
    let n = prompts.len();
    let mut distinct = domain_ids.to_vec();
    distinct.sort_unstable();
    distinct.dedup();
    if distinct.len() < 2 {
        warn!("contrastive batch holds a single domain; contrastive loss is 0");
        return Ok(g.constant(Tensor::scalar(0.0)));
    }

    let (z, d) = g.value(prompts[0]).dims();
    let flat = prompts
        .iter()
        .map(|&p| g.reshape(p, 1, z * d))
        .collect::<Result<Vec<_>>>()?;
    let stacked = g.concat_rows(&flat)?;
    let sq = g.pairwise_sq_dist(stacked)?;
    let dist = match distance {
        PromptDistance::MeanSquared => g.scale(sq, 1.0 / (z * d) as f64)?,
        PromptDistance::L2 => g.sqrt(sq)?,
    };
    let logits = g.scale(dist, -1.0 / tau)?;

    let mut pos = vec![false; n * n];
    let mut all = vec![false; n * n];
    let mut valid = vec![0.0; n];
    for i in 0..n {
        for j in 0..n {
            if i != j {
                all[i * n + j] = true;
                if domain_ids[i] == domain_ids[j] {
                    pos[i * n + j] = true;
                    valid[i] = 1.0;
                }
            }
        }
    }
    let count: f64 = valid.iter().sum();
    if count == 0.0 {
        return Ok(g.constant(Tensor::scalar(0.0)));
    }
    let lse_all = g.masked_logsumexp_rows(logits, all)?;
    let lse_pos = g.masked_logsumexp_rows(logits, pos)?;
    let per = g.sub(lse_all, lse_pos)?;
    let weights = g.constant(Tensor::matrix(n, 1, valid.into_iter().map(|v| v / count).collect())?);
    let weighted = g.mul(per, weights)?;
    g.sum(weighted)
}

/// Prediction targets for a query batch.
#[derive(Debug, Clone, PartialEq)]
pub enum Targets {
    Classes(Vec<usize>),
    Values(Vec<f64>),
}

impl Targets {
    pub fn len(&self) -> usize {
        match self {
            Targets::Classes(c) => c.len(),
            Targets::Values(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Mean cross-entropy (classification) or mean squared error (regression)
/// over the rows of `outputs`.
pub fn task_loss(g: &mut Graph, outputs: Var, targets: &Targets, task: Task) -> Result<Var> {
    let (n, k) = g.value(outputs).dims();
    if targets.len() != n || n == 0 {
        return Err(Error::contract(format!(
            "{n} predictions but {} targets",
            targets.len()
        )));
    }
    match (task, targets) {
        (Task::Classification, Targets::Classes(classes)) => {
            let mut onehot = Tensor::zeros(n, k);
            for (i, &c) in classes.iter().enumerate() {
                if c >= k {
                    return Err(Error::contract(format!("class {c} outside [0, {k})")));
                }
                onehot.data_mut()[i * k + c] = 1.0;
            }
            let logp = g.log_softmax_rows(outputs)?;
            let onehot = g.constant(onehot);
            let picked = g.mul(logp, onehot)?;
            let total = g.sum(picked)?;
            g.scale(total, -1.0 / n as f64)
        }
        (Task::Regression, Targets::Values(values)) => {
            if k != 1 {
                return Err(Error::contract("regression expects one output per row"));
            }
            if values.iter().any(|v| !v.is_finite()) {
                return Err(Error::contract("non-finite regression target"));
            }
            let t = g.constant(Tensor::matrix(n, 1, values.clone())?);
            let diff = g.sub(outputs, t)?;
            let sq = g.square(diff)?;
            g.mean(sq)
        }
        _ => Err(Error::contract("targets do not match the task")),
    }
}

/// `task + λ·corr + γ·dac`.
pub fn total_loss(g: &mut Graph, task: Var, corr: Var, dac: Var, w: &LossWeights) -> Result<Var> {
    let c = g.scale(corr, w.lambda_corr)?;
    let d = g.scale(dac, w.gamma_dac)?;
    let s = g.add(task, c)?;
    g.add(s, d)
}

/// Evaluates [`corr_loss`] on a plain tensor.
pub fn corr_loss_value(bank: &Tensor, norm: CorrNorm) -> Result<f64> {
    let mut g = Graph::new();
    let b = g.constant(bank.clone());
    let l = corr_loss(&mut g, b, norm)?;
    g.value(l).item()
}

/// Evaluates [`dac_loss`] on plain tensors.
pub fn dac_loss_value(
    prompts: &[Tensor],
    domain_ids: &[u32],
    tau: f64,
    distance: PromptDistance,
) -> Result<f64> {
    let mut g = Graph::new();
    let vars: Vec<Var> = prompts.iter().map(|p| g.constant(p.clone())).collect();
    let l = dac_loss(&mut g, &vars, domain_ids, tau, distance)?;
    g.value(l).item()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn corr_loss_examples() {
        let ortho = Tensor::from_rows(&[vec![1.0, 0.0, 0.0], vec![0.0, 0.0, 2.0]]).unwrap();
        assert_eq!(corr_loss_value(&ortho, CorrNorm::Frobenius).unwrap(), 0.0);
        let twin = Tensor::from_rows(&[vec![1.0, 0.0], vec![1.0, 0.0]]).unwrap();
        let v = corr_loss_value(&twin, CorrNorm::Frobenius).unwrap();
        assert!((v - 2f64.sqrt()).abs() < 1e-15);
        assert_eq!(corr_loss_value(&twin, CorrNorm::SquaredFrobenius).unwrap(), 2.0);
    }

    fn p(v: f64) -> Tensor {
        Tensor::filled(2, 3, v)
    }

    #[test]
    fn identical_prompts_give_ln3() {
        let prompts = vec![p(0.5); 4];
        let v = dac_loss_value(&prompts, &[0, 0, 1, 1], 0.1, PromptDistance::MeanSquared).unwrap();
        assert!((v - 3f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn single_domain_is_zero() {
        let prompts = vec![p(0.0), p(1.0), p(2.0)];
        let v = dac_loss_value(&prompts, &[4, 4, 4], 0.1, PromptDistance::MeanSquared).unwrap();
        assert_eq!(v, 0.0);
    }

    #[test]
    fn uniform_logits_give_ln_k() {
        let mut g = Graph::new();
        let out = g.constant(Tensor::zeros(3, 4));
        let l = task_loss(&mut g, out, &Targets::Classes(vec![0, 1, 3]), Task::Classification).unwrap();
        assert!((g.value(l).item().unwrap() - 4f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn skewed_logits_cross_entropy() {
        let mut g = Graph::new();
        let out = g.constant(Tensor::matrix(1, 2, vec![3f64.ln(), 0.0]).unwrap());
        let l = task_loss(&mut g, out, &Targets::Classes(vec![0]), Task::Classification).unwrap();
        let want = (4.0f64 / 3.0).ln();
        assert!((g.value(l).item().unwrap() - want).abs() < 1e-15);
        assert!((want - 0.28768).abs() < 1e-5);
    }

    #[test]
    fn exact_regression_is_zero() {
        let mut g = Graph::new();
        let out = g.constant(Tensor::matrix(2, 1, vec![1.5, -2.0]).unwrap());
        let l = task_loss(&mut g, out, &Targets::Values(vec![1.5, -2.0]), Task::Regression).unwrap();
        assert_eq!(g.value(l).item().unwrap(), 0.0);
    }

    #[test]
    fn out_of_range_class_is_contract_error() {
        let mut g = Graph::new();
        let out = g.constant(Tensor::zeros(1, 3));
        let err = task_loss(&mut g, out, &Targets::Classes(vec![3]), Task::Classification);
        assert!(matches!(err, Err(Error::Contract(_))));
    }

    #[test]
    fn total_loss_arithmetic() {
        let mut g = Graph::new();
        let [t, c, d] = [1.0, 2.0, 3.0].map(|v| g.constant(Tensor::scalar(v)));
        let w = LossWeights::default();
        assert_eq!((w.lambda_corr, w.gamma_dac, w.tau), (0.1, 0.1, 0.1));
        let l = total_loss(&mut g, t, c, d, &w).unwrap();
        assert!((g.value(l).item().unwrap() - 1.5).abs() < 1e-15);
        let zero = LossWeights {
            lambda_corr: 0.0,
            gamma_dac: 0.0,
            ..w
        };
        let l = total_loss(&mut g, t, c, d, &zero).unwrap();
        assert_eq!(g.value(l).item().unwrap(), 1.0);
    }
}
