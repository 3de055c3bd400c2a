//! Masked first-order optimizers over a model's parameter list.

use serde::{Deserialize, Serialize};

use crate::model::Coverage;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum OptimizerKind {
    /// Plain gradient descent.
    Sgd,
    Adam {
        #[serde(default = "beta1")]
        beta1: f64,
        #[serde(default = "beta2")]
        beta2: f64,
        #[serde(default = "adam_eps")]
        eps: f64,
    },
}

fn beta1() -> f64 {
    0.9
}

fn beta2() -> f64 {
    0.999
}

fn adam_eps() -> f64 {
    1e-8
}

impl OptimizerKind {
    pub fn adam() -> Self {
        OptimizerKind::Adam {
            beta1: beta1(),
            beta2: beta2(),
            eps: adam_eps(),
        }
    }
}

/// Updates only covered elements; everything else is left untouched, bit
/// for bit.
#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    pub lr: f64,
    moments: Vec<Option<(Vec<f64>, Vec<f64>)>>,
    steps: u64,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64) -> Self {
        Optimizer {
            kind,
            lr,
            moments: Vec::new(),
            steps: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// One update. `grads[i]` is `None` when parameter `i` received no
    /// gradient, in which case it is skipped.
    pub fn step(&mut self, params: &mut [Tensor], grads: &[Option<Vec<f64>>], coverage: &[Coverage]) {
        assert_eq!(params.len(), grads.len(), "one gradient slot per parameter");
        assert_eq!(params.len(), coverage.len(), "one coverage entry per parameter");
        if self.moments.len() != params.len() {
            self.moments = vec![None; params.len()];
        }
        self.steps += 1;
        let lr = self.lr;
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let Some(g) = g else { continue };
            let cov = &coverage[i];
            if matches!(cov, Coverage::None) {
                continue;
            }
            let data = p.data_mut();
            match self.kind {
                OptimizerKind::Sgd => update(cov, data.len(), |j| data[j] -= lr * g[j]),
                OptimizerKind::Adam { beta1, beta2, eps } => {
                    let (m, v) = self.moments[i]
                        .get_or_insert_with(|| (vec![0.0; data.len()], vec![0.0; data.len()]));
                    let t = self.steps as i32;
                    let c1 = 1.0 - beta1.powi(t);
                    let c2 = 1.0 - beta2.powi(t);
                    update(cov, data.len(), |j| {
                        m[j] = beta1 * m[j] + (1.0 - beta1) * g[j];
                        v[j] = beta2 * v[j] + (1.0 - beta2) * g[j] * g[j];
                        data[j] -= lr * (m[j] / c1) / ((v[j] / c2).sqrt() + eps);
                    });
                }
            }
        }
    }
}

fn update(cov: &Coverage, len: usize, mut f: impl FnMut(usize)) {
    match cov {
        Coverage::None => {}
        Coverage::All => (0..len).for_each(&mut f),
        Coverage::Indices(ix) => ix.iter().copied().for_each(f),
    }
}
