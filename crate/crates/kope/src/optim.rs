use kope_core::{KopeError, Result, Tensor};
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    #[default]
    Adam,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled weight decay, applied as `w -= lr * weight_decay * w`.
    pub weight_decay: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            kind: OptimizerKind::Adam,
            lr: 3e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr >= 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.weight_decay >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(KopeError::Configuration(format!("invalid optimizer settings {self:?}")))
        }
    }
}

/// Optimizer state for a fixed list of parameter tensors.
#[derive(Clone, Debug)]
pub struct Optimizer {
    cfg: OptimizerConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
}

impl Optimizer {
    pub fn new(cfg: OptimizerConfig, shapes: &[&Tensor]) -> Result<Self> {
        cfg.validate()?;
        let zeros = || shapes.iter().map(|t| vec![0.0; t.len()]).collect::<Vec<_>>();
        let (m, v) = match cfg.kind {
            OptimizerKind::Sgd => (Vec::new(), Vec::new()),
            OptimizerKind::Adam => (zeros(), zeros()),
        };
        Ok(Self { cfg, m, v, t: 0 })
    }

    pub fn step(&mut self, params: Vec<&mut Tensor>, grads: &[Tensor]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(KopeError::Parameter(format!(
                "{} parameter tensors with {} gradients",
                params.len(),
                grads.len()
            )));
        }
        self.t += 1;
        let c = self.cfg;
        let (bc1, bc2) = (1.0 - c.beta1.powi(self.t), 1.0 - c.beta2.powi(self.t));
        for (i, (p, g)) in params.into_iter().zip(grads).enumerate() {
            if p.len() != g.len() {
                return Err(KopeError::Parameter(format!("gradient {i} has the wrong size")));
            }
            let data = p.data_mut();
            for (k, (w, gk)) in data.iter_mut().zip(g.data()).enumerate() {
                *w -= c.lr * c.weight_decay * *w;
                match c.kind {
                    OptimizerKind::Sgd => *w -= c.lr * gk,
                    OptimizerKind::Adam => {
                        let m = &mut self.m[i][k];
                        let v = &mut self.v[i][k];
                        *m = c.beta1 * *m + (1.0 - c.beta1) * gk;
                        *v = c.beta2 * *v + (1.0 - c.beta2) * gk * gk;
                        *w -= c.lr * (*m / bc1) / ((*v / bc2).sqrt() + c.eps);
                    }
                }
            }
        }
        Ok(())
    }
}
