//! Method variants and their training hyperparameters.

use std::fmt;
use std::str::FromStr;

use crate::error::Error;
use crate::projector::{NullityMode, ProjectionKind};
use crate::vit::LogitScope;

/// The compared methods. The ablations switch the two projectors and the
/// drift penalty independently.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Method {
    Seq,
    Nsp2,
    Nsp2B1Only,
    Nsp2B2Only,
    Nsp2NoLnLoss,
    Nsp2B1LnLoss,
    Nsp2B2LnLoss,
    Pgp,
}

impl Method {
    pub const ALL: [Method; 8] = [
        Method::Seq,
        Method::Nsp2,
        Method::Nsp2B1Only,
        Method::Nsp2B2Only,
        Method::Nsp2NoLnLoss,
        Method::Nsp2B1LnLoss,
        Method::Nsp2B2LnLoss,
        Method::Pgp,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Seq => "seq",
            Method::Nsp2 => "nsp2",
            Method::Nsp2B1Only => "nsp2_b1_only",
            Method::Nsp2B2Only => "nsp2_b2_only",
            Method::Nsp2NoLnLoss => "nsp2_no_lnloss",
            Method::Nsp2B1LnLoss => "nsp2_b1_lnloss",
            Method::Nsp2B2LnLoss => "nsp2_b2_lnloss",
            Method::Pgp => "pgp",
        }
    }

    pub fn projection(self) -> ProjectionKind {
        match self {
            Method::Seq => ProjectionKind::None,
            Method::Nsp2 | Method::Nsp2NoLnLoss => ProjectionKind::Both,
            Method::Nsp2B1Only | Method::Nsp2B1LnLoss => ProjectionKind::B1Only,
            Method::Nsp2B2Only | Method::Nsp2B2LnLoss => ProjectionKind::B2Only,
            Method::Pgp => ProjectionKind::Pgp,
        }
    }

    pub fn uses_ln_loss(self) -> bool {
        matches!(
            self,
            Method::Nsp2 | Method::Nsp2B1LnLoss | Method::Nsp2B2LnLoss
        )
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown method `{s}`")))
    }
}

/// First-order update rule producing the candidate update `P_G`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Optimizer {
    Sgd,
    /// Adam moments are reset at every task start; the rescaled step is
    /// what gets projected.
    Adam {
        beta1: f64,
        beta2: f64,
        eps: f64,
    },
}

impl Optimizer {
    pub fn adam() -> Self {
        Optimizer::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LrSchedule {
    Constant,
    /// Cosine decay to zero over each task's steps.
    Cosine,
}

impl fmt::Display for LrSchedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LrSchedule::Constant => "constant",
            LrSchedule::Cosine => "cosine",
        })
    }
}

impl FromStr for LrSchedule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        match s {
            "constant" => Ok(LrSchedule::Constant),
            "cosine" => Ok(LrSchedule::Cosine),
            _ => Err(Error::Config(format!("unknown lr schedule `{s}`"))),
        }
    }
}

/// Everything that distinguishes one training run from another besides
/// the seed and the data.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MethodConfig {
    pub method: Method,
    pub eta1: f64,
    pub eta2: f64,
    pub nullity: NullityMode,
    pub ln_coeff: f64,
    pub optimizer: Optimizer,
    pub lr: f64,
    pub head_lr: f64,
    pub schedule: LrSchedule,
    pub epochs: usize,
    pub batch_size: usize,
    pub temperature: f64,
    pub scope: LogitScope,
    /// Training samples per task used to collect `J₁`/`J₂`; 0 means all.
    pub collect_samples: usize,
    /// Also audit every update against the stored `Ω` matrices.
    pub audit_direct: bool,
}

impl Default for MethodConfig {
    fn default() -> Self {
        Self {
            method: Method::Nsp2,
            eta1: 0.9,
            eta2: 0.9,
            nullity: NullityMode::Adaptive,
            ln_coeff: 1.0,
            optimizer: Optimizer::Sgd,
            lr: 0.5,
            head_lr: 2.0,
            schedule: LrSchedule::Constant,
            epochs: 10,
            batch_size: 8,
            temperature: 10.0,
            scope: LogitScope::Seen,
            collect_samples: 0,
            audit_direct: false,
        }
    }
}

impl MethodConfig {
    pub fn with_method(self, method: Method) -> Self {
        Self { method, ..self }
    }

    pub fn validate(&self) -> Result<(), Error> {
        let bad = |m: String| Err(Error::Config(m));
        for (name, eta) in [("eta1", self.eta1), ("eta2", self.eta2)] {
            if !(0.0..=1.0).contains(&eta) {
                return bad(format!("{name} = {eta} outside [0, 1]"));
            }
        }
        for (name, v) in [
            ("lr", self.lr),
            ("head_lr", self.head_lr),
            ("ln_coeff", self.ln_coeff),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return bad(format!("{name} = {v} must be finite and non-negative"));
            }
        }
        if !(self.temperature.is_finite() && self.temperature > 0.0) {
            return bad(format!(
                "temperature = {} must be positive",
                self.temperature
            ));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch_size must be positive".into());
        }
        if let Optimizer::Adam { beta1, beta2, eps } = self.optimizer {
            if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) || !(eps > 0.0) {
                return bad(format!(
                    "adam parameters ({beta1}, {beta2}, {eps}) out of range"
                ));
            }
        }
        Ok(())
    }
}
