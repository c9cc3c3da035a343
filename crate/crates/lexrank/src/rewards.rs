//! Parameterized reward families over feature vectors and treatment
//! trajectories.
//!
//! Every family exposes its free parameters through an unconstrained
//! coordinate vector: positivity-constrained parameters live in log space,
//! everything else is raw. Gradients are taken with respect to those
//! unconstrained coordinates so the fitting loop never has to know which
//! parameters are constrained.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::prefmodel::logistic;

/// A treatment rollout: per-step binary actions, tumor volumes, and white
/// blood cell counts, optionally tagged with the patient's age.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub actions: Vec<u8>,
    pub tumor: Vec<f64>,
    pub wbc: Vec<f64>,
    pub age: Option<f64>,
}

impl Trajectory {
    pub fn new(actions: Vec<u8>, tumor: Vec<f64>, wbc: Vec<f64>, age: Option<f64>) -> Result<Self> {
        let len = actions.len();
        if len == 0 {
            return Err(Error::invalid("trajectory must have at least one step"));
        }
        if tumor.len() != len || wbc.len() != len {
            return Err(Error::invalid(format!(
                "trajectory sequences must share one length, got a={}, z={}, w={}",
                len,
                tumor.len(),
                wbc.len()
            )));
        }
        if actions.iter().any(|&a| a > 1) {
            return Err(Error::invalid("actions must be binary"));
        }
        Ok(Self {
            actions,
            tumor,
            wbc,
            age,
        })
    }

    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn mean_tumor(&self) -> f64 {
        self.tumor.iter().sum::<f64>() / self.tumor.len() as f64
    }

    pub fn mean_wbc(&self) -> f64 {
        self.wbc.iter().sum::<f64>() / self.wbc.len() as f64
    }
}

/// One comparable alternative: either a plain feature vector or a treatment
/// trajectory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Alternative {
    Features(Vec<f64>),
    Traj(Trajectory),
}

impl Alternative {
    pub fn features(values: Vec<f64>) -> Self {
        Alternative::Features(values)
    }

    fn kind(&self) -> &'static str {
        match self {
            Alternative::Features(_) => "feature-vector",
            Alternative::Traj(_) => "trajectory",
        }
    }
}

/// Whether an age-gated reward puts efficacy or toxicity on the gated side.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GatePolarity {
    EfficacyFirst,
    ToxicityFirst,
}

/// A concrete reward functional form with its parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RewardFamily {
    /// Dot product with a weight vector over feature alternatives. With
    /// `nonneg` the weights are positivity-constrained (log-parameterized).
    Linear { theta: Vec<f64>, nonneg: bool },
    /// Trajectory reward `softmin(theta_max, mean(-theta_z z_t + theta_w w_t))`.
    TrajThresholdedLinear {
        theta_max: f64,
        theta_z: f64,
        theta_w: f64,
        softmin_beta: f64,
    },
    /// Trajectory reward `mean(-theta_z z_t + theta_w w_t)` without a cap.
    TrajLinear { theta_z: f64, theta_w: f64 },
    /// Ground-truth toxicity objective: `min(5, mean wbc)`. No parameters.
    CancerGroundTruthWbc,
    /// Ground-truth efficacy objective: `-mean tumor`. No parameters.
    CancerGroundTruthTumor,
    /// Age-gated blend of efficacy `-mean tumor` and toxicity `mean wbc`.
    /// `age_loc`/`age_scale` are fixed normalization constants that define
    /// the unconstrained coordinates; they are not free parameters.
    AgeGated {
        y_threshold: f64,
        y_sensitivity: f64,
        polarity: GatePolarity,
        age_loc: f64,
        age_scale: f64,
    },
}

/// Smooth two-argument minimum: `-(1/beta) ln(e^{-beta a} + e^{-beta b})`.
/// Stabilized so neither exponential can overflow.
pub fn softmin(a: f64, b: f64, beta: f64) -> f64 {
    let m = a.min(b);
    m - ((-(beta * (a - m))).exp() + (-(beta * (b - m))).exp()).ln() / beta
}

impl RewardFamily {
    pub fn linear(theta: Vec<f64>) -> Self {
        RewardFamily::Linear {
            theta,
            nonneg: false,
        }
    }

    fn name(&self) -> &'static str {
        match self {
            RewardFamily::Linear { .. } => "linear",
            RewardFamily::TrajThresholdedLinear { .. } => "traj-thresholded-linear",
            RewardFamily::TrajLinear { .. } => "traj-linear",
            RewardFamily::CancerGroundTruthWbc => "cancer-ground-truth-wbc",
            RewardFamily::CancerGroundTruthTumor => "cancer-ground-truth-tumor",
            RewardFamily::AgeGated { .. } => "age-gated",
        }
    }

    pub fn validate(&self) -> Result<()> {
        let check_pos = |name: &str, v: f64| -> Result<()> {
            if !v.is_finite() || v <= 0.0 {
                Err(Error::invalid(format!("{name} must be > 0, got {v}")))
            } else {
                Ok(())
            }
        };
        match self {
            RewardFamily::Linear { theta, nonneg } => {
                if theta.is_empty() {
                    return Err(Error::invalid("linear reward needs at least one weight"));
                }
                if *nonneg {
                    for (i, &w) in theta.iter().enumerate() {
                        check_pos(&format!("theta[{i}]"), w)?;
                    }
                }
                Ok(())
            }
            RewardFamily::TrajThresholdedLinear {
                theta_z,
                theta_w,
                softmin_beta,
                ..
            } => {
                check_pos("theta_z", *theta_z)?;
                check_pos("theta_w", *theta_w)?;
                check_pos("softmin_beta", *softmin_beta)
            }
            RewardFamily::TrajLinear { theta_z, theta_w } => {
                check_pos("theta_z", *theta_z)?;
                check_pos("theta_w", *theta_w)
            }
            RewardFamily::CancerGroundTruthWbc | RewardFamily::CancerGroundTruthTumor => Ok(()),
            RewardFamily::AgeGated {
                y_sensitivity,
                age_scale,
                ..
            } => {
                check_pos("y_sensitivity", *y_sensitivity)?;
                check_pos("age_scale", *age_scale)
            }
        }
    }

    fn traj<'a>(&self, x: &'a Alternative) -> Result<&'a Trajectory> {
        match x {
            Alternative::Traj(t) => Ok(t),
            _ => Err(Error::KindMismatch {
                family: self.name(),
                alternative: x.kind(),
            }),
        }
    }

    /// Evaluates the reward on one alternative.
    pub fn eval(&self, x: &Alternative) -> Result<f64> {
        match self {
            RewardFamily::Linear { theta, .. } => match x {
                Alternative::Features(values) => {
                    if values.len() != theta.len() {
                        return Err(Error::invalid(format!(
                            "feature length {} does not match weight length {}",
                            values.len(),
                            theta.len()
                        )));
                    }
                    Ok(theta.iter().zip(values).map(|(t, v)| t * v).sum())
                }
                _ => Err(Error::KindMismatch {
                    family: self.name(),
                    alternative: x.kind(),
                }),
            },
            RewardFamily::TrajThresholdedLinear {
                theta_max,
                theta_z,
                theta_w,
                softmin_beta,
            } => {
                let t = self.traj(x)?;
                let lin = -theta_z * t.mean_tumor() + theta_w * t.mean_wbc();
                Ok(softmin(*theta_max, lin, *softmin_beta))
            }
            RewardFamily::TrajLinear { theta_z, theta_w } => {
                let t = self.traj(x)?;
                Ok(-theta_z * t.mean_tumor() + theta_w * t.mean_wbc())
            }
            RewardFamily::CancerGroundTruthWbc => {
                let t = self.traj(x)?;
                Ok(t.mean_wbc().min(5.0))
            }
            RewardFamily::CancerGroundTruthTumor => {
                let t = self.traj(x)?;
                Ok(-t.mean_tumor())
            }
            RewardFamily::AgeGated {
                y_threshold,
                y_sensitivity,
                polarity,
                ..
            } => {
                let t = self.traj(x)?;
                let age = t.age.ok_or_else(|| {
                    Error::invalid("age-gated reward requires a trajectory with age")
                })?;
                let gate = logistic((age - y_threshold) / y_sensitivity);
                let efficacy = -t.mean_tumor();
                let toxicity = t.mean_wbc();
                Ok(match polarity {
                    GatePolarity::EfficacyFirst => gate * efficacy + (1.0 - gate) * toxicity,
                    GatePolarity::ToxicityFirst => (1.0 - gate) * efficacy + gate * toxicity,
                })
            }
        }
    }

    /// Number of free parameters (unconstrained coordinates).
    pub fn param_dim(&self) -> usize {
        match self {
            RewardFamily::Linear { theta, .. } => theta.len(),
            RewardFamily::TrajThresholdedLinear { .. } => 3,
            RewardFamily::TrajLinear { .. } => 2,
            RewardFamily::CancerGroundTruthWbc | RewardFamily::CancerGroundTruthTumor => 0,
            RewardFamily::AgeGated { .. } => 2,
        }
    }

    /// Packs the free parameters into unconstrained coordinates.
    pub fn to_unconstrained(&self) -> Vec<f64> {
        match self {
            RewardFamily::Linear { theta, nonneg } => {
                if *nonneg {
                    theta.iter().map(|t| t.ln()).collect()
                } else {
                    theta.clone()
                }
            }
            RewardFamily::TrajThresholdedLinear {
                theta_max,
                theta_z,
                theta_w,
                ..
            } => vec![*theta_max, theta_z.ln(), theta_w.ln()],
            RewardFamily::TrajLinear { theta_z, theta_w } => vec![theta_z.ln(), theta_w.ln()],
            RewardFamily::CancerGroundTruthWbc | RewardFamily::CancerGroundTruthTumor => vec![],
            RewardFamily::AgeGated {
                y_threshold,
                y_sensitivity,
                age_loc,
                age_scale,
                ..
            } => vec![
                (y_threshold - age_loc) / age_scale,
                (y_sensitivity / age_scale).ln(),
            ],
        }
    }

    /// Rebuilds a family of the same shape from unconstrained coordinates.
    pub fn from_unconstrained(&self, coords: &[f64]) -> Result<RewardFamily> {
        if coords.len() != self.param_dim() {
            return Err(Error::invalid(format!(
                "expected {} coordinates for {}, got {}",
                self.param_dim(),
                self.name(),
                coords.len()
            )));
        }
        Ok(match self {
            RewardFamily::Linear { nonneg, .. } => RewardFamily::Linear {
                theta: if *nonneg {
                    coords.iter().map(|c| c.exp()).collect()
                } else {
                    coords.to_vec()
                },
                nonneg: *nonneg,
            },
            RewardFamily::TrajThresholdedLinear { softmin_beta, .. } => {
                RewardFamily::TrajThresholdedLinear {
                    theta_max: coords[0],
                    theta_z: coords[1].exp(),
                    theta_w: coords[2].exp(),
                    softmin_beta: *softmin_beta,
                }
            }
            RewardFamily::TrajLinear { .. } => RewardFamily::TrajLinear {
                theta_z: coords[0].exp(),
                theta_w: coords[1].exp(),
            },
            RewardFamily::CancerGroundTruthWbc => RewardFamily::CancerGroundTruthWbc,
            RewardFamily::CancerGroundTruthTumor => RewardFamily::CancerGroundTruthTumor,
            RewardFamily::AgeGated {
                polarity,
                age_loc,
                age_scale,
                ..
            } => RewardFamily::AgeGated {
                y_threshold: age_loc + age_scale * coords[0],
                y_sensitivity: age_scale * coords[1].exp(),
                polarity: *polarity,
                age_loc: *age_loc,
                age_scale: *age_scale,
            },
        })
    }

    /// Gradient of `eval` with respect to the unconstrained coordinates.
    pub fn param_grad(&self, x: &Alternative) -> Result<Vec<f64>> {
        match self {
            RewardFamily::Linear { theta, nonneg } => match x {
                Alternative::Features(values) => {
                    if values.len() != theta.len() {
                        return Err(Error::invalid(format!(
                            "feature length {} does not match weight length {}",
                            values.len(),
                            theta.len()
                        )));
                    }
                    Ok(if *nonneg {
                        theta.iter().zip(values).map(|(t, v)| t * v).collect()
                    } else {
                        values.clone()
                    })
                }
                _ => Err(Error::KindMismatch {
                    family: self.name(),
                    alternative: x.kind(),
                }),
            },
            RewardFamily::TrajThresholdedLinear {
                theta_max,
                theta_z,
                theta_w,
                softmin_beta,
            } => {
                let t = self.traj(x)?;
                let mz = t.mean_tumor();
                let mw = t.mean_wbc();
                let lin = -theta_z * mz + theta_w * mw;
                // Softmin mixing weight on the cap argument.
                let w_cap = logistic(-softmin_beta * (theta_max - lin));
                let w_lin = 1.0 - w_cap;
                Ok(vec![
                    w_cap,
                    w_lin * (-mz) * theta_z,
                    w_lin * mw * theta_w,
                ])
            }
            RewardFamily::TrajLinear { theta_z, theta_w } => {
                let t = self.traj(x)?;
                Ok(vec![-t.mean_tumor() * theta_z, t.mean_wbc() * theta_w])
            }
            RewardFamily::CancerGroundTruthWbc | RewardFamily::CancerGroundTruthTumor => {
                self.traj(x)?;
                Ok(vec![])
            }
            RewardFamily::AgeGated {
                y_threshold,
                y_sensitivity,
                polarity,
                age_scale,
                ..
            } => {
                let t = self.traj(x)?;
                let age = t.age.ok_or_else(|| {
                    Error::invalid("age-gated reward requires a trajectory with age")
                })?;
                let u = (age - y_threshold) / y_sensitivity;
                let gate = logistic(u);
                let dgate_du = gate * (1.0 - gate);
                let efficacy = -t.mean_tumor();
                let toxicity = t.mean_wbc();
                let dr_dgate = match polarity {
                    GatePolarity::EfficacyFirst => efficacy - toxicity,
                    GatePolarity::ToxicityFirst => toxicity - efficacy,
                };
                // du/d(y_threshold) = -1/s, du/d(s) = -u/s; chain through the
                // normalized coordinates t~ = (y0 - loc)/scale, s~ = ln(s/scale).
                let dr_dy0 = dr_dgate * dgate_du * (-1.0 / y_sensitivity);
                let dr_ds = dr_dgate * dgate_du * (-u / y_sensitivity);
                Ok(vec![dr_dy0 * age_scale, dr_ds * y_sensitivity])
            }
        }
    }
}
