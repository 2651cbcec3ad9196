//! Direct-alignment losses as pure scalar functions of four log-probabilities.
//!
//! All three losses depend on the inputs only through the log-ratio margin
//! `m = (log π(y_w) − log π(y_l)) − (log π_ref(y_w) − log π_ref(y_l))`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{PolicySnapshot, Weights};
use crate::oracle::PreferencePair;

/// Log-probabilities of the preferred and dispreferred responses under the
/// trained policy and under the reference.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogProbQuad {
    pub policy_chosen: f64,
    pub policy_rejected: f64,
    pub ref_chosen: f64,
    pub ref_rejected: f64,
}

impl LogProbQuad {
    pub fn new(policy_chosen: f64, policy_rejected: f64, ref_chosen: f64, ref_rejected: f64) -> Self {
        Self {
            policy_chosen,
            policy_rejected,
            ref_chosen,
            ref_rejected,
        }
    }

    pub fn to_array(self) -> [f64; 4] {
        [
            self.policy_chosen,
            self.policy_rejected,
            self.ref_chosen,
            self.ref_rejected,
        ]
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        Self::new(a[0], a[1], a[2], a[3])
    }

    pub fn is_valid(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite() && *v <= 0.0)
    }

    /// The same pair with preferred and dispreferred swapped.
    pub fn swapped(self) -> Self {
        Self::new(
            self.policy_rejected,
            self.policy_chosen,
            self.ref_rejected,
            self.ref_chosen,
        )
    }
}

/// `∂m / ∂(policy_chosen, policy_rejected, ref_chosen, ref_rejected)`.
const MARGIN_GRAD: [f64; 4] = [1.0, -1.0, -1.0, 1.0];

pub fn margin(q: &LogProbQuad) -> f64 {
    (q.policy_chosen - q.policy_rejected) - (q.ref_chosen - q.ref_rejected)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    Dpo,
    Ipo,
    Slic,
}

impl LossKind {
    pub const ALL: [LossKind; 3] = [LossKind::Dpo, LossKind::Ipo, LossKind::Slic];

    pub fn name(self) -> &'static str {
        match self {
            LossKind::Dpo => "dpo",
            LossKind::Ipo => "ipo",
            LossKind::Slic => "slic",
        }
    }
}

impl std::fmt::Display for LossKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for LossKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "dpo" => Ok(LossKind::Dpo),
            "ipo" => Ok(LossKind::Ipo),
            "slic" => Ok(LossKind::Slic),
            other => Err(format!("unknown loss `{other}` (expected dpo, ipo or slic)")),
        }
    }
}

/// Loss value and its gradient with respect to the four inputs, in
/// [`LogProbQuad::to_array`] order.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossValue {
    pub loss: f64,
    pub grad: [f64; 4],
}

impl LossValue {
    fn from_margin_grad(loss: f64, dl_dm: f64) -> Self {
        Self {
            loss,
            grad: MARGIN_GRAD.map(|g| g * dl_dm),
        }
    }
}

/// A loss kind with its KL coefficient β.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DapLoss {
    pub kind: LossKind,
    pub beta: f64,
}

impl DapLoss {
    pub fn new(kind: LossKind, beta: f64) -> Result<Self> {
        if !(beta > 0.0 && beta.is_finite()) {
            return Err(Error::config("train.beta", "must be a positive finite number"));
        }
        Ok(Self { kind, beta })
    }

    pub fn evaluate(&self, q: &LogProbQuad) -> LossValue {
        match self.kind {
            LossKind::Dpo => dpo_loss(q, self.beta),
            LossKind::Ipo => ipo_loss(q, self.beta),
            LossKind::Slic => slic_loss(q, self.beta),
        }
    }

    /// The loss when policy and reference coincide (`m = 0`).
    pub fn identity_value(&self) -> f64 {
        match self.kind {
            LossKind::Dpo => std::f64::consts::LN_2,
            LossKind::Ipo => (1.0 / (2.0 * self.beta)).powi(2),
            LossKind::Slic => 1.0,
        }
    }
}

/// `log(1 + e^{-z})` without overflow for any finite `z`.
fn softplus_neg(z: f64) -> f64 {
    (-z.abs()).exp().ln_1p() + (-z).max(0.0)
}

/// `σ(-z)` evaluated on the stable branch.
fn sigmoid_neg(z: f64) -> f64 {
    if z >= 0.0 {
        let e = (-z).exp();
        e / (1.0 + e)
    } else {
        1.0 / (1.0 + z.exp())
    }
}

/// `−log σ(β·m)`.
pub fn dpo_loss(q: &LogProbQuad, beta: f64) -> LossValue {
    let z = beta * margin(q);
    LossValue::from_margin_grad(softplus_neg(z), -beta * sigmoid_neg(z))
}

/// `(m − 1/(2β))²`.
pub fn ipo_loss(q: &LogProbQuad, beta: f64) -> LossValue {
    let r = margin(q) - 1.0 / (2.0 * beta);
    LossValue::from_margin_grad(r * r, 2.0 * r)
}

/// `max(0, 1 − β·m)`; the subgradient at the hinge is 0.
pub fn slic_loss(q: &LogProbQuad, beta: f64) -> LossValue {
    let slack = 1.0 - beta * margin(q);
    if slack > 0.0 {
        LossValue::from_margin_grad(slack, -beta)
    } else {
        LossValue::from_margin_grad(0.0, 0.0)
    }
}

/// Assembles the quad for one pair with the reference slots filled by a
/// frozen snapshot, and evaluates the loss. Only the first two gradient
/// entries are meaningful to training; the snapshot is not trainable.
pub fn bpo_step_loss(
    loss: &DapLoss,
    policy: &Weights<'_>,
    reference: &PolicySnapshot,
    pair: &PreferencePair,
) -> (LogProbQuad, LossValue) {
    let q = LogProbQuad::new(
        crate::model::seq_logprob(policy, &pair.x, &pair.y_w),
        crate::model::seq_logprob(policy, &pair.x, &pair.y_l),
        reference.logprob(&pair.x, &pair.y_w),
        reference.logprob(&pair.x, &pair.y_l),
    );
    let mut value = loss.evaluate(&q);
    value.grad[2] = 0.0;
    value.grad[3] = 0.0;
    (q, value)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const EXAMPLE: LogProbQuad = LogProbQuad {
        policy_chosen: -1.0,
        policy_rejected: -2.0,
        ref_chosen: -1.5,
        ref_rejected: -1.5,
    };

    fn same(v: f64) -> LogProbQuad {
        LogProbQuad::new(v, v - 0.7, v, v - 0.7)
    }

    #[test]
    fn margin_examples() {
        assert_eq!(margin(&same(-3.0)), 0.0);
        assert_eq!(margin(&EXAMPLE), 1.0);
        assert_eq!(margin(&EXAMPLE.swapped()), -1.0);
    }

    #[test]
    fn dpo_examples() {
        assert!((dpo_loss(&same(-2.0), 0.1).loss - std::f64::consts::LN_2).abs() < 1e-12);
        // ln(1 + e^{-0.1}) evaluated independently.
        let want = (1.0f64 + (-0.1f64).exp()).ln();
        assert!((dpo_loss(&EXAMPLE, 0.1).loss - want).abs() < 1e-15);
        assert!((want - 0.644397).abs() < 1e-6);
        let q = LogProbQuad::new(0.0, -100.0, 0.0, 0.0);
        let v = dpo_loss(&q, 1.0);
        assert!(v.loss.is_finite() && v.loss >= 0.0 && v.loss < 1e-40);
        let v = dpo_loss(&LogProbQuad::new(0.0, -1e6, 0.0, 0.0), 1.0);
        assert!(v.loss == 0.0 && v.grad.iter().all(|g| g.is_finite()));
        let v = dpo_loss(&LogProbQuad::new(-1e6, 0.0, 0.0, 0.0), 1.0);
        assert_eq!(v.loss, 1e6);
        assert!(v.grad.iter().all(|g| g.is_finite()));
    }

    #[test]
    fn dpo_gradient_signs() {
        let g = dpo_loss(&EXAMPLE, 0.1).grad;
        assert!(g[0] < 0.0 && g[1] > 0.0 && g[2] > 0.0 && g[3] < 0.0);
    }

    #[test]
    fn ipo_examples() {
        assert_eq!(ipo_loss(&same(-1.0), 0.1).loss, 25.0);
        assert_eq!(ipo_loss(&EXAMPLE, 0.1).loss, 16.0);
        let at_min = LogProbQuad::new(0.0, -5.0, 0.0, 0.0);
        let v = ipo_loss(&at_min, 0.1);
        assert_eq!(v.loss, 0.0);
        assert!(v.grad.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn slic_examples() {
        assert_eq!(slic_loss(&same(-1.0), 0.1).loss, 1.0);
        assert!((slic_loss(&EXAMPLE, 0.1).loss - 0.9).abs() < 1e-15);
        let v = slic_loss(&LogProbQuad::new(0.0, -20.0, 0.0, 0.0), 0.1);
        assert_eq!(v.loss, 0.0);
        assert_eq!(v.grad, [0.0; 4]);
        // Exactly on the hinge.
        let v = slic_loss(&LogProbQuad::new(0.0, -10.0, 0.0, 0.0), 0.1);
        assert_eq!(v.loss, 0.0);
        assert_eq!(v.grad, [0.0; 4]);
    }

    #[test]
    fn identity_values() {
        for beta in [0.1, 0.5, 2.0] {
            for kind in LossKind::ALL {
                let l = DapLoss::new(kind, beta).unwrap();
                let got = l.evaluate(&same(-4.0)).loss;
                assert!((got - l.identity_value()).abs() < 1e-9, "{kind} {beta}");
            }
        }
    }

    #[test]
    fn beta_must_be_positive() {
        assert!(DapLoss::new(LossKind::Dpo, 0.0).is_err());
        assert!(DapLoss::new(LossKind::Dpo, -1.0).is_err());
        assert!(DapLoss::new(LossKind::Dpo, f64::NAN).is_err());
        assert_eq!("SLiC".parse::<LossKind>(), Ok(LossKind::Slic));
        assert!("kto".parse::<LossKind>().is_err());
    }

    fn quad() -> impl Strategy<Value = LogProbQuad> {
        prop::array::uniform4(-60.0f64..0.0).prop_map(LogProbQuad::from_array)
    }

    proptest! {
        #[test]
        fn losses_are_bounded_below(q in quad(), beta in 0.01f64..2.0) {
            prop_assert!(dpo_loss(&q, beta).loss > 0.0 || beta * margin(&q) > 30.0);
            prop_assert!(ipo_loss(&q, beta).loss >= 0.0);
            prop_assert!(slic_loss(&q, beta).loss >= 0.0);
        }

        #[test]
        fn reference_shift_leaves_losses_unchanged(q in quad(), c in -5.0f64..0.0, beta in 0.01f64..2.0) {
            let shifted = LogProbQuad { ref_chosen: q.ref_chosen + c, ref_rejected: q.ref_rejected + c, ..q };
            for kind in LossKind::ALL {
                let l = DapLoss::new(kind, beta).unwrap();
                let (a, b) = (l.evaluate(&q).loss, l.evaluate(&shifted).loss);
                prop_assert!((a - b).abs() <= 1e-9 * a.abs().max(1.0));
            }
        }

        #[test]
        fn monotone_in_margin(m1 in -50.0f64..50.0, dm in 0.0f64..10.0, beta in 0.01f64..2.0) {
            // Margin of `at(m)` is exactly m.
            let at = |m: f64| LogProbQuad::new(-30.0 + m / 2.0, -30.0 - m / 2.0, -30.0, -30.0);
            let (a, b) = (at(m1), at(m1 + dm));
            prop_assert!(dpo_loss(&b, beta).loss <= dpo_loss(&a, beta).loss);
            prop_assert!(slic_loss(&b, beta).loss <= slic_loss(&a, beta).loss);
            let target = 1.0 / (2.0 * beta);
            if dm > 1e-6 {
                if m1 + dm < target {
                    prop_assert!(ipo_loss(&b, beta).loss < ipo_loss(&a, beta).loss);
                }
                if m1 > target {
                    prop_assert!(ipo_loss(&b, beta).loss > ipo_loss(&a, beta).loss);
                }
            }
        }
    }
}
