use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::features::dot;
use super::svm::LinearSvm;
use crate::error::{Error, Result};
use crate::geometry::ClassLabel;

/// `2^-6, 2^-5, ..., 2^6`.
pub fn default_lambda_grid() -> Vec<f64> {
    (-6..=6).map(|k| 2f64.powi(k)).collect()
}

pub fn default_c_grid() -> Vec<f64> {
    vec![0.01, 0.1, 1.0, 10.0]
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln sigmoid(x)`, accurate for large negative `x`.
#[inline]
pub fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AppearanceMetadata {
    pub c: f64,
    pub epochs: usize,
    pub seed: u64,
    pub positives: usize,
    pub negatives: usize,
    pub objective: f64,
    /// Validation AP at the chosen `(c, lambda)`, when calibration ran.
    pub validation_ap: Option<f64>,
    /// `(c, lambda, validation AP)` for every evaluated pair.
    pub search: Vec<(f64, f64, Option<f64>)>,
}

/// Linear classifier plus the slope of its calibrating sigmoid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AppearanceModel {
    pub class: ClassLabel,
    pub w: Vec<f64>,
    pub bias: f64,
    pub lambda: f64,
    pub metadata: AppearanceMetadata,
}

impl AppearanceModel {
    pub fn from_svm(class: ClassLabel, svm: LinearSvm, lambda: f64, metadata: AppearanceMetadata) -> Result<Self> {
        if !(lambda.is_finite() && lambda > 0.0) {
            return Err(Error::validation(format!("sigmoid slope must be positive, got {lambda}")));
        }
        Ok(Self { class, w: svm.w, bias: svm.bias, lambda, metadata })
    }

    pub fn dim(&self) -> usize {
        self.w.len()
    }

    pub fn margin(&self, f: &[f32]) -> Result<f64> {
        if f.len() != self.w.len() {
            return Err(Error::DimensionMismatch { expected: self.w.len(), got: f.len() });
        }
        Ok(dot(&self.w, f) + self.bias)
    }

    pub fn with_lambda(&self, lambda: f64) -> Self {
        Self { lambda, ..self.clone() }
    }
}

/// `1 / (1 + exp(-lambda * (w . f + bias)))`.
pub fn appearance_posterior(model: &AppearanceModel, f: &[f32]) -> Result<f64> {
    Ok(sigmoid(model.lambda * model.margin(f)?))
}

pub fn log_appearance_posterior(model: &AppearanceModel, f: &[f32]) -> Result<f64> {
    Ok(log_sigmoid(model.lambda * model.margin(f)?))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LambdaChoice {
    pub lambda: f64,
    pub ap: f64,
    /// AP per grid value; `None` where the AP was undefined.
    pub table: Vec<(f64, Option<f64>)>,
}

/// Picks the grid value with the best validation AP; ties go to the smallest
/// value. `ap_for` returns `None` when AP is undefined.
pub fn select_lambda(grid: &[f64], mut ap_for: impl FnMut(f64) -> Result<Option<f64>>) -> Result<LambdaChoice> {
    if grid.is_empty() {
        return Err(Error::validation("lambda grid is empty"));
    }
    if let Some(bad) = grid.iter().find(|l| !(l.is_finite() && **l > 0.0)) {
        return Err(Error::validation(format!("lambda grid value {bad} is not positive")));
    }
    let mut sorted = grid.to_vec();
    sorted.sort_by(f64::total_cmp);
    sorted.dedup();
    let mut table = Vec::with_capacity(sorted.len());
    let mut best: Option<(f64, f64)> = None;
    for &lambda in &sorted {
        let ap = ap_for(lambda)?;
        table.push((lambda, ap));
        if let Some(ap) = ap {
            if best.is_none_or(|(_, b)| ap > b) {
                best = Some((lambda, ap));
            }
        }
    }
    let (lambda, ap) = best.ok_or(Error::EmptyValidation)?;
    Ok(LambdaChoice { lambda, ap, table })
}

/// Per-class slope search. `scorer(class, lambda)` runs the full detection
/// pipeline on the validation split and returns that class's AP.
pub fn calibrate_lambda<'a>(
    classes: impl IntoIterator<Item = &'a str>,
    grid: &[f64],
    mut scorer: impl FnMut(&str, f64) -> Result<Option<f64>>,
) -> Result<BTreeMap<String, LambdaChoice>> {
    classes
        .into_iter()
        .map(|class| Ok((class.to_string(), select_lambda(grid, |l| scorer(class, l))?)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn model(w: Vec<f64>, bias: f64, lambda: f64) -> AppearanceModel {
        AppearanceModel {
            class: ClassLabel::new(0, "hat"),
            w,
            bias,
            lambda,
            metadata: AppearanceMetadata {
                c: 1.0,
                epochs: 1,
                seed: 0,
                positives: 1,
                negatives: 1,
                objective: 0.0,
                validation_ap: None,
                search: vec![],
            },
        }
    }

    #[test]
    fn posterior_examples() {
        for lambda in [0.01, 1.0, 64.0] {
            let m = model(vec![1.0, -1.0], 0.0, lambda);
            assert_eq!(appearance_posterior(&m, &[2.0, 2.0]).unwrap(), 0.5);
        }
        let m = model(vec![1.0], 3f64.ln(), 1.0);
        assert!((appearance_posterior(&m, &[0.0]).unwrap() - 0.75).abs() < 1e-15);
        assert!(matches!(appearance_posterior(&m, &[0.0, 1.0]), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn log_sigmoid_is_stable() {
        assert!((log_sigmoid(-800.0) + 800.0).abs() < 1e-12);
        assert!(log_sigmoid(800.0) <= 0.0 && log_sigmoid(800.0) > -1e-300);
        for x in [-5.0, -0.3, 0.0, 0.7, 12.0] {
            assert!((log_sigmoid(x) - sigmoid(x).ln()).abs() < 1e-14);
        }
    }

    #[test]
    fn lambda_selection() {
        assert_eq!(select_lambda(&[4.0, 1.0, 2.0], |_| Ok(Some(0.5))).unwrap().lambda, 1.0);
        assert_eq!(select_lambda(&[3.0], |_| Ok(Some(0.1))).unwrap().lambda, 3.0);
        let choice = select_lambda(&default_lambda_grid(), |l| Ok(Some(-(l.log2() - 2.0).abs()))).unwrap();
        assert_eq!(choice.lambda, 4.0);
        assert_eq!(choice.table.len(), 13);
        assert!(matches!(select_lambda(&[1.0], |_| Ok(None)), Err(Error::EmptyValidation)));
        assert!(select_lambda(&[], |_| Ok(Some(1.0))).is_err());
        assert!(select_lambda(&[0.0], |_| Ok(Some(1.0))).is_err());
    }

    #[test]
    fn calibrate_per_class() {
        let chosen = calibrate_lambda(["a", "b"], &[0.5, 1.0, 2.0], |class, l| {
            Ok(Some(if class == "a" { l } else { -l }))
        })
        .unwrap();
        assert_eq!(chosen["a"].lambda, 2.0);
        assert_eq!(chosen["b"].lambda, 0.5);
    }

    proptest! {
        #[test]
        fn posterior_antisymmetry(w in proptest::collection::vec(-3.0f64..3.0, 3), bias in -2.0f64..2.0,
                                  f in proptest::collection::vec(-3.0f32..3.0, 3), lambda in 0.01f64..10.0) {
            let m = model(w.clone(), bias, lambda);
            let neg_f: Vec<f32> = f.iter().map(|v| -v).collect();
            let flipped = model(w, -bias, lambda);
            let total = appearance_posterior(&m, &f).unwrap() + appearance_posterior(&flipped, &neg_f).unwrap();
            prop_assert!((total - 1.0).abs() < 1e-12);
        }

        #[test]
        fn posterior_strictly_increasing_in_margin(a in -20.0f64..20.0, d in 1e-3f64..5.0, lambda in 0.01f64..5.0) {
            let lo = model(vec![1.0], a, lambda);
            let hi = model(vec![1.0], a + d, lambda);
            prop_assert!(log_appearance_posterior(&hi, &[0.0]).unwrap() > log_appearance_posterior(&lo, &[0.0]).unwrap());
        }
        #[test]
        fn slope_never_reorders_scores(w in proptest::collection::vec(-1.0f64..1.0, 2), bias in -1.0f64..1.0,
                                       rows in proptest::collection::vec(proptest::collection::vec(-3.0f32..3.0, 2), 2..30)) {
            let rank = |lambda: f64| {
                let m = model(w.clone(), bias, lambda);
                let scores: Vec<f64> = rows.iter().map(|f| log_appearance_posterior(&m, f).unwrap()).collect();
                let mut idx: Vec<usize> = (0..rows.len()).collect();
                idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(a.cmp(&b)));
                idx
            };
            let reference = rank(1.0);
            for lambda in default_lambda_grid() {
                prop_assert_eq!(rank(lambda), reference.clone());
            }
        }
    }
}
