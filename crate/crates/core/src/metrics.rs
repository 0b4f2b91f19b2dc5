//! Overlap scores between label maps.

use crate::error::{Error, Result};
use crate::grid::{LabelMap, UNKNOWN};

/// Dice overlap `2|A ∩ B| / (|A| + |B|)` for one label; 1.0 when the label is absent from both.
pub fn dice(pred: &LabelMap, truth: &LabelMap, label: u8) -> Result<f64> {
    if pred.width() != truth.width() || pred.height() != truth.height() {
        return Err(Error::Input(format!(
            "dice: prediction is {}x{}, truth is {}x{}",
            pred.width(),
            pred.height(),
            truth.width(),
            truth.height()
        )));
    }
    if pred.has_unknown() || truth.has_unknown() {
        return Err(Error::Input("dice: label map contains UNKNOWN pixels".into()));
    }
    let (mut both, mut a, mut b) = (0usize, 0usize, 0usize);
    for (&p, &t) in pred.data().iter().zip(truth.data()) {
        let (ip, it) = (p == label, t == label);
        a += ip as usize;
        b += it as usize;
        both += (ip && it) as usize;
    }
    if a + b == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * both as f64 / (a + b) as f64)
}

/// Mean Dice over labels `1..num_labels`.
pub fn mean_foreground_dice(pred: &LabelMap, truth: &LabelMap, num_labels: usize) -> Result<f64> {
    if num_labels < 2 {
        return Err(Error::Input("need at least one foreground label".into()));
    }
    let mut total = 0.0;
    for l in 1..num_labels {
        total += dice(pred, truth, l as u8)?;
    }
    Ok(total / (num_labels - 1) as f64)
}

/// Fraction of pixels where the maps differ, counting only pixels `UNKNOWN` in `exclude`.
pub fn change_fraction(old: &LabelMap, new: &LabelMap, exclude: &LabelMap) -> f64 {
    let mut changed = 0usize;
    let mut total = 0usize;
    for p in 0..old.len() {
        if exclude.data()[p] != UNKNOWN {
            continue;
        }
        total += 1;
        changed += (old.data()[p] != new.data()[p]) as usize;
    }
    if total == 0 {
        0.0
    } else {
        changed as f64 / total as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn dice_examples() {
        let a = LabelMap::new(4, 1, vec![1, 1, 0, 0]).unwrap();
        let b = LabelMap::new(4, 1, vec![1, 0, 0, 0]).unwrap();
        assert!((dice(&a, &b, 1).unwrap() - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(dice(&a, &a, 1).unwrap(), 1.0);
        let z = LabelMap::filled(4, 1, 0);
        assert_eq!(dice(&z, &z, 2).unwrap(), 1.0);
        let c = LabelMap::new(4, 1, vec![0, 0, 1, 1]).unwrap();
        assert_eq!(dice(&a, &c, 1).unwrap(), 0.0);
    }

    #[test]
    fn dice_rejects_unknown_and_mismatch() {
        let a = LabelMap::new(2, 1, vec![1, UNKNOWN]).unwrap();
        let b = LabelMap::filled(2, 1, 1);
        assert!(matches!(dice(&a, &b, 1), Err(Error::Input(_))));
        assert!(dice(&b, &LabelMap::filled(1, 2, 1), 1).is_err());
    }

    proptest! {
        #[test]
        fn dice_bounded_and_symmetric(
            a in proptest::collection::vec(0u8..3, 16),
            b in proptest::collection::vec(0u8..3, 16),
            l in 0u8..3,
        ) {
            let a = LabelMap::new(4, 4, a).unwrap();
            let b = LabelMap::new(4, 4, b).unwrap();
            let d = dice(&a, &b, l).unwrap();
            prop_assert!((0.0..=1.0).contains(&d));
            prop_assert_eq!(d, dice(&b, &a, l).unwrap());
            prop_assert_eq!(dice(&a, &a, l).unwrap(), 1.0);
        }
    }
}
