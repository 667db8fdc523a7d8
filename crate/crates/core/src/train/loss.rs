use crate::data::LabelMap;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Var;

/// Probabilities below this are clamped before the logarithm.
pub const LOG_FLOOR: f64 = 1e-12;

/// Mean over non-ignored pixels of `-ln p[pixel, true class]`.
pub fn cross_entropy_loss<'t, S: Scalar>(probs: Var<'t, S>, labels: &LabelMap, ignore: &[u16]) -> Result<Var<'t, S>> {
    let s = probs.shape();
    if s.len() != 3 || s[0] != labels.height() || s[1] != labels.width() {
        return Err(Error::dim(
            "cross_entropy_loss",
            format!("probabilities {:?} for a {}×{} label map", s, labels.height(), labels.width()),
        ));
    }
    let k = s[2];
    let mut flat = Vec::with_capacity(labels.classes().len());
    for (p, &c) in labels.classes().iter().enumerate() {
        if ignore.contains(&c) {
            continue;
        }
        if c as usize >= k {
            return Err(Error::Data(format!("label {c} outside {k} classes")));
        }
        flat.push(p * k + c as usize);
    }
    if flat.is_empty() {
        return Err(Error::Contract("every pixel is ignored".into()));
    }
    let ll = probs.pick(&flat)?.ln_clamped(S::of(LOG_FLOOR)).mean()?;
    Ok(ll.scale(-S::one()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Tape, Tensor};

    #[test]
    fn uniform_gives_log_k() {
        let tape = Tape::new();
        let p = tape.constant(Tensor::full(&[2, 3, 4], 0.25f64));
        let l = LabelMap::new(2, 3, vec![0, 1, 2, 3, 0, 1]).unwrap();
        let v = cross_entropy_loss(p, &l, &[]).unwrap().value().data()[0];
        assert!((v - 4f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn hand_evaluated_pair() {
        let tape = Tape::new();
        let p = tape.constant(Tensor::new(vec![1, 2, 2], vec![0.5, 0.5, 0.75, 0.25]).unwrap());
        let l = LabelMap::new(1, 2, vec![0, 1]).unwrap();
        let v = cross_entropy_loss(p, &l, &[]).unwrap().value().data()[0];
        assert!((v - (2f64.ln() + 4f64.ln()) / 2.0).abs() < 1e-15);
    }

    #[test]
    fn one_hot_is_near_zero_and_zero_is_clamped() {
        let tape = Tape::new();
        let p = tape.constant(Tensor::new(vec![1, 2, 2], vec![1.0, 0.0, 1.0, 0.0]).unwrap());
        let right = LabelMap::new(1, 2, vec![0, 0]).unwrap();
        assert_eq!(cross_entropy_loss(p, &right, &[]).unwrap().value().data()[0], 0.0);
        let wrong = LabelMap::new(1, 2, vec![1, 1]).unwrap();
        let v = cross_entropy_loss(p, &wrong, &[]).unwrap().value().data()[0];
        assert!((v + LOG_FLOOR.ln()).abs() < 1e-12);
    }

    #[test]
    fn ignore_excludes_pixels() {
        let tape = Tape::new();
        let p = tape.constant(Tensor::new(vec![1, 2, 2], vec![0.5, 0.5, 0.75, 0.25]).unwrap());
        let l = LabelMap::new(1, 2, vec![0, 1]).unwrap();
        let v = cross_entropy_loss(p, &l, &[0]).unwrap().value().data()[0];
        assert!((v - 4f64.ln()).abs() < 1e-15);
        let all = LabelMap::new(1, 2, vec![0, 0]).unwrap();
        assert!(matches!(cross_entropy_loss(p, &all, &[0]), Err(Error::Contract(_))));
    }
}
