use rand::Rng;

use super::sample::{CoRegisteredSet, LabelMap, SitsSample};
use crate::error::Result;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Flip {
    pub horizontal: bool,
    pub vertical: bool,
}

impl Flip {
    /// Each axis independently with probability 1/2; draws horizontal first.
    pub fn sample<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let horizontal = rng.random_bool(0.5);
        let vertical = rng.random_bool(0.5);
        Self { horizontal, vertical }
    }

    fn source(&self, y: usize, x: usize, h: usize, w: usize) -> (usize, usize) {
        let y = if self.vertical { h - 1 - y } else { y };
        let x = if self.horizontal { w - 1 - x } else { x };
        (y, x)
    }

    /// Flips each modality on its own grid; co-registered grids cover the
    /// same extent, so the flips agree geographically.
    pub fn apply_sample<S: Scalar>(&self, s: &SitsSample<S>) -> Result<SitsSample<S>> {
        if !self.horizontal && !self.vertical {
            return Ok(s.clone());
        }
        let (t, h, w, c) = s.dims();
        let src = s.x().data();
        let mut out = Vec::with_capacity(src.len());
        for ti in 0..t {
            for y in 0..h {
                for x in 0..w {
                    let (sy, sx) = self.source(y, x, h, w);
                    let o = ((ti * h + sy) * w + sx) * c;
                    out.extend_from_slice(&src[o..o + c]);
                }
            }
        }
        SitsSample::new(s.modality.clone(), Tensor::new(vec![t, h, w, c], out)?, s.dates().to_vec())
    }

    pub fn apply_labels(&self, l: &LabelMap) -> Result<LabelMap> {
        let (h, w) = (l.height(), l.width());
        let mut out = Vec::with_capacity(h * w);
        for y in 0..h {
            for x in 0..w {
                let (sy, sx) = self.source(y, x, h, w);
                out.push(l.at(sy, sx));
            }
        }
        LabelMap::new(h, w, out)
    }

    pub fn apply<S: Scalar>(&self, set: &CoRegisteredSet<S>) -> Result<CoRegisteredSet<S>> {
        let samples = set.samples.iter().map(|s| self.apply_sample(s)).collect::<Result<_>>()?;
        CoRegisteredSet::new(samples, self.apply_labels(&set.labels)?, set.num_classes)
    }
}

/// Random horizontal and vertical flips applied identically to every
/// modality and the label map.
pub fn random_flip<S: Scalar, R: Rng + ?Sized>(set: &CoRegisteredSet<S>, rng: &mut R) -> Result<CoRegisteredSet<S>> {
    Flip::sample(rng).apply(set)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Pixel values encode their own coordinates: `y * 100 + x`.
    fn coordinate_set() -> CoRegisteredSet<f64> {
        let fine = SitsSample::new("pf", Tensor::from_fn(&[1, 6, 6, 1], |i| ((i / 6) * 100 + i % 6) as f64), vec![3]).unwrap();
        let coarse = SitsSample::new("s2", Tensor::from_fn(&[2, 2, 2, 1], |i| (((i % 4) / 2) * 100 + i % 2) as f64), vec![3, 9]).unwrap();
        let labels = LabelMap::new(6, 6, (0..36).map(|i| ((i / 6) * 10 + i % 6) as u16).collect()).unwrap();
        CoRegisteredSet::new(vec![fine, coarse], labels, 60).unwrap()
    }

    #[test]
    fn flips_are_involutions() {
        let s = coordinate_set();
        for flip in [
            Flip { horizontal: true, vertical: false },
            Flip { horizontal: false, vertical: true },
            Flip { horizontal: true, vertical: true },
        ] {
            let once = flip.apply(&s).unwrap();
            assert_ne!(once, s);
            assert_eq!(flip.apply(&once).unwrap(), s);
        }
    }

    #[test]
    fn labels_follow_data() {
        let s = coordinate_set();
        let f = Flip { horizontal: true, vertical: true }.apply(&s).unwrap();
        for y in 0..6 {
            for x in 0..6 {
                let v = f.samples[0].x().at(&[0, y, x, 0]) as usize;
                let (sy, sx) = (v / 100, v % 100);
                assert_eq!(f.labels.at(y, x) as usize, sy * 10 + sx);
                assert_eq!((sy, sx), (5 - y, 5 - x));
            }
        }
        assert_eq!(f.samples[1].x().at(&[1, 0, 0, 0]), 101.0);
    }

    #[test]
    fn flip_preserves_value_multiset() {
        let s = coordinate_set();
        let f = Flip { horizontal: true, vertical: false }.apply(&s).unwrap();
        for (a, b) in s.samples.iter().zip(&f.samples) {
            let mut x = a.x().data().to_vec();
            let mut y = b.x().data().to_vec();
            x.sort_by(f64::total_cmp);
            y.sort_by(f64::total_cmp);
            assert_eq!(x, y);
        }
        let mut la = s.labels.classes().to_vec();
        let mut lb = f.labels.classes().to_vec();
        la.sort();
        lb.sort();
        assert_eq!(la, lb);
    }

    #[test]
    fn seeded_stream_is_reproducible() {
        let draw = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..32).map(|_| Flip::sample(&mut rng)).collect::<Vec<_>>()
        };
        assert_eq!(draw(4), draw(4));
        let flips = draw(4);
        assert!(flips.iter().any(|f| f.horizontal) && flips.iter().any(|f| !f.horizontal));
    }
}
