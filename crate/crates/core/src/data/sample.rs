use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const MAX_DAY_OF_YEAR: u16 = 366;

/// One modality's image time series `X ∈ R^{T×H×W×C}` with acquisition
/// days of year.
#[derive(Clone, Debug, PartialEq)]
pub struct SitsSample<S> {
    pub modality: String,
    x: Tensor<S>,
    dates: Vec<u16>,
}

impl<S: Scalar> SitsSample<S> {
    pub fn new(modality: impl Into<String>, x: Tensor<S>, dates: Vec<u16>) -> Result<Self> {
        let modality = modality.into();
        if x.rank() != 4 {
            return Err(Error::dim(
                "sits",
                format!("{modality}: expected [T, H, W, C], got {:?}", x.shape()),
            ));
        }
        if dates.len() != x.shape()[0] {
            return Err(Error::Data(format!(
                "{modality}: {} dates for {} time steps",
                dates.len(),
                x.shape()[0]
            )));
        }
        validate_dates(&modality, &dates)?;
        if !x.is_finite() {
            return Err(Error::Data(format!("{modality}: non-finite values")));
        }
        Ok(Self { modality, x, dates })
    }

    pub fn x(&self) -> &Tensor<S> {
        &self.x
    }

    pub fn dates(&self) -> &[u16] {
        &self.dates
    }

    /// `(T, H, W, C)`
    pub fn dims(&self) -> (usize, usize, usize, usize) {
        let s = self.x.shape();
        (s[0], s[1], s[2], s[3])
    }

    pub fn into_parts(self) -> (String, Tensor<S>, Vec<u16>) {
        (self.modality, self.x, self.dates)
    }

    pub fn cast<T: Scalar>(&self) -> SitsSample<T> {
        SitsSample {
            modality: self.modality.clone(),
            x: self.x.cast(),
            dates: self.dates.clone(),
        }
    }
}

pub fn validate_dates(modality: &str, dates: &[u16]) -> Result<()> {
    for (i, &d) in dates.iter().enumerate() {
        if d == 0 || d > MAX_DAY_OF_YEAR {
            return Err(Error::Data(format!(
                "{modality}: day of year {d} outside [1, {MAX_DAY_OF_YEAR}]"
            )));
        }
        if i > 0 && dates[i - 1] >= d {
            return Err(Error::Data(format!(
                "{modality}: dates not strictly increasing at index {i} ({} then {d})",
                dates[i - 1]
            )));
        }
    }
    Ok(())
}

/// Per-pixel class indices at the finest spatial resolution.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    height: usize,
    width: usize,
    classes: Vec<u16>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, classes: Vec<u16>) -> Result<Self> {
        if classes.len() != height * width {
            return Err(Error::dim(
                "label_map",
                format!("{}×{} map with {} entries", height, width, classes.len()),
            ));
        }
        Ok(Self {
            height,
            width,
            classes,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn classes(&self) -> &[u16] {
        &self.classes
    }

    pub fn classes_mut(&mut self) -> &mut [u16] {
        &mut self.classes
    }

    pub fn at(&self, y: usize, x: usize) -> u16 {
        self.classes[y * self.width + x]
    }

    pub fn max_class(&self) -> Option<u16> {
        self.classes.iter().copied().max()
    }

    /// One-hot expansion `H × W × K`.
    pub fn one_hot<S: Scalar>(&self, num_classes: usize) -> Tensor<S> {
        let mut t = Tensor::zeros(&[self.height, self.width, num_classes]);
        for (p, &c) in self.classes.iter().enumerate() {
            t.data_mut()[p * num_classes + c as usize] = S::one();
        }
        t
    }
}

/// `M` co-registered modalities over one area plus the label map.
#[derive(Clone, Debug, PartialEq)]
pub struct CoRegisteredSet<S> {
    pub samples: Vec<SitsSample<S>>,
    pub labels: LabelMap,
    pub num_classes: usize,
}

impl<S: Scalar> CoRegisteredSet<S> {
    pub fn new(samples: Vec<SitsSample<S>>, labels: LabelMap, num_classes: usize) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Data("co-registered set without modalities".into()));
        }
        if let Some(c) = labels.max_class() {
            if c as usize >= num_classes {
                return Err(Error::Data(format!(
                    "label class {c} out of range for {num_classes} classes"
                )));
            }
        }
        let h = samples.iter().map(|s| s.dims().1).max().unwrap_or(0);
        let w = samples.iter().map(|s| s.dims().2).max().unwrap_or(0);
        if (labels.height(), labels.width()) != (h, w) {
            return Err(Error::Data(format!(
                "label map {}×{} does not match finest modality grid {h}×{w}",
                labels.height(),
                labels.width()
            )));
        }
        Ok(Self {
            samples,
            labels,
            num_classes,
        })
    }

    pub fn modality(&self, id: &str) -> Option<&SitsSample<S>> {
        self.samples.iter().find(|s| s.modality == id)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dates_must_increase_within_year() {
        let x = Tensor::<f64>::zeros(&[3, 1, 1, 1]);
        assert!(SitsSample::new("a", x.clone(), vec![1, 5, 366]).is_ok());
        assert!(SitsSample::new("a", x.clone(), vec![0, 5, 9]).is_err());
        assert!(SitsSample::new("a", x.clone(), vec![1, 5, 367]).is_err());
        assert!(SitsSample::new("a", x.clone(), vec![1, 5, 5]).is_err());
        assert!(SitsSample::new("a", x, vec![1, 5]).is_err());
    }

    #[test]
    fn label_extent_is_finest_grid() {
        let coarse = SitsSample::new("s2", Tensor::<f64>::zeros(&[1, 2, 2, 1]), vec![10]).unwrap();
        let fine = SitsSample::new("pf", Tensor::<f64>::zeros(&[1, 6, 6, 1]), vec![10]).unwrap();
        let ok = LabelMap::new(6, 6, vec![0; 36]).unwrap();
        assert!(CoRegisteredSet::new(vec![coarse.clone(), fine], ok, 2).is_ok());
        let bad = LabelMap::new(6, 6, vec![0; 36]).unwrap();
        assert!(CoRegisteredSet::new(vec![coarse], bad, 2).is_err());
    }

    #[test]
    fn one_hot_has_single_entry_per_pixel() {
        let l = LabelMap::new(1, 3, vec![0, 2, 1]).unwrap();
        let t: Tensor<f64> = l.one_hot(3);
        assert_eq!(t.data(), &[1., 0., 0., 0., 0., 1., 0., 1., 0.]);
    }
}
