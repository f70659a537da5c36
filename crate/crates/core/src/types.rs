use serde::{Deserialize, Serialize};

/// A labeled temporal segment. Ground truth carries score 1.
///
/// Units depend on context: grid steps inside the model pipeline, seconds in
/// annotations and prediction files.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ActionInstance {
    pub start: f64,
    pub end: f64,
    pub label: usize,
    pub score: f64,
}

/// A decoded prediction.
pub type Detection = ActionInstance;

impl ActionInstance {
    pub fn new(start: f64, end: f64, label: usize) -> Self {
        ActionInstance {
            start,
            end,
            label,
            score: 1.0,
        }
    }

    pub fn with_score(start: f64, end: f64, label: usize, score: f64) -> Self {
        ActionInstance {
            start,
            end,
            label,
            score,
        }
    }

    pub fn duration(&self) -> f64 {
        self.end - self.start
    }

    pub fn center(&self) -> f64 {
        0.5 * (self.start + self.end)
    }

    pub fn tiou(&self, other: &ActionInstance) -> f64 {
        tiou((self.start, self.end), (other.start, other.end))
    }
}

/// Temporal intersection over union of two `[start, end]` segments.
pub fn tiou(a: (f64, f64), b: (f64, f64)) -> f64 {
    let inter = (a.1.min(b.1) - a.0.max(b.0)).max(0.0);
    let union = (a.1 - a.0) + (b.1 - b.0) - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Half-open interval `[min, max)` of the largest boundary distance a pyramid
/// level regresses, in input grid units. Serialized as `[min, max]` with
/// `null` for an unbounded `max`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegressionRange {
    pub min: f64,
    pub max: f64,
}

impl RegressionRange {
    pub fn new(min: f64, max: f64) -> Self {
        RegressionRange { min, max }
    }

    pub fn contains(&self, d: f64) -> bool {
        d >= self.min && d < self.max
    }
}

impl Serialize for RegressionRange {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        let max = self.max.is_finite().then_some(self.max);
        (self.min, max).serialize(s)
    }
}

impl<'de> Deserialize<'de> for RegressionRange {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let (min, max) = <(f64, Option<f64>)>::deserialize(d)?;
        Ok(RegressionRange {
            min,
            max: max.unwrap_or(f64::INFINITY),
        })
    }
}

/// Contiguous ranges doubling from `init`: `[0, init), [init, 2 init), ..., [.., inf)`.
pub fn default_regression_ranges(levels: usize, init: f64) -> Vec<RegressionRange> {
    let mut ranges = Vec::with_capacity(levels);
    let mut lo = 0.0;
    let mut hi = init;
    for l in 0..levels {
        if l + 1 == levels {
            ranges.push(RegressionRange::new(lo, f64::INFINITY));
        } else {
            ranges.push(RegressionRange::new(lo, hi));
            lo = hi;
            hi *= 2.0;
        }
    }
    ranges
}
