use super::DeformError;

/// Interior segment boundaries `t_1 < … < t_{l−1}` in `(0, 1)`; `t_0 = 0`
/// and `t_l = 1` are implicit.
#[derive(Clone, Debug, PartialEq)]
pub struct CanonicalTimes {
    boundaries: Vec<f64>,
}

impl CanonicalTimes {
    /// `l` equal segments.
    pub fn uniform(segments: usize) -> Result<Self, DeformError> {
        if segments == 0 {
            return Err(DeformError::InvalidTimes("need at least one segment"));
        }
        Ok(Self {
            boundaries: (1..segments).map(|j| j as f64 / segments as f64).collect(),
        })
    }

    pub fn from_boundaries(boundaries: Vec<f64>) -> Result<Self, DeformError> {
        let t = Self { boundaries };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<(), DeformError> {
        if self.boundaries.iter().any(|&t| !(t > 0.0 && t < 1.0)) {
            return Err(DeformError::InvalidTimes("boundaries must lie in (0, 1)"));
        }
        if self.boundaries.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(DeformError::InvalidTimes("boundaries must be strictly increasing"));
        }
        Ok(())
    }

    pub fn boundaries(&self) -> &[f64] {
        &self.boundaries
    }

    pub(crate) fn boundaries_mut(&mut self) -> &mut Vec<f64> {
        &mut self.boundaries
    }

    pub fn segments(&self) -> usize {
        self.boundaries.len() + 1
    }

    /// `(t_j, t_{j+1})`.
    pub fn interval(&self, j: usize) -> (f64, f64) {
        let lo = if j == 0 { 0.0 } else { self.boundaries[j - 1] };
        let hi = self.boundaries.get(j).copied().unwrap_or(1.0);
        (lo, hi)
    }

    pub fn width(&self, j: usize) -> f64 {
        let (lo, hi) = self.interval(j);
        hi - lo
    }

    /// Segment `j` with `t ∈ [t_j, t_{j+1})`; `t = 1` belongs to the last one.
    pub fn segment_of(&self, t: f64) -> usize {
        self.boundaries.partition_point(|&b| b <= t)
    }

    /// Segment index and its canonical time, the interval midpoint.
    pub fn canonical_time_of(&self, t: f64) -> (usize, f64) {
        let j = self.segment_of(t);
        let (lo, hi) = self.interval(j);
        (j, 0.5 * (lo + hi))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn interval_membership() {
        let u = CanonicalTimes::uniform(4).unwrap();
        assert_eq!(u.boundaries(), &[0.25, 0.5, 0.75]);
        assert_eq!(u.segment_of(0.0), 0);
        assert_eq!(u.canonical_time_of(0.6), (2, 0.625));
        assert_eq!(u.segment_of(1.0), 3);
        assert_eq!(u.segment_of(0.5), 2);
    }

    #[test]
    fn rejects_bad_boundaries() {
        assert!(CanonicalTimes::from_boundaries(vec![0.5, 0.5]).is_err());
        assert!(CanonicalTimes::from_boundaries(vec![0.0, 0.5]).is_err());
        assert!(CanonicalTimes::from_boundaries(vec![0.2, 1.0]).is_err());
        assert_eq!(CanonicalTimes::uniform(1).unwrap().segments(), 1);
    }
}
