//! Axis-aligned bounding boxes shared by the mesh and clustering layers.

/// Axis-aligned box in up to three dimensions.  Unused trailing coordinates
/// stay at zero so 2D and 3D point sets share one representation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundingBox {
    pub lo: [f64; 3],
    pub hi: [f64; 3],
    pub dim: usize,
}

impl BoundingBox {
    /// Empty box ready to absorb points via [`BoundingBox::absorb`].
    pub fn empty(dim: usize) -> Self {
        BoundingBox {
            lo: [f64::INFINITY; 3],
            hi: [f64::NEG_INFINITY; 3],
            dim,
        }
    }

    pub fn from_points<'a>(dim: usize, points: impl IntoIterator<Item = &'a [f64; 3]>) -> Self {
        let mut bb = Self::empty(dim);
        for p in points {
            bb.absorb(p);
        }
        bb
    }

    pub fn absorb(&mut self, p: &[f64; 3]) {
        for i in 0..self.dim {
            self.lo[i] = self.lo[i].min(p[i]);
            self.hi[i] = self.hi[i].max(p[i]);
        }
    }

    pub fn union(&self, other: &BoundingBox) -> BoundingBox {
        let mut out = *self;
        for i in 0..self.dim {
            out.lo[i] = out.lo[i].min(other.lo[i]);
            out.hi[i] = out.hi[i].max(other.hi[i]);
        }
        out
    }

    pub fn is_empty(&self) -> bool {
        (0..self.dim).any(|i| self.lo[i] > self.hi[i])
    }

    /// Euclidean length of the box diagonal.
    pub fn diameter(&self) -> f64 {
        if self.is_empty() {
            return 0.0;
        }
        (0..self.dim)
            .map(|i| (self.hi[i] - self.lo[i]).powi(2))
            .sum::<f64>()
            .sqrt()
    }

    /// Euclidean distance between two boxes; zero when they touch or overlap.
    pub fn distance(&self, other: &BoundingBox) -> f64 {
        (0..self.dim)
            .map(|i| {
                let gap = (self.lo[i] - other.hi[i]).max(other.lo[i] - self.hi[i]);
                gap.max(0.0).powi(2)
            })
            .sum::<f64>()
            .sqrt()
    }

    pub fn edge_length(&self, axis: usize) -> f64 {
        self.hi[axis] - self.lo[axis]
    }

    /// Axis of the longest edge; ties break towards the lowest index.
    pub fn longest_axis(&self) -> usize {
        let mut best = 0;
        for i in 1..self.dim {
            if self.edge_length(i) > self.edge_length(best) {
                best = i;
            }
        }
        best
    }

    pub fn midpoint(&self, axis: usize) -> f64 {
        0.5 * (self.lo[axis] + self.hi[axis])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn boxed(lo: [f64; 3], hi: [f64; 3], dim: usize) -> BoundingBox {
        BoundingBox { lo, hi, dim }
    }

    #[test]
    fn distance_of_separated_boxes() {
        let a = boxed([0.0, 0.0, 0.0], [1.0, 0.0, 0.0], 1);
        let b = boxed([3.0, 0.0, 0.0], [4.0, 0.0, 0.0], 1);
        assert_eq!(a.distance(&b), 2.0);
        assert_eq!(a.diameter(), 1.0);
    }

    #[test]
    fn touching_boxes_have_zero_distance() {
        let a = boxed([0.0, 0.0, 0.0], [1.0, 1.0, 0.0], 2);
        let b = boxed([1.0, 0.0, 0.0], [2.0, 1.0, 0.0], 2);
        assert_eq!(a.distance(&b), 0.0);
    }

    #[test]
    fn longest_axis_prefers_lowest_index_on_ties() {
        let b = boxed([0.0, 0.0, 0.0], [1.0, 1.0, 0.0], 2);
        assert_eq!(b.longest_axis(), 0);
    }
}
