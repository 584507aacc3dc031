//! Pen-stroke sequences in the five-element `(x, y, q1, q2, q3)` form and
//! the deterministic geometry applied to them.
//!
//! The pen state stored on point `t` describes the segment *leaving* that
//! point: `Down` connects it to point `t + 1`, `Lift` ends the stroke after
//! it and `End` terminates the drawing.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One-hot pen state.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PenState {
    /// `q1`: pen touching paper, connected to the next point.
    Down,
    /// `q2`: pen lifted after this point.
    Lift,
    /// `q3`: end of drawing.
    End,
}

impl PenState {
    pub const ALL: [PenState; 3] = [PenState::Down, PenState::Lift, PenState::End];

    pub fn index(self) -> usize {
        match self {
            PenState::Down => 0,
            PenState::Lift => 1,
            PenState::End => 2,
        }
    }

    pub fn from_index(index: usize) -> Option<Self> {
        Self::ALL.get(index).copied()
    }

    pub fn one_hot(self) -> [f64; 3] {
        let mut v = [0.0; 3];
        v[self.index()] = 1.0;
        v
    }

    /// Parses an exact one-hot triple.
    pub fn from_one_hot(q: [f64; 3]) -> Option<Self> {
        let ones = q.iter().filter(|&&v| v == 1.0).count();
        let zeros = q.iter().filter(|&&v| v == 0.0).count();
        if ones != 1 || zeros != 2 {
            return None;
        }
        q.iter().position(|&v| v == 1.0).and_then(Self::from_index)
    }

    /// Index of the largest logit; ties go to the lowest index.
    pub fn argmax(logits: &[f64]) -> Self {
        let mut best = 0;
        for (i, &v) in logits.iter().enumerate().take(3) {
            if v > logits[best] {
                best = i;
            }
        }
        Self::ALL[best]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StrokePoint {
    pub x: f64,
    pub y: f64,
    pub state: PenState,
}

impl StrokePoint {
    pub fn new(x: f64, y: f64, state: PenState) -> Self {
        Self { x, y, state }
    }

    pub fn to_row(&self) -> [f64; 5] {
        let q = self.state.one_hot();
        [self.x, self.y, q[0], q[1], q[2]]
    }
}

/// A validated drawing: non-empty, terminated by exactly one `End` point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<StrokePoint>", into = "Vec<StrokePoint>")]
pub struct StrokeSequence {
    points: Vec<StrokePoint>,
}

impl TryFrom<Vec<StrokePoint>> for StrokeSequence {
    type Error = Error;

    fn try_from(points: Vec<StrokePoint>) -> Result<Self> {
        Self::new(points)
    }
}

impl From<StrokeSequence> for Vec<StrokePoint> {
    fn from(seq: StrokeSequence) -> Self {
        seq.points
    }
}

impl StrokeSequence {
    pub fn new(points: Vec<StrokePoint>) -> Result<Self> {
        let Some(last) = points.last() else {
            return Err(Error::InvalidSequence("sequence has no points".into()));
        };
        if last.state != PenState::End {
            return Err(Error::InvalidSequence(
                "last point must carry the end-of-drawing state".into(),
            ));
        }
        if let Some(i) = points[..points.len() - 1]
            .iter()
            .position(|p| p.state == PenState::End)
        {
            return Err(Error::InvalidSequence(format!(
                "end-of-drawing state at point {i} before the last point"
            )));
        }
        if let Some(i) = points
            .iter()
            .position(|p| !p.x.is_finite() || !p.y.is_finite())
        {
            return Err(Error::InvalidSequence(format!(
                "non-finite coordinate at point {i}"
            )));
        }
        Ok(Self { points })
    }

    /// Builds a sequence from raw strokes.
    pub fn from_polylines(strokes: &[Vec<(f64, f64)>]) -> Result<Self> {
        if strokes.is_empty() {
            return Err(Error::EmptyInput("no strokes".into()));
        }
        if let Some(i) = strokes.iter().position(|s| s.is_empty()) {
            return Err(Error::EmptyInput(format!("stroke {i} has no points")));
        }
        let mut points = Vec::with_capacity(strokes.iter().map(Vec::len).sum());
        let n_strokes = strokes.len();
        for (si, stroke) in strokes.iter().enumerate() {
            for (pi, &(x, y)) in stroke.iter().enumerate() {
                if !x.is_finite() || !y.is_finite() {
                    return Err(Error::NonFiniteCoordinate {
                        stroke: si,
                        point: pi,
                    });
                }
                let state = if pi + 1 < stroke.len() {
                    PenState::Down
                } else if si + 1 < n_strokes {
                    PenState::Lift
                } else {
                    PenState::End
                };
                points.push(StrokePoint::new(x, y, state));
            }
        }
        Ok(Self { points })
    }

    /// Parses `(x, y, q1, q2, q3)` rows; pen states must be exactly one-hot.
    pub fn from_rows(rows: &[[f64; 5]]) -> Result<Self> {
        let points = rows
            .iter()
            .enumerate()
            .map(|(i, r)| {
                PenState::from_one_hot([r[2], r[3], r[4]])
                    .map(|s| StrokePoint::new(r[0], r[1], s))
                    .ok_or_else(|| {
                        Error::InvalidSequence(format!("pen state at row {i} is not one-hot"))
                    })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(points)
    }

    pub fn points(&self) -> &[StrokePoint] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn to_rows(&self) -> Vec<[f64; 5]> {
        self.points.iter().map(StrokePoint::to_row).collect()
    }

    /// Splits the drawing into its pen-down strokes as index ranges.
    pub fn stroke_ranges(&self) -> Vec<std::ops::Range<usize>> {
        let mut out = Vec::new();
        let mut start = 0;
        for (i, p) in self.points.iter().enumerate() {
            if p.state != PenState::Down {
                out.push(start..i + 1);
                start = i + 1;
            }
        }
        out
    }

    /// Scales pixel coordinates on an `height x width` canvas into `[0, 1]`.
    ///
    /// Pixel extremes map exactly to 0 and 1; values outside the canvas are
    /// clamped.
    pub fn normalize(&self, height: usize, width: usize) -> Result<Self> {
        if height < 2 || width < 2 {
            return Err(Error::DegenerateCanvas { height, width });
        }
        let sx = (width - 1) as f64;
        let sy = (height - 1) as f64;
        let points = self
            .points
            .iter()
            .map(|p| StrokePoint::new((p.x / sx).clamp(0.0, 1.0), (p.y / sy).clamp(0.0, 1.0), p.state))
            .collect();
        Ok(Self { points })
    }

    /// Inverse of [`normalize`](Self::normalize) without the clamp.
    pub fn denormalize(&self, height: usize, width: usize) -> Result<Self> {
        if height < 2 || width < 2 {
            return Err(Error::DegenerateCanvas { height, width });
        }
        let sx = (width - 1) as f64;
        let sy = (height - 1) as f64;
        Ok(self.map_coords(|x, y| (x * sx, y * sy)))
    }

    pub fn map_coords(&self, f: impl Fn(f64, f64) -> (f64, f64)) -> Self {
        let points = self
            .points
            .iter()
            .map(|p| {
                let (x, y) = f(p.x, p.y);
                StrokePoint::new(x, y, p.state)
            })
            .collect();
        Self { points }
    }

    pub fn to_offsets(&self) -> OffsetSequence {
        let first = self.points[0];
        let mut prev = (first.x, first.y);
        let deltas = self
            .points
            .iter()
            .map(|p| {
                let d = (p.x - prev.0, p.y - prev.1, p.state);
                prev = (p.x, p.y);
                d
            })
            .collect();
        OffsetSequence {
            origin: (first.x, first.y),
            deltas,
        }
    }

    /// Ramer-Douglas-Peucker simplification, applied to every pen-down
    /// stroke on its own so that pen lifts are never merged away.
    pub fn rdp_simplify(&self, epsilon: f64) -> Result<Self> {
        if !(epsilon >= 0.0) {
            return Err(Error::NegativeEpsilon(epsilon));
        }
        let mut points = Vec::with_capacity(self.points.len());
        for range in self.stroke_ranges() {
            let stroke = &self.points[range];
            let xy: Vec<(f64, f64)> = stroke.iter().map(|p| (p.x, p.y)).collect();
            for i in rdp_indices(&xy, epsilon) {
                points.push(stroke[i]);
            }
        }
        Ok(Self { points })
    }

    /// Fixed-length view for batching. Padding repeats the terminal point
    /// with mask 0; truncation keeps the first `t_max` points and turns the
    /// last kept one into the end-of-drawing point.
    pub fn pad_or_truncate(&self, t_max: usize) -> PaddedSequence {
        assert!(t_max >= 1, "t_max must be positive");
        let mut points: Vec<StrokePoint> = self.points.iter().take(t_max).copied().collect();
        let real = points.len();
        if let Some(last) = points.last_mut() {
            last.state = PenState::End;
        }
        let pad = *points.last().expect("sequence is non-empty");
        points.resize(t_max, pad);
        let mask = (0..t_max).map(|i| i < real).collect();
        PaddedSequence { points, mask }
    }
}

/// Output of [`StrokeSequence::pad_or_truncate`]. Padding rows repeat the
/// end-of-drawing point, so this does not satisfy the single-`End`
/// invariant of [`StrokeSequence`].
#[derive(Debug, Clone, PartialEq)]
pub struct PaddedSequence {
    pub points: Vec<StrokePoint>,
    pub mask: Vec<bool>,
}

impl PaddedSequence {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn valid_len(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub fn rows(&self) -> Vec<[f64; 5]> {
        self.points.iter().map(StrokePoint::to_row).collect()
    }

    pub fn mask_f64(&self) -> Vec<f64> {
        self.mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect()
    }

    /// Rows re-expressed as displacements from the previous point, with the
    /// first row measured from the origin `(0, 0)`.
    pub fn offset_rows(&self) -> Vec<[f64; 5]> {
        let mut prev = (0.0, 0.0);
        self.points
            .iter()
            .map(|p| {
                let mut r = p.to_row();
                r[0] = p.x - prev.0;
                r[1] = p.y - prev.1;
                prev = (p.x, p.y);
                r
            })
            .collect()
    }
}

/// Origin plus per-point displacements; the first delta is always zero.
#[derive(Debug, Clone, PartialEq)]
pub struct OffsetSequence {
    pub origin: (f64, f64),
    pub deltas: Vec<(f64, f64, PenState)>,
}

impl OffsetSequence {
    pub fn to_absolute(&self) -> Result<StrokeSequence> {
        let (mut x, mut y) = self.origin;
        let mut points = Vec::with_capacity(self.deltas.len());
        for (i, &(dx, dy, state)) in self.deltas.iter().enumerate() {
            if i > 0 {
                x += dx;
                y += dy;
            }
            points.push(StrokePoint::new(x, y, state));
        }
        StrokeSequence::new(points)
    }
}

/// Perpendicular distance from `p` to the infinite line through `a` and
/// `b`; falls back to point distance when `a == b`.
pub fn perpendicular_distance(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len = dx.hypot(dy);
    if len == 0.0 {
        return (p.0 - a.0).hypot(p.1 - a.1);
    }
    ((p.0 - a.0) * dy - (p.1 - a.1) * dx).abs() / len
}

/// Indices retained by RDP on a single polyline, in ascending order.
/// A point splits its interval only if its distance strictly exceeds
/// `epsilon`; among equal maxima the earliest index wins.
pub fn rdp_indices(points: &[(f64, f64)], epsilon: f64) -> Vec<usize> {
    let n = points.len();
    if n <= 2 {
        return (0..n).collect();
    }
    let mut keep = vec![false; n];
    keep[0] = true;
    keep[n - 1] = true;
    let mut stack = vec![(0, n - 1)];
    while let Some((a, b)) = stack.pop() {
        if b <= a + 1 {
            continue;
        }
        let mut best = (0.0, a);
        for i in a + 1..b {
            let d = perpendicular_distance(points[i], points[a], points[b]);
            if d > best.0 {
                best = (d, i);
            }
        }
        if best.0 > epsilon {
            keep[best.1] = true;
            stack.push((a, best.1));
            stack.push((best.1, b));
        }
    }
    keep.iter()
        .enumerate()
        .filter_map(|(i, &k)| k.then_some(i))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn states(seq: &StrokeSequence) -> Vec<PenState> {
        seq.points().iter().map(|p| p.state).collect()
    }

    #[test]
    fn single_stroke_states() {
        let s = StrokeSequence::from_polylines(&[vec![(0.0, 0.0), (10.0, 0.0)]]).unwrap();
        assert_eq!(
            s.points(),
            &[
                StrokePoint::new(0.0, 0.0, PenState::Down),
                StrokePoint::new(10.0, 0.0, PenState::End)
            ]
        );
    }

    #[test]
    fn two_stroke_states() {
        let s = StrokeSequence::from_polylines(&[
            vec![(0.0, 0.0), (1.0, 1.0)],
            vec![(2.0, 2.0), (3.0, 3.0)],
        ])
        .unwrap();
        use PenState::*;
        assert_eq!(states(&s), vec![Down, Lift, Down, End]);
    }

    #[test]
    fn empty_inputs_rejected() {
        assert!(matches!(
            StrokeSequence::from_polylines(&[vec![]]),
            Err(Error::EmptyInput(_))
        ));
        assert!(matches!(
            StrokeSequence::from_polylines(&[]),
            Err(Error::EmptyInput(_))
        ));
        assert!(matches!(
            StrokeSequence::from_polylines(&[vec![(f64::NAN, 0.0)]]),
            Err(Error::NonFiniteCoordinate { stroke: 0, point: 0 })
        ));
    }

    #[test]
    fn invariant_checked_on_construction() {
        let p = |s| StrokePoint::new(0.0, 0.0, s);
        assert!(StrokeSequence::new(vec![]).is_err());
        assert!(StrokeSequence::new(vec![p(PenState::Down)]).is_err());
        assert!(StrokeSequence::new(vec![p(PenState::End), p(PenState::End)]).is_err());
        assert!(StrokeSequence::new(vec![p(PenState::Lift), p(PenState::End)]).is_ok());
        assert!(StrokeSequence::from_rows(&[[0.0, 0.0, 0.5, 0.5, 0.0]]).is_err());
    }

    #[test]
    fn normalize_examples() {
        let s = StrokeSequence::from_polylines(&[vec![(255.0, 0.0), (127.5, 63.75)]]).unwrap();
        let n = s.normalize(256, 256).unwrap();
        assert_eq!((n.points()[0].x, n.points()[0].y), (1.0, 0.0));
        assert_eq!((n.points()[1].x, n.points()[1].y), (0.5, 0.25));

        let unit = StrokeSequence::from_polylines(&[vec![(0.3, 0.7), (1.0, 0.0)]]).unwrap();
        assert_eq!(unit.normalize(2, 2).unwrap(), unit);
        assert!(matches!(
            unit.normalize(1, 5),
            Err(Error::DegenerateCanvas { .. })
        ));
    }

    #[test]
    fn offsets_examples() {
        let s = StrokeSequence::from_polylines(&[vec![(0.1, 0.1), (0.3, 0.1)]]).unwrap();
        let o = s.to_offsets();
        assert_eq!(o.origin, (0.1, 0.1));
        assert_eq!(o.deltas[0].0, 0.0);
        assert_eq!(o.deltas[0].1, 0.0);
        assert!((o.deltas[1].0 - 0.2).abs() < 1e-12);
        assert_eq!(o.deltas[1].1, 0.0);

        let one = StrokeSequence::from_polylines(&[vec![(0.4, 0.6)]]).unwrap();
        let o = one.to_offsets();
        assert_eq!(o.origin, (0.4, 0.6));
        assert_eq!(o.deltas, vec![(0.0, 0.0, PenState::End)]);
    }

    #[test]
    fn rdp_examples() {
        let s = StrokeSequence::from_polylines(&[vec![(0.0, 0.0), (0.5, 0.0), (1.0, 0.0)]]).unwrap();
        let r = s.rdp_simplify(0.01).unwrap();
        assert_eq!(r.len(), 2);
        assert_eq!(r.points()[1].x, 1.0);

        let bent =
            StrokeSequence::from_polylines(&[vec![(0.0, 0.0), (0.5, 0.1), (1.0, 0.0), (1.0, 1.0)]])
                .unwrap();
        assert_eq!(bent.rdp_simplify(0.0).unwrap(), bent);
        assert!(matches!(
            bent.rdp_simplify(-1.0),
            Err(Error::NegativeEpsilon(_))
        ));
    }

    #[test]
    fn rdp_never_merges_strokes() {
        let s = StrokeSequence::from_polylines(&[
            vec![(0.0, 0.0), (0.5, 0.0)],
            vec![(0.6, 0.0), (1.0, 0.0)],
        ])
        .unwrap();
        let r = s.rdp_simplify(10.0).unwrap();
        assert_eq!(r, s);
    }

    #[test]
    fn pad_examples() {
        let s = StrokeSequence::from_polylines(&[vec![(0.0, 0.0), (0.5, 0.5), (1.0, 1.0)]]).unwrap();
        let p = s.pad_or_truncate(5);
        assert_eq!(p.mask, vec![true, true, true, false, false]);
        assert!(p.points[3..].iter().all(|q| q.state == PenState::End && q.x == 1.0));

        let five = StrokeSequence::from_polylines(&[(0..5).map(|i| (i as f64, 0.0)).collect()]).unwrap();
        let p = five.pad_or_truncate(5);
        assert_eq!(p.points, five.points());
        assert!(p.mask.iter().all(|&m| m));

        let seven = StrokeSequence::from_polylines(&[(0..7).map(|i| (i as f64, 0.0)).collect()]).unwrap();
        let p = seven.pad_or_truncate(5);
        assert_eq!(p.len(), 5);
        assert_eq!(p.points[4].state, PenState::End);
        assert_eq!(p.points[4].x, 4.0);
        assert_eq!(p.valid_len(), 5);
    }

    #[test]
    fn offset_rows_cumulate_back() {
        let s = StrokeSequence::from_polylines(&[vec![(0.2, 0.3), (0.5, 0.1)]]).unwrap();
        let rows = s.pad_or_truncate(3).offset_rows();
        assert_eq!(rows[0][0], 0.2);
        assert!((rows[0][0] + rows[1][0] - 0.5).abs() < 1e-15);
        assert_eq!(rows[2][0], 0.0);
    }

    fn arb_sequence() -> impl Strategy<Value = StrokeSequence> {
        prop::collection::vec(
            prop::collection::vec((0.0f64..1.0, 0.0f64..1.0), 1..8),
            1..5,
        )
        .prop_map(|strokes| StrokeSequence::from_polylines(&strokes).unwrap())
    }

    fn assert_one_end(points: &[StrokePoint]) {
        assert_eq!(points.last().unwrap().state, PenState::End);
        assert_eq!(points.iter().filter(|p| p.state == PenState::End).count(), 1);
    }

    proptest! {
        #[test]
        fn offsets_round_trip(s in arb_sequence()) {
            let back = s.to_offsets().to_absolute().unwrap();
            for (a, b) in s.points().iter().zip(back.points()) {
                prop_assert_eq!(a.state, b.state);
                prop_assert!((a.x - b.x).abs() < 1e-6 && (a.y - b.y).abs() < 1e-6);
            }
        }

        #[test]
        fn operations_keep_pen_invariant(s in arb_sequence(), eps in 0.0f64..0.3, t in 1usize..20) {
            assert_one_end(s.rdp_simplify(eps).unwrap().points());
            assert_one_end(s.normalize(16, 16).unwrap().points());
            let back = s.to_offsets().to_absolute().unwrap();
            assert_one_end(back.points());
            let p = s.pad_or_truncate(t);
            prop_assert_eq!(p.valid_len(), t.min(s.len()));
            prop_assert_eq!(p.points[p.valid_len() - 1].state, PenState::End);
            prop_assert!(p.points[..p.valid_len() - 1].iter().all(|q| q.state != PenState::End));
        }

        #[test]
        fn rdp_shrinks_and_bounds_error(s in arb_sequence(), eps in 0.0f64..0.3) {
            let r = s.rdp_simplify(eps).unwrap();
            prop_assert!(r.len() <= s.len());
            for range in s.stroke_ranges() {
                let xy: Vec<_> = s.points()[range].iter().map(|p| (p.x, p.y)).collect();
                let kept = rdp_indices(&xy, eps);
                prop_assert_eq!(kept[0], 0);
                prop_assert_eq!(*kept.last().unwrap(), xy.len() - 1);
                for w in kept.windows(2) {
                    for i in w[0] + 1..w[1] {
                        prop_assert!(perpendicular_distance(xy[i], xy[w[0]], xy[w[1]]) <= eps);
                    }
                }
            }
        }

        #[test]
        fn normalize_is_idempotent_after_rescale(s in arb_sequence()) {
            let n = s.normalize(32, 48).unwrap();
            let again = n.denormalize(32, 48).unwrap().normalize(32, 48).unwrap();
            for (a, b) in n.points().iter().zip(again.points()) {
                prop_assert!((a.x - b.x).abs() < 1e-12 && (a.y - b.y).abs() < 1e-12);
            }
        }
    }
}
