//! Landmark shapes, labeling patterns, inter-ocular normalization and the
//! semantic cluster partitions used by multi-center fine-tuning.
//!
//! Coordinates are normalized to the face patch: `(0, 0)` is the top-left
//! corner and `(1, 1)` the bottom-right. Landmark indices are 0-based in the
//! API and 1-based in the shipped cluster table.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Cluster table shipped with the crate.
pub const CLUSTER_TABLE: &str = include_str!("../data/clusters.txt");

/// Number of landmarks annotated per face.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "usize", into = "usize")]
pub enum LabelingPattern {
    /// Eye centers, nose tip, mouth corners.
    Five,
    /// COFW-style layout with brows, eye corners, pupils, nose, lips, chin.
    TwentyNine,
    /// The standard 68-point annotation.
    SixtyEight,
}

impl LabelingPattern {
    pub const ALL: [LabelingPattern; 3] = [Self::Five, Self::TwentyNine, Self::SixtyEight];

    pub fn from_count(n: usize) -> Result<Self> {
        match n {
            5 => Ok(Self::Five),
            29 => Ok(Self::TwentyNine),
            68 => Ok(Self::SixtyEight),
            other => Err(Error::UnsupportedPattern(other)),
        }
    }

    pub fn landmarks(self) -> usize {
        match self {
            Self::Five => 5,
            Self::TwentyNine => 29,
            Self::SixtyEight => 68,
        }
    }

    pub fn cluster_count(self) -> usize {
        match self {
            Self::Five => 4,
            Self::TwentyNine => 5,
            Self::SixtyEight => 7,
        }
    }

    /// Feature channels `D` of the last convolution.
    pub fn feature_dim(self) -> usize {
        match self {
            Self::Five | Self::TwentyNine => 512,
            Self::SixtyEight => 1024,
        }
    }

    /// Landmark sets whose centroids are the two eye centers (left, right).
    fn eye_landmarks(self) -> (&'static [usize], &'static [usize]) {
        match self {
            Self::Five => (&[0], &[1]),
            Self::TwentyNine => (&[16], &[17]),
            Self::SixtyEight => (&[36, 37, 38, 39, 40, 41], &[42, 43, 44, 45, 46, 47]),
        }
    }
}

impl TryFrom<usize> for LabelingPattern {
    type Error = Error;

    fn try_from(n: usize) -> Result<Self> {
        Self::from_count(n)
    }
}

impl From<LabelingPattern> for usize {
    fn from(p: LabelingPattern) -> usize {
        p.landmarks()
    }
}

impl fmt::Display for LabelingPattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.landmarks())
    }
}

/// Landmark coordinates of one face, interleaved `(x1, y1, ..., xn, yn)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Shape {
    pattern: LabelingPattern,
    coords: Vec<f64>,
}

impl Shape {
    pub fn new(pattern: LabelingPattern, coords: Vec<f64>) -> Result<Self> {
        if coords.len() != 2 * pattern.landmarks() {
            return Err(Error::shape(format!(
                "pattern {pattern} needs {} coordinates, got {}",
                2 * pattern.landmarks(),
                coords.len()
            )));
        }
        if let Some(i) = coords.iter().position(|v| !v.is_finite()) {
            return Err(Error::shape(format!("coordinate {i} is not finite")));
        }
        Ok(Shape { pattern, coords })
    }

    pub fn from_points(pattern: LabelingPattern, points: &[[f64; 2]]) -> Result<Self> {
        Self::new(pattern, points.iter().flatten().copied().collect())
    }

    pub fn pattern(&self) -> LabelingPattern {
        self.pattern
    }

    pub fn coords(&self) -> &[f64] {
        &self.coords
    }

    pub fn len(&self) -> usize {
        self.pattern.landmarks()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn point(&self, j: usize) -> [f64; 2] {
        [self.coords[2 * j], self.coords[2 * j + 1]]
    }

    pub fn points(&self) -> impl Iterator<Item = [f64; 2]> + '_ {
        self.coords.chunks_exact(2).map(|c| [c[0], c[1]])
    }

    /// Applies `f` to every landmark.
    pub fn map_points(&self, mut f: impl FnMut([f64; 2]) -> [f64; 2]) -> Shape {
        let coords = self.points().flat_map(&mut f).collect();
        Shape {
            pattern: self.pattern,
            coords,
        }
    }

    /// Axis-aligned bounds `(min_x, min_y, max_x, max_y)` of the listed
    /// landmarks (all landmarks when `indices` is `None`).
    pub fn bounds(&self, indices: Option<&[usize]>) -> [f64; 4] {
        let mut b = [f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY];
        let mut visit = |[x, y]: [f64; 2]| {
            b[0] = b[0].min(x);
            b[1] = b[1].min(y);
            b[2] = b[2].max(x);
            b[3] = b[3].max(y);
        };
        match indices {
            Some(idx) => idx.iter().for_each(|&j| visit(self.point(j))),
            None => self.points().for_each(visit),
        }
        b
    }

    /// The two eye centers (left, right) used for normalization.
    pub fn eye_centers(&self) -> ([f64; 2], [f64; 2]) {
        let (l, r) = self.pattern.eye_landmarks();
        (self.centroid(l), self.centroid(r))
    }

    fn centroid(&self, idx: &[usize]) -> [f64; 2] {
        let k = idx.len() as f64;
        let (sx, sy) = idx.iter().fold((0.0, 0.0), |(sx, sy), &j| {
            let [x, y] = self.point(j);
            (sx + x, sy + y)
        });
        [sx / k, sy / k]
    }
}

/// Distance between the ground-truth eye centers.
pub fn interocular_distance(gt: &Shape) -> Result<f64> {
    let ([lx, ly], [rx, ry]) = gt.eye_centers();
    let d = (lx - rx).hypot(ly - ry);
    if d > 0.0 && d.is_finite() {
        Ok(d)
    } else {
        Err(Error::Degenerate(format!(
            "eye centers coincide at ({lx}, {ly}); inter-ocular distance is {d}"
        )))
    }
}

/// Point-to-point error of every landmark divided by the inter-ocular distance.
pub fn per_landmark_errors(pred: &Shape, gt: &Shape) -> Result<Vec<f64>> {
    if pred.pattern != gt.pattern {
        return Err(Error::shape(format!(
            "prediction has pattern {} but ground truth has {}",
            pred.pattern, gt.pattern
        )));
    }
    let d = interocular_distance(gt)?;
    Ok(pred
        .points()
        .zip(gt.points())
        .map(|([px, py], [gx, gy])| (px - gx).hypot(py - gy) / d)
        .collect())
}

/// Disjoint landmark clusters covering every landmark of a pattern.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClusterPartition {
    pattern: LabelingPattern,
    names: Vec<String>,
    clusters: Vec<Vec<usize>>,
}

impl ClusterPartition {
    /// Builds a partition from 0-based clusters, checking coverage and disjointness.
    pub fn new(pattern: LabelingPattern, names: Vec<String>, clusters: Vec<Vec<usize>>) -> Result<Self> {
        let n = pattern.landmarks();
        if names.len() != clusters.len() {
            return Err(Error::Contract("one name per cluster required".into()));
        }
        let mut owner = vec![None; n];
        for (i, c) in clusters.iter().enumerate() {
            if c.is_empty() {
                return Err(Error::Contract(format!("cluster `{}` is empty", names[i])));
            }
            for &j in c {
                if j >= n {
                    return Err(Error::Contract(format!(
                        "cluster `{}` names landmark {} but pattern has {n}",
                        names[i],
                        j + 1
                    )));
                }
                if let Some(prev) = owner[j].replace(i) {
                    return Err(Error::Contract(format!(
                        "landmark {} is in clusters `{}` and `{}`",
                        j + 1,
                        names[prev],
                        names[i]
                    )));
                }
            }
        }
        if let Some(j) = owner.iter().position(Option::is_none) {
            return Err(Error::Contract(format!("landmark {} belongs to no cluster", j + 1)));
        }
        Ok(ClusterPartition {
            pattern,
            names,
            clusters,
        })
    }

    /// Parses the `pattern cluster_name idx,idx,...` table (1-based indices),
    /// keeping the lines for `pattern`. `#` starts a comment line.
    pub fn from_table(table: &str, pattern: LabelingPattern) -> Result<Self> {
        let mut names = vec![];
        let mut clusters = vec![];
        for (lineno, line) in table.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let bad = |msg: &str| Error::Config(format!("cluster table line {}: {msg}", lineno + 1));
            let mut parts = line.split_whitespace();
            let (Some(p), Some(name), Some(list), None) = (parts.next(), parts.next(), parts.next(), parts.next())
            else {
                return Err(bad("expected `pattern name idx,idx,...`"));
            };
            let p: usize = p.parse().map_err(|_| bad("pattern is not an integer"))?;
            if p != pattern.landmarks() {
                continue;
            }
            let idx = list
                .split(',')
                .map(|s| match s.parse::<usize>() {
                    Ok(v) if v >= 1 => Ok(v - 1),
                    _ => Err(bad("indices must be positive integers")),
                })
                .collect::<Result<Vec<_>>>()?;
            names.push(name.to_string());
            clusters.push(idx);
        }
        Self::new(pattern, names, clusters)
    }

    pub fn pattern(&self) -> LabelingPattern {
        self.pattern
    }

    pub fn len(&self) -> usize {
        self.clusters.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clusters.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn cluster(&self, i: usize) -> &[usize] {
        &self.clusters[i]
    }

    pub fn clusters(&self) -> &[Vec<usize>] {
        &self.clusters
    }

    /// Landmarks outside cluster `i`.
    pub fn complement(&self, i: usize) -> Vec<usize> {
        let inside = &self.clusters[i];
        (0..self.pattern.landmarks()).filter(|j| !inside.contains(j)).collect()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    /// Cluster owning landmark `j`.
    pub fn owner(&self, j: usize) -> usize {
        self.clusters
            .iter()
            .position(|c| c.contains(&j))
            .expect("partition covers every landmark")
    }
}

/// The shipped partition for a pattern.
pub fn clusters_for_pattern(pattern: LabelingPattern) -> ClusterPartition {
    ClusterPartition::from_table(CLUSTER_TABLE, pattern).expect("shipped cluster table is valid")
}

/// Left/right relabeling applied by a horizontal mirror; midline landmarks
/// map to themselves. `map[j]` is the index landmark `j` becomes.
pub fn flip_index_map(pattern: LabelingPattern) -> Vec<usize> {
    let n = pattern.landmarks();
    let mut map: Vec<usize> = (0..n).collect();
    let mut swap = |a: usize, b: usize| {
        // 1-based pairs
        map[a - 1] = b - 1;
        map[b - 1] = a - 1;
    };
    match pattern {
        LabelingPattern::Five => swap_pairs(&mut swap, &[(1, 2), (4, 5)]),
        LabelingPattern::TwentyNine => {
            for k in 1..=9 {
                swap(2 * k - 1, 2 * k);
            }
            swap_pairs(&mut swap, &[(19, 20), (23, 24)]);
        }
        LabelingPattern::SixtyEight => {
            for j in 1..=8 {
                swap(j, 18 - j);
            }
            for j in 18..=22 {
                swap(j, 45 - j);
            }
            swap_pairs(
                &mut swap,
                &[
                    (32, 36),
                    (33, 35),
                    (37, 46),
                    (38, 45),
                    (39, 44),
                    (40, 43),
                    (41, 48),
                    (42, 47),
                    (49, 55),
                    (50, 54),
                    (51, 53),
                    (60, 56),
                    (59, 57),
                    (61, 65),
                    (62, 64),
                    (68, 66),
                ],
            );
        }
    }
    map
}

fn swap_pairs(swap: &mut impl FnMut(usize, usize), pairs: &[(usize, usize)]) {
    for &(a, b) in pairs {
        swap(a, b);
    }
}
