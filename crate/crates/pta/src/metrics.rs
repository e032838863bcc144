//! Trajectory and goal metrics: NE, SR, OSR, SPL, PL, DTW, nDTW, SDTW, and
//! CLS. All pure functions over position polylines.

use serde::{Deserialize, Serialize};

pub type Point = [f64; 3];

fn dist(a: &Point, b: &Point) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    (dx * dx + dy * dy + dz * dz).sqrt()
}

/// Metric length of a polyline.
pub fn path_length(path: &[Point]) -> f64 {
    path.windows(2).map(|w| dist(&w[0], &w[1])).sum()
}

/// Dynamic-time-warping alignment cost between the query and reference
/// paths: symmetric unit steps (match / insert / delete), Euclidean point
/// distance, endpoints aligned.
pub fn dtw(q: &[Point], r: &[Point]) -> f64 {
    assert!(!q.is_empty() && !r.is_empty(), "dtw on empty sequence");
    let (n, m) = (q.len(), r.len());
    let mut prev = vec![f64::INFINITY; m + 1];
    let mut cur = vec![f64::INFINITY; m + 1];
    prev[0] = 0.0;
    for i in 1..=n {
        cur[0] = f64::INFINITY;
        for j in 1..=m {
            let cost = dist(&q[i - 1], &r[j - 1]);
            cur[j] = cost + prev[j].min(cur[j - 1]).min(prev[j - 1]);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[m]
}

/// How `|R|` is interpreted in the nDTW normalizer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NdtwNorm {
    /// Number of reference points (the default).
    #[default]
    PointCount,
    /// Metric length of the reference path.
    MetricLength,
}

pub fn ndtw_with_norm(q: &[Point], r: &[Point], d_th: f64, norm: NdtwNorm) -> f64 {
    assert!(d_th > 0.0, "ndtw requires positive d_th");
    let scale = match norm {
        NdtwNorm::PointCount => r.len() as f64,
        NdtwNorm::MetricLength => path_length(r).max(f64::MIN_POSITIVE),
    };
    (-dtw(q, r) / (scale * d_th)).exp()
}

/// exp(-DTW(Q, R) / (|R| * d_th)), |R| counted in reference points.
/// Well-defined for query prefixes down to a single point.
pub fn ndtw(q: &[Point], r: &[Point], d_th: f64) -> f64 {
    ndtw_with_norm(q, r, d_th, NdtwNorm::PointCount)
}

/// Distance from the final query point to the goal.
pub fn navigation_error(q: &[Point], goal: &Point) -> f64 {
    dist(q.last().expect("empty trajectory"), goal)
}

pub fn success(q: &[Point], goal: &Point, d_th: f64) -> bool {
    navigation_error(q, goal) <= d_th
}

/// Success had an oracle stopped the agent at its closest approach.
pub fn oracle_success(q: &[Point], goal: &Point, d_th: f64) -> bool {
    q.iter().any(|p| dist(p, goal) <= d_th)
}

/// Per-episode SPL contribution: S * l / max(p, l) with `l` the geodesic
/// shortest length and `p` the traversed length. A zero-length geodesic
/// (start == goal) contributes the bare success indicator.
pub fn spl_contribution(success: bool, traversed: f64, geodesic: f64) -> f64 {
    if !success {
        return 0.0;
    }
    if geodesic <= 0.0 {
        return 1.0;
    }
    geodesic / traversed.max(geodesic)
}

/// Coverage weighted by Length Score.
///
/// PC = mean over r in R of exp(-mindist(r, Q) / d_th);
/// LS = PC * len(R) / (PC * len(R) + |len(Q) - PC * len(R)|);
/// CLS = PC * LS, with len(.) the metric path length.
pub fn cls(q: &[Point], r: &[Point], d_th: f64) -> f64 {
    assert!(!q.is_empty() && !r.is_empty(), "cls on empty sequence");
    let pc = r
        .iter()
        .map(|rp| {
            let min = q
                .iter()
                .map(|qp| dist(rp, qp))
                .fold(f64::INFINITY, f64::min);
            (-min / d_th).exp()
        })
        .sum::<f64>()
        / r.len() as f64;
    let expected = pc * path_length(r);
    let ls = if expected == 0.0 && path_length(q) == 0.0 {
        1.0
    } else {
        expected / (expected + (path_length(q) - expected).abs())
    };
    pc * ls
}

/// nDTW gated by success.
pub fn sdtw(success: bool, ndtw_value: f64) -> f64 {
    if success {
        ndtw_value
    } else {
        0.0
    }
}

/// One evaluated episode: predicted and reference polylines plus the goal.
#[derive(Debug, Clone)]
pub struct TrajectoryRecord {
    pub episode_id: String,
    pub predicted: Vec<Point>,
    pub reference: Vec<Point>,
    pub goal: Point,
    pub d_th: f64,
    /// Geodesic shortest length from start to goal (meters).
    pub geodesic: f64,
}

/// Per-episode metric values.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpisodeMetrics {
    pub episode_id: String,
    pub ne: f64,
    pub sr: f64,
    pub osr: f64,
    pub spl: f64,
    pub pl: f64,
    pub cls: f64,
    pub ndtw: f64,
    pub sdtw: f64,
}

impl EpisodeMetrics {
    pub fn of(record: &TrajectoryRecord) -> EpisodeMetrics {
        Self::of_with_norm(record, NdtwNorm::PointCount)
    }

    pub fn of_with_norm(record: &TrajectoryRecord, norm: NdtwNorm) -> EpisodeMetrics {
        let ne = navigation_error(&record.predicted, &record.goal);
        let succ = ne <= record.d_th;
        let pl = path_length(&record.predicted);
        let ndtw_v = ndtw_with_norm(&record.predicted, &record.reference, record.d_th, norm);
        EpisodeMetrics {
            episode_id: record.episode_id.clone(),
            ne,
            sr: if succ { 1.0 } else { 0.0 },
            osr: if oracle_success(&record.predicted, &record.goal, record.d_th) {
                1.0
            } else {
                0.0
            },
            spl: spl_contribution(succ, pl, record.geodesic),
            pl,
            cls: cls(&record.predicted, &record.reference, record.d_th),
            ndtw: ndtw_v,
            sdtw: sdtw(succ, ndtw_v),
        }
    }
}

/// Aggregate report: per-episode rows plus means.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsReport {
    pub episodes: Vec<EpisodeMetrics>,
    pub mean: MeanMetrics,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct MeanMetrics {
    pub ne: f64,
    pub sr: f64,
    pub osr: f64,
    pub spl: f64,
    pub pl: f64,
    pub cls: f64,
    pub ndtw: f64,
    pub sdtw: f64,
}

impl MetricsReport {
    pub fn from_records(records: &[TrajectoryRecord]) -> MetricsReport {
        Self::from_records_with_norm(records, NdtwNorm::PointCount)
    }

    pub fn from_records_with_norm(records: &[TrajectoryRecord], norm: NdtwNorm) -> MetricsReport {
        let episodes: Vec<EpisodeMetrics> = records
            .iter()
            .map(|r| EpisodeMetrics::of_with_norm(r, norm))
            .collect();
        let n = episodes.len().max(1) as f64;
        let mut mean = MeanMetrics::default();
        for e in &episodes {
            mean.ne += e.ne / n;
            mean.sr += e.sr / n;
            mean.osr += e.osr / n;
            mean.spl += e.spl / n;
            mean.pl += e.pl / n;
            mean.cls += e.cls / n;
            mean.ndtw += e.ndtw / n;
            mean.sdtw += e.sdtw / n;
        }
        MetricsReport { episodes, mean }
    }

    /// Fixed-order CSV: one row per episode plus an aggregate `mean` row.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("episode,ne,sr,osr,spl,pl,cls,ndtw,sdtw\n");
        let fmt = |id: &str, m: [f64; 8]| {
            format!(
                "{id},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}\n",
                m[0], m[1], m[2], m[3], m[4], m[5], m[6], m[7]
            )
        };
        for e in &self.episodes {
            out.push_str(&fmt(
                &e.episode_id,
                [e.ne, e.sr, e.osr, e.spl, e.pl, e.cls, e.ndtw, e.sdtw],
            ));
        }
        let m = &self.mean;
        out.push_str(&fmt(
            "mean",
            [m.ne, m.sr, m.osr, m.spl, m.pl, m.cls, m.ndtw, m.sdtw],
        ));
        out
    }
}
