//! Sensing processing: forward range models, quality-weighted
//! localization, per-request fusion and the bystander privacy filter.

use std::collections::BTreeSet;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{distance, Estimate, NodeId, Position, SensingArea, SensingMeasurement, SensingMode, SensingResult};
use crate::scheduler::{effective_noise_std, SchedulerError};

use super::orchestration::{GeometryConfig, MIN_PAIRS};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ProcessingError {
    #[error("need measurements from {needed} distinct pairs, got {found}")]
    TooFewPairs { found: usize, needed: usize },
    #[error("node {0} has no entry in the geometry configuration")]
    UnknownNode(NodeId),
    #[error("all measurement weights are zero")]
    ZeroWeight,
    #[error("refinement did not converge within {iterations} iterations")]
    DidNotConverge { best: TargetEstimate, iterations: usize },
    #[error("noise standard deviation must be non-negative, got {0}")]
    NegativeNoise(f64),
    #[error("no rounds to fuse")]
    NoRounds,
    #[error(transparent)]
    Scheduler(#[from] SchedulerError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TargetEstimate {
    pub position: Position,
    pub residual_rms: f64,
    pub confidence: f64,
}

/// Path length Tx -> target -> Rx. In monostatic mode `tx == rx` and this
/// is the round trip.
pub fn forward_range(tx: Position, rx: Position, target: Position, mode: SensingMode) -> f64 {
    match mode {
        SensingMode::Bistatic => distance(tx, target) + distance(target, rx),
        SensingMode::Monostatic => 2.0 * distance(tx, target),
    }
}

fn baseline(tx: Position, rx: Position, mode: SensingMode) -> f64 {
    match mode {
        SensingMode::Bistatic => distance(tx, rx),
        SensingMode::Monostatic => 0.0,
    }
}

fn endpoints(geometry: &GeometryConfig, tx: &NodeId, rx: &NodeId) -> Result<(Position, Position), ProcessingError> {
    let lookup = |id: &NodeId| geometry.position(id).ok_or_else(|| ProcessingError::UnknownNode(id.clone()));
    Ok((lookup(tx)?, lookup(rx)?))
}

/// Parameters of one simulated range measurement.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeasurementNoise {
    pub noise_std: f64,
    /// Sensing resource share granted by the joint scheduler.
    pub share: f64,
}

/// Simulates the range a pair reports for `target`. Noise is Gaussian with
/// standard deviation `noise_std / sqrt(share)`; the result never falls
/// below the physical minimum (the Tx-Rx baseline).
pub fn generate_measurement<R: Rng + ?Sized>(
    pair: (&NodeId, &NodeId),
    geometry: &GeometryConfig,
    target: Position,
    noise: MeasurementNoise,
    quality: f64,
    timestamp: f64,
    rng: &mut R,
) -> Result<SensingMeasurement, ProcessingError> {
    if !(noise.noise_std >= 0.0) {
        return Err(ProcessingError::NegativeNoise(noise.noise_std));
    }
    let (tx, rx) = endpoints(geometry, pair.0, pair.1)?;
    let std = effective_noise_std(noise.noise_std, noise.share)?;
    let truth = forward_range(tx, rx, target, geometry.mode);
    let sample = if std > 0.0 { Normal::new(0.0, std).expect("std is finite and positive").sample(rng) } else { 0.0 };
    Ok(SensingMeasurement {
        tx_id: pair.0.clone(),
        rx_id: pair.1.clone(),
        range: (truth + sample).max(baseline(tx, rx, geometry.mode)),
        quality,
        timestamp,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LocalizerConfig {
    /// Seed grid resolution per axis over the area's bounding square.
    pub grid_points: usize,
    /// Number of best grid points refined independently.
    pub seeds: usize,
    pub max_iterations: usize,
    /// Convergence threshold on the step norm, meters.
    pub tolerance: f64,
    /// Step scale applied when a step increases the cost.
    pub damping: f64,
    pub max_halvings: usize,
}

impl Default for LocalizerConfig {
    fn default() -> Self {
        Self { grid_points: 25, seeds: 4, max_iterations: 100, tolerance: 1e-9, damping: 0.5, max_halvings: 60 }
    }
}

struct Term {
    tx: Position,
    rx: Position,
    range: f64,
    weight: f64,
}

struct Problem {
    terms: Vec<Term>,
    mode: SensingMode,
    area: SensingArea,
    total_weight: f64,
}

impl Problem {
    fn cost(&self, p: Position) -> f64 {
        self.terms
            .iter()
            .map(|t| {
                let r = forward_range(t.tx, t.rx, p, self.mode) - t.range;
                t.weight * r * r
            })
            .sum()
    }

    fn estimate(&self, p: Position) -> TargetEstimate {
        let residual_rms = (self.cost(p) / self.total_weight).sqrt();
        TargetEstimate { position: p, residual_rms, confidence: (-residual_rms / self.area.radius).exp() }
    }

    fn project(&self, p: Position) -> Position {
        let c = self.area.center;
        let d = distance(p, c);
        if d <= self.area.radius {
            p
        } else {
            let s = self.area.radius / d;
            Position::new(c.x + (p.x - c.x) * s, c.y + (p.y - c.y) * s)
        }
    }

    /// Gauss-Newton step `-(J'WJ)^-1 J'Wr`, or `None` when the normal
    /// matrix is singular.
    fn step(&self, p: Position) -> Option<(f64, f64)> {
        let unit = |from: Position| {
            let d = distance(p, from);
            if d > 0.0 {
                ((p.x - from.x) / d, (p.y - from.y) / d)
            } else {
                (0.0, 0.0)
            }
        };
        let (mut a11, mut a12, mut a22, mut g1, mut g2) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for t in &self.terms {
            let (ux, uy) = unit(t.tx);
            let (jx, jy) = match self.mode {
                SensingMode::Bistatic => {
                    let (vx, vy) = unit(t.rx);
                    (ux + vx, uy + vy)
                }
                SensingMode::Monostatic => (2.0 * ux, 2.0 * uy),
            };
            let r = forward_range(t.tx, t.rx, p, self.mode) - t.range;
            a11 += t.weight * jx * jx;
            a12 += t.weight * jx * jy;
            a22 += t.weight * jy * jy;
            g1 += t.weight * jx * r;
            g2 += t.weight * jy * r;
        }
        let det = a11 * a22 - a12 * a12;
        let scale = (a11 + a22) * (a11 + a22);
        if !(det > 1e-14 * scale) {
            return None;
        }
        Some((-(a22 * g1 - a12 * g2) / det, -(a11 * g2 - a12 * g1) / det))
    }

    /// Damped Gauss-Newton from `start`. Returns the final point and
    /// whether the step norm fell below tolerance.
    fn refine(&self, start: Position, cfg: &LocalizerConfig) -> (Position, bool) {
        let mut p = start;
        let mut cost = self.cost(p);
        for _ in 0..cfg.max_iterations {
            let Some((dx, dy)) = self.step(p) else {
                return (p, false);
            };
            let mut scale = 1.0;
            let mut accepted = None;
            for _ in 0..=cfg.max_halvings {
                let cand = self.project(Position::new(p.x + scale * dx, p.y + scale * dy));
                let c = self.cost(cand);
                if c <= cost {
                    accepted = Some((cand, c));
                    break;
                }
                scale *= cfg.damping;
            }
            let Some((next, next_cost)) = accepted else {
                // No descent along the Gauss-Newton direction: stationary.
                return (p, true);
            };
            let moved = distance(p, next);
            p = next;
            cost = next_cost;
            if moved < cfg.tolerance {
                return (p, true);
            }
        }
        (p, false)
    }

    fn grid(&self, n: usize) -> Vec<Position> {
        let n = n.max(2);
        let c = self.area.center;
        let r = self.area.radius;
        let mut pts = Vec::with_capacity(n * n);
        for i in 0..n {
            for j in 0..n {
                let x = c.x - r + 2.0 * r * i as f64 / (n - 1) as f64;
                let y = c.y - r + 2.0 * r * j as f64 / (n - 1) as f64;
                let p = Position::new(x, y);
                if self.area.contains(p) {
                    pts.push(p);
                }
            }
        }
        pts.push(c);
        pts
    }
}

/// Weighted least-squares position fix from range measurements.
///
/// Minimizes `sum w_i (forward_range_i(p) - range_i)^2` over the request
/// area, with `w_i` the measurement quality. Seeds come from a coarse grid;
/// each of the best seeds is refined by damped Gauss-Newton and the lowest
/// cost wins. When no refinement converges the best grid point is returned
/// inside [`ProcessingError::DidNotConverge`].
pub fn localize(
    measurements: &[SensingMeasurement],
    geometry: &GeometryConfig,
    cfg: &LocalizerConfig,
) -> Result<TargetEstimate, ProcessingError> {
    let distinct: BTreeSet<(&NodeId, &NodeId)> = measurements.iter().map(|m| (&m.tx_id, &m.rx_id)).collect();
    if distinct.len() < MIN_PAIRS {
        return Err(ProcessingError::TooFewPairs { found: distinct.len(), needed: MIN_PAIRS });
    }
    let mut terms = Vec::with_capacity(measurements.len());
    for m in measurements {
        let (tx, rx) = endpoints(geometry, &m.tx_id, &m.rx_id)?;
        terms.push(Term { tx, rx, range: m.range, weight: m.quality });
    }
    let total_weight: f64 = terms.iter().map(|t| t.weight).sum();
    if !(total_weight > 0.0) {
        return Err(ProcessingError::ZeroWeight);
    }
    let problem = Problem { terms, mode: geometry.mode, area: geometry.area, total_weight };

    let mut seeds: Vec<(f64, usize, Position)> =
        problem.grid(cfg.grid_points).into_iter().enumerate().map(|(i, p)| (problem.cost(p), i, p)).collect();
    seeds.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let best_seed = seeds[0].2;

    let mut best: Option<(f64, Position)> = None;
    for &(_, _, seed) in seeds.iter().take(cfg.seeds.max(1)) {
        let (p, converged) = problem.refine(seed, cfg);
        if !converged {
            continue;
        }
        let c = problem.cost(p);
        if best.is_none_or(|(bc, _)| c < bc) {
            best = Some((c, p));
        }
    }
    match best {
        Some((_, p)) => Ok(problem.estimate(p)),
        None => {
            Err(ProcessingError::DidNotConverge { best: problem.estimate(best_seed), iterations: cfg.max_iterations })
        }
    }
}

/// Keeps only estimates inside the requested area, in input order.
pub fn privacy_filter(estimates: &[TargetEstimate], area: &SensingArea) -> Vec<TargetEstimate> {
    estimates.iter().filter(|e| area.contains(e.position)).copied().collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RoundEstimate {
    pub estimate: TargetEstimate,
    pub timestamp: f64,
}

/// Confidence-weighted centroid of the per-round estimates. When every
/// round has zero confidence the rounds are weighted equally.
pub fn fuse_rounds(request_id: &str, rounds: &[RoundEstimate]) -> Result<SensingResult, ProcessingError> {
    let last = rounds.last().ok_or(ProcessingError::NoRounds)?;
    let total: f64 = rounds.iter().map(|r| r.estimate.confidence).sum();
    let weight =
        |r: &RoundEstimate| if total > 0.0 { r.estimate.confidence / total } else { 1.0 / rounds.len() as f64 };
    let (mut x, mut y) = (0.0, 0.0);
    for r in rounds {
        x += weight(r) * r.estimate.position.x;
        y += weight(r) * r.estimate.position.y;
    }
    let position = if rounds.len() == 1 { last.estimate.position } else { Position::new(x, y) };
    Ok(SensingResult {
        request_id: request_id.to_owned(),
        estimates: vec![Estimate { position, confidence: total / rounds.len() as f64 }],
        timestamp: last.timestamp,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::substream;
    use std::collections::BTreeMap;

    fn p(x: f64, y: f64) -> Position {
        Position::new(x, y)
    }

    fn geometry(nodes: &[(&str, f64, f64)], mode: SensingMode, radius: f64) -> GeometryConfig {
        GeometryConfig {
            positions: nodes.iter().map(|&(id, x, y)| (NodeId::from(id), p(x, y))).collect::<BTreeMap<_, _>>(),
            mode,
            area: SensingArea { center: p(0.0, 0.0), radius },
        }
    }

    fn noiseless(
        geo: &GeometryConfig,
        pairs: &[(&str, &str)],
        target: Position,
        quality: f64,
    ) -> Vec<SensingMeasurement> {
        let mut rng = substream(0, "unused");
        pairs
            .iter()
            .map(|&(tx, rx)| {
                let noise = MeasurementNoise { noise_std: 0.0, share: 1.0 };
                generate_measurement((&tx.into(), &rx.into()), geo, target, noise, quality, 0.0, &mut rng).unwrap()
            })
            .collect()
    }

    fn triangle() -> GeometryConfig {
        geometry(&[("a", 150.0, 0.0), ("b", -80.0, 120.0), ("c", -60.0, -140.0)], SensingMode::Bistatic, 100.0)
    }

    #[test]
    fn forward_range_examples() {
        let r = forward_range(p(0.0, 0.0), p(10.0, 0.0), p(5.0, 5.0), SensingMode::Bistatic);
        assert!((r - 2.0 * 50f64.sqrt()).abs() < 1e-12);
        assert!((r - 14.1421).abs() < 1e-4);
        assert_eq!(forward_range(p(0.0, 0.0), p(10.0, 0.0), p(10.0, 0.0), SensingMode::Bistatic), 10.0);
        assert_eq!(forward_range(p(0.0, 0.0), p(0.0, 0.0), p(3.0, 4.0), SensingMode::Monostatic), 10.0);
    }

    #[test]
    fn noiseless_measurement_is_exact() {
        let geo = triangle();
        let m = noiseless(&geo, &[("a", "b")], p(3.0, 4.0), 0.7);
        assert_eq!(m[0].range, forward_range(p(150.0, 0.0), p(-80.0, 120.0), p(3.0, 4.0), SensingMode::Bistatic));
        assert_eq!(m[0].quality, 0.7);
    }

    #[test]
    fn share_scales_measurement_noise() {
        let geo = triangle();
        let target = p(0.0, 0.0);
        let truth = forward_range(p(150.0, 0.0), p(-80.0, 120.0), target, SensingMode::Bistatic);
        let spread = |noise: MeasurementNoise| {
            let mut rng = substream(5, "spread");
            let n = 4000;
            let var: f64 = (0..n)
                .map(|_| {
                    let m = generate_measurement((&"a".into(), &"b".into()), &geo, target, noise, 1.0, 0.0, &mut rng)
                        .unwrap();
                    (m.range - truth).powi(2)
                })
                .sum::<f64>()
                / n as f64;
            var.sqrt()
        };
        let quarter = spread(MeasurementNoise { noise_std: 0.5, share: 0.25 });
        assert!((quarter - 1.0).abs() < 0.05, "sample std {quarter}");
    }

    #[test]
    fn measurement_is_clamped_at_baseline() {
        // Target on the baseline and huge noise: about half the samples
        // would fall below the Tx-Rx distance.
        let geo = geometry(&[("a", 0.0, 0.0), ("b", 10.0, 0.0)], SensingMode::Bistatic, 20.0);
        let mut rng = substream(1, "clamp");
        let noise = MeasurementNoise { noise_std: 50.0, share: 1.0 };
        let mut clamped = 0;
        for _ in 0..200 {
            let m =
                generate_measurement((&"a".into(), &"b".into()), &geo, p(5.0, 0.0), noise, 1.0, 0.0, &mut rng).unwrap();
            assert!(m.range >= 10.0);
            clamped += usize::from(m.range == 10.0);
        }
        assert!(clamped > 50);
    }

    #[test]
    fn starved_share_is_an_error() {
        let geo = triangle();
        let mut rng = substream(1, "x");
        let noise = MeasurementNoise { noise_std: 1.0, share: 0.0 };
        let err = generate_measurement((&"a".into(), &"b".into()), &geo, p(0.0, 0.0), noise, 1.0, 0.0, &mut rng);
        assert_eq!(err.unwrap_err(), ProcessingError::Scheduler(SchedulerError::SensingStarved));
    }

    #[test]
    fn localize_recovers_noiseless_target() {
        let geo = triangle();
        let target = p(23.5, -41.25);
        let ms = noiseless(&geo, &[("a", "b"), ("b", "c"), ("c", "a")], target, 1.0);
        let est = localize(&ms, &geo, &LocalizerConfig::default()).unwrap();
        assert!(distance(est.position, target) < 1e-6, "{est:?}");
        assert!(est.residual_rms < 1e-6);
        assert!(est.confidence > 0.999_999);
    }

    #[test]
    fn localize_monostatic() {
        let geo =
            geometry(&[("a", 150.0, 0.0), ("b", -80.0, 120.0), ("c", -60.0, -140.0)], SensingMode::Monostatic, 100.0);
        let target = p(-12.0, 60.0);
        let ms = noiseless(&geo, &[("a", "a"), ("b", "b"), ("c", "c")], target, 0.5);
        let est = localize(&ms, &geo, &LocalizerConfig::default()).unwrap();
        assert!(distance(est.position, target) < 1e-6);
    }

    #[test]
    fn single_pair_is_too_few() {
        let geo = triangle();
        let ms = noiseless(&geo, &[("a", "b"), ("a", "b"), ("a", "b")], p(0.0, 0.0), 1.0);
        assert_eq!(
            localize(&ms, &geo, &LocalizerConfig::default()).unwrap_err(),
            ProcessingError::TooFewPairs { found: 1, needed: 3 }
        );
    }

    #[test]
    fn unknown_node_is_reported() {
        let geo = triangle();
        let mut ms = noiseless(&geo, &[("a", "b"), ("b", "c"), ("c", "a")], p(0.0, 0.0), 1.0);
        ms[2].rx_id = "zz".into();
        assert_eq!(
            localize(&ms, &geo, &LocalizerConfig::default()).unwrap_err(),
            ProcessingError::UnknownNode("zz".into())
        );
    }

    #[test]
    fn iteration_cap_returns_best_grid_point() {
        let geo = triangle();
        let target = p(17.0, 9.0);
        let ms = noiseless(&geo, &[("a", "b"), ("b", "c"), ("c", "a")], target, 1.0);
        let cfg = LocalizerConfig { max_iterations: 0, ..LocalizerConfig::default() };
        match localize(&ms, &geo, &cfg) {
            Err(ProcessingError::DidNotConverge { best, .. }) => {
                assert!(geo.area.contains(best.position));
                // Within one grid cell diagonal of the truth.
                assert!(distance(best.position, target) < 2.0 * 200.0 / 24.0);
            }
            other => panic!("expected DidNotConverge, got {other:?}"),
        }
    }

    fn noisy(geo: &GeometryConfig, pairs: &[(&str, &str)], target: Position, seed: u64) -> Vec<SensingMeasurement> {
        let mut rng = substream(seed, "noisy");
        pairs
            .iter()
            .enumerate()
            .map(|(i, &(tx, rx))| {
                let noise = MeasurementNoise { noise_std: 2.0, share: 1.0 };
                let q = 0.3 + 0.1 * i as f64;
                generate_measurement((&tx.into(), &rx.into()), geo, target, noise, q, 0.0, &mut rng).unwrap()
            })
            .collect()
    }

    #[test]
    fn duplicating_a_measurement_equals_doubling_its_quality() {
        let geo = triangle();
        let pairs = [("a", "b"), ("b", "c"), ("c", "a"), ("b", "a")];
        let ms = noisy(&geo, &pairs, p(10.0, 20.0), 3);
        let mut dup = ms.clone();
        dup.push(ms[1].clone());
        let mut doubled = ms.clone();
        doubled[1].quality *= 2.0;
        let cfg = LocalizerConfig::default();
        let a = localize(&dup, &geo, &cfg).unwrap();
        let b = localize(&doubled, &geo, &cfg).unwrap();
        assert!(distance(a.position, b.position) < 1e-7, "{a:?} vs {b:?}");
    }

    #[test]
    fn uniform_weight_scaling_leaves_estimate_unchanged() {
        let geo = triangle();
        let pairs = [("a", "b"), ("b", "c"), ("c", "a"), ("a", "c")];
        let ms = noisy(&geo, &pairs, p(-30.0, 5.0), 9);
        let scaled: Vec<_> = ms
            .iter()
            .cloned()
            .map(|mut m| {
                m.quality *= 0.37;
                m
            })
            .collect();
        let cfg = LocalizerConfig::default();
        let a = localize(&ms, &geo, &cfg).unwrap();
        let b = localize(&scaled, &geo, &cfg).unwrap();
        assert!(distance(a.position, b.position) < 1e-7);
        assert!((a.residual_rms - b.residual_rms).abs() < 1e-9);
    }

    #[test]
    fn all_zero_weights_are_rejected() {
        let geo = triangle();
        let ms = noiseless(&geo, &[("a", "b"), ("b", "c"), ("c", "a")], p(0.0, 0.0), 0.0);
        assert_eq!(localize(&ms, &geo, &LocalizerConfig::default()).unwrap_err(), ProcessingError::ZeroWeight);
    }

    fn est(x: f64, y: f64, confidence: f64) -> TargetEstimate {
        TargetEstimate { position: p(x, y), residual_rms: 0.0, confidence }
    }

    #[test]
    fn privacy_filter_examples() {
        let area = SensingArea { center: p(1.0, 1.0), radius: 10.0 };
        assert_eq!(privacy_filter(&[est(1.0, 1.0, 1.0)], &area).len(), 1);
        assert!(privacy_filter(&[est(11.0 + 1e-9, 1.0, 1.0)], &area).is_empty());
        assert!(privacy_filter(&[], &area).is_empty());
        let kept = privacy_filter(&[est(2.0, 1.0, 0.1), est(50.0, 0.0, 0.9), est(0.0, 0.0, 0.2)], &area);
        assert_eq!(kept, vec![est(2.0, 1.0, 0.1), est(0.0, 0.0, 0.2)]);
    }

    #[test]
    fn fuse_rounds_examples() {
        let round = |e, t| RoundEstimate { estimate: e, timestamp: t };
        let fused = fuse_rounds("r", &[round(est(0.0, 0.0, 0.5), 1.0), round(est(2.0, 0.0, 0.5), 2.0)]).unwrap();
        assert_eq!(fused.estimates[0].position, p(1.0, 0.0));
        assert_eq!(fused.estimates[0].confidence, 0.5);
        assert_eq!(fused.timestamp, 2.0);

        let single = fuse_rounds("r", &[round(est(3.25, -7.5, 0.8), 4.0)]).unwrap();
        assert_eq!(single.estimates[0], Estimate { position: p(3.25, -7.5), confidence: 0.8 });

        let fused = fuse_rounds("r", &[round(est(0.0, 0.0, 1.0), 1.0), round(est(9.0, 9.0, 0.0), 2.0)]).unwrap();
        assert_eq!(fused.estimates[0].position, p(0.0, 0.0));

        assert_eq!(fuse_rounds("r", &[]).unwrap_err(), ProcessingError::NoRounds);
    }
}
