//! Sub-metric scorers and the PDMS / EPDMS aggregates.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::planner::Trajectory;
use crate::sim::geometry::{box_overlap, dot, point_in_polygon, project_polyline, segments_intersect, time_to_contact, OrientedBox, Point};
use crate::sim::{Agent, LightState, Scene, EGO_LENGTH, EGO_WIDTH};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Nc,
    Dac,
    Ttc,
    Ep,
    Comfort,
    Ddc,
    Tl,
    Lk,
    Hc,
    Ec,
}

impl Metric {
    pub const ALL: [Metric; 10] = [
        Metric::Nc,
        Metric::Dac,
        Metric::Ttc,
        Metric::Ep,
        Metric::Comfort,
        Metric::Ddc,
        Metric::Tl,
        Metric::Lk,
        Metric::Hc,
        Metric::Ec,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Metric::Nc => "NC",
            Metric::Dac => "DAC",
            Metric::Ttc => "TTC",
            Metric::Ep => "EP",
            Metric::Comfort => "Comf.",
            Metric::Ddc => "DDC",
            Metric::Tl => "TL",
            Metric::Lk => "LK",
            Metric::Hc => "HC",
            Metric::Ec => "EC",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricConfig {
    pub pdms_penalties: Vec<Metric>,
    pub pdms_weights: BTreeMap<Metric, f64>,
    pub epdms_penalties: Vec<Metric>,
    pub epdms_weights: BTreeMap<Metric, f64>,
    /// Seconds.
    pub ttc_threshold: f64,
    pub comfort_accel: f64,
    pub comfort_jerk: f64,
    pub ec_accel: f64,
    pub ec_jerk: f64,
    /// Lateral distance to the nearest centerline, metres.
    pub lk_bound: f64,
    /// Centerlines this close are candidates for direction checks.
    pub ddc_radius: f64,
    pub dt: f64,
}

impl Default for MetricConfig {
    fn default() -> Self {
        use Metric::*;
        Self {
            pdms_penalties: vec![Nc, Dac],
            pdms_weights: [(Ep, 5.0), (Ttc, 5.0), (Comfort, 2.0)].into_iter().collect(),
            epdms_penalties: vec![Nc, Dac, Ddc, Tl],
            epdms_weights: [(Ttc, 5.0), (Ep, 5.0), (Lk, 2.0), (Hc, 2.0), (Ec, 2.0)].into_iter().collect(),
            ttc_threshold: 1.0,
            comfort_accel: 4.0,
            comfort_jerk: 8.0,
            ec_accel: 3.0,
            ec_jerk: 6.0,
            lk_bound: 0.75,
            ddc_radius: 2.0,
            dt: 0.5,
        }
    }
}

impl MetricConfig {
    pub fn validate(&self) -> Result<()> {
        for (pen, w) in [(&self.pdms_penalties, &self.pdms_weights), (&self.epdms_penalties, &self.epdms_weights)] {
            if let Some(m) = pen.iter().find(|m| w.contains_key(m)) {
                return Err(Error::Config(format!("{m:?} is both a penalty and an averaged metric")));
            }
            if let Some((m, v)) = w.iter().find(|(_, v)| !(**v > 0.0)) {
                return Err(Error::Config(format!("weight of {m:?} must be positive, got {v}")));
            }
        }
        if !(self.dt > 0.0) {
            return Err(Error::Config("metric dt must be positive".into()));
        }
        Ok(())
    }
}

/// Sub-metric values, each in `[0, 1]`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SubScores {
    pub values: BTreeMap<Metric, f64>,
}

impl SubScores {
    pub fn get(&self, m: Metric) -> Result<f64> {
        self.values
            .get(&m)
            .copied()
            .ok_or_else(|| Error::Contract(format!("sub-score {m:?} missing")))
    }

    pub fn set(&mut self, m: Metric, v: f64) {
        self.values.insert(m, v);
    }

    /// Every populated score equals 1.
    pub fn all_pass(&self) -> bool {
        self.values.values().all(|v| *v == 1.0)
    }
}

impl FromIterator<(Metric, f64)> for SubScores {
    fn from_iter<I: IntoIterator<Item = (Metric, f64)>>(iter: I) -> Self {
        Self {
            values: iter.into_iter().collect(),
        }
    }
}

fn ego_poses(traj: &Trajectory) -> Vec<[f64; 3]> {
    std::iter::once([0.0; 3]).chain(traj.waypoints.iter().copied()).collect()
}

fn ego_box(p: [f64; 3]) -> OrientedBox {
    OrientedBox::new([p[0], p[1]], EGO_WIDTH, EGO_LENGTH, p[2])
}

fn check_horizon(traj: &Trajectory, scene: &Scene) -> Result<()> {
    let h = scene.ego_gt.len();
    if traj.len() != h || scene.agents.iter().any(|a| a.script.len() != h) {
        return Err(Error::Contract(format!(
            "trajectory has {} steps, scene horizon is {h}",
            traj.len()
        )));
    }
    Ok(())
}

fn no_collision(poses: &[[f64; 3]], agents: &[Agent]) -> f64 {
    let hit = poses
        .iter()
        .enumerate()
        .any(|(k, p)| agents.iter().any(|a| box_overlap(&ego_box(*p), &a.footprint_at(k))));
    if hit {
        0.0
    } else {
        1.0
    }
}

fn drivable(poses: &[[f64; 3]], poly: &[Point]) -> f64 {
    if poses[1..].iter().all(|p| point_in_polygon([p[0], p[1]], poly, 1e-9)) {
        1.0
    } else {
        0.0
    }
}

/// Smallest constant-velocity time to contact over the horizon.
pub fn min_time_to_collision(poses: &[[f64; 3]], agents: &[Agent], dt: f64, cap: f64) -> Option<f64> {
    let n = poses.len();
    let mut best: Option<f64> = None;
    for k in 0..n {
        let (a, b) = if k + 1 < n { (k, k + 1) } else { (k - 1, k) };
        let v = [(poses[b][0] - poses[a][0]) / dt, (poses[b][1] - poses[a][1]) / dt];
        let e = ego_box(poses[k]);
        for ag in agents {
            if let Some(t) = time_to_contact(&e, v, &ag.footprint_at(k), ag.velocity_at(k), cap) {
                best = Some(best.map_or(t, |b: f64| b.min(t)));
            }
        }
    }
    best
}

fn progress(route: &[Point], poses: &[[f64; 3]]) -> f64 {
    let s = |p: [f64; 3]| project_polyline([p[0], p[1]], route).map_or(0.0, |q| q.arc);
    s(*poses.last().unwrap()) - s(poses[0])
}

/// 1 if every finite-difference acceleration and jerk is within bounds.
pub fn comfort(points: &[Point], dt: f64, accel: f64, jerk: f64) -> f64 {
    let acc: Vec<Point> = points
        .windows(3)
        .map(|w| {
            [
                (w[2][0] - 2.0 * w[1][0] + w[0][0]) / (dt * dt),
                (w[2][1] - 2.0 * w[1][1] + w[0][1]) / (dt * dt),
            ]
        })
        .collect();
    let ok_a = acc.iter().all(|a| a[0].hypot(a[1]) <= accel);
    let ok_j = acc
        .windows(2)
        .all(|w| ((w[1][0] - w[0][0]) / dt).hypot((w[1][1] - w[0][1]) / dt) <= jerk);
    if ok_a && ok_j {
        1.0
    } else {
        0.0
    }
}

fn direction_compliance(poses: &[[f64; 3]], scene: &Scene, radius: f64) -> f64 {
    for w in poses.windows(2) {
        let d = [w[1][0] - w[0][0], w[1][1] - w[0][1]];
        if d[0].hypot(d[1]) < 0.05 {
            continue;
        }
        let p = [w[1][0], w[1][1]];
        let projs: Vec<_> = scene.centerlines.iter().filter_map(|c| project_polyline(p, c)).collect();
        let near: Vec<_> = projs.iter().filter(|q| q.distance <= radius).collect();
        let ok = if near.is_empty() {
            projs
                .iter()
                .min_by(|a, b| a.distance.total_cmp(&b.distance))
                .map_or(true, |q| dot(q.tangent, d) >= 0.0)
        } else {
            near.iter().any(|q| dot(q.tangent, d) >= 0.0)
        };
        if !ok {
            return 0.0;
        }
    }
    1.0
}

fn light_compliance(poses: &[[f64; 3]], scene: &Scene) -> f64 {
    for w in poses.windows(2) {
        let (a, b) = ([w[0][0], w[0][1]], [w[1][0], w[1][1]]);
        for l in scene.lights.iter().filter(|l| l.state == LightState::Red) {
            let [p0, p1] = l.stopline;
            let motion = [b[0] - a[0], b[1] - a[1]];
            if segments_intersect(a, b, p0, p1) && dot(motion, l.travel_direction()) > 0.0 {
                return 0.0;
            }
        }
    }
    1.0
}

fn lane_keeping(poses: &[[f64; 3]], scene: &Scene, bound: f64) -> f64 {
    let ok = poses[1..].iter().all(|p| {
        scene
            .centerlines
            .iter()
            .filter_map(|c| project_polyline([p[0], p[1]], c))
            .any(|q| q.distance <= bound)
    });
    if ok {
        1.0
    } else {
        0.0
    }
}

/// All ten sub-metrics of `traj` in `scene`.
pub fn score_scene(traj: &Trajectory, scene: &Scene, cfg: &MetricConfig) -> Result<SubScores> {
    check_horizon(traj, scene)?;
    if scene.centerlines.iter().all(|c| c.len() < 2) {
        return Err(Error::Config("scene carries no lane direction data".into()));
    }
    let poses = ego_poses(traj);
    let pts: Vec<Point> = poses.iter().map(|p| [p[0], p[1]]).collect();
    let dt = cfg.dt;
    let mut s = SubScores::default();
    s.set(Metric::Nc, no_collision(&poses, &scene.agents));
    s.set(Metric::Dac, drivable(&poses, &scene.drivable));
    let ttc = min_time_to_collision(&poses, &scene.agents, dt, cfg.ttc_threshold);
    s.set(Metric::Ttc, if ttc.map_or(true, |t| t >= cfg.ttc_threshold) { 1.0 } else { 0.0 });
    let route = scene.route().ok_or_else(|| Error::Config("scene has no route".into()))?;
    let gt = progress(route, &ego_poses(&scene.ego_gt));
    let ep = if gt < 1.0 {
        1.0
    } else {
        (progress(route, &poses) / gt).clamp(0.0, 1.0)
    };
    s.set(Metric::Ep, ep);
    s.set(Metric::Comfort, comfort(&pts, dt, cfg.comfort_accel, cfg.comfort_jerk));
    s.set(Metric::Ddc, direction_compliance(&poses, scene, cfg.ddc_radius));
    s.set(Metric::Tl, light_compliance(&poses, scene));
    s.set(Metric::Lk, lane_keeping(&poses, scene, cfg.lk_bound));
    let (v, a) = (scene.ego_state.v, scene.ego_state.a);
    let hist = |t: f64| [-v * t + 0.5 * a * t * t, 0.0];
    let with_history: Vec<Point> = [hist(2.0 * dt), hist(dt)].into_iter().chain(pts.iter().copied()).collect();
    s.set(Metric::Hc, comfort(&with_history, dt, cfg.comfort_accel, cfg.comfort_jerk));
    s.set(Metric::Ec, comfort(&pts, dt, cfg.ec_accel, cfg.ec_jerk));
    Ok(s)
}

fn weighted(values: &[(f64, f64)]) -> Option<f64> {
    let wsum: f64 = values.iter().map(|(w, _)| w).sum();
    if wsum <= 0.0 {
        return None;
    }
    Some(values.iter().map(|(w, v)| w * v).sum::<f64>() / wsum)
}

/// Penalty product times the weighted mean of the averaged metrics.
pub fn pdms_aggregate(s: &SubScores, cfg: &MetricConfig) -> Result<f64> {
    let mut pen = 1.0;
    for m in &cfg.pdms_penalties {
        pen *= s.get(*m)?;
    }
    let avg = cfg
        .pdms_weights
        .iter()
        .map(|(m, w)| Ok((*w, s.get(*m)?)))
        .collect::<Result<Vec<_>>>()?;
    Ok(pen * weighted(&avg).unwrap_or(0.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub value: f64,
    /// Metrics neutralised or dropped because the human reference fails them.
    pub filtered: Vec<Metric>,
    /// Effective weights after filtering.
    pub weights: BTreeMap<Metric, f64>,
    pub diagnostic: Option<String>,
}

/// Human-filtered aggregate: metrics the reference fails are neutral
/// penalties or are dropped from the average.
pub fn epdms_aggregate(agent: &SubScores, human: &SubScores, cfg: &MetricConfig) -> Result<Aggregate> {
    let mut filtered = Vec::new();
    let mut pen = 1.0;
    for m in &cfg.epdms_penalties {
        let a = agent.get(*m)?;
        if human.get(*m)? == 1.0 {
            pen *= a;
        } else {
            filtered.push(*m);
        }
    }
    let mut terms = Vec::new();
    let mut weights = BTreeMap::new();
    for (m, w) in &cfg.epdms_weights {
        let a = agent.get(*m)?;
        if human.get(*m)? == 1.0 {
            terms.push((*w, a));
            weights.insert(*m, *w);
        } else {
            filtered.push(*m);
        }
    }
    let (value, diagnostic) = match weighted(&terms) {
        Some(avg) => (pen * avg, None),
        None => (0.0, Some("every averaged metric was filtered by the human reference".to_string())),
    };
    Ok(Aggregate {
        value,
        filtered,
        weights,
        diagnostic,
    })
}

/// Everything scored for one plan in one scene.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub scores: SubScores,
    pub pdms: f64,
    pub epdms: Aggregate,
}

/// Score `traj` with the scene's ground truth as the human reference.
pub fn evaluate(traj: &Trajectory, scene: &Scene, cfg: &MetricConfig) -> Result<ScoreReport> {
    let scores = score_scene(traj, scene, cfg)?;
    let human = score_scene(&scene.ego_gt, scene, cfg)?;
    Ok(ScoreReport {
        pdms: pdms_aggregate(&scores, cfg)?,
        epdms: epdms_aggregate(&scores, &human, cfg)?,
        scores,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn subs(v: &[(Metric, f64)]) -> SubScores {
        v.iter().copied().collect()
    }

    #[test]
    fn pdms_cases() {
        use Metric::*;
        let cfg = MetricConfig::default();
        let ones = subs(&[(Nc, 1.0), (Dac, 1.0), (Ep, 1.0), (Ttc, 1.0), (Comfort, 1.0)]);
        assert_eq!(pdms_aggregate(&ones, &cfg).unwrap(), 1.0);
        let mut s = ones.clone();
        s.set(Nc, 0.0);
        assert_eq!(pdms_aggregate(&s, &cfg).unwrap(), 0.0);
        let mut s = ones.clone();
        s.set(Ep, 0.8);
        assert!((pdms_aggregate(&s, &cfg).unwrap() - 11.0 / 12.0).abs() < 1e-12);
        s.values.remove(&Ttc);
        assert!(matches!(pdms_aggregate(&s, &cfg), Err(Error::Contract(_))));
    }

    #[test]
    fn config_rejects_overlap() {
        let mut cfg = MetricConfig::default();
        cfg.pdms_weights.insert(Metric::Nc, 1.0);
        assert!(cfg.validate().is_err());
        assert!(MetricConfig::default().validate().is_ok());
    }
}
