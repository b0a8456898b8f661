//! RF channel wiring and quasi-static switching between shuttling modes.
//!
//! A [`ChannelMap`] wires every RF group to one of at most four channels.
//! Mode switching keeps the wiring and ramps channel amplitudes linearly.

use std::collections::{BTreeMap, BTreeSet};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::field::{build_basis, BasisEvaluator, DriveConfig, VoltageAssignment};
use crate::layout::{symmetry_ties, Layout, TieMap};
use crate::optimize::{evaluate, minimize_bounded, objective, OptimizationResult, OptimizationSpec, OptimizeError};
use crate::pseudo::{metrics, PathMode};

/// Channels available on the drive electronics.
pub const MAX_CHANNELS: usize = 4;
/// Amplitudes closer than this share a channel, volts.
pub const MERGE_TOL_V: f64 = 0.01;

#[derive(Debug, Error)]
pub enum ProtocolError {
    #[error("{needed} channels needed, only {MAX_CHANNELS} available; classes without a channel: {classes:?}")]
    Capacity { needed: usize, classes: Vec<String> },
    #[error("assignment does not respect the tie classes: {0}")]
    Ties(String),
    #[error("channel maps are wired differently: {0}")]
    WiringMismatch(String),
    #[error("invalid switch plan: {0}")]
    Plan(String),
    #[error(transparent)]
    Optimize(#[from] OptimizeError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelMap {
    pub mode: PathMode,
    /// Channel index (1-based) → amplitude, volts.
    pub channels: BTreeMap<u8, f64>,
    /// Group label → channel index.
    pub wiring: BTreeMap<String, u8>,
}

impl ChannelMap {
    pub fn channel_count(&self) -> usize {
        self.channels.len()
    }

    /// Per-group amplitudes.
    pub fn expand(&self, drive: DriveConfig) -> VoltageAssignment {
        VoltageAssignment::new(
            self.wiring.iter().map(|(g, ch)| (g.clone(), self.channels[ch])).collect(),
            drive,
        )
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("channel map serialises")
    }
}

/// Greedily merges tie classes of equal amplitude (within [`MERGE_TOL_V`]) into channels.
pub fn channel_assignment(v: &VoltageAssignment, ties: &TieMap, mode: PathMode) -> Result<ChannelMap, ProtocolError> {
    let mut channels: Vec<f64> = Vec::new();
    let mut wiring = BTreeMap::new();
    let mut overflow = Vec::new();
    for class in &ties.classes {
        let mut amps = class.iter().map(|g| {
            v.amplitudes
                .get(g)
                .copied()
                .ok_or_else(|| ProtocolError::Ties(format!("group {g} has no amplitude")))
        });
        let a = amps.next().expect("tie classes are non-empty")?;
        for b in amps {
            if b? != a {
                return Err(ProtocolError::Ties(format!("class {class:?} carries several amplitudes")));
            }
        }
        let ch = match channels.iter().position(|&c| (c - a).abs() <= MERGE_TOL_V) {
            Some(i) => i,
            None => {
                channels.push(a);
                channels.len() - 1
            }
        };
        if ch >= MAX_CHANNELS {
            overflow.push(class[0].clone());
        }
        for g in class {
            wiring.insert(g.clone(), ch as u8 + 1);
        }
    }
    if !overflow.is_empty() {
        return Err(ProtocolError::Capacity {
            needed: channels.len(),
            classes: overflow,
        });
    }
    if let Some(g) = v.amplitudes.keys().find(|g| !wiring.contains_key(*g)) {
        return Err(ProtocolError::Ties(format!("group {g} is not in any tie class")));
    }
    Ok(ChannelMap {
        mode,
        channels: channels.iter().enumerate().map(|(i, a)| (i as u8 + 1, *a)).collect(),
        wiring,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SwitchStep {
    pub index: usize,
    /// Seconds from the start of the switch.
    pub t_offset: f64,
    pub channels: BTreeMap<u8, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SwitchPlan {
    pub wiring: BTreeMap<String, u8>,
    pub duration: f64,
    pub steps: Vec<SwitchStep>,
}

impl SwitchPlan {
    pub fn step_count(&self) -> usize {
        self.steps.len()
    }

    pub fn assignment_at(&self, step: usize, drive: DriveConfig) -> VoltageAssignment {
        let ch = &self.steps[step].channels;
        VoltageAssignment::new(self.wiring.iter().map(|(g, c)| (g.clone(), ch[c])).collect(), drive)
    }

    /// CSV `step_index,t_offset,ch1_V,ch2_V,ch3_V,ch4_V`; unused channels are left empty.
    pub fn write_csv<W: std::io::Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "step_index,t_offset,ch1_V,ch2_V,ch3_V,ch4_V")?;
        for s in &self.steps {
            write!(out, "{},{}", s.index, s.t_offset)?;
            for ch in 1..=MAX_CHANNELS as u8 {
                match s.channels.get(&ch) {
                    Some(a) => write!(out, ",{a}")?,
                    None => write!(out, ",")?,
                }
            }
            writeln!(out)?;
        }
        Ok(())
    }
}

/// Linear per-channel ramp from `from` to `to` over `step_count` steps.
pub fn switch_schedule(from: &ChannelMap, to: &ChannelMap, duration: f64, step_count: usize) -> Result<SwitchPlan, ProtocolError> {
    if step_count < 2 {
        return Err(ProtocolError::Plan(format!("need at least 2 steps, got {step_count}")));
    }
    if !(duration >= 0.0 && duration.is_finite()) {
        return Err(ProtocolError::Plan(format!("duration must be finite and ≥ 0, got {duration}")));
    }
    if from.wiring != to.wiring {
        let a: BTreeSet<_> = from.wiring.iter().collect();
        let b: BTreeSet<_> = to.wiring.iter().collect();
        let first = a.symmetric_difference(&b).next().map(|(g, _)| g.as_str()).unwrap_or("?");
        return Err(ProtocolError::WiringMismatch(format!("group {first} differs")));
    }
    if from.channels.keys().ne(to.channels.keys()) {
        return Err(ProtocolError::WiringMismatch("channel sets differ".into()));
    }
    let last = step_count - 1;
    let steps = (0..step_count)
        .map(|k| {
            let t = k as f64 / last as f64;
            let channels = from
                .channels
                .iter()
                .map(|(ch, &a)| {
                    let b = to.channels[ch];
                    let v = if k == last { b } else { (a + (b - a) * t).clamp(a.min(b), a.max(b)) };
                    (*ch, v)
                })
                .collect();
            SwitchStep {
                index: k,
                t_offset: duration * t,
                channels,
            }
        })
        .collect();
    Ok(SwitchPlan {
        wiring: from.wiring.clone(),
        duration,
        steps,
    })
}

/// Best channel levels for a fixed wiring; channels in `pinned` keep their value.
pub struct Leveling {
    pub levels: BTreeMap<u8, f64>,
    pub objective: f64,
    pub history: Vec<f64>,
}

/// Optimises the free channel levels of `wiring` for `spec.mode`.
pub fn optimize_levels(
    layout: &Layout,
    basis: &BasisEvaluator,
    wiring: &BTreeMap<String, u8>,
    start: &BTreeMap<u8, f64>,
    pinned: &BTreeSet<u8>,
    spec: &OptimizationSpec,
) -> Leveling {
    let chans: Vec<u8> = start.keys().copied().collect();
    let x0: Vec<f64> = chans.iter().map(|c| start[c]).collect();
    let lower: Vec<f64> = chans
        .iter()
        .map(|c| if pinned.contains(c) { start[c] } else { spec.bounds[0] })
        .collect();
    let upper: Vec<f64> = chans
        .iter()
        .map(|c| if pinned.contains(c) { start[c] } else { spec.bounds[1] })
        .collect();
    let mut f = |x: &[f64]| {
        let levels: BTreeMap<u8, f64> = chans.iter().copied().zip(x.iter().copied()).collect();
        level_objective(layout, basis, wiring, &levels, spec)
    };
    let m = minimize_bounded(&mut f, &x0, &lower, &upper, &spec.search, spec.seed);
    Leveling {
        levels: chans.iter().copied().zip(m.x).collect(),
        objective: m.f,
        history: m.history,
    }
}

fn level_objective(
    layout: &Layout,
    basis: &BasisEvaluator,
    wiring: &BTreeMap<String, u8>,
    levels: &BTreeMap<u8, f64>,
    spec: &OptimizationSpec,
) -> f64 {
    let v = VoltageAssignment::new(wiring.iter().map(|(g, c)| (g.clone(), levels[c])).collect(), spec.drive);
    match evaluate(basis, layout, &v, &spec.ion, spec.mode, &spec.trace) {
        Ok(t) if t.omitted == 0 => objective(&t, spec.lambda).unwrap_or(f64::INFINITY),
        _ => f64::INFINITY,
    }
}

/// A voltage result squeezed onto at most [`MAX_CHANNELS`] channels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Compressed {
    pub map: ChannelMap,
    pub result: OptimizationResult,
}

fn is_bulk(g: &str) -> bool {
    g.starts_with("BULK")
}

/// Re-optimises a voltage result under the four-channel limit.
///
/// Bulk rails stay on a channel pinned at the base amplitude. Neighbouring
/// amplitude levels are merged, cheapest first, with the free levels
/// re-optimised after each merge; then single classes are moved between
/// channels while that lowers the objective.
pub fn compress_to_channels(
    layout: &Layout,
    result: &OptimizationResult,
    spec: &OptimizationSpec,
) -> Result<Compressed, ProtocolError> {
    let started = Instant::now();
    let basis = build_basis(layout).map_err(OptimizeError::from)?;
    let ties = spec.ties.clone().unwrap_or_else(|| symmetry_ties(layout, spec.mode.into()));
    let amp = |class: &[String]| result.best_assignment.amplitudes.get(&class[0]).copied();
    let mut class_amp = Vec::new();
    for c in &ties.classes {
        class_amp.push(amp(c).ok_or_else(|| ProtocolError::Ties(format!("group {} has no amplitude", c[0])))?);
    }
    let free: Vec<usize> = (0..ties.classes.len())
        .filter(|&i| !ties.classes[i].iter().any(|g| is_bulk(g)))
        .collect();
    let base = spec.base_amplitude;

    // Channel 1 carries the base amplitude; every other distinct amplitude starts on its own channel.
    let mut class_ch = vec![1u8; ties.classes.len()];
    let mut levels: BTreeMap<u8, f64> = [(1, base)].into_iter().collect();
    for &i in &free {
        let a = class_amp[i];
        let ch = match levels.iter().find(|(_, &l)| (l - a).abs() <= MERGE_TOL_V) {
            Some((&c, _)) => c,
            None => {
                let c = levels.keys().max().copied().unwrap_or(0) + 1;
                levels.insert(c, a);
                c
            }
        };
        class_ch[i] = ch;
    }
    let pinned: BTreeSet<u8> = [1].into_iter().collect();
    let wiring_of = |class_ch: &[u8]| -> BTreeMap<String, u8> {
        ties.classes
            .iter()
            .zip(class_ch)
            .flat_map(|(c, ch)| c.iter().map(move |g| (g.clone(), *ch)))
            .collect()
    };

    let mut history = Vec::new();
    let push_history = |h: &[f64], history: &mut Vec<f64>| {
        let mut best = history.last().copied().unwrap_or(f64::INFINITY);
        for &v in h {
            best = best.min(v);
            history.push(best);
        }
    };

    // Agglomerative merging of neighbouring levels, cheapest merge first.
    let mut best = level_objective(layout, &basis, &wiring_of(&class_ch), &levels, spec);
    push_history(&[best], &mut history);
    while levels.len() > MAX_CHANNELS {
        let mut order: Vec<(u8, f64)> = levels.iter().map(|(c, l)| (*c, *l)).collect();
        order.sort_by(|a, b| a.1.total_cmp(&b.1));
        let mut choice: Option<(f64, u8, u8, f64)> = None;
        for w in order.windows(2) {
            let ((a, la), (b, lb)) = (w[0], w[1]);
            let (keep, drop, candidates) = if pinned.contains(&a) {
                (a, b, vec![la])
            } else if pinned.contains(&b) {
                (b, a, vec![lb])
            } else {
                (a, b, vec![la, lb, 0.5 * (la + lb)])
            };
            let trial_ch: Vec<u8> = class_ch.iter().map(|&c| if c == drop { keep } else { c }).collect();
            let wiring = wiring_of(&trial_ch);
            for level in candidates {
                let mut trial = levels.clone();
                trial.remove(&drop);
                trial.insert(keep, level);
                let f = level_objective(layout, &basis, &wiring, &trial, spec);
                push_history(&[f], &mut history);
                if choice.map_or(true, |c| f < c.0) {
                    choice = Some((f, keep, drop, level));
                }
            }
        }
        let (f, keep, drop, level) = choice.expect("at least two channels to merge");
        for c in class_ch.iter_mut() {
            if *c == drop {
                *c = keep;
            }
        }
        levels.remove(&drop);
        levels.insert(keep, level);
        best = f;
        let lev = optimize_levels(layout, &basis, &wiring_of(&class_ch), &levels, &pinned, spec);
        push_history(&lev.history, &mut history);
        if lev.objective <= best {
            best = lev.objective;
            levels = lev.levels;
        }
    }
    for _pass in 0..3 {
        let mut moved = false;
        for &i in &free {
            let current = class_ch[i];
            let mut choice = None;
            for &c in levels.keys() {
                if c == current {
                    continue;
                }
                class_ch[i] = c;
                let f = level_objective(layout, &basis, &wiring_of(&class_ch), &levels, spec);
                push_history(&[f], &mut history);
                if f < best {
                    best = f;
                    choice = Some(c);
                }
            }
            class_ch[i] = choice.unwrap_or(current);
            moved |= choice.is_some();
        }
        if !moved {
            break;
        }
        let lev = optimize_levels(layout, &basis, &wiring_of(&class_ch), &levels, &pinned, spec);
        push_history(&lev.history, &mut history);
        if lev.objective <= best {
            best = lev.objective;
            levels = lev.levels;
        }
    }

    let wiring = wiring_of(&class_ch);
    let used: BTreeSet<u8> = wiring.values().copied().collect();
    levels.retain(|c, _| used.contains(c));
    let v = VoltageAssignment::new(wiring.iter().map(|(g, c)| (g.clone(), levels[c])).collect(), spec.drive);
    let trace = evaluate(&basis, layout, &v, &spec.ion, spec.mode, &spec.trace).map_err(OptimizeError::from)?;
    let final_metrics = metrics(&trace).map_err(OptimizeError::from)?;
    let map = channel_assignment(&v, &ties, spec.mode)?;
    let objective = best;
    let compressed = OptimizationResult {
        mode: spec.mode,
        variant: layout.variant,
        layout_hash: layout.hash(),
        class_amplitudes: ties.classes.iter().map(|c| (c[0].clone(), v.amplitudes[&c[0]])).collect(),
        best_assignment: v,
        geometry: result.geometry,
        start_objective: history[0],
        objective,
        final_metrics,
        evaluations: history.len(),
        no_improvement: !(objective < history[0]),
        history,
        wall_time_s: started.elapsed().as_secs_f64(),
        seed: spec.seed,
    };
    Ok(Compressed { map, result: compressed })
}

/// Channel levels for `mode` on an existing wiring, e.g. the target of a mode switch.
pub fn relevel_for_mode(
    layout: &Layout,
    map: &ChannelMap,
    spec: &OptimizationSpec,
    pinned: &BTreeSet<u8>,
) -> Result<ChannelMap, ProtocolError> {
    let basis = build_basis(layout).map_err(OptimizeError::from)?;
    let lev = optimize_levels(layout, &basis, &map.wiring, &map.channels, pinned, spec);
    Ok(ChannelMap {
        mode: spec.mode,
        channels: lev.levels,
        wiring: map.wiring.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layout::{build_x_junction, LayoutDims, TieMode};

    fn ties() -> (Layout, TieMap) {
        let l = build_x_junction(LayoutDims::default()).unwrap();
        let t = symmetry_ties(&l, TieMode::Corner);
        (l, t)
    }

    #[test]
    fn uniform_is_one_channel() {
        let (l, t) = ties();
        let v = VoltageAssignment::uniform(&l.rf_groups(), 100.0, DriveConfig::default());
        let m = channel_assignment(&v, &t, PathMode::Corner).unwrap();
        assert_eq!(m.channel_count(), 1);
        assert_eq!(m.expand(v.drive), v);
    }

    #[test]
    fn five_levels_overflow() {
        let (l, t) = ties();
        let vals: Vec<f64> = (0..t.classes.len()).map(|i| 60.0 + 10.0 * (i % 5) as f64).collect();
        let v = VoltageAssignment::new(t.expand(&vals), DriveConfig::default());
        match channel_assignment(&v, &t, PathMode::Corner) {
            Err(ProtocolError::Capacity { needed, classes }) => {
                assert_eq!(needed, 5);
                assert!(!classes.is_empty());
            }
            other => panic!("expected capacity error, got {other:?}"),
        }
        let _ = l;
    }

    #[test]
    fn near_equal_amplitudes_merge() {
        let (_, t) = ties();
        let vals: Vec<f64> = (0..t.classes.len()).map(|i| 100.0 + 0.004 * (i % 2) as f64).collect();
        let v = VoltageAssignment::new(t.expand(&vals), DriveConfig::default());
        assert_eq!(channel_assignment(&v, &t, PathMode::Corner).unwrap().channel_count(), 1);
    }

    #[test]
    fn broken_ties_rejected() {
        let (l, t) = ties();
        let mut v = VoltageAssignment::uniform(&l.rf_groups(), 100.0, DriveConfig::default());
        v.amplitudes.insert("RF1A".into(), 90.0);
        assert!(matches!(channel_assignment(&v, &t, PathMode::Corner), Err(ProtocolError::Ties(_))));
    }

    fn map(levels: &[f64]) -> ChannelMap {
        ChannelMap {
            mode: PathMode::Corner,
            channels: levels.iter().enumerate().map(|(i, v)| (i as u8 + 1, *v)).collect(),
            wiring: [("a", 1), ("b", 2), ("c", levels.len() as u8)]
                .into_iter()
                .map(|(g, c)| (g.to_string(), c))
                .collect(),
        }
    }

    #[test]
    fn constant_plan() {
        let m = map(&[100.0, 80.0, 120.0]);
        let p = switch_schedule(&m, &m, 1e-3, 10).unwrap();
        assert_eq!(p.step_count(), 10);
        assert!(p.steps.iter().all(|s| s.channels == m.channels));
    }

    #[test]
    fn midpoint_and_endpoints() {
        let a = map(&[100.0, 80.0, 120.0]);
        let b = map(&[100.0, 40.0, 190.0]);
        let p = switch_schedule(&a, &b, 2.0, 3).unwrap();
        assert_eq!(p.steps[0].channels, a.channels);
        assert_eq!(p.steps[2].channels, b.channels);
        assert_eq!(p.steps[1].channels[&2], 60.0);
        assert_eq!(p.steps[1].channels[&3], 155.0);
        assert_eq!(p.steps[1].t_offset, 1.0);
    }

    #[test]
    fn plan_checks() {
        let a = map(&[100.0, 80.0, 120.0]);
        let mut b = a.clone();
        b.wiring.insert("c".into(), 1);
        assert!(matches!(switch_schedule(&a, &b, 1.0, 5), Err(ProtocolError::WiringMismatch(_))));
        assert!(matches!(switch_schedule(&a, &a, 1.0, 1), Err(ProtocolError::Plan(_))));
    }

    #[test]
    fn plan_csv_header() {
        let a = map(&[100.0, 80.0]);
        let p = switch_schedule(&a, &a, 1.0, 2).unwrap();
        let mut buf = Vec::new();
        p.write_csv(&mut buf).unwrap();
        let s = String::from_utf8(buf).unwrap();
        let mut lines = s.lines();
        assert_eq!(lines.next(), Some("step_index,t_offset,ch1_V,ch2_V,ch3_V,ch4_V"));
        assert_eq!(lines.next(), Some("0,0,100,80,,"));
    }
}
