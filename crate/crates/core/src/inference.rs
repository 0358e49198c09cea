//! Stochastic EM estimation of ridges and mixture weights.
//!
//! Each iteration draws ridge candidates from the Markov prior around the
//! current ridges, weights them by likelihood, scores every bin by combining
//! the per-component likelihood gain with the candidates' local prior
//! conditionals, extracts ridges by sequential peak picking and tracking, and
//! refits the weights by projected Newton ascent.

use std::ops::RangeInclusive;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ObservationModel, PriorConfig, PriorKind, RidgeMatrix, WeightMatrix};
use crate::par::{derive_seed, map_range};
use crate::tf::{Spectrogram, StftConfig};

/// How ridge candidates are drawn from the prior.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SamplerKind {
    /// Exact Gibbs sampling, one systematic scan per candidate.
    #[default]
    Gibbs,
    /// Deterministic conditional modes, keeping the current bin on ties.
    Icm,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NewtonConfig {
    pub max_iter: usize,
    pub grad_tol: f64,
    /// Sufficient-increase constant of the backtracking line search.
    pub armijo: f64,
}

impl Default for NewtonConfig {
    fn default() -> Self {
        Self {
            max_iter: 100,
            grad_tol: 1e-9,
            armijo: 1e-4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SemConfig {
    pub n_components: usize,
    pub prior: PriorConfig,
    /// Retained candidates per iteration.
    pub n_samples: usize,
    pub max_iter: usize,
    /// Stop once the objective changes by less than this fraction.
    pub rel_tol: f64,
    pub seed: u64,
    pub sampler: SamplerKind,
    pub newton: NewtonConfig,
    /// Starting weight for every component; `1 / (2K)` when absent.
    pub initial_weight: Option<f64>,
    /// Coordinate-ascent sweeps on the exact posterior after each ridge
    /// extraction; zero disables the refinement.
    pub refine_sweeps: usize,
}

impl Default for SemConfig {
    fn default() -> Self {
        Self {
            n_components: 2,
            prior: PriorConfig::tv(1e-3),
            n_samples: 30,
            max_iter: 50,
            rel_tol: 1e-4,
            seed: 0,
            sampler: SamplerKind::Gibbs,
            newton: NewtonConfig::default(),
            initial_weight: None,
            refine_sweeps: 50,
        }
    }
}

impl SemConfig {
    pub fn new(n_components: usize, prior: PriorConfig) -> Self {
        Self {
            n_components,
            prior,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.prior.validate()?;
        if self.n_components == 0 {
            return Err(Error::InvalidConfig("need at least one component".into()));
        }
        if self.n_samples == 0 || self.max_iter == 0 {
            return Err(Error::InvalidConfig(
                "sample count and iteration limit must be positive".into(),
            ));
        }
        if self.rel_tol.is_nan() || self.rel_tol < 0.0 {
            return Err(Error::InvalidConfig(format!("bad tolerance {}", self.rel_tol)));
        }
        if let Some(w) = self.initial_weight {
            if !(w > 0.0 && w * self.n_components as f64 <= 1.0) {
                return Err(Error::InvalidConfig(format!(
                    "initial weight {w} is infeasible for {} components",
                    self.n_components
                )));
            }
        }
        Ok(())
    }

    pub fn starting_weight(&self) -> f64 {
        self.initial_weight.unwrap_or(1.0 / (2.0 * self.n_components as f64))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    /// `total_loglik + log_prior` after the weight update.
    pub objective: f64,
    pub total_loglik: f64,
    pub log_prior: f64,
    /// Effective number of candidates, `1 / Σ ω_i²`.
    pub effective_samples: f64,
    /// True when every candidate had zero likelihood and the current ridges
    /// stood in for them.
    pub degenerate: bool,
    pub newton_iterations: usize,
    /// Frames whose Newton system was singular at least once.
    pub newton_fallbacks: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SemTrace {
    pub iterations: Vec<IterationRecord>,
    pub converged: bool,
    /// Iteration whose estimate is returned, the one with the best objective.
    pub best_iteration: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EstimationResult {
    pub ridges: RidgeMatrix,
    pub weights: WeightMatrix,
    pub log_posterior: f64,
    pub trace: SemTrace,
}

impl EstimationResult {
    /// Per-frame noise share `1 - Σ_k w_n^k`, which is `M b_n` in amplitude
    /// units.
    pub fn noise_mass(&self) -> Vec<f64> {
        (0..self.weights.n_frames())
            .map(|n| self.weights.noise_mass(n))
            .collect()
    }
}

/// Draws `n_samples` ridge matrices from the prior, each by one sweep started
/// at `start`. Candidate `i` uses its own stream derived from `seed`.
pub fn sample_ridge_candidates(
    prior: &PriorConfig,
    start: &RidgeMatrix,
    admissible: RangeInclusive<usize>,
    n_samples: usize,
    sampler: SamplerKind,
    seed: u64,
) -> Result<Vec<RidgeMatrix>> {
    prior.validate()?;
    if admissible.is_empty() {
        return Err(Error::InvalidConfig("empty admissible range".into()));
    }
    if !start.is_within(&admissible) {
        return Err(Error::InvalidRidge(format!(
            "starting ridges leave the admissible range {admissible:?}"
        )));
    }
    Ok(map_range(n_samples, |i| {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[i as u64]));
        let mut ridges = start.clone();
        sweep(prior, &mut ridges, &admissible, sampler, &mut rng);
        ridges
    }))
}

fn sweep(
    prior: &PriorConfig,
    ridges: &mut RidgeMatrix,
    admissible: &RangeInclusive<usize>,
    sampler: SamplerKind,
    rng: &mut ChaCha8Rng,
) {
    let lo = *admissible.start();
    let mut energies = Vec::new();
    let mut probs = Vec::new();
    for k in 0..ridges.n_components() {
        let row = ridges.row_mut(k);
        for n in 0..row.len() {
            prior.site_energies(row, n, admissible.clone(), &mut energies);
            row[n] = match sampler {
                SamplerKind::Gibbs => {
                    boltzmann(&energies, &mut probs);
                    lo + draw(&probs, rng.gen::<f64>())
                }
                SamplerKind::Icm => {
                    let best = energies.iter().copied().fold(f64::INFINITY, f64::min);
                    let current = row[n] - lo;
                    if energies[current] <= best {
                        row[n]
                    } else {
                        lo + energies.iter().position(|&e| e <= best).unwrap_or(current)
                    }
                }
            };
        }
    }
}

/// Normalized `exp(-E)`.
fn boltzmann(energies: &[f64], out: &mut Vec<f64>) {
    let min = energies.iter().copied().fold(f64::INFINITY, f64::min);
    out.clear();
    out.extend(energies.iter().map(|e| (min - e).exp()));
    let total: f64 = out.iter().sum();
    out.iter_mut().for_each(|p| *p /= total);
}

fn draw(probs: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(0)
}

/// Normalized importance weights `ω_i ∝ exp(total_loglik(S, W, M̂_i))`.
pub fn approx_ridge_posterior(
    model: &ObservationModel,
    spectrogram: &Spectrogram,
    weights: &WeightMatrix,
    samples: &[RidgeMatrix],
) -> Result<Vec<f64>> {
    let sbar = spectrogram.normalized_columns()?;
    for s in samples {
        model.total_loglik(&sbar, weights, s)?;
    }
    posterior_weights(model, &sbar, weights, samples)
}

fn posterior_weights(
    model: &ObservationModel,
    sbar: &Spectrogram,
    weights: &WeightMatrix,
    samples: &[RidgeMatrix],
) -> Result<Vec<f64>> {
    let logliks = map_range(samples.len(), |i| {
        model.total_loglik_normalized(sbar, weights, &samples[i])
    });
    let max = logliks
        .iter()
        .copied()
        .filter(|l| l.is_finite())
        .fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return Err(Error::DegeneratePosterior);
    }
    let mut omega: Vec<f64> = logliks
        .iter()
        .map(|&l| if l.is_finite() { (l - max).exp() } else { 0.0 })
        .collect();
    let total: f64 = omega.iter().sum();
    omega.iter_mut().for_each(|w| *w /= total);
    Ok(omega)
}

/// Picks `k` bins from one frame's scores: the best admissible bin, then the
/// best outside `±discard` of every earlier pick, and so on. Ties go to the
/// lower bin. Picks are returned in selection order.
pub fn sequential_mmap(
    scores: &[f64],
    k: usize,
    discard: usize,
    admissible: RangeInclusive<usize>,
) -> Result<Vec<usize>> {
    check_room(k, discard, &admissible)?;
    if *admissible.end() >= scores.len() {
        return Err(Error::Dimension {
            what: "score length",
            expected: admissible.end() + 1,
            actual: scores.len(),
        });
    }
    let mut picks: Vec<usize> = Vec::with_capacity(k);
    for _ in 0..k {
        let best = admissible
            .clone()
            .filter(|&b| picks.iter().all(|&p| p.abs_diff(b) > discard))
            .fold(None, |best: Option<usize>, b| match best {
                Some(a) if scores[a].total_cmp(&scores[b]).is_ge() => Some(a),
                _ => Some(b),
            });
        match best {
            Some(b) => picks.push(b),
            None => unreachable!("room was checked"),
        }
    }
    Ok(picks)
}

fn check_room(k: usize, discard: usize, admissible: &RangeInclusive<usize>) -> Result<()> {
    let count = if admissible.is_empty() {
        0
    } else {
        admissible.end() - admissible.start() + 1
    };
    if k == 0 || count < (k - 1) * (2 * discard + 1) + 1 {
        return Err(Error::Overcrowded {
            k,
            d: discard,
            admissible: count,
        });
    }
    Ok(())
}

/// Links unlabeled per-frame picks into `K` continuous ridges.
///
/// Each ridge is predicted by a line fitted to its last `4d` confidently
/// tracked points. Picks are assigned to ridges by the permutation with the
/// smallest total deviation from the predictions. A ridge accepts its pick if
/// the deviation is within a gate that starts at `d` and widens by one bin per
/// coasted frame up to `3d`; otherwise it coasts on its prediction. Only picks
/// within `ceil(d / 3)` of the prediction extend the fitted history. After
/// `4d` frames without one the line is refitted to the ridge's own recent
/// bins. After `4d` frames with no pick inside the gate the ridge restarts,
/// but only once its last `d` rejected picks fall within `ceil(d / 3)` of a
/// common line.
/// A ridge whose prediction lies within `d` of another ridge's confident pick
/// is hidden under it and follows its prediction without aging.
pub fn track_ridges(
    picks: &[Vec<usize>],
    n_components: usize,
    discard: usize,
    admissible: RangeInclusive<usize>,
) -> Result<RidgeMatrix> {
    let n_frames = picks.len();
    if let Some(bad) = picks.iter().find(|p| p.len() != n_components) {
        return Err(Error::Dimension {
            what: "picks per frame",
            expected: n_components,
            actual: bad.len(),
        });
    }
    if admissible.is_empty() {
        return Err(Error::InvalidConfig("empty admissible range".into()));
    }
    let mut ridges = RidgeMatrix::constant(n_components, n_frames, *admissible.start());
    if n_frames == 0 {
        return Ok(ridges);
    }
    let d = discard.max(1) as f64;
    let sure = (d / 3.0).ceil();
    let history = 4 * discard.max(1);
    let perms = permutations(n_components);
    let (lo, hi) = (*admissible.start() as f64, *admissible.end() as f64);

    let mut first = picks[0].clone();
    first.sort_unstable();
    let mut confident: Vec<Vec<(f64, f64)>> = first.iter().map(|&b| vec![(0.0, b as f64)]).collect();
    let mut coasting = vec![0usize; n_components];
    let mut missed = vec![0usize; n_components];
    let mut rejected: Vec<Vec<(f64, f64)>> = vec![Vec::new(); n_components];
    let confirm = discard.max(2);
    for (k, &b) in first.iter().enumerate() {
        ridges.set(k, 0, b);
    }

    for (n, frame) in picks.iter().enumerate().skip(1) {
        let t = n as f64;
        let predicted: Vec<f64> = confident
            .iter()
            .map(|pts| extrapolate(&pts[pts.len().saturating_sub(history)..], t).clamp(lo, hi))
            .collect();
        let assignment = perms
            .iter()
            .map(|perm| {
                let cost: f64 = perm
                    .iter()
                    .enumerate()
                    .map(|(k, &j)| (frame[j] as f64 - predicted[k]).abs())
                    .sum();
                (cost, perm)
            })
            .fold(None, |best: Option<(f64, &Vec<usize>)>, cand| match best {
                Some(b) if b.0 <= cand.0 => Some(b),
                _ => Some(cand),
            })
            .map(|(_, p)| p)
            .expect("at least one permutation");
        for k in 0..n_components {
            let pick = frame[assignment[k]];
            let deviation = (pick as f64 - predicted[k]).abs();
            let gate = (d + coasting[k] as f64).min(3.0 * d);
            let shadowed = (0..n_components).any(|j| {
                j != k
                    && (frame[assignment[j]] as f64 - predicted[j]).abs() <= sure
                    && (frame[assignment[j]] as f64 - predicted[k]).abs() <= d
            });
            if deviation > sure && shadowed {
                // Merged with another ridge: its own pick is noise, so hold
                // the line without counting the frame as lost.
                ridges.set(k, n, predicted[k].round() as usize);
            } else if deviation <= gate {
                ridges.set(k, n, pick);
                missed[k] = 0;
                rejected[k].clear();
                if deviation <= sure {
                    confident[k].push((t, pick as f64));
                    coasting[k] = 0;
                } else {
                    coasting[k] += 1;
                    if coasting[k] >= history {
                        // Stale line: refit it to where the ridge has been.
                        confident[k] = (n + 1 - history..=n)
                            .map(|i| (i as f64, ridges.get(k, i) as f64))
                            .collect();
                        coasting[k] = 0;
                    }
                }
            } else {
                rejected[k].push((t, pick as f64));
                let recent = &rejected[k][rejected[k].len().saturating_sub(confirm)..];
                if missed[k] >= history && recent.len() == confirm && fits_line(recent, sure) {
                    // Lost for too long and the rejected picks agree on a
                    // new line: restart on it.
                    ridges.set(k, n, pick);
                    confident[k] = recent.to_vec();
                    coasting[k] = 0;
                    missed[k] = 0;
                    rejected[k].clear();
                } else {
                    ridges.set(k, n, predicted[k].round() as usize);
                    coasting[k] += 1;
                    missed[k] += 1;
                }
            }
        }
    }
    Ok(ridges)
}

/// Assigns each frame's picks to the ridges of `reference` by the permutation
/// with the smallest total displacement. A ridge moves to its pick when the
/// pick lies within `gate` bins and keeps its reference bin otherwise.
pub fn follow_reference(picks: &[Vec<usize>], reference: &RidgeMatrix, gate: usize) -> Result<RidgeMatrix> {
    let k = reference.n_components();
    if picks.len() != reference.n_frames() {
        return Err(Error::Dimension {
            what: "frames with picks",
            expected: reference.n_frames(),
            actual: picks.len(),
        });
    }
    if let Some(bad) = picks.iter().find(|p| p.len() != k) {
        return Err(Error::Dimension {
            what: "picks per frame",
            expected: k,
            actual: bad.len(),
        });
    }
    let perms = permutations(k);
    let mut out = reference.clone();
    for (n, frame) in picks.iter().enumerate() {
        let perm = perms
            .iter()
            .min_by_key(|perm| {
                perm.iter()
                    .enumerate()
                    .map(|(c, &j)| frame[j].abs_diff(reference.get(c, n)))
                    .sum::<usize>()
            })
            .expect("at least one permutation");
        for (c, &j) in perm.iter().enumerate() {
            if frame[j].abs_diff(reference.get(c, n)) <= gate {
                out.set(c, n, frame[j]);
            }
        }
    }
    Ok(out)
}

/// Relabels ridges where two of them touch so that each keeps its slope
/// through the contact. The column likelihood is blind to labels and a bounce
/// costs no more total variation than a crossing, so without this step a
/// crossing is as likely to come out as two ridges that meet and turn back.
///
/// A contact is a run of frames where a pair is at most `contact` bins apart.
/// Lines are fitted to both ridges over `window` frames on each side, and the
/// tails from the closest frame on are exchanged, weights included, when that
/// makes the slopes after the contact match the slopes before it better.
/// Returns the number of exchanges.
pub fn untangle_crossings(
    ridges: &mut RidgeMatrix,
    mut weights: Option<&mut WeightMatrix>,
    contact: usize,
    window: usize,
) -> usize {
    let n_frames = ridges.n_frames();
    let min_side = (window / 4).max(2);
    let mut swaps = 0;
    for a in 0..ridges.n_components() {
        for b in a + 1..ridges.n_components() {
            let mut n = 0;
            while n < n_frames {
                if ridges.get(a, n).abs_diff(ridges.get(b, n)) > contact {
                    n += 1;
                    continue;
                }
                let start = n;
                while n < n_frames && ridges.get(a, n).abs_diff(ridges.get(b, n)) <= contact {
                    n += 1;
                }
                let before = start.saturating_sub(window)..start;
                let after = n..(n + window).min(n_frames);
                if before.len() < min_side || after.len() < min_side {
                    continue;
                }
                let slope = |k: usize, r: &std::ops::Range<usize>| {
                    let points: Vec<(f64, f64)> = r.clone().map(|t| (t as f64, ridges.get(k, t) as f64)).collect();
                    line_slope(&points)
                };
                let (a0, b0, a1, b1) = (slope(a, &before), slope(b, &before), slope(a, &after), slope(b, &after));
                let keep = (a0 - a1).powi(2) + (b0 - b1).powi(2);
                let swap = (a0 - b1).powi(2) + (b0 - a1).powi(2);
                if swap >= keep {
                    continue;
                }
                let pivot = (start..n)
                    .min_by_key(|&t| ridges.get(a, t).abs_diff(ridges.get(b, t)))
                    .expect("contact run is not empty");
                for t in pivot..n_frames {
                    let (x, y) = (ridges.get(a, t), ridges.get(b, t));
                    ridges.set(a, t, y);
                    ridges.set(b, t, x);
                }
                if let Some(w) = weights.as_deref_mut() {
                    for row in w.rows_mut().skip(pivot) {
                        row.swap(a, b);
                    }
                }
                swaps += 1;
            }
        }
    }
    swaps
}

/// Whether every point lies within `tolerance` of the least-squares line.
fn fits_line(points: &[(f64, f64)], tolerance: f64) -> bool {
    let slope = line_slope(points);
    let n = points.len() as f64;
    let t_mean = points.iter().map(|p| p.0).sum::<f64>() / n;
    let y_mean = points.iter().map(|p| p.1).sum::<f64>() / n;
    points
        .iter()
        .all(|&(t, y)| (y - y_mean - slope * (t - t_mean)).abs() <= tolerance)
}

fn line_slope(points: &[(f64, f64)]) -> f64 {
    let n = points.len() as f64;
    let mt = points.iter().map(|p| p.0).sum::<f64>() / n;
    let mb = points.iter().map(|p| p.1).sum::<f64>() / n;
    let stt: f64 = points.iter().map(|p| (p.0 - mt).powi(2)).sum();
    let stb: f64 = points.iter().map(|p| (p.0 - mt) * (p.1 - mb)).sum();
    if stt == 0.0 {
        0.0
    } else {
        stb / stt
    }
}

/// Least-squares line through `(t, bin)` points evaluated at `t`.
fn extrapolate(points: &[(f64, f64)], t: f64) -> f64 {
    match points {
        [] => unreachable!("every ridge starts with a point"),
        [(_, b)] => *b,
        _ => {
            let n = points.len() as f64;
            let mt = points.iter().map(|p| p.0).sum::<f64>() / n;
            let mb = points.iter().map(|p| p.1).sum::<f64>() / n;
            let stt: f64 = points.iter().map(|p| (p.0 - mt).powi(2)).sum();
            let stb: f64 = points.iter().map(|p| (p.0 - mt) * (p.1 - mb)).sum();
            if stt == 0.0 {
                mb
            } else {
                mb + stb / stt * (t - mt)
            }
        }
    }
}

pub(crate) fn permutations(k: usize) -> Vec<Vec<usize>> {
    fn go(prefix: &mut Vec<usize>, used: &mut [bool], out: &mut Vec<Vec<usize>>) {
        if prefix.len() == used.len() {
            out.push(prefix.clone());
            return;
        }
        for i in 0..used.len() {
            if !used[i] {
                used[i] = true;
                prefix.push(i);
                go(prefix, used, out);
                prefix.pop();
                used[i] = false;
            }
        }
    }
    let mut out = Vec::new();
    go(&mut Vec::with_capacity(k), &mut vec![false; k], &mut out);
    out
}

/// Peak picking on every frame of an `N x M` score map followed by tracking.
/// Tracking runs forward and backward in time and the linking with the
/// larger total score wins, so a poorly resolved first frame cannot decide
/// the labels on its own.
pub fn extract_ridges(
    scores: &[f64],
    n_bins: usize,
    n_components: usize,
    discard: usize,
    admissible: RangeInclusive<usize>,
) -> Result<RidgeMatrix> {
    check_room(n_components, discard, &admissible)?;
    let n_frames = scores.len() / n_bins.max(1);
    let picks = map_range(n_frames, |n| {
        sequential_mmap(
            &scores[n * n_bins..(n + 1) * n_bins],
            n_components,
            discard,
            admissible.clone(),
        )
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let forward = track_ridges(&picks, n_components, discard, admissible.clone())?;
    let reversed: Vec<Vec<usize>> = picks.iter().rev().cloned().collect();
    let backward = track_ridges(&reversed, n_components, discard, admissible)?;
    let backward = RidgeMatrix::from_rows(
        &backward
            .rows()
            .map(|r| r.iter().rev().copied().collect())
            .collect::<Vec<_>>(),
    )?;
    let total = |r: &RidgeMatrix| -> f64 {
        r.rows()
            .flat_map(|row| row.iter().enumerate().map(|(n, &b)| scores[n * n_bins + b]))
            .sum()
    };
    Ok(if total(&backward) > total(&forward) {
        backward
    } else {
        forward
    })
}

/// Extracts `K` ridges one at a time as the highest-scoring paths through an
/// `N x M` score map that move at most `step` bins per frame. Bins within `d`
/// of an extracted ridge are reset to their frame's median score before the
/// next search, so later ridges may cross earlier ones but not retrace them.
pub fn smooth_paths(
    scores: &[f64],
    n_bins: usize,
    n_components: usize,
    discard: usize,
    step: usize,
    admissible: RangeInclusive<usize>,
) -> Result<RidgeMatrix> {
    check_room(n_components, discard, &admissible)?;
    let n_frames = scores.len() / n_bins.max(1);
    let (lo, hi) = (*admissible.start(), *admissible.end());
    let mut work: Vec<Vec<f64>> = (0..n_frames)
        .map(|n| scores[n * n_bins + lo..=n * n_bins + hi].to_vec())
        .collect();
    let medians: Vec<f64> = work
        .iter()
        .map(|col| {
            let mut sorted = col.clone();
            sorted.sort_by(f64::total_cmp);
            sorted[sorted.len() / 2]
        })
        .collect();
    let mut rows = Vec::with_capacity(n_components);
    for _ in 0..n_components {
        let path = best_capped_path(&work, step);
        for (n, &b) in path.iter().enumerate() {
            let first = b.saturating_sub(discard);
            let last = (b + discard).min(work[n].len() - 1);
            work[n][first..=last].iter_mut().for_each(|v| *v = medians[n]);
        }
        rows.push(path.into_iter().map(|b| b + lo).collect::<Vec<_>>());
    }
    RidgeMatrix::from_rows(&rows)
}

/// Highest total path through `columns` with at most `step` bins of movement
/// between neighbouring frames. Ties go to the lower bin.
fn best_capped_path(columns: &[Vec<f64>], step: usize) -> Vec<usize> {
    let n_frames = columns.len();
    if n_frames == 0 {
        return Vec::new();
    }
    let m = columns[0].len();
    let mut total = columns[0].clone();
    let mut back = vec![vec![0usize; m]; n_frames];
    for n in 1..n_frames {
        let mut next = vec![0.0; m];
        for b in 0..m {
            let from = b.saturating_sub(step);
            let to = (b + step).min(m - 1);
            let mut arg = from;
            for a in from..=to {
                if total[a] > total[arg] {
                    arg = a;
                }
            }
            back[n][b] = arg;
            next[b] = total[arg] + columns[n][b];
        }
        total = next;
    }
    let mut b = argmax(&total);
    let mut path = vec![0; n_frames];
    for n in (0..n_frames).rev() {
        path[n] = b;
        b = back[n][b];
    }
    path
}

#[derive(Clone, Debug, PartialEq)]
pub struct WeightFit {
    pub weights: WeightMatrix,
    /// Largest Newton iteration count over frames.
    pub iterations: usize,
    /// Frames that needed a gradient step because the Hessian was singular.
    pub fallbacks: usize,
}

/// Starting ridges: smooth paths through the likelihood lift at uniform
/// weights, refined under the prior and untangled at crossings.
fn initial_ridges(
    model: &ObservationModel,
    sbar: &Spectrogram,
    weights: &mut WeightMatrix,
    config: &SemConfig,
) -> Result<RidgeMatrix> {
    let discard = model.config().discard_halfwidth();
    let scores = combined_scores(model, sbar, weights, None);
    // No mode sweeps faster than the whole band over the signal's length.
    let step = sbar.n_bins().div_ceil(sbar.n_frames().max(1)).max(1);
    let mut ridges = smooth_paths(
        &scores,
        sbar.n_bins(),
        config.n_components,
        discard,
        step,
        model.admissible(),
    )?;
    refine(
        model,
        sbar,
        weights,
        &mut ridges,
        &config.prior,
        discard,
        config.refine_sweeps,
    );
    untangle_crossings(&mut ridges, Some(weights), 2 * discard, 4 * discard);
    Ok(ridges)
}

/// Maximizes `total_loglik` over `W` for fixed ridges, frame by frame, by
/// damped Newton ascent projected onto `{w ≥ 0, Σ_k w_k ≤ 1}`. The
/// objective never decreases.
pub fn newton_raphson_weights(
    model: &ObservationModel,
    spectrogram: &Spectrogram,
    ridges: &RidgeMatrix,
    init: &WeightMatrix,
    config: &NewtonConfig,
) -> Result<WeightFit> {
    model.total_loglik(spectrogram, init, ridges)?;
    let sbar = spectrogram.normalized_columns()?;
    Ok(fit_weights(model, &sbar, ridges, init, config))
}

fn fit_weights(
    model: &ObservationModel,
    sbar: &Spectrogram,
    ridges: &RidgeMatrix,
    init: &WeightMatrix,
    config: &NewtonConfig,
) -> WeightFit {
    let fits = map_range(sbar.n_frames(), |n| {
        fit_column(model, sbar.column(n), &ridges.column(n), init.row(n), config)
    });
    let mut weights = init.clone();
    for (row, fit) in weights.rows_mut().zip(&fits) {
        row.copy_from_slice(&fit.w);
    }
    WeightFit {
        weights,
        iterations: fits.iter().map(|f| f.iterations).max().unwrap_or(0),
        fallbacks: fits.iter().filter(|f| f.fallback).count(),
    }
}

struct ColumnFit {
    w: Vec<f64>,
    iterations: usize,
    fallback: bool,
}

/// Gradient of the column score with respect to the weights, with the column
/// normalized to sum 1 first.
pub fn column_gradient(model: &ObservationModel, column: &[f64], w: &[f64], bins: &[usize]) -> Result<Vec<f64>> {
    model.column_loglik(column, w, bins)?;
    let total: f64 = column.iter().sum();
    let sbar: Vec<f64> = column.iter().map(|v| v / total).collect();
    Ok(ColumnObjective::new(model, &sbar, bins).derivatives(w).0)
}

/// Column objective `Σ_m s̄[m] ln(1/M + Σ_k w_k a_k[m])` with
/// `a_k[m] = g(m - m̂_k) - 1/M`, restricted to bins with energy.
struct ColumnObjective {
    sbar: Vec<f64>,
    a: Vec<Vec<f64>>,
    floor: f64,
}

impl ColumnObjective {
    fn new(model: &ObservationModel, column: &[f64], bins: &[usize]) -> Self {
        let m = column.len();
        let floor = 1.0 / m as f64;
        let support: Vec<usize> = (0..m).filter(|&i| column[i] > 0.0).collect();
        let a = bins
            .iter()
            .map(|&b| {
                support
                    .iter()
                    .map(|&i| model.kernel(i as i64 - b as i64) - floor)
                    .collect()
            })
            .collect();
        Self {
            sbar: support.iter().map(|&i| column[i]).collect(),
            a,
            floor,
        }
    }

    fn density(&self, w: &[f64], i: usize) -> f64 {
        self.floor + w.iter().zip(&self.a).map(|(wk, ak)| wk * ak[i]).sum::<f64>()
    }

    fn value(&self, w: &[f64]) -> f64 {
        let mut f = 0.0;
        for (i, s) in self.sbar.iter().enumerate() {
            let p = self.density(w, i);
            if p <= 0.0 {
                return f64::NEG_INFINITY;
            }
            f += s * p.ln();
        }
        f
    }

    /// Gradient and negated Hessian (row-major).
    fn derivatives(&self, w: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let k = w.len();
        let mut g = vec![0.0; k];
        let mut h = vec![0.0; k * k];
        for (i, s) in self.sbar.iter().enumerate() {
            let p = self.density(w, i);
            let r = s / p;
            let r2 = r / p;
            for a in 0..k {
                let xa = self.a[a][i];
                g[a] += r * xa;
                for b in a..k {
                    h[a * k + b] += r2 * xa * self.a[b][i];
                }
            }
        }
        for a in 0..k {
            for b in 0..a {
                h[a * k + b] = h[b * k + a];
            }
        }
        (g, h)
    }
}

fn fit_column(
    model: &ObservationModel,
    column: &[f64],
    bins: &[usize],
    init: &[f64],
    config: &NewtonConfig,
) -> ColumnFit {
    let obj = ColumnObjective::new(model, column, bins);
    let k = init.len();
    let mut w = init.to_vec();
    project_capped_simplex(&mut w);
    let mut f = obj.value(&w);
    for _ in 0..64 {
        if f.is_finite() {
            break;
        }
        w.iter_mut().for_each(|v| *v *= 0.5);
        f = obj.value(&w);
    }
    let mut fallback = false;
    let mut iterations = 0;
    while iterations < config.max_iter && f.is_finite() {
        iterations += 1;
        let (g, h) = obj.derivatives(&w);
        if projected_gradient_norm(&w, &g) <= config.grad_tol {
            break;
        }
        let newton = cholesky_solve(&h, &g, k);
        if newton.is_none() {
            fallback = true;
        }
        let gradient_step = || {
            let scale = (0..k).map(|a| h[a * k + a]).fold(0.0, f64::max);
            let scale = if scale > 0.0 { scale } else { 1.0 };
            g.iter().map(|v| v / scale).collect::<Vec<f64>>()
        };
        let accepted = newton
            .as_deref()
            .and_then(|dir| line_search(&obj, &w, f, &g, dir, config.armijo))
            .or_else(|| line_search(&obj, &w, f, &g, &gradient_step(), config.armijo));
        match accepted {
            Some((w_new, f_new)) => {
                let moved = w_new.iter().zip(&w).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
                w = w_new;
                f = f_new;
                if moved < 1e-13 {
                    break;
                }
            }
            None => break,
        }
    }
    ColumnFit {
        w,
        iterations,
        fallback,
    }
}

fn line_search(
    obj: &ColumnObjective,
    w: &[f64],
    f: f64,
    g: &[f64],
    dir: &[f64],
    armijo: f64,
) -> Option<(Vec<f64>, f64)> {
    let mut step = 1.0;
    for _ in 0..60 {
        let mut trial: Vec<f64> = w.iter().zip(dir).map(|(a, d)| a + step * d).collect();
        project_capped_simplex(&mut trial);
        let gain: f64 = g.iter().zip(&trial).zip(w).map(|((g, t), w)| g * (t - w)).sum();
        let f_trial = obj.value(&trial);
        if f_trial.is_finite() && f_trial > f && f_trial >= f + armijo * gain.max(0.0) {
            return Some((trial, f_trial));
        }
        step *= 0.5;
    }
    None
}

fn projected_gradient_norm(w: &[f64], g: &[f64]) -> f64 {
    let total: f64 = w.iter().sum();
    let on_cap = total >= 1.0 - 1e-12;
    let mean_free = if on_cap {
        // On the cap only directions that keep Σ w fixed or lower it count.
        let mean = g.iter().sum::<f64>() / g.len() as f64;
        mean.max(0.0)
    } else {
        0.0
    };
    w.iter()
        .zip(g)
        .map(|(&wk, &gk)| {
            let gk = gk - mean_free;
            if wk <= 0.0 && gk < 0.0 {
                0.0
            } else {
                gk.abs()
            }
        })
        .fold(0.0, f64::max)
}

/// Solves `H x = g` for symmetric positive definite `H`. Returns `None` when
/// `H` is numerically singular.
fn cholesky_solve(h: &[f64], g: &[f64], k: usize) -> Option<Vec<f64>> {
    let scale = (0..k).map(|a| h[a * k + a]).fold(0.0, f64::max);
    if !scale.is_finite() || scale <= 0.0 {
        return None;
    }
    let mut l = vec![0.0; k * k];
    for i in 0..k {
        for j in 0..=i {
            let mut s = h[i * k + j];
            for p in 0..j {
                s -= l[i * k + p] * l[j * k + p];
            }
            if i == j {
                if s <= 1e-12 * scale {
                    return None;
                }
                l[i * k + i] = s.sqrt();
            } else {
                l[i * k + j] = s / l[j * k + j];
            }
        }
    }
    let mut y = g.to_vec();
    for i in 0..k {
        for p in 0..i {
            y[i] -= l[i * k + p] * y[p];
        }
        y[i] /= l[i * k + i];
    }
    for i in (0..k).rev() {
        for p in i + 1..k {
            y[i] -= l[p * k + i] * y[p];
        }
        y[i] /= l[i * k + i];
    }
    Some(y)
}

/// Euclidean projection onto `{w ≥ 0, Σ w ≤ 1}`.
pub(crate) fn project_capped_simplex(w: &mut [f64]) {
    let clipped: f64 = w.iter().map(|v| v.max(0.0)).sum();
    if clipped <= 1.0 {
        w.iter_mut().for_each(|v| *v = v.max(0.0));
        return;
    }
    let mut sorted = w.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let mut cumsum = 0.0;
    let mut theta = 0.0;
    for (j, u) in sorted.iter().enumerate() {
        cumsum += u;
        let t = (cumsum - 1.0) / (j + 1) as f64;
        if u - t > 0.0 {
            theta = t;
        }
    }
    w.iter_mut().for_each(|v| *v = (*v - theta).max(0.0));
}

/// Block coordinate ascent on the exact log-posterior over ridges with
/// weights held fixed. Each step replaces one component's whole ridge by the
/// best path, found by dynamic programming, among those that stay within
/// `±window` bins of the starting ridge, inside the admissible range, and on
/// the same side of the other ridges as at the start, so component identities
/// are kept. Stops when a sweep over components changes nothing or after
/// `max_sweeps`. The log-posterior never decreases.
pub fn refine_ridges(
    model: &ObservationModel,
    spectrogram: &Spectrogram,
    weights: &WeightMatrix,
    ridges: &RidgeMatrix,
    prior: &PriorConfig,
    window: usize,
    max_sweeps: usize,
) -> Result<RidgeMatrix> {
    prior.validate()?;
    model.total_loglik(spectrogram, weights, ridges)?;
    model.check_admissible(ridges)?;
    let sbar = spectrogram.normalized_columns()?;
    let mut out = ridges.clone();
    refine(model, &sbar, weights, &mut out, prior, window, max_sweeps);
    Ok(out)
}

fn refine(
    model: &ObservationModel,
    sbar: &Spectrogram,
    weights: &WeightMatrix,
    ridges: &mut RidgeMatrix,
    prior: &PriorConfig,
    window: usize,
    max_sweeps: usize,
) -> usize {
    let admissible = model.admissible();
    let (lo, hi) = (*admissible.start(), *admissible.end());
    let reference = ridges.clone();
    let n_frames = ridges.n_frames();
    let mut sweeps = 0;
    while sweeps < max_sweeps && n_frames > 0 {
        sweeps += 1;
        let mut changed = false;
        for k in 0..ridges.n_components() {
            let bounds: Vec<(usize, usize)> = (0..n_frames)
                .map(|n| {
                    let anchor = reference.get(k, n);
                    let mut first = anchor.saturating_sub(window).max(lo);
                    let mut last = (anchor + window).min(hi);
                    for j in (0..ridges.n_components()).filter(|&j| j != k) {
                        let other = reference.get(j, n);
                        if anchor > other {
                            first = first.max(ridges.get(j, n));
                        } else if anchor < other {
                            last = last.min(ridges.get(j, n));
                        }
                    }
                    (first, last)
                })
                .collect();
            let unary = map_range(n_frames, |n| {
                placement_gains(model, sbar.column(n), weights.row(n), &ridges.column(n), k, bounds[n])
            });
            let path = match prior.kind {
                PriorKind::Tv => best_path_tv(&unary, &bounds, prior.epsilon),
                PriorKind::Laplacian => best_path_laplacian(&unary, &bounds, 0.5 * prior.lambda),
            };
            if path.as_slice() != ridges.row(k) {
                changed = true;
                ridges.row_mut(k).copy_from_slice(&path);
            }
        }
        if !changed {
            break;
        }
    }
    sweeps
}

/// Column log-likelihood of placing component `k` at each bin of `first..=last`
/// with the other components fixed, up to a constant.
fn placement_gains(
    model: &ObservationModel,
    sbar: &[f64],
    w: &[f64],
    bins: &[usize],
    k: usize,
    (first, last): (usize, usize),
) -> Vec<f64> {
    let m = model.n_bins();
    let floor = (1.0 - w.iter().sum::<f64>()) / m as f64;
    if w[k] == 0.0 || floor <= 0.0 {
        return vec![0.0; last + 1 - first];
    }
    let mut rest = model.pmf_unchecked(w, bins);
    for (j, v) in rest.iter_mut().enumerate() {
        *v = (*v - w[k] * model.kernel(j as i64 - bins[k] as i64)).max(floor);
    }
    let r = model.support().min((m - 1) / 2) as i64;
    (first..=last)
        .map(|c| {
            (-r..=r)
                .map(|d| {
                    let j = (c as i64 + d).rem_euclid(m as i64) as usize;
                    if sbar[j] > 0.0 {
                        sbar[j] * (1.0 + w[k] * model.kernel(d) / rest[j]).ln()
                    } else {
                        0.0
                    }
                })
                .sum()
        })
        .collect()
}

/// Exact maximizer of `Σ_n u_n(c_n) - ε Σ_n |c_{n+1} - c_n|` with each `c_n`
/// in its frame's bounds. Ties go to lower bins.
fn best_path_tv(unary: &[Vec<f64>], bounds: &[(usize, usize)], epsilon: f64) -> Vec<usize> {
    let n_frames = unary.len();
    let mut score = unary[0].clone();
    let mut back: Vec<Vec<usize>> = Vec::with_capacity(n_frames);
    back.push(Vec::new());
    for n in 1..n_frames {
        let (prev_lo, cur_lo) = (bounds[n - 1].0, bounds[n].0);
        let mut next = Vec::with_capacity(unary[n].len());
        let mut arg = Vec::with_capacity(unary[n].len());
        for (bi, u) in unary[n].iter().enumerate() {
            let b = (cur_lo + bi) as f64;
            let (ai, best) = score
                .iter()
                .enumerate()
                .map(|(ai, s)| (ai, s - epsilon * (b - (prev_lo + ai) as f64).abs()))
                .fold((0, f64::NEG_INFINITY), |acc, x| if x.1 > acc.1 { x } else { acc });
            next.push(best + u);
            arg.push(ai);
        }
        score = next;
        back.push(arg);
    }
    let mut idx = argmax(&score);
    let mut path = vec![0; n_frames];
    for n in (0..n_frames).rev() {
        path[n] = bounds[n].0 + idx;
        if n > 0 {
            idx = back[n][idx];
        }
    }
    path
}

/// Exact maximizer of `Σ_n u_n(c_n) - h Σ_n (c_{n-1} - 2 c_n + c_{n+1})²` with
/// each `c_n` in its frame's bounds, by dynamic programming over consecutive
/// pairs. Ties go to lower bins.
fn best_path_laplacian(unary: &[Vec<f64>], bounds: &[(usize, usize)], h: f64) -> Vec<usize> {
    let n_frames = unary.len();
    if n_frames == 1 {
        return vec![bounds[0].0 + argmax(&unary[0])];
    }
    // score[a * width(n) + b]: best total with c_{n-1} = a and c_n = b.
    let mut score: Vec<f64> = unary[0]
        .iter()
        .flat_map(|ua| unary[1].iter().map(move |ub| ua + ub))
        .collect();
    let mut back: Vec<Vec<u32>> = vec![Vec::new(), Vec::new()];
    for n in 2..n_frames {
        let (z_lo, a_lo, b_lo) = (bounds[n - 2].0, bounds[n - 1].0, bounds[n].0);
        let (nz, na, nb) = (unary[n - 2].len(), unary[n - 1].len(), unary[n].len());
        let mut next = vec![f64::NEG_INFINITY; na * nb];
        let mut arg = vec![0u32; na * nb];
        for ai in 0..na {
            let a = (a_lo + ai) as f64;
            for (bi, u) in unary[n].iter().enumerate() {
                let b = (b_lo + bi) as f64;
                let mut best = (0usize, f64::NEG_INFINITY);
                for zi in 0..nz {
                    let d2 = (z_lo + zi) as f64 - 2.0 * a + b;
                    let v = score[zi * na + ai] - h * d2 * d2;
                    if v > best.1 {
                        best = (zi, v);
                    }
                }
                next[ai * nb + bi] = best.1 + u;
                arg[ai * nb + bi] = best.0 as u32;
            }
        }
        score = next;
        back.push(arg);
    }
    let nb = unary[n_frames - 1].len();
    let best = argmax(&score);
    let (mut ai, mut bi) = (best / nb, best % nb);
    let mut path = vec![0; n_frames];
    path[n_frames - 1] = bounds[n_frames - 1].0 + bi;
    path[n_frames - 2] = bounds[n_frames - 2].0 + ai;
    for n in (2..n_frames).rev() {
        let zi = back[n][ai * unary[n].len() + bi] as usize;
        path[n - 2] = bounds[n - 2].0 + zi;
        bi = ai;
        ai = zi;
    }
    path
}

fn argmax(values: &[f64]) -> usize {
    values
        .iter()
        .enumerate()
        .fold(
            (0, f64::NEG_INFINITY),
            |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc },
        )
        .0
}

/// `N x M` bin scores `log Σ_k exp(lift_k(n, m) + ln π_k(n, m))`, or the
/// plain component maximum of the lifts when no prior maps are given.
/// Inadmissible bins score `-inf`.
fn combined_scores(
    model: &ObservationModel,
    sbar: &Spectrogram,
    weights: &WeightMatrix,
    log_pi: Option<&[Vec<f64>]>,
) -> Vec<f64> {
    let m = model.n_bins();
    let k = weights.n_components();
    let admissible = model.admissible();
    let mut scores = vec![f64::NEG_INFINITY; sbar.n_frames() * m];
    crate::par::for_each_chunk(&mut scores, m, |n, out| {
        let mut lifts = vec![vec![0.0; m]; k];
        for (c, lift) in lifts.iter_mut().enumerate() {
            model.lift_column(sbar.column(n), weights.get(n, c), lift);
        }
        for b in admissible.clone() {
            out[b] = match log_pi {
                None => lifts.iter().map(|l| l[b]).fold(f64::NEG_INFINITY, f64::max),
                Some(pi) => log_sum_exp((0..k).map(|c| lifts[c][b] + pi[c][n * m + b])),
            };
        }
    });
    scores
}

fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + values.map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Per-component maps `ln Σ_i ω_i p(m̂_k[n] = m | neighbours in candidate i)`,
/// each `N x M` with `-inf` outside the admissible range.
fn local_prior_maps(
    prior: &PriorConfig,
    samples: &[RidgeMatrix],
    omega: &[f64],
    admissible: &RangeInclusive<usize>,
    n_bins: usize,
) -> Vec<Vec<f64>> {
    let n_components = samples[0].n_components();
    let n_frames = samples[0].n_frames();
    let peak = omega.iter().copied().fold(0.0, f64::max);
    let active: Vec<usize> = (0..samples.len()).filter(|&i| omega[i] > 1e-12 * peak).collect();
    let lo = *admissible.start();
    (0..n_components)
        .map(|k| {
            let mut map = vec![f64::NEG_INFINITY; n_frames * n_bins];
            crate::par::for_each_chunk(&mut map, n_bins, |n, out| {
                let mut energies = Vec::new();
                let mut probs = Vec::new();
                let mut mix = vec![0.0; admissible.clone().count()];
                for &i in &active {
                    prior.site_energies(samples[i].row(k), n, admissible.clone(), &mut energies);
                    boltzmann(&energies, &mut probs);
                    for (acc, p) in mix.iter_mut().zip(&probs) {
                        *acc += omega[i] * p;
                    }
                }
                let total: f64 = active.iter().map(|&i| omega[i]).sum();
                for (j, p) in mix.iter().enumerate() {
                    out[lo + j] = (p / total).ln();
                }
            });
            map
        })
        .collect()
}

/// Joint estimation of ridges and weights from a spectrogram.
pub fn run_sem(spectrogram: &Spectrogram, stft: &StftConfig, config: &SemConfig) -> Result<EstimationResult> {
    config.validate()?;
    let model = ObservationModel::new(stft)?;
    if spectrogram.n_bins() != stft.n_bins {
        return Err(Error::Dimension {
            what: "spectrogram bins",
            expected: stft.n_bins,
            actual: spectrogram.n_bins(),
        });
    }
    let k = config.n_components;
    let n_frames = spectrogram.n_frames();
    let admissible = model.admissible();
    let discard = stft.discard_halfwidth();
    check_room(k, discard, &admissible)?;
    let sbar = spectrogram.normalized_columns()?;

    let mut weights = WeightMatrix::constant(n_frames, k, config.starting_weight())?;
    let mut ridges = initial_ridges(&model, &sbar, &mut weights, config)?;

    let mut trace = SemTrace::default();
    let mut best: Option<(f64, RidgeMatrix, WeightMatrix)> = None;
    let mut previous: Option<f64> = None;
    for iteration in 1..=config.max_iter {
        let samples = sample_ridge_candidates(
            &config.prior,
            &ridges,
            admissible.clone(),
            config.n_samples,
            config.sampler,
            derive_seed(config.seed, &[iteration as u64]),
        )?;
        let (samples, omega, degenerate) = match posterior_weights(&model, &sbar, &weights, &samples) {
            Ok(omega) => (samples, omega, false),
            Err(Error::DegeneratePosterior) => (vec![ridges.clone()], vec![1.0], true),
            Err(e) => return Err(e),
        };
        let effective_samples = 1.0 / omega.iter().map(|w| w * w).sum::<f64>();
        let log_pi = local_prior_maps(&config.prior, &samples, &omega, &admissible, stft.n_bins);
        let scores = combined_scores(&model, &sbar, &weights, Some(&log_pi));
        let picks = map_range(n_frames, |n| {
            sequential_mmap(
                &scores[n * stft.n_bins..(n + 1) * stft.n_bins],
                k,
                discard,
                admissible.clone(),
            )
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
        ridges = follow_reference(&picks, &ridges, discard)?;
        refine(
            &model,
            &sbar,
            &weights,
            &mut ridges,
            &config.prior,
            discard,
            config.refine_sweeps,
        );
        untangle_crossings(&mut ridges, Some(&mut weights), 2 * discard, 4 * discard);

        let fit = fit_weights(&model, &sbar, &ridges, &weights, &config.newton);
        weights = fit.weights;
        let total_loglik = model.total_loglik_normalized(&sbar, &weights, &ridges);
        let log_prior = config.prior.log_prior(&ridges);
        let objective = total_loglik + log_prior;
        trace.iterations.push(IterationRecord {
            iteration,
            objective,
            total_loglik,
            log_prior,
            effective_samples,
            degenerate,
            newton_iterations: fit.iterations,
            newton_fallbacks: fit.fallbacks,
        });
        if best.as_ref().is_none_or(|b| objective > b.0) {
            best = Some((objective, ridges.clone(), weights.clone()));
            trace.best_iteration = iteration;
        }
        if let Some(prev) = previous {
            if (objective - prev).abs() <= config.rel_tol * prev.abs() {
                trace.converged = true;
                break;
            }
        }
        previous = Some(objective);
    }

    if trace.iterations.iter().all(|r| r.degenerate) {
        return Err(Error::EstimationFailed { trace });
    }
    let (log_posterior, ridges, weights) = best.expect("at least one iteration ran");
    Ok(EstimationResult {
        ridges,
        weights,
        log_posterior,
        trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::PriorKind;
    use crate::siggen::{add_noise, crossing_chirps, synthesize, NoiseSpec};
    use crate::tf::stft;

    fn small_model() -> (StftConfig, ObservationModel) {
        let cfg = StftConfig::new(40, 64, 3.0).unwrap();
        (cfg, ObservationModel::new(&cfg).unwrap())
    }

    #[test]
    fn projection_onto_capped_simplex() {
        let mut w = vec![0.2, -0.1, 0.3];
        project_capped_simplex(&mut w);
        assert_eq!(w, vec![0.2, 0.0, 0.3]);

        let mut w = vec![0.8, 0.6];
        project_capped_simplex(&mut w);
        assert!((w[0] - 0.6).abs() < 1e-15 && (w[1] - 0.4).abs() < 1e-15);

        let mut w = vec![1.5, -0.5, 0.2];
        project_capped_simplex(&mut w);
        assert_eq!(w, vec![1.0, 0.0, 0.0]);
    }

    #[test]
    fn cholesky_matches_direct_solve() {
        let h = [4.0, 1.0, 1.0, 3.0];
        let x = cholesky_solve(&h, &[1.0, 2.0], 2).unwrap();
        assert!((4.0 * x[0] + x[1] - 1.0).abs() < 1e-12);
        assert!((x[0] + 3.0 * x[1] - 2.0).abs() < 1e-12);
        assert!(cholesky_solve(&[1.0, 1.0, 1.0, 1.0], &[1.0, 0.0], 2).is_none());
    }

    #[test]
    fn gradient_and_hessian_match_finite_differences() {
        let (_, model) = small_model();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let col: Vec<f64> = (0..64).map(|_| rng.gen::<f64>()).collect();
        let total: f64 = col.iter().sum();
        let sbar: Vec<f64> = col.iter().map(|v| v / total).collect();
        let obj = ColumnObjective::new(&model, &sbar, &[10, 40]);
        let w = [0.3, 0.2];
        let (g, h) = obj.derivatives(&w);
        let eps = 1e-6;
        for a in 0..2 {
            let mut up = w;
            let mut down = w;
            up[a] += eps;
            down[a] -= eps;
            let fd = (obj.value(&up) - obj.value(&down)) / (2.0 * eps);
            assert!((fd - g[a]).abs() < 1e-6, "grad {a}: {fd} vs {}", g[a]);
            let (gu, _) = obj.derivatives(&up);
            let (gd, _) = obj.derivatives(&down);
            for b in 0..2 {
                let fd = -(gu[b] - gd[b]) / (2.0 * eps);
                assert!((fd - h[a * 2 + b]).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn newton_recovers_weights_of_exact_mixture() {
        let (_, model) = small_model();
        let truth = [0.45, 0.25];
        let p = model.column_pmf(&truth, &[15, 45]).unwrap();
        let fit = fit_column(&model, &p, &[15, 45], &[0.25, 0.25], &NewtonConfig::default());
        assert!((fit.w[0] - truth[0]).abs() < 1e-6);
        assert!((fit.w[1] - truth[1]).abs() < 1e-6);
        assert!(!fit.fallback);
    }

    #[test]
    fn newton_never_decreases_and_stays_feasible() {
        let (_, model) = small_model();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..50 {
            let col: Vec<f64> = (0..64).map(|_| rng.gen::<f64>().powi(6)).collect();
            let total: f64 = col.iter().sum();
            let sbar: Vec<f64> = col.iter().map(|v| v / total).collect();
            let bins = [rng.gen_range(5..59), rng.gen_range(5..59)];
            let w0 = [rng.gen_range(0.0..0.5), rng.gen_range(0.0..0.5)];
            let obj = ColumnObjective::new(&model, &sbar, &bins);
            let fit = fit_column(&model, &sbar, &bins, &w0, &NewtonConfig::default());
            assert!(obj.value(&fit.w) >= obj.value(&w0) - 1e-12);
            assert!(fit.w.iter().all(|&v| v >= 0.0));
            assert!(fit.w.iter().sum::<f64>() <= 1.0 + 1e-12);
        }
    }

    #[test]
    fn coinciding_ridges_fall_back_to_gradient_steps() {
        let (_, model) = small_model();
        let p = model.column_pmf(&[0.6], &[30]).unwrap();
        let fit = fit_column(&model, &p, &[30, 30], &[0.1, 0.1], &NewtonConfig::default());
        assert!(fit.fallback);
        assert!((fit.w[0] + fit.w[1] - 0.6).abs() < 1e-6);
    }

    #[test]
    fn infeasible_start_is_pulled_inside() {
        let (_, model) = small_model();
        let mut col = vec![0.0; 64];
        col[2] = 1.0;
        let fit = fit_column(&model, &col, &[40], &[1.0], &NewtonConfig::default());
        assert!(fit.w[0] < 1.0);
        assert!(ColumnObjective::new(&model, &col, &[40]).value(&fit.w).is_finite());
    }

    #[test]
    fn mmap_respects_discard_and_ties() {
        let mut scores = vec![0.0; 50];
        scores[20] = 5.0;
        scores[23] = 4.0;
        scores[30] = 3.0;
        assert_eq!(sequential_mmap(&scores, 2, 5, 3..=46).unwrap(), vec![20, 30]);
        let flat = vec![1.0; 50];
        assert_eq!(sequential_mmap(&flat, 2, 5, 3..=46).unwrap(), vec![3, 9]);
        scores[1] = 100.0;
        assert_eq!(sequential_mmap(&scores, 1, 5, 3..=46).unwrap(), vec![20]);
        assert_eq!(sequential_mmap(&flat, 3, 10, 3..=46).unwrap(), vec![3, 14, 25]);
        assert!(matches!(
            sequential_mmap(&flat, 3, 11, 3..=46),
            Err(Error::Overcrowded {
                k: 3,
                d: 11,
                admissible: 44
            })
        ));
    }

    #[test]
    fn tracker_follows_crossing_lines() {
        let n = 120;
        let a = |t: usize| 20 + t / 2;
        let b = |t: usize| 80 - t / 2;
        let picks: Vec<Vec<usize>> = (0..n)
            .map(|t| {
                if a(t).abs_diff(b(t)) <= 6 {
                    // Merged peak plus a spurious far pick.
                    vec![(a(t) + b(t)) / 2, 5]
                } else {
                    let mut v = vec![a(t), b(t)];
                    v.sort_unstable();
                    v
                }
            })
            .collect();
        let r = track_ridges(&picks, 2, 4, 0..=100).unwrap();
        for t in 0..n {
            assert!(r.get(0, t).abs_diff(a(t)) <= 4, "t={t} a={} got {}", a(t), r.get(0, t));
            assert!(r.get(1, t).abs_diff(b(t)) <= 4, "t={t}");
        }
    }

    #[test]
    fn gibbs_candidates_are_reproducible_and_admissible() {
        let start = RidgeMatrix::constant(2, 30, 20);
        let prior = PriorConfig::laplacian(0.5);
        let a = sample_ridge_candidates(&prior, &start, 5..=40, 4, SamplerKind::Gibbs, 3).unwrap();
        let b = sample_ridge_candidates(&prior, &start, 5..=40, 4, SamplerKind::Gibbs, 3).unwrap();
        assert_eq!(a, b);
        assert!(a.iter().all(|r| r.is_within(&(5..=40))));
        assert_ne!(a[0], a[1]);
        let icm = sample_ridge_candidates(&prior, &start, 5..=40, 2, SamplerKind::Icm, 3).unwrap();
        assert_eq!(icm[0], start);
        assert!(sample_ridge_candidates(
            &prior,
            &RidgeMatrix::constant(1, 3, 2),
            5..=40,
            1,
            SamplerKind::Gibbs,
            0
        )
        .is_err());
    }

    #[test]
    fn gibbs_conditional_frequencies() {
        // One interior site with fixed neighbours: empirical frequencies of the
        // drawn bin match the exact conditional.
        let prior = PriorConfig::tv(0.4);
        let row = vec![10usize, 10, 14];
        let mut energies = Vec::new();
        prior.site_energies(&row, 1, 5..=20, &mut energies);
        let mut probs = Vec::new();
        boltzmann(&energies, &mut probs);
        let mut counts = vec![0usize; probs.len()];
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let draws = 200_000;
        for _ in 0..draws {
            counts[draw(&probs, rng.gen())] += 1;
        }
        for (c, p) in counts.iter().zip(&probs) {
            let freq = *c as f64 / draws as f64;
            assert!((freq - p).abs() < 4.0 * (p * (1.0 - p) / draws as f64).sqrt() + 1e-4);
        }
    }

    #[test]
    fn posterior_weights_prefer_true_ridges() {
        let (cfg, model) = small_model();
        let w = WeightMatrix::constant(40, 1, 0.5).unwrap();
        let truth = RidgeMatrix::constant(1, 40, 30);
        let cols: Vec<Vec<f64>> = (0..40).map(|_| model.column_pmf(&[0.5], &[30]).unwrap()).collect();
        let s = Spectrogram::from_columns(&cols).unwrap();
        let off = RidgeMatrix::constant(1, 40, 33);
        let omega = approx_ridge_posterior(&model, &s, &w, &[off, truth]).unwrap();
        assert!(omega[1] > 0.999);
        assert!((omega.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let _ = cfg;
    }

    #[test]
    fn sem_recovers_a_clean_tone() {
        let cfg = StftConfig::new(120, 128, 5.0).unwrap();
        let mode = crate::siggen::linear_chirp(120, 0.25, 0.25, 1.0).unwrap();
        let truth = synthesize(&[mode], 120, 128).unwrap();
        let noisy = add_noise(&truth.mixture, &NoiseSpec::gaussian(10.0, 2)).unwrap();
        let s = stft(&noisy.noisy, &cfg).unwrap().spectrogram();
        let mut config = SemConfig::new(1, PriorConfig::laplacian(1e-2));
        config.max_iter = 5;
        let est = run_sem(&s, &cfg, &config).unwrap();
        let hits = (0..120).filter(|&n| est.ridges.get(0, n).abs_diff(32) <= 1).count();
        assert!(hits >= 110, "hits {hits}");
        assert!(est.weights.is_feasible());
        assert!(!est.trace.iterations.is_empty());
    }

    #[test]
    fn sem_rejects_overcrowding_and_bad_config() {
        let cfg = StftConfig::new(10, 32, 3.0).unwrap();
        let s = Spectrogram::from_columns(&vec![vec![1.0; 32]; 10]).unwrap();
        assert!(matches!(
            run_sem(&s, &cfg, &SemConfig::new(5, PriorConfig::tv(1e-3))),
            Err(Error::Overcrowded { .. })
        ));
        assert!(run_sem(&s, &cfg, &SemConfig::new(0, PriorConfig::tv(1e-3))).is_err());
        let mut c = SemConfig::new(1, PriorConfig::tv(-1.0));
        assert!(run_sem(&s, &cfg, &c).is_err());
        c.prior = PriorConfig {
            kind: PriorKind::Tv,
            epsilon: 1e-3,
            lambda: 0.0,
        };
        c.n_samples = 0;
        assert!(run_sem(&s, &cfg, &c).is_err());
    }

    #[test]
    fn crossing_chirps_small_run_is_deterministic() {
        let cfg = StftConfig::new(500, 500, 20.0).unwrap();
        let modes: Vec<_> = crossing_chirps().iter().map(|c| c.mode(500).unwrap()).collect();
        let truth = synthesize(&modes, 500, 500).unwrap();
        let noisy = add_noise(&truth.mixture, &NoiseSpec::gaussian(5.0, 7)).unwrap();
        let s = stft(&noisy.noisy, &cfg).unwrap().spectrogram();
        let mut config = SemConfig::new(2, PriorConfig::tv(1e-3));
        config.max_iter = 2;
        let a = run_sem(&s, &cfg, &config).unwrap();
        let b = run_sem(&s, &cfg, &config).unwrap();
        assert_eq!(a, b);
    }
}
