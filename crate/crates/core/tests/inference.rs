use proptest::prelude::*;
use ridgeband::inference::{
    approx_ridge_posterior, follow_reference, newton_raphson_weights, refine_ridges, run_sem, sample_ridge_candidates,
    sequential_mmap, smooth_paths, track_ridges, untangle_crossings, NewtonConfig, SamplerKind, SemConfig,
};
use ridgeband::model::{ObservationModel, PriorConfig, RidgeMatrix, WeightMatrix};
use ridgeband::siggen::{add_noise, linear_chirp, synthesize, NoiseSpec};
use ridgeband::tf::{stft, Spectrogram, StftConfig};

fn small() -> (StftConfig, ObservationModel) {
    let cfg = StftConfig::new(40, 64, 3.0).unwrap();
    (cfg, ObservationModel::new(&cfg).unwrap())
}

fn tone_column(model: &ObservationModel, bin: usize, w: f64) -> Vec<f64> {
    model.column_pmf(&[w], &[bin]).unwrap()
}

/// Upper critical value of chi-square at significance 1e-3 (Wilson-Hilferty).
fn chi_square_critical(df: f64) -> f64 {
    let z = 3.090_232_306;
    let c = 2.0 / (9.0 * df);
    df * (1.0 - c + z * c.sqrt()).powi(3)
}

#[test]
fn flat_prior_samples_are_uniform() {
    let (_, model) = small();
    let admissible = model.admissible();
    let start = RidgeMatrix::constant(1, 10, *admissible.start());
    let samples = sample_ridge_candidates(
        &PriorConfig::tv(0.0),
        &start,
        admissible.clone(),
        1000,
        SamplerKind::Gibbs,
        3,
    )
    .unwrap();
    let mut counts = vec![0usize; admissible.clone().count()];
    for s in &samples {
        for &b in s.row(0) {
            counts[b - admissible.start()] += 1;
        }
    }
    let total: usize = counts.iter().sum();
    assert_eq!(total, 10_000);
    let expected = total as f64 / counts.len() as f64;
    let stat: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
    let critical = chi_square_critical((counts.len() - 1) as f64);
    assert!(stat < critical, "chi-square {stat} >= {critical}");
}

#[test]
fn strong_prior_keeps_constant_start() {
    let (_, model) = small();
    let start = RidgeMatrix::constant(2, 12, 20);
    let samples = sample_ridge_candidates(
        &PriorConfig::tv(1e3),
        &start,
        model.admissible(),
        20,
        SamplerKind::Gibbs,
        9,
    )
    .unwrap();
    assert!(samples.iter().all(|s| *s == start));
}

#[test]
fn posterior_weight_examples() {
    let (_, model) = small();
    let truth = RidgeMatrix::constant(1, 3, 30);
    let columns: Vec<Vec<f64>> = (0..3).map(|_| tone_column(&model, 30, 0.6)).collect();
    let s = Spectrogram::from_columns(&columns).unwrap();
    let w = WeightMatrix::constant(3, 1, 0.5).unwrap();

    assert_eq!(
        approx_ridge_posterior(&model, &s, &w, std::slice::from_ref(&truth)).unwrap(),
        vec![1.0]
    );
    let twice = approx_ridge_posterior(&model, &s, &w, &[truth.clone(), truth.clone()]).unwrap();
    assert!((twice[0] - 0.5).abs() < 1e-12 && (twice[1] - 0.5).abs() < 1e-12);

    let others = [25, 33, 40].map(|b| RidgeMatrix::constant(1, 3, b));
    let mut set = others.to_vec();
    set.insert(1, truth);
    let omega = approx_ridge_posterior(&model, &s, &w, &set).unwrap();
    let best = (0..omega.len()).max_by(|&a, &b| omega[a].total_cmp(&omega[b])).unwrap();
    assert_eq!(best, 1);
    assert!((omega.iter().sum::<f64>() - 1.0).abs() < 1e-12);
}

#[test]
fn mmap_examples() {
    let mut scores = vec![0.0; 40];
    scores[17] = 3.0;
    scores[9] = 1.0;
    assert_eq!(sequential_mmap(&scores, 1, 4, 0..=39).unwrap(), vec![17]);

    let mut scores = vec![0.0; 40];
    scores[10] = 2.0;
    scores[30] = 2.0;
    assert_eq!(sequential_mmap(&scores, 2, 4, 0..=39).unwrap(), vec![10, 30]);
}

proptest! {
    #[test]
    fn mmap_with_no_discard_is_argmax(scores in prop::collection::vec(0.0f64..1.0, 8..60)) {
        let last = scores.len() - 1;
        let picks = sequential_mmap(&scores, 1, 0, 0..=last).unwrap();
        let best = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let first = scores.iter().position(|&v| v == best).unwrap();
        prop_assert_eq!(picks, vec![first]);
    }

    #[test]
    fn mmap_picks_are_separated(scores in prop::collection::vec(0.0f64..1.0, 60..120), k in 1usize..4, d in 0usize..6) {
        let last = scores.len() - 1;
        let picks = sequential_mmap(&scores, k, d, 0..=last).unwrap();
        prop_assert_eq!(picks.len(), k);
        for i in 0..k {
            for j in 0..i {
                prop_assert!(picks[i].abs_diff(picks[j]) > d);
            }
        }
    }
}

#[test]
fn newton_examples() {
    let (_, model) = small();
    let m = model.n_bins();
    let cfg = NewtonConfig::default();

    let flat = Spectrogram::from_columns(&[vec![1.0; m]]).unwrap();
    let r = RidgeMatrix::constant(1, 1, 30);
    let fit = newton_raphson_weights(&model, &flat, &r, &WeightMatrix::constant(1, 1, 0.5).unwrap(), &cfg).unwrap();
    assert!(fit.weights.get(0, 0) < 1e-3);

    // A tone spectrum that the kernel does not fit exactly.
    let cfg_stft = StftConfig::new(40, 64, 3.0).unwrap();
    let tone = linear_chirp(40, 0.25, 0.25, 1.0).unwrap();
    let truth = synthesize(&[tone], 40, 64).unwrap();
    let s = stft(&truth.mixture, &cfg_stft).unwrap().spectrogram();
    let column = Spectrogram::from_columns(&[s.column(20).to_vec()]).unwrap();
    let bin = truth.ridge_bins.get(0, 20);
    let r = RidgeMatrix::constant(1, 1, bin);
    let fit = newton_raphson_weights(&model, &column, &r, &WeightMatrix::constant(1, 1, 0.25).unwrap(), &cfg).unwrap();
    let grid_best = (0..10_000)
        .map(|i| i as f64 * 1e-4)
        .max_by(|a, b| {
            let la = model.column_loglik(column.column(0), &[*a], &[bin]).unwrap();
            let lb = model.column_loglik(column.column(0), &[*b], &[bin]).unwrap();
            la.total_cmp(&lb)
        })
        .unwrap();
    assert!(
        (fit.weights.get(0, 0) - grid_best).abs() < 1e-3,
        "{} vs {grid_best}",
        fit.weights.get(0, 0)
    );

    let again = newton_raphson_weights(&model, &column, &r, &fit.weights, &cfg).unwrap();
    assert!((again.weights.get(0, 0) - fit.weights.get(0, 0)).abs() < 1e-6);
}

fn two_tone_spectrogram() -> (StftConfig, Spectrogram, [usize; 2]) {
    let cfg = StftConfig::new(120, 128, 4.0).unwrap();
    let a = linear_chirp(120, 0.125, 0.125, 1.0).unwrap();
    let b = linear_chirp(120, 0.375, 0.375, 1.0).unwrap();
    let truth = synthesize(&[a, b], 120, 128).unwrap();
    let s = stft(&truth.mixture, &cfg).unwrap().spectrogram();
    (cfg, s, [16, 48])
}

#[test]
fn sem_on_noiseless_two_tones() {
    let (cfg, s, bins) = two_tone_spectrogram();
    let result = run_sem(&s, &cfg, &SemConfig::new(2, PriorConfig::tv(1e-3))).unwrap();
    // Frames whose window is cut by the signal ends have a smeared spectrum.
    let full = cfg.window_halfwidth..cfg.n_samples - cfg.window_halfwidth;
    let mut rows: Vec<&[usize]> = result.ridges.rows().collect();
    rows.sort_by_key(|r| r[full.start]);
    for (row, bin) in rows.iter().zip(bins) {
        assert!(row[full.clone()].iter().all(|&b| b == bin), "{row:?}");
    }
    for n in full {
        assert!(
            result.weights.row(n).iter().all(|&w| w >= 0.4),
            "{n}: {:?}",
            result.weights.row(n)
        );
    }
}

#[test]
fn sem_on_flat_spectrogram_keeps_weights_small() {
    let cfg = StftConfig::new(30, 64, 3.0).unwrap();
    let s = Spectrogram::from_columns(&vec![vec![1.0; 64]; 30]).unwrap();
    let result = run_sem(&s, &cfg, &SemConfig::new(1, PriorConfig::tv(1e-3))).unwrap();
    assert!(result.weights.data().iter().all(|&w| w <= 0.05));
}

#[test]
fn sem_is_deterministic_under_a_seed() {
    let cfg = StftConfig::new(80, 96, 4.0).unwrap();
    let a = linear_chirp(80, 0.2, 0.45, 1.0).unwrap();
    let truth = synthesize(&[a], 80, 96).unwrap();
    let noisy = add_noise(&truth.mixture, &NoiseSpec::gaussian(0.0, 5)).unwrap();
    let s = stft(&noisy.noisy, &cfg).unwrap().spectrogram();
    let mut sem = SemConfig::new(1, PriorConfig::laplacian(1e-2));
    sem.seed = 11;
    let first = run_sem(&s, &cfg, &sem).unwrap();
    let second = run_sem(&s, &cfg, &sem).unwrap();
    assert_eq!(first.ridges, second.ridges);
    assert_eq!(first.weights, second.weights);
    assert_eq!(first.trace, second.trace);
}

#[test]
fn sem_weights_stay_feasible_and_ridges_admissible() {
    let cfg = StftConfig::new(80, 96, 4.0).unwrap();
    let model = ObservationModel::new(&cfg).unwrap();
    let a = linear_chirp(80, 0.1, 0.4, 1.0).unwrap();
    let b = linear_chirp(80, 0.4, 0.1, 0.7).unwrap();
    let truth = synthesize(&[a, b], 80, 96).unwrap();
    let noisy = add_noise(&truth.mixture, &NoiseSpec::gaussian(-3.0, 2)).unwrap();
    let s = stft(&noisy.noisy, &cfg).unwrap().spectrogram();
    let result = run_sem(&s, &cfg, &SemConfig::new(2, PriorConfig::tv(1e-3))).unwrap();
    assert!(result.weights.is_feasible());
    assert!(result.ridges.is_within(&model.admissible()));
    let best = result.trace.iterations[result.trace.best_iteration - 1].objective;
    assert!(result.trace.iterations.iter().all(|r| r.objective <= best));
}

#[test]
fn refinement_never_lowers_the_posterior() {
    let cfg = StftConfig::new(80, 96, 4.0).unwrap();
    let model = ObservationModel::new(&cfg).unwrap();
    let a = linear_chirp(80, 0.1, 0.4, 1.0).unwrap();
    let truth = synthesize(&[a], 80, 96).unwrap();
    let noisy = add_noise(&truth.mixture, &NoiseSpec::gaussian(-2.0, 4)).unwrap();
    let s = stft(&noisy.noisy, &cfg).unwrap().spectrogram();
    let w = WeightMatrix::constant(80, 1, 0.3).unwrap();
    for prior in [
        PriorConfig::tv(1e-3),
        PriorConfig::laplacian(1e-2),
        PriorConfig::tv(0.05),
    ] {
        let start = truth.ridge_bins.clone();
        let before = model.log_posterior(&s, &w, &start, &prior).unwrap();
        let refined = refine_ridges(&model, &s, &w, &start, &prior, 5, 20).unwrap();
        let after = model.log_posterior(&s, &w, &refined, &prior).unwrap();
        assert!(after >= before - 1e-9, "{after} < {before}");
        for n in 0..80 {
            assert!(refined.get(0, n).abs_diff(start.get(0, n)) <= 5);
        }
    }
}

#[test]
fn refinement_with_a_wide_window_finds_the_exhaustive_optimum() {
    let cfg = StftConfig::new(4, 16, 6.0).unwrap();
    let model = ObservationModel::new(&cfg).unwrap();
    let admissible: Vec<usize> = model.admissible().collect();
    let columns: Vec<Vec<f64>> = (0..4)
        .map(|n| {
            (0..16)
                .map(|m| 1.0 + ((m * 7 + n * 5) % 11) as f64 + if m == 6 + n { 9.0 } else { 0.0 })
                .collect()
        })
        .collect();
    let s = Spectrogram::from_columns(&columns).unwrap();
    let w = WeightMatrix::constant(4, 1, 0.4).unwrap();
    for prior in [PriorConfig::tv(0.3), PriorConfig::laplacian(0.2)] {
        let mut best = (f64::NEG_INFINITY, vec![]);
        for code in 0..admissible.len().pow(4) {
            let mut c = code;
            let row: Vec<usize> = (0..4)
                .map(|_| {
                    let b = admissible[c % admissible.len()];
                    c /= admissible.len();
                    b
                })
                .collect();
            let r = RidgeMatrix::from_rows(std::slice::from_ref(&row)).unwrap();
            let v = model.log_posterior(&s, &w, &r, &prior).unwrap();
            if v > best.0 {
                best = (v, row);
            }
        }
        let start = RidgeMatrix::constant(1, 4, admissible[0]);
        let refined = refine_ridges(&model, &s, &w, &start, &prior, 16, 10).unwrap();
        assert_eq!(refined.row(0), best.1.as_slice(), "{prior:?}");
    }
}

#[test]
fn following_a_reference_keeps_labels() {
    let reference = RidgeMatrix::from_rows(&[vec![10, 11, 12], vec![40, 40, 40]]).unwrap();
    let picks = vec![vec![41, 10], vec![12, 39], vec![13, 90]];
    let out = follow_reference(&picks, &reference, 5).unwrap();
    assert_eq!(out.row(0), &[10, 12, 13]);
    assert_eq!(out.row(1), &[41, 39, 40]);
}

#[test]
fn untangling_turns_a_bounce_into_a_crossing() {
    let up: Vec<usize> = (0..100).map(|n| 20 + n).collect();
    let down: Vec<usize> = (0..100).map(|n| 120 - n).collect();
    let truth = RidgeMatrix::from_rows(&[up.clone(), down.clone()]).unwrap();
    let lower: Vec<usize> = up.iter().zip(&down).map(|(a, b)| *a.min(b)).collect();
    let upper: Vec<usize> = up.iter().zip(&down).map(|(a, b)| *a.max(b)).collect();
    let mut bounced = RidgeMatrix::from_rows(&[lower, upper]).unwrap();
    let mut weights = WeightMatrix::new(100, 2, (0..100).flat_map(|_| [0.3, 0.1]).collect()).unwrap();
    assert_eq!(untangle_crossings(&mut bounced, Some(&mut weights), 20, 40), 1);
    assert_eq!(bounced, truth);
    assert_eq!(weights.row(99), &[0.1, 0.3]);
    assert_eq!(weights.row(0), &[0.3, 0.1]);

    let mut parallel = RidgeMatrix::from_rows(&[vec![30; 100], vec![45; 100]]).unwrap();
    let copy = parallel.clone();
    assert_eq!(untangle_crossings(&mut parallel, None, 20, 40), 0);
    assert_eq!(parallel, copy);
}

#[test]
fn smooth_paths_follow_crossing_lines_past_bright_noise() {
    let (frames, bins) = (80, 100);
    let lines: Vec<[usize; 2]> = (0..frames).map(|n| [20 + n / 2, 80 - n / 2]).collect();
    let mut scores = vec![0.0; frames * bins];
    for (n, pair) in lines.iter().enumerate() {
        for &b in pair {
            scores[n * bins + b] = 1.0;
            scores[n * bins + b - 1] = 0.5;
            scores[n * bins + b + 1] = 0.5;
        }
    }
    scores[10 * bins + 92] = 5.0;
    scores[50 * bins + 8] = 5.0;
    let paths = smooth_paths(&scores, bins, 2, 5, 1, 5..=94).unwrap();
    // Within the masked band around the first path the second is unresolved.
    for (n, pair) in lines.iter().enumerate().filter(|(_, p)| p[0].abs_diff(p[1]) > 10) {
        let mut got = [paths.get(0, n), paths.get(1, n)];
        got.sort_unstable();
        let mut want = *pair;
        want.sort_unstable();
        assert_eq!(got, want, "frame {n}");
    }
}

#[test]
fn tracker_ignores_scattered_picks_and_restarts_on_a_steady_one() {
    let picks: Vec<Vec<usize>> = (0..200)
        .map(|n| match n {
            60..=119 => vec![100 + (7 * n * n + 13 * n) % 80],
            150.. => vec![80],
            _ => vec![50],
        })
        .collect();
    let r = track_ridges(&picks, 1, 3, 0..=199).unwrap();
    assert!((60..120).all(|n| r.get(0, n).abs_diff(50) <= 1), "{:?}", &r.row(0)[60..120]);
    assert!((120..150).all(|n| r.get(0, n) == 50));
    assert!((170..200).all(|n| r.get(0, n) == 80));
}

#[test]
fn inadmissible_or_mismatched_inputs_are_errors() {
    let (cfg, model) = small();
    let s = Spectrogram::from_columns(&vec![vec![1.0; 64]; 3]).unwrap();
    let w = WeightMatrix::constant(3, 1, 0.2).unwrap();
    assert!(refine_ridges(
        &model,
        &s,
        &w,
        &RidgeMatrix::constant(1, 3, 0),
        &PriorConfig::tv(1e-3),
        3,
        2
    )
    .is_err());
    assert!(refine_ridges(
        &model,
        &s,
        &w,
        &RidgeMatrix::constant(1, 4, 30),
        &PriorConfig::tv(1e-3),
        3,
        2
    )
    .is_err());
    let wrong_bins = Spectrogram::from_columns(&vec![vec![1.0; 32]; 3]).unwrap();
    assert!(run_sem(&wrong_bins, &cfg, &SemConfig::new(1, PriorConfig::tv(1e-3))).is_err());
}
