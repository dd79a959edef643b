use nextframe_core::analysis::adaptive_filter;
use nextframe_core::leaves::{generate_dataset, LeavesConfig, SequenceDataset};
use nextframe_core::net::{DenoiserModel, ModelArch};
use nextframe_core::rng;
use nextframe_core::train::{make_batch, prediction_targets, sample_sigma, train, TrainConfig};
use nextframe_core::Tensor;

fn small_cfg() -> LeavesConfig {
    LeavesConfig {
        height: 8,
        width: 8,
        ref_radius: 2.0,
        gp_lengthscale: 3.0,
        gp_amplitude: 1.5,
        ..LeavesConfig::default()
    }
}

#[test]
fn blind_noise_levels_have_median_one_quarter() {
    let mut r = rng::stream(5, 0);
    let mut s: Vec<f32> = (0..20_000).map(|_| sample_sigma(&mut r)).collect();
    s.sort_by(f32::total_cmp);
    let median = s[s.len() / 2];
    assert!((median - 0.25).abs() <= 0.01, "{median}");
    assert!(s.iter().all(|&v| (0.0..=1.0).contains(&v)));
}

#[test]
fn one_sequence_of_eleven_frames_gives_nine_targets_at_memory_two() {
    let ds = generate_dataset(1, 1, &small_cfg()).unwrap();
    let all: Vec<usize> = (0..ds.sequences.len()).collect();
    let t = prediction_targets(&ds, &all, 2);
    assert_eq!(t.len(), 9);
    assert_eq!(t[0], (0, 2));
    let (input, target) = make_batch(&ds, &t[..3], 2, &mut rng::stream(0, 0), Some(0.0)).unwrap();
    assert_eq!(input.shape(), [3, 3, 8, 8]);
    assert_eq!(target.shape(), [3, 1, 8, 8]);
    // noise-free observation channel equals the target, then t-1, t-2
    assert_eq!(&input.data()[..64], &target.data()[..64]);
    assert_eq!(&input.data()[64..128], ds.sequences[0].frame(1));
    assert_eq!(&input.data()[128..192], ds.sequences[0].frame(0));
}

#[test]
fn training_reduces_loss_tenfold_and_is_deterministic() {
    let seqs = generate_dataset(3, 8, &small_cfg()).unwrap().sequences;
    let ds = SequenceDataset::with_split(seqs, 0.0);
    let cfg = TrainConfig {
        epochs: 200,
        batch_size: 8,
        lr: 3e-3,
        seed: 9,
        ..TrainConfig::default()
    };
    let run = || {
        let mut m = DenoiserModel::new(ModelArch::new(1, 4), &mut rng::stream(9, 0)).unwrap();
        let report = train(&mut m, &ds, &cfg, |_, _| {}).unwrap();
        (m, report)
    };
    let (m, report) = run();
    let first = report.epochs.first().unwrap().train_loss;
    let best = report.epochs.iter().map(|e| e.train_loss).fold(f64::INFINITY, f64::min);
    assert!(best * 10.0 <= first, "first {first} best {best}");
    assert!(!m.is_training());
    let (m2, report2) = run();
    assert_eq!(report, report2);
    assert_eq!(m.params(), m2.params());
}

#[test]
fn estimate_is_locally_linear_in_all_inputs() {
    let m = DenoiserModel::new(ModelArch::new(2, 4), &mut rng::stream(12, 0)).unwrap();
    let mut r = rng::stream(12, 1);
    let y = Tensor::randn(&[8, 8], 0.4, &mut r).map(|v| v + 0.5);
    let c: Vec<Tensor> = (0..2).map(|_| Tensor::randn(&[8, 8], 0.4, &mut r).map(|v| v + 0.5)).collect();
    let out = m.forward(&y, &c).unwrap();
    for px in [(0, 0), (3, 5), (7, 7)] {
        let af = adaptive_filter(&m, &y, &c, px).unwrap();
        let expect = out.data()[px.0 * 8 + px.1] as f64;
        let got = af.reconstruct(&y, &c).unwrap();
        assert!((got - expect).abs() <= 1e-3 * expect.abs().max(1e-2), "{px:?}: {got} vs {expect}");
    }
}

#[test]
fn filter_rows_match_finite_differences() {
    let m = DenoiserModel::new(ModelArch::new(1, 4), &mut rng::stream(13, 0)).unwrap();
    let mut r = rng::stream(13, 1);
    let y = Tensor::randn(&[8, 8], 0.4, &mut r).map(|v| v + 0.5);
    let c = vec![Tensor::randn(&[8, 8], 0.4, &mut r).map(|v| v + 0.5)];
    let px = (4, 3);
    let af = adaptive_filter(&m, &y, &c, px).unwrap();
    let eps = 1e-3f32;
    let mut checked = 0;
    let mut k = 0usize;
    while checked < 20 {
        // walk a fixed stride so both frames are covered
        let idx = (k * 37) % 128;
        k += 1;
        let (frame, i) = (idx / 64, idx % 64);
        let eval = |d: f32| {
            let (mut yy, mut cc) = (y.clone(), c.clone());
            if frame == 0 {
                yy.data_mut()[i] += d;
            } else {
                cc[0].data_mut()[i] += d;
            }
            m.forward(&yy, &cc).unwrap().data()[px.0 * 8 + px.1] as f64
        };
        let fd = (eval(eps) - eval(-eps)) / (2.0 * eps as f64);
        let an = af.weights[frame].data()[i] as f64;
        let scale = an.abs().max(fd.abs());
        if scale < 1e-4 {
            checked += 1;
            continue;
        }
        assert!((an - fd).abs() <= 1e-2 * scale.max(1e-2), "frame {frame} pixel {i}: {an} vs {fd}");
        checked += 1;
    }
}
